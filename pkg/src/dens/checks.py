"""Property suites behind ``dens check``.

Every check returns the largest observed error next to its tolerance, with
fixed seeds so a run is reproducible.
"""
from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from . import so3
from .data import (GeneratorConfig, LJParams, Structure, collate, generate_dataset, lj_energy_forces,
                   load_dataset, sha256_file)
from .denoise import (CorruptionRecord, DensHyper, NormStats, corrupt, loss_dens, loss_original, plan_batch,
                      structure_rng, training_step)
from .encode import force_embedding
from .model import EquiLite, ModelConfig, ModelOutput, as_tensors
from .numcore import Tensor


@dataclass
class CheckResult:
    suite: str
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tol)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.suite}/{self.name}: max error {self.error:.3e} (tol {self.tol:.0e})"


def _max_abs(a, b) -> float:
    return float(np.abs(np.asarray(a) - np.asarray(b)).max())


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def random_structures(rng: np.random.Generator, sizes=(5, 7), spread: float = 0.9) -> list[Structure]:
    """Small random clusters with LJ labels (used as model inputs in the suites)."""
    out = []
    for i, n in enumerate(sizes):
        while True:
            pos = rng.normal(size=(n, 3)) * spread
            d = np.linalg.norm(pos[:, None] - pos[None], axis=-1) + np.eye(n) * 9
            if d.min() > 0.7:
                break
        z = rng.integers(1, 3, size=n)
        e, f = lj_energy_forces(z, pos)
        out.append(Structure(z, pos, e, f, np.ones(n, dtype=bool), i, 0))
    return out


# --------------------------------------------------------------------------
# representation

def suite_so3(lmax: int = 4, trials: int = 10, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    hom = orth = sh_norm = sh_eq = cg_eq = 0.0
    for _ in range(trials):
        R1, R2 = so3.random_rotation(rng), so3.random_rotation(rng)
        u = rng.normal(size=(16, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        for L in range(lmax + 1):
            D1, D2 = so3.wigner_d(L, R1), so3.wigner_d(L, R2)
            hom = max(hom, _max_abs(so3.wigner_d(L, R1 @ R2), D1 @ D2))
            orth = max(orth, _max_abs(D1.T @ D1, np.eye(2 * L + 1)))
            Y = so3.real_sph_harm(L, u)
            sh_norm = max(sh_norm, float(np.abs(np.linalg.norm(Y, axis=1) - 1.0).max()))
            sh_eq = max(sh_eq, _max_abs(so3.real_sph_harm(L, u @ R1.T), Y @ D1.T))
    R = so3.random_rotation(rng)
    for l1 in range(3):
        for l2 in range(3):
            for l3 in range(abs(l1 - l2), min(l1 + l2, 4) + 1):
                K = so3.cg_coefficients(l1, l2, l3)
                D1, D2, D3 = (so3.wigner_d(L, R) for L in (l1, l2, l3))
                lhs = np.einsum("abk,ai,bj->ijk", K, D1, D2)
                rhs = np.einsum("ijc,kc->ijk", K, D3)
                cg_eq = max(cg_eq, _max_abs(lhs, rhs))
    s = "so3"
    return [CheckResult(s, "wigner_homomorphism", hom, 1e-10), CheckResult(s, "wigner_orthogonality", orth, 1e-10),
            CheckResult(s, "sph_harm_unit_norm", sh_norm, 1e-12),
            CheckResult(s, "sph_harm_equivariance", sh_eq, 1e-10), CheckResult(s, "cg_equivariance", cg_eq, 1e-10)]


# --------------------------------------------------------------------------
# equivariance of the full model

def suite_equivariance(transforms: int = 20, seed: int = 0, cfg: ModelConfig | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cfg = cfg or ModelConfig()
    model = EquiLite(cfg)
    params = as_tensors(model.init_params(rng))
    frames = random_structures(rng, sizes=(6, 8))
    b = collate(frames, [0, 1])
    f_in = rng.normal(size=b.forces.shape)
    f_in[0] = 0.0
    base = model.forward(params, b.species, b.positions, b.segment, b.num_graphs, force_inputs=f_in)
    _, gforce = model.predict_forces_gradient(params, b.species, b.positions, b.segment, b.num_graphs)
    emb = force_embedding(f_in, params["force_enc"])
    err = dict.fromkeys(["energy", "direct_forces", "gradient_forces", "noise", "force_embedding"], 0.0)
    for _ in range(transforms):
        R = so3.random_rotation(rng)
        t = rng.normal(size=3) * 3.0
        pos = b.positions @ R.T + t
        out = model.forward(params, b.species, pos, b.segment, b.num_graphs, force_inputs=f_in @ R.T)
        err["energy"] = max(err["energy"], _rel(out.energy.value, base.energy.value))
        err["direct_forces"] = max(err["direct_forces"], _max_abs(out.forces.value, base.forces.value @ R.T))
        err["noise"] = max(err["noise"], _max_abs(out.noise.value, base.noise.value @ R.T))
        _, g2 = model.predict_forces_gradient(params, b.species, pos, b.segment, b.num_graphs)
        err["gradient_forces"] = max(err["gradient_forces"], _max_abs(g2, gforce @ R.T))
        rot = so3.rotate_feature(emb, R).data.value
        err["force_embedding"] = max(err["force_embedding"],
                                     _max_abs(force_embedding(f_in @ R.T, params["force_enc"]).data.value, rot))
    return [CheckResult("equivariance", k, v, 1e-9 if k == "energy" else 1e-8) for k, v in err.items()]


# --------------------------------------------------------------------------
# differentiation

TINY = ModelConfig(lmax=1, channels=4, num_blocks=2, num_radial=8, radial_hidden=8)


def mixed_batch_setup(seed: int = 0, cfg: ModelConfig = TINY):
    """Tiny model, 2 structures, and a training seed whose task draw mixes both objectives."""
    rng = np.random.default_rng(seed)
    model = EquiLite(cfg)
    params = model.init_params(rng)
    frames = random_structures(rng)
    batch = collate(frames, [0, 1])
    e = np.array([s.energy for s in frames])
    stats = NormStats(float(e.mean()) + 0.3, float(e.std()) + 1.0, float(np.concatenate([s.forces for s in frames]).std()))
    hyper = DensHyper(p_dens=0.5, lambda_dens=10.0, sigma=0.05, r_dens=0.5, lambda_e=2.0, lambda_f=100.0)
    for train_seed in range(1000):
        plan = plan_batch(batch, hyper, stats, train_seed, 0)
        if plan.dens_struct.sum() != 1:
            continue
        dens_atoms = plan.mask[batch.segment == np.flatnonzero(plan.dens_struct)[0]]
        if 0 < dens_atoms.sum() < len(dens_atoms):
            return model, params, batch, hyper, stats, train_seed
    raise RuntimeError("no mixed task draw found")


def finite_difference_grads(fn, params: dict[str, np.ndarray], h: float = 1e-4) -> dict[str, np.ndarray]:
    """Five-point central differences (error O(h^4)), perturbing ``params`` in place and restoring."""
    out = {}
    for k, v in params.items():
        g = np.zeros_like(v)
        flat = v.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            vals = []
            for step in (2 * h, h, -h, -2 * h):
                flat[i] = old + step
                vals.append(fn(params))
            flat[i] = old
            gf[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
        out[k] = g
    return out


def grad_rel_error(ad: dict, fd: dict, loss: float) -> float:
    """Max over tensors of |ad - fd| / max(|fd|, |ad|, 1e-6 (1 + |loss|)).

    The floor keeps exactly-zero true gradients (where the difference quotient
    is pure roundoff, which scales with the loss value) from dividing by zero.
    """
    floor = 1e-6 * (1.0 + abs(loss))
    worst = 0.0
    for k in fd:
        scale = max(np.abs(fd[k]).max(), np.abs(ad[k]).max(), floor)
        worst = max(worst, float(np.abs(ad[k] - fd[k]).max() / scale))
    return worst


def suite_grad(seed: int = 0) -> list[CheckResult]:
    model, params, batch, hyper, stats, train_seed = mixed_batch_setup(seed)

    def loss_of(p):
        return training_step(model, as_tensors(p, True), batch, hyper, stats, train_seed, 0).loss

    res = training_step(model, as_tensors(params, True), batch, hyper, stats, train_seed, 0)
    fd = finite_difference_grads(loss_of, {k: v.copy() for k, v in params.items()}, h=1e-3)
    param_err = grad_rel_error(res.grads, fd, res.loss)

    # gradient-method forces against -dE/dp by central differences
    tens = as_tensors(params)
    _, forces = model.predict_forces_gradient(tens, batch.species, batch.positions, batch.segment, batch.num_graphs)
    h = 1e-6
    fd_f = np.zeros_like(forces)
    for i in range(batch.num_atoms):
        for c in range(3):
            pos = batch.positions.copy()
            pos[i, c] += h
            up = model.forward(tens, batch.species, pos, batch.segment, batch.num_graphs, with_noise=False)
            pos[i, c] -= 2 * h
            down = model.forward(tens, batch.species, pos, batch.segment, batch.num_graphs, with_noise=False)
            fd_f[i, c] = -(up.energy.value.sum() - down.energy.value.sum()) / (2 * h)
    force_err = _rel(forces, fd_f)
    net = max(float(np.abs(forces[batch.segment == j].sum(0)).max()) for j in range(batch.num_graphs))
    return [CheckResult("grad", "mixed_batch_param_grads", param_err, 1e-5),
            CheckResult("grad", "gradient_forces_vs_fd", force_err, 1e-5),
            CheckResult("grad", "gradient_forces_sum_zero", net, 1e-8)]


# --------------------------------------------------------------------------
# loss semantics

def suite_loss(seed: int = 0) -> list[CheckResult]:
    model, params, batch, hyper, stats, train_seed = mixed_batch_setup(seed)
    rng = np.random.default_rng(seed + 1)
    tens = as_tensors(params)
    n = batch.num_atoms
    S = batch.num_graphs
    results = []

    # mask complementarity: probes on the "other" atoms leave each term unchanged
    rec = corrupt(batch.positions, 0.05, 0.5, np.random.default_rng(3))
    e_hat = Tensor(rng.normal(size=S))
    f_hat = rng.normal(size=(n, 3))
    eps_hat = rng.normal(size=(n, 3))
    m = rec.mask.astype(bool)

    def terms(f, eps):
        return loss_dens(ModelOutput(e_hat, Tensor(f), Tensor(eps)), rec, batch.energy, batch.forces, stats,
                         2.0, 10.0, 100.0, batch.segment)
    base = terms(f_hat, eps_hat)
    f_probe = f_hat.copy()
    f_probe[m] += 7.0
    eps_probe = eps_hat.copy()
    eps_probe[~m] += 7.0
    a, b = terms(f_probe, eps_hat), terms(f_hat, eps_probe)
    comp = max(abs(a.force - base.force), abs(b.dens - base.dens), abs(a.total.value - base.total.value),
               abs(b.total.value - base.total.value))
    results.append(CheckResult("loss", "mask_complementarity", comp, 0.0))

    # r = 1: no force term; total = lam_E L_E + lam_DeNS L_DeNS
    rec1 = corrupt(batch.positions, 0.05, 1.0, np.random.default_rng(4))
    t1 = loss_dens(ModelOutput(e_hat, Tensor(f_hat), Tensor(eps_hat)), rec1, batch.energy, batch.forces, stats,
                   2.0, 10.0, 100.0, batch.segment)
    red = max(abs(t1.force), abs(float(t1.total.value) - (2.0 * t1.energy + 10.0 * t1.dens)))
    results.append(CheckResult("loss", "full_corruption_reduction", red, 1e-12))

    # zero encoded forces contribute exactly nothing
    out_zero = model.forward(tens, batch.species, rec.positions, batch.segment, S, force_inputs=np.zeros((n, 3)))
    out_none = model.forward(tens, batch.species, rec.positions, batch.segment, S, force_inputs=None)
    eq = max(_max_abs(out_zero.noise.value, out_none.noise.value),
             _max_abs(out_zero.energy.value, out_none.energy.value))
    l_zero = loss_dens(out_zero, rec, batch.energy, batch.forces, stats, 2.0, 10.0, 100.0, batch.segment)
    l_none = loss_dens(out_none, rec, batch.energy, batch.forces, stats, 2.0, 10.0, 100.0, batch.segment)
    eq = max(eq, abs(float(l_zero.total.value) - float(l_none.total.value)))
    results.append(CheckResult("loss", "zero_force_encoding_reduction", eq, 0.0))

    # p_DeNS = 0: the plain objective on clean geometry
    h0 = replace(hyper, p_dens=0.0)
    step0 = training_step(model, as_tensors(params, True), batch, h0, stats, train_seed, 0)
    pt = as_tensors(params, True)
    with nc.Tape():
        out = model.forward(pt, batch.species, batch.positions, batch.segment, S, with_noise=False)
        ref = loss_original(out, batch.energy, batch.forces, stats, h0.lambda_e, h0.lambda_f, batch.segment)
    g_ref = nc.backward(ref.total)
    deg0 = abs(step0.loss - float(ref.total.value))
    deg0 = max(deg0, max(_max_abs(step0.grads[k], g_ref.get(pt[k], np.zeros_like(v))) for k, v in params.items()))
    results.append(CheckResult("loss", "p0_is_plain_objective", deg0, 0.0))

    # p_DeNS = 1: every structure on the denoising objective with the same draws
    h1 = replace(hyper, p_dens=1.0)
    step1 = training_step(model, as_tensors(params, True), batch, h1, stats, train_seed, 0)
    pos = batch.positions.copy()
    mask = np.zeros(n)
    noise = np.zeros((n, 3))
    for sid, sl in zip(batch.ids, batch.atom_slices()):
        r = structure_rng(train_seed, 0, int(sid))
        r.random()
        c = corrupt(batch.positions[sl], h1.sigma, h1.r_dens, r, batch.free[sl])
        pos[sl], mask[sl], noise[sl] = c.positions, c.mask, c.noise
    full = CorruptionRecord(pos, mask, noise, h1.sigma)
    pt = as_tensors(params, True)
    with nc.Tape():
        out = model.forward(pt, batch.species, pos, batch.segment, S,
                            force_inputs=stats.norm_forces(batch.forces) * mask[:, None])
        ref = loss_dens(out, full, batch.energy, batch.forces, stats, h1.lambda_e, h1.lambda_dens, h1.lambda_f,
                        batch.segment)
    g_ref = nc.backward(ref.total)
    deg1 = abs(step1.loss - float(ref.total.value))
    deg1 = max(deg1, max(_max_abs(step1.grads[k], g_ref.get(pt[k], np.zeros_like(v))) for k, v in params.items()))
    results.append(CheckResult("loss", "p1_is_denoising_objective", deg1, 1e-12))
    return results


# --------------------------------------------------------------------------
# dataset

def local_energy_fd_forces(species, positions, params: LJParams, h: float = 1e-4) -> np.ndarray:
    """-dE/dp by five-point differences of each atom's pair energy (pairs not touching it cancel)."""
    z = np.asarray(species)
    p = np.asarray(positions, dtype=float)
    n = len(z)
    eps_t, sig_t = params.tables()
    out = np.zeros((n, 3))
    eye = np.eye(3)
    shifts = np.concatenate([2 * h * eye, h * eye, -h * eye, -2 * h * eye])    # (12, 3)
    for i in range(n):
        others = np.delete(np.arange(n), i)
        e = eps_t[z[i], z[others]]
        s = sig_t[z[i], z[others]]
        d = (p[i] + shifts)[:, None, :] - p[others][None]              # (12, n-1, 3)
        sr6 = (s * s / (d * d).sum(-1)) ** 3
        e_i = (4.0 * e * (sr6 * sr6 - sr6)).sum(-1).reshape(4, 3)
        out[i] = -(-e_i[0] + 8 * e_i[1] - 8 * e_i[2] + e_i[3]) / (12 * h)
    return out


def check_dataset(root, regenerate: bool = True) -> list[CheckResult]:
    ds = load_dataset(root)
    params = ds.params
    label = fd = 0.0
    rising = 0.0
    for frames in ds.splits.values():
        last = {}
        for s in frames:
            e, f = lj_energy_forces(s.species, s.positions, params)
            label = max(label, _max_abs(f, s.forces), abs(e - s.energy))
            fdf = local_energy_fd_forces(s.species, s.positions, params)
            fd = max(fd, float((np.abs(fdf - s.forces) / np.maximum(1.0, np.abs(s.forces))).max()))
            prev = last.get(s.trajectory)
            if prev is not None:
                rising = max(rising, s.energy - prev)
            last[s.trajectory] = s.energy
    out = [CheckResult("dataset", "labels_vs_analytic", label, 1e-10),
           CheckResult("dataset", "forces_vs_fd_energy", fd, 1e-8),
           CheckResult("dataset", "energy_non_increasing", max(rising, 0.0), 0.0)]
    if regenerate:
        m = ds.manifest
        cfg = GeneratorConfig(seed=m["seed"], **m["generator"])
        with tempfile.TemporaryDirectory() as tmp:
            generate_dataset(tmp, cfg, params)
            names = [info["path"] for info in m["files"].values()] + ["manifest.toml"]
            diff = sum(sha256_file(Path(tmp) / n) != sha256_file(Path(root) / n) for n in names)
        out.append(CheckResult("dataset", "regeneration_byte_identical", float(diff), 0.0))
    return out


def suite_dataset(root=None) -> list[CheckResult]:
    """Check ``root`` if given, otherwise a small freshly generated dataset."""
    if root is not None:
        return check_dataset(root)
    with tempfile.TemporaryDirectory() as tmp:
        generate_dataset(tmp, GeneratorConfig(n_train=6, n_val=2, n_test=2), threads=1)
        return check_dataset(tmp)


SUITES = {
    "so3": suite_so3,
    "equivariance": suite_equivariance,
    "grad": suite_grad,
    "loss": suite_loss,
    "dataset": suite_dataset,
}


def run_suite(name: str, data_dir=None) -> tuple[list[CheckResult], float]:
    if name != "all" and name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(['all', *SUITES])}")
    names = list(SUITES) if name == "all" else [name]
    t0 = time.perf_counter()
    results = []
    for n in names:
        results += SUITES[n](data_dir) if n == "dataset" else SUITES[n]()
    return results, time.perf_counter() - t0
