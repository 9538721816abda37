"""Corruption, losses and the mixed-batch training step.

Each structure in a batch independently either trains the plain
energy/force objective on its clean geometry, or is partially corrupted
with Gaussian noise: corrupted atoms get their (normalised) forces encoded
and a noise target, uncorrupted atoms keep the force target, and the
energy target stays that of the clean structure.  Both kinds of structure
contribute to one scalar loss and one backward pass.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .data import Batch, Structure
from .model import EquiLite, ModelOutput, build_graph
from .numcore import Tensor

LAMBDA_MODES = ("constant", "linear-to-zero")


@dataclass(frozen=True)
class DensHyper:
    p_dens: float = 0.5
    lambda_dens: float = 10.0
    sigma: float = 0.05
    r_dens: float = 0.5
    lambda_e: float = 2.0
    lambda_f: float = 100.0
    lambda_schedule: str = "constant"
    # ablation switches
    encode_forces: bool = True
    energy_term: bool = True
    partial: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p_dens <= 1.0:
            raise ValueError(f"p_dens must lie in [0, 1], got {self.p_dens}")
        if not 0.0 <= self.r_dens <= 1.0:
            raise ValueError(f"r_dens must lie in [0, 1], got {self.r_dens}")
        for name in ("sigma", "lambda_dens", "lambda_e", "lambda_f"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lambda_schedule not in LAMBDA_MODES:
            raise ValueError(f"lambda_schedule must be one of {LAMBDA_MODES}")

    @property
    def ratio(self) -> float:
        return self.r_dens if self.partial else 1.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NormStats:
    mu_e: float
    sigma_e: float
    sigma_f: float

    def norm_energy(self, e):
        return (np.asarray(e, dtype=float) - self.mu_e) / self.sigma_e

    def norm_forces(self, f):
        return np.asarray(f, dtype=float) / self.sigma_f


def compute_norm_stats(frames: list[Structure]) -> NormStats:
    """Mean/population std of structure energies and population std of all force components."""
    if not frames:
        raise ValueError("cannot compute normalisation statistics of an empty split")
    e = np.array([s.energy for s in frames])
    f = np.concatenate([s.forces.ravel() for s in frames])
    sigma_e, sigma_f = float(e.std()), float(f.std())
    if sigma_e == 0.0 or sigma_f == 0.0:
        raise ValueError(f"degenerate split: sigma_E={sigma_e}, sigma_F={sigma_f}")
    return NormStats(float(e.mean()), sigma_e, sigma_f)


def structure_rng(seed: int, epoch: int, structure_id: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, structure)."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, structure_id]))


def lambda_dens_schedule(step: int, total_steps: int, lam_start: float, mode: str) -> float:
    if mode not in LAMBDA_MODES:
        raise ValueError(f"unknown lambda schedule {mode!r}; choose from {LAMBDA_MODES}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if mode == "constant":
        return lam_start
    return lam_start * (1.0 - step / total_steps)


# --------------------------------------------------------------------------
# corruption

@dataclass
class CorruptionRecord:
    positions: np.ndarray   # corrupted positions
    mask: np.ndarray        # (N,) float 0/1
    noise: np.ndarray       # (N, 3), zero where mask is 0
    sigma: float


def corrupt(positions, sigma: float, r_dens: float, rng: np.random.Generator, free=None) -> CorruptionRecord:
    """Mask each atom with probability ``r_dens`` (free atoms only) and displace it by N(0, sigma^2 I).

    The rng always draws N uniforms then N*3 normals, independent of the
    outcome, so downstream draws stay aligned.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    p = np.asarray(positions, dtype=float)
    n = len(p)
    q = rng.random(n)
    z = rng.standard_normal((n, 3))
    mask = q < r_dens
    if free is not None:
        mask &= np.asarray(free, dtype=bool)
    noise = np.where(mask[:, None], z * sigma, 0.0)
    return CorruptionRecord(p + noise, mask.astype(float), noise, float(sigma))


# --------------------------------------------------------------------------
# losses

@dataclass
class LossTerms:
    total: Tensor
    energy: float       # mean over structures of |E' - E_hat|
    force: float        # mean over structures of the per-atom force term
    dens: float         # mean over structures of the denoising term


def _per_atom_inv_count(segment: np.ndarray, num_graphs: int) -> np.ndarray:
    counts = np.bincount(segment, minlength=num_graphs)
    return 1.0 / counts[segment]


def batch_loss(out: ModelOutput, segment, energy_norm, forces_norm, mask, dens_struct,
               noise_target, lam_e_struct, lam_f: float, lam_dens: float) -> LossTerms:
    """Loss averaged over structures.

    Per structure j with atoms A_j:
      lam_e_j |E'_j - E_j| + lam_f/|A_j| sum_i (1-m_i)|f'_i - f_i|^2
                          + lam_dens/|A_j| sum_i m_i |eps_i/sigma - eps_hat_i|^2
    ``mask`` is the per-atom corruption mask m (zero for
    structures on the plain objective); ``dens_struct`` flags structures
    whose noise head output is trained.
    """
    segment = np.asarray(segment, dtype=np.int64)
    S = len(energy_norm)
    inv_n = _per_atom_inv_count(segment, S)
    m = np.asarray(mask, dtype=float)
    lam_e_struct = np.asarray(lam_e_struct, dtype=float)

    de = nc.abs(out.energy - np.asarray(energy_norm, dtype=float))
    rf = out.forces - np.asarray(forces_norm, dtype=float)
    sq_f = nc.sum(rf * rf, axis=1)
    force_w = (1.0 - m) * inv_n
    total = nc.sum(de * lam_e_struct) + nc.sum(sq_f * (lam_f * force_w))
    dens_val = 0.0
    if np.any(dens_struct) and np.any(m):
        if out.noise is None:
            raise ValueError("denoising structures in batch but the model produced no noise prediction")
        rn = out.noise - noise_target
        sq_n = nc.sum(rn * rn, axis=1)
        dens_w = m * inv_n
        total = total + nc.sum(sq_n * (lam_dens * dens_w))
        dens_val = float((sq_n.value * dens_w).sum()) / S
    total = nc.scale(total, 1.0 / S)
    return LossTerms(total, float(de.value.mean()), float((sq_f.value * force_w).sum()) / S, dens_val)


def loss_original(out: ModelOutput, energy, forces, stats: NormStats, lambda_e: float, lambda_f: float,
                  segment=None) -> LossTerms:
    """lam_E |E' - E_hat| + lam_F mean_i |f'_i - f_hat_i|^2 from raw-unit labels, averaged over structures."""
    if energy is None or forces is None:
        raise ValueError("loss_original needs energy and force labels")
    forces = np.asarray(forces, dtype=float)
    if forces.shape != out.forces.shape:
        raise nc.ShapeError(f"force labels {forces.shape} vs predictions {out.forces.shape}")
    segment = np.zeros(len(forces), dtype=np.int64) if segment is None else segment
    e_norm = np.atleast_1d(stats.norm_energy(energy))
    S = len(e_norm)
    return batch_loss(out, segment, e_norm, stats.norm_forces(forces), np.zeros(len(forces)),
                      np.zeros(S, dtype=bool), None, np.full(S, lambda_e), lambda_f, 0.0)


def loss_dens(out: ModelOutput, record: CorruptionRecord, energy, forces, stats: NormStats,
              lambda_e: float, lambda_dens: float, lambda_f: float, segment=None) -> LossTerms:
    """Denoising objective of one (or a batch of) partially corrupted structure(s)."""
    if record.sigma == 0 and record.mask.any():
        raise ValueError("sigma = 0 with corrupted atoms: eps/sigma undefined")
    forces = np.asarray(forces, dtype=float)
    if out.noise is None or out.noise.shape != forces.shape or record.mask.shape != (len(forces),):
        raise nc.ShapeError("loss_dens: record, labels and predictions are not aligned")
    segment = np.zeros(len(forces), dtype=np.int64) if segment is None else segment
    e_norm = np.atleast_1d(stats.norm_energy(energy))
    S = len(e_norm)
    target = record.noise / record.sigma if record.sigma > 0 else record.noise
    return batch_loss(out, segment, e_norm, stats.norm_forces(forces), record.mask,
                      np.ones(S, dtype=bool), target, np.full(S, lambda_e), lambda_f, lambda_dens)


# --------------------------------------------------------------------------
# training step

@dataclass
class StepResult:
    loss: float
    energy: float
    force: float
    dens: float
    num_dens: int
    grads: dict[str, np.ndarray]


@dataclass
class BatchPlan:
    """Per-batch inputs after the per-structure task draw."""
    positions: np.ndarray
    mask: np.ndarray
    noise_target: np.ndarray
    dens_struct: np.ndarray
    force_inputs: np.ndarray | None


def plan_batch(batch: Batch, hyper: DensHyper, stats: NormStats, seed: int, epoch: int) -> BatchPlan:
    """Draw the task for each structure and corrupt the ones assigned to denoising."""
    pos = batch.positions.copy()
    mask = np.zeros(batch.num_atoms)
    noise = np.zeros_like(pos)
    dens_struct = np.zeros(batch.num_graphs, dtype=bool)
    for j, (sid, sl) in enumerate(zip(batch.ids, batch.atom_slices())):
        rng = structure_rng(seed, epoch, int(sid))
        take = rng.random() < hyper.p_dens
        rec = corrupt(batch.positions[sl], hyper.sigma, hyper.ratio, rng, batch.free[sl])
        if not take:
            continue
        if hyper.sigma == 0 and rec.mask.any():
            raise ValueError("sigma = 0 with corrupted atoms: eps/sigma undefined")
        dens_struct[j] = True
        pos[sl] = rec.positions
        mask[sl] = rec.mask
        if hyper.sigma > 0:
            noise[sl] = rec.noise / hyper.sigma
    force_inputs = None
    if hyper.encode_forces and dens_struct.any():
        # plain-objective structures have mask 0, i.e. zeroed force inputs
        force_inputs = stats.norm_forces(batch.forces) * mask[:, None]
    return BatchPlan(pos, mask, noise, dens_struct, force_inputs)


def _named_grads(params: dict[str, Tensor], raw: dict) -> dict[str, np.ndarray]:
    by_id = {id(t): name for name, t in params.items()}
    grads = {name: np.zeros_like(t.value) for name, t in params.items()}
    for t, g in raw.items():
        name = by_id.get(id(t))
        if name is not None:
            grads[name] = g
    return grads


def training_step(model: EquiLite, params: dict[str, Tensor], batch: Batch, hyper: DensHyper,
                  stats: NormStats, seed: int, epoch: int, lambda_dens: float | None = None,
                  mode: str = "direct", hvp_step: float = 1e-4) -> StepResult:
    """Forward the mixed batch, build the scalar loss and backpropagate it.

    ``mode="direct"`` trains the force head.  ``mode="gradient"`` trains
    forces defined as -dE/dp; the parameter gradient of that force term is a
    mixed second derivative, obtained as a central difference of dE/dtheta
    along the force-residual direction (two extra passes, O(h^2) error).
    """
    if batch.num_graphs == 0:
        raise ValueError("empty batch")
    if mode not in ("direct", "gradient"):
        raise ValueError(f"unknown force mode {mode!r}")
    lam_dens = hyper.lambda_dens if lambda_dens is None else lambda_dens
    plan = plan_batch(batch, hyper, stats, seed, epoch)
    lam_e = np.where(plan.dens_struct & (not hyper.energy_term), 0.0, hyper.lambda_e)
    e_norm = stats.norm_energy(batch.energy)
    f_norm = stats.norm_forces(batch.forces)
    with_noise = bool(plan.dens_struct.any())
    if mode == "direct":
        with nc.Tape():
            out = model.forward(params, batch.species, plan.positions, batch.segment, batch.num_graphs,
                                force_inputs=plan.force_inputs, with_noise=with_noise)
            terms = batch_loss(out, batch.segment, e_norm, f_norm, plan.mask, plan.dens_struct,
                               plan.noise_target, lam_e, hyper.lambda_f, lam_dens)
        grads = _named_grads(params, nc.backward(terms.total))
        return StepResult(float(terms.total.value), terms.energy, terms.force, terms.dens,
                          int(plan.dens_struct.sum()), grads)

    cfg = model.cfg
    graph = build_graph(plan.positions, cfg.cutoff, cfg.max_neighbors, batch.segment, warn=False)
    pos = Tensor(plan.positions, requires_grad=True)
    with nc.Tape() as tape:
        out = model.forward(params, batch.species, pos, batch.segment, batch.num_graphs,
                            force_inputs=plan.force_inputs, with_noise=with_noise, graph=graph)
        terms = batch_loss(out, batch.segment, e_norm, f_norm, plan.mask, plan.dens_struct,
                           plan.noise_target, lam_e, 0.0, lam_dens)
        e_sum = nc.sum(out.energy)
    dpos = nc.backward(e_sum, retain=True, tape=tape).get(pos, np.zeros_like(plan.positions))
    grads = _named_grads(params, nc.backward(terms.total, tape=tape))
    # normalised forces: f' = f / sigma_F = -(sigma_E / sigma_F) dE'/dp
    c = stats.sigma_e / stats.sigma_f
    res = -c * dpos - f_norm
    S = batch.num_graphs
    w = (1.0 - plan.mask) * _per_atom_inv_count(batch.segment, S)
    sq = (res * res).sum(axis=1)
    force_term = float((sq * w).sum()) / S
    v = (2.0 * hyper.lambda_f / S) * w[:, None] * res       # dL/df'_hat
    scale = float(np.abs(v).max())
    if scale > 0:
        # dL/dtheta = -c * d/dtheta <grad_p E, v>
        u = v / scale

        def energy_grad(p_shift):
            frozen_pos = Tensor(plan.positions + p_shift, requires_grad=True)
            with nc.Tape():
                o = model.forward(params, batch.species, frozen_pos, batch.segment, batch.num_graphs,
                                  force_inputs=plan.force_inputs, with_noise=False, graph=graph)
                total = nc.sum(o.energy)
            return _named_grads(params, nc.backward(total))

        plus = energy_grad(hvp_step * u)
        minus = energy_grad(-hvp_step * u)
        for name in grads:
            grads[name] = grads[name] - (c * scale / (2.0 * hvp_step)) * (plus[name] - minus[name])
    loss = float(terms.total.value) + hyper.lambda_f * force_term
    return StepResult(loss, terms.energy, force_term, terms.dens, int(plan.dens_struct.sum()), grads)
