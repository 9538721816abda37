"""Synthetic Lennard-Jones relaxation trajectories.

Clusters of two species are placed at random, relaxed by capped gradient
descent, and every ``stride``-th frame is stored with its exact energy and
forces.  Splits are drawn over trajectories, never frames.
"""
from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import tomli
import tomli_w

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


class ParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {msg}")


class GenerationError(RuntimeError):
    pass


class RelaxationFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class LJParams:
    """Pair table for species 1 and 2 (Kob-Andersen style mixture)."""
    epsilon: tuple = ((1.0, 1.5), (1.5, 0.5))
    sigma: tuple = ((1.0, 0.8), (0.8, 0.88))

    def tables(self) -> tuple[np.ndarray, np.ndarray]:
        # padded so species ids index directly; row/col 0 unused
        eps = np.zeros((3, 3))
        sig = np.ones((3, 3))
        eps[1:, 1:] = self.epsilon
        sig[1:, 1:] = self.sigma
        return eps, sig


@dataclass
class Structure:
    species: np.ndarray           # (N,) ints in {1, 2}
    positions: np.ndarray         # (N, 3)
    energy: float
    forces: np.ndarray            # (N, 3)
    free: np.ndarray              # (N,) bool
    trajectory: int = 0
    frame: int = 0

    @property
    def num_atoms(self) -> int:
        return len(self.species)


# --------------------------------------------------------------------------
# potential

def lj_energy_forces(species, positions, params: LJParams = LJParams()) -> tuple[float, np.ndarray]:
    """Total pair energy sum_{i<j} 4 eps [(s/r)^12 - (s/r)^6] and its exact negative gradient."""
    z = np.asarray(species, dtype=np.int64)
    p = np.asarray(positions, dtype=float)
    n = len(z)
    if n < 2:
        return 0.0, np.zeros_like(p)
    eps_t, sig_t = params.tables()
    d = p[None, :, :] - p[:, None, :]              # [i, j] = p_j - p_i
    r2 = (d * d).sum(-1)
    iu = np.triu_indices(n, 1)
    if r2[iu].min() < 1e-12:
        raise ValueError("lj_energy_forces: two atoms closer than 1e-6 (singular)")
    np.fill_diagonal(r2, 1.0)
    eps = eps_t[z[:, None], z[None, :]]
    sig = sig_t[z[:, None], z[None, :]]
    sr6 = (sig * sig / r2) ** 3
    energy = float((4.0 * eps * (sr6 * sr6 - sr6))[iu].sum())
    # dE/dr * 1/r, for the pair term
    coef = 24.0 * eps * (2.0 * sr6 * sr6 - sr6) / r2
    np.fill_diagonal(coef, 0.0)
    forces = -(coef[:, :, None] * d).sum(axis=1)
    return energy, forces


# --------------------------------------------------------------------------
# generation

@dataclass(frozen=True)
class GeneratorConfig:
    n_train: int = 300
    n_val: int = 50
    n_test: int = 50
    n_min: int = 6
    n_max: int = 10
    density: float = 1.0          # atoms per unit volume of the initial box
    min_dist: float = 0.8         # in units of sigma_ab
    step: float = 0.002
    d_cap: float = 0.05
    max_steps: int = 4000
    stride: int = 30
    f_max_stop: float = 0.02
    placement_retries: int = 1000
    relax_retries: int = 20
    seed: int = 0

    @property
    def n_trajectories(self) -> int:
        return self.n_train + self.n_val + self.n_test


def relax(species, positions, params: LJParams = LJParams(), step: float = 0.002, max_steps: int = 4000,
          f_max_stop: float = 0.02, d_cap: float = 0.05, stride: int = 30, trajectory: int = 0) -> list[Structure]:
    """Capped steepest descent p <- p + step*f, recording every ``stride``-th step and the last one.

    Raises :class:`RelaxationFailed` if the energy rises for 50 consecutive
    steps or the force threshold is not reached within ``max_steps``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    z = np.asarray(species, dtype=np.int64)
    p = np.array(positions, dtype=float)
    free = np.ones(len(z), dtype=bool)
    e, f = lj_energy_forces(z, p, params)
    frames = [Structure(z.copy(), p.copy(), e, f, free.copy(), trajectory, 0)]
    rising = 0
    it = 0
    while np.linalg.norm(f, axis=1).max() > f_max_stop:
        if it == max_steps:
            raise RelaxationFailed(f"not converged after {max_steps} steps")
        dp = step * f
        mag = np.linalg.norm(dp, axis=1)
        dp *= np.minimum(1.0, d_cap / np.maximum(mag, 1e-300))[:, None]
        p = p + dp
        e_new, f = lj_energy_forces(z, p, params)
        rising = rising + 1 if e_new > e else 0
        if rising >= 50:
            raise RelaxationFailed("energy increased for 50 consecutive steps")
        e = e_new
        it += 1
        if it % stride == 0:
            frames.append(Structure(z.copy(), p.copy(), e, f, free.copy(), trajectory, it))
    if frames[-1].frame != it:
        frames.append(Structure(z.copy(), p.copy(), e, f, free.copy(), trajectory, it))
    return frames


def _place(rng: np.random.Generator, n: int, cfg: GeneratorConfig, params: LJParams):
    _, sig_t = params.tables()
    box = (n / cfg.density) ** (1.0 / 3.0)
    z = rng.integers(1, 3, size=n)
    limit = cfg.min_dist * sig_t[z[:, None], z[None, :]]
    np.fill_diagonal(limit, 0.0)
    for _ in range(cfg.placement_retries):
        p = rng.uniform(0.0, box, size=(n, 3))
        d = np.sqrt(((p[None] - p[:, None]) ** 2).sum(-1))
        if (d >= limit).all():
            return z, p
    return None


def trajectory_seed(master: int, index: int, attempt: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master, index, attempt])


def generate_trajectory(index: int, cfg: GeneratorConfig, params: LJParams = LJParams()) -> list[Structure]:
    for attempt in range(cfg.relax_retries):
        rng = np.random.default_rng(trajectory_seed(cfg.seed, index, attempt))
        n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
        placed = _place(rng, n, cfg, params)
        if placed is None:
            raise GenerationError(
                f"trajectory {index} (seed {cfg.seed}, attempt {attempt}): "
                f"no valid placement after {cfg.placement_retries} tries")
        try:
            return relax(*placed, params, cfg.step, cfg.max_steps, cfg.f_max_stop, cfg.d_cap, cfg.stride, index)
        except RelaxationFailed:
            continue
    raise GenerationError(f"trajectory {index} (seed {cfg.seed}): relaxation failed {cfg.relax_retries} times")


def _gen_one(args):
    return generate_trajectory(*args)


def num_threads() -> int:
    raw = os.environ.get("DENS_THREADS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def split_assignment(cfg: GeneratorConfig) -> dict[str, list[int]]:
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5117])).permutation(cfg.n_trajectories)
    a, b = cfg.n_train, cfg.n_train + cfg.n_val
    return {"train": sorted(order[:a].tolist()), "val": sorted(order[a:b].tolist()),
            "test": sorted(order[b:].tolist())}


def generate_dataset(out_dir, cfg: GeneratorConfig = GeneratorConfig(), params: LJParams = LJParams(),
                     threads: int | None = None) -> dict:
    """Generate all trajectories, write one frames file per split plus ``manifest.toml``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    threads = threads or num_threads()
    jobs = [(i, cfg, params) for i in range(cfg.n_trajectories)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            trajs = list(pool.map(_gen_one, jobs, chunksize=8))
    else:
        trajs = [_gen_one(j) for j in jobs]
    splits = split_assignment(cfg)
    files = {}
    for name in SPLITS:
        frames = [s for t in splits[name] for s in trajs[t]]
        path = out / f"{name}.xyz"
        write_frames(path, frames)
        files[name] = {"path": path.name, "frames": len(frames), "sha256": sha256_file(path)}
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": cfg.seed,
        "generator": {k: v for k, v in asdict(cfg).items() if k != "seed"},
        "lj": {"epsilon": [list(r) for r in params.epsilon], "sigma": [list(r) for r in params.sigma]},
        "splits": splits,
        "files": files,
    }
    with open(out / "manifest.toml", "wb") as fh:
        tomli_w.dump(manifest, fh)
    return manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# frames file

_COLUMNS = "species:I:1:pos:R:3:forces:R:3:free:L:1"


def _fmt(x: float) -> str:
    return "%.17g" % x


def write_frames(path, frames: Sequence[Structure]) -> None:
    lines = []
    for s in frames:
        lines.append(str(s.num_atoms))
        lines.append(f"energy={_fmt(s.energy)} trajectory={s.trajectory} frame={s.frame} Properties={_COLUMNS}")
        for i in range(s.num_atoms):
            nums = " ".join(_fmt(v) for v in (*s.positions[i], *s.forces[i]))
            lines.append(f"{int(s.species[i])} {nums} {'T' if s.free[i] else 'F'}")
    Path(path).write_text("\n".join(lines) + "\n")


def _float(tok: str, path, lineno: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(path, lineno, f"bad number {tok!r}") from None
    if not math.isfinite(v):
        raise ParseError(path, lineno, f"non-finite value {tok!r}")
    return v


def read_frames(path) -> list[Structure]:
    lines = Path(path).read_text().splitlines()
    frames = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n = int(lines[i])
        except ValueError:
            raise ParseError(path, i + 1, f"expected atom count, got {lines[i]!r}") from None
        if n < 1:
            raise ParseError(path, i + 1, "atom count must be positive")
        if i + 1 >= len(lines):
            raise ParseError(path, i + 2, f"frame {len(frames)}: missing header line")
        props = {}
        for tok in lines[i + 1].split():
            key, sep, val = tok.partition("=")
            if not sep:
                raise ParseError(path, i + 2, f"malformed property {tok!r}")
            props[key] = val
        for key in ("energy", "trajectory", "frame"):
            if key not in props:
                raise ParseError(path, i + 2, f"header missing {key!r}")
        if props.get("Properties", _COLUMNS) != _COLUMNS:
            raise ParseError(path, i + 2, f"unsupported columns {props['Properties']!r}")
        energy = _float(props["energy"], path, i + 2)
        if i + 2 + n > len(lines):
            raise ParseError(path, len(lines) + 1,
                             f"frame {len(frames)}: expected {n} atom lines, file ends after {len(lines) - i - 2}")
        species = np.empty(n, dtype=np.int64)
        data = np.empty((n, 6))
        free = np.empty(n, dtype=bool)
        for a in range(n):
            lineno = i + 3 + a
            toks = lines[lineno - 1].split()
            if len(toks) != 8:
                raise ParseError(path, lineno, f"expected 8 columns, got {len(toks)}")
            try:
                species[a] = int(toks[0])
            except ValueError:
                raise ParseError(path, lineno, f"bad species {toks[0]!r}") from None
            data[a] = [_float(t, path, lineno) for t in toks[1:7]]
            if toks[7] not in ("T", "F"):
                raise ParseError(path, lineno, f"bad free flag {toks[7]!r}")
            free[a] = toks[7] == "T"
        frames.append(Structure(species, data[:, :3].copy(), energy, data[:, 3:].copy(), free,
                                int(props["trajectory"]), int(props["frame"])))
        i += 2 + n
    return frames


# --------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    root: Path
    manifest: dict
    splits: dict[str, list[Structure]] = field(default_factory=dict)

    @property
    def params(self) -> LJParams:
        lj = self.manifest["lj"]
        return LJParams(tuple(map(tuple, lj["epsilon"])), tuple(map(tuple, lj["sigma"])))

    def split(self, name: str) -> list[Structure]:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; valid: {', '.join(self.splits)}")
        return self.splits[name]


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        manifest = tomli.load(fh)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported manifest format_version {version!r}")
    seen: dict[int, str] = {}
    for name, trajs in manifest["splits"].items():
        for t in trajs:
            if t in seen:
                raise ValueError(f"{path}: trajectory {t} in both {seen[t]!r} and {name!r}")
            seen[t] = name
    return manifest


def load_dataset(root, validate: bool = False) -> Dataset:
    root = Path(root)
    manifest = read_manifest(root / "manifest.toml")
    ds = Dataset(root, manifest)
    for name, info in manifest["files"].items():
        frames = read_frames(root / info["path"])
        allowed = set(manifest["splits"][name])
        stray = {s.trajectory for s in frames} - allowed
        if stray:
            raise ValueError(f"{name}: frames from trajectories {sorted(stray)} not assigned to this split")
        ds.splits[name] = frames
    if validate:
        err = max_label_error(ds)
        if err > 1e-10:
            raise ValueError(f"stored labels deviate from the analytic potential by {err:.3g}")
    return ds


def max_label_error(ds: Dataset) -> float:
    """Largest |stored - recomputed| over every energy and force component."""
    params = ds.params
    worst = 0.0
    for frames in ds.splits.values():
        for s in frames:
            e, f = lj_energy_forces(s.species, s.positions, params)
            worst = max(worst, abs(e - s.energy) / max(1.0, abs(e)), float(np.abs(f - s.forces).max()))
    return worst


# --------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    species: np.ndarray
    positions: np.ndarray
    forces: np.ndarray
    energy: np.ndarray        # (S,)
    free: np.ndarray
    segment: np.ndarray       # atom -> position in batch
    ids: np.ndarray           # (S,) structure index within its split
    counts: np.ndarray        # atoms per structure

    @property
    def num_graphs(self) -> int:
        return len(self.ids)

    @property
    def num_atoms(self) -> int:
        return len(self.species)

    def atom_slices(self) -> list[slice]:
        ends = np.cumsum(self.counts)
        return [slice(int(e - c), int(e)) for e, c in zip(ends, self.counts)]


def collate(frames: Sequence[Structure], ids: Sequence[int]) -> Batch:
    counts = np.array([s.num_atoms for s in frames])
    return Batch(
        species=np.concatenate([s.species for s in frames]),
        positions=np.concatenate([s.positions for s in frames]),
        forces=np.concatenate([s.forces for s in frames]),
        energy=np.array([s.energy for s in frames]),
        free=np.concatenate([s.free for s in frames]),
        segment=np.repeat(np.arange(len(frames)), counts),
        ids=np.asarray(ids, dtype=np.int64),
        counts=counts,
    )


def make_batches(frames: Sequence[Structure], batch_size: int,
                 rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """Disjoint-graph batches; shuffled when ``rng`` is given, last partial batch kept."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    order = rng.permutation(len(frames)) if rng is not None else np.arange(len(frames))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield collate([frames[i] for i in idx], idx)
