"""Optimiser, schedules, evaluation, checkpoints and the training loop."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import TrainConfig, from_dict, save_toml
from .data import Dataset, Structure, make_batches
from .denoise import NormStats, compute_norm_stats, lambda_dens_schedule, training_step
from .model import EquiLite, as_tensors
from .numcore import Tensor

CHECKPOINT_VERSION = 1
METRICS_HEADER = ["epoch", "lr", "lambda_dens", "train_loss", "train_LE", "train_LF", "train_LDeNS",
                  "val_energy_mae", "val_force_mae", "wall_sec"]


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, what: str):
        self.step = step
        super().__init__(f"non-finite {what} at step {step}")


class CheckpointError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# optimiser pieces

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_init(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(0, {k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
               wd: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8) -> tuple[dict, AdamState]:
    """Decoupled weight decay, then the bias-corrected Adam update. Returns new params and state."""
    b1, b2 = betas
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        p = p - lr * wd * p
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


def cosine_warmup_lr(step: int, total: int, warmup_steps: int, lr_max: float) -> float:
    if warmup_steps >= total:
        raise ValueError(f"warmup_steps ({warmup_steps}) must be < total ({total})")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    frac = (step - warmup_steps) / (total - warmup_steps)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * frac))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], threshold: float) -> tuple[dict, float]:
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm <= threshold:
        return grads, norm
    s = threshold / norm
    return {k: g * s for k, g in grads.items()}, norm


def ema_update(ema: dict[str, np.ndarray], params: dict[str, np.ndarray], decay: float) -> dict:
    return {k: decay * ema[k] + (1.0 - decay) * params[k] for k in ema}


# --------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    split: str
    mode: str
    energy_mae: float
    force_mae: float
    num_structures: int
    num_atoms: int
    wall_sec: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def predict(model: EquiLite, params: dict[str, np.ndarray], frames: list[Structure], stats: NormStats,
            mode: str = "direct", batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Raw-unit energies (S,) and forces (N, 3) on clean geometries, no force inputs."""
    if mode not in ("direct", "gradient"):
        raise ValueError(f"unknown force mode {mode!r}")
    tensors = as_tensors(params)
    energies, forces = [], []
    for batch in make_batches(frames, batch_size):
        if mode == "direct":
            out = model.forward(tensors, batch.species, batch.positions, batch.segment, batch.num_graphs,
                                force_inputs=None, with_noise=False)
            e_n, f_n = out.energy.value, out.forces.value * stats.sigma_f
        else:
            e_n, neg_grad = model.predict_forces_gradient(tensors, batch.species, batch.positions,
                                                          batch.segment, batch.num_graphs)
            f_n = neg_grad * stats.sigma_e
        energies.append(e_n * stats.sigma_e + stats.mu_e)
        forces.append(f_n)
    return np.concatenate(energies), np.concatenate(forces)


def evaluate(model: EquiLite, params: dict[str, np.ndarray], frames: list[Structure], stats: NormStats,
             mode: str = "direct", split: str = "val", batch_size: int = 32) -> EvalReport:
    if not frames:
        raise ValueError(f"split {split!r} is empty")
    t0 = time.perf_counter()
    e_hat, f_hat = predict(model, params, frames, stats, mode, batch_size)
    e = np.array([s.energy for s in frames])
    f = np.concatenate([s.forces for s in frames])
    return EvalReport(split, mode, float(np.abs(e_hat - e).mean()), float(np.abs(f_hat - f).mean()),
                      len(frames), len(f), time.perf_counter() - t0)


# --------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    meta: dict
    adam: AdamState | None = None
    ema: dict[str, np.ndarray] | None = None

    @property
    def config(self) -> TrainConfig:
        return from_dict(self.meta["config"])

    @property
    def stats(self) -> NormStats:
        return NormStats(**self.meta["norm_stats"])

    def eval_params(self) -> dict[str, np.ndarray]:
        return self.ema if self.ema is not None else self.params


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    if ckpt.adam is not None:
        arrays.update({f"adam_m/{k}": v for k, v in ckpt.adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in ckpt.adam.v.items()})
    if ckpt.ema is not None:
        arrays.update({f"ema/{k}": v for k, v in ckpt.ema.items()})
    meta = dict(ckpt.meta, version=CHECKPOINT_VERSION, package_version=__version__,
                adam_step=ckpt.adam.step if ckpt.adam is not None else None)
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except OSError as err:
        raise CheckpointError(f"cannot write checkpoint {path}: {err}") from err


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if "meta" not in data:
        raise CheckpointError(f"{path}: no metadata record")
    meta = json.loads(data.pop("meta").tobytes().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    groups: dict[str, dict] = {"param": {}, "adam_m": {}, "adam_v": {}, "ema": {}}
    for key, val in data.items():
        group, _, name = key.partition("/")
        groups[group][name] = val
    adam = None
    if groups["adam_m"]:
        adam = AdamState(int(meta["adam_step"]), groups["adam_m"], groups["adam_v"])
    return Checkpoint(groups["param"], meta, adam, groups["ema"] or None)


# --------------------------------------------------------------------------
# training loop

def _fmt(x: float) -> str:
    return repr(float(x))


def shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x5EED]))


@dataclass
class FitResult:
    run_dir: Path
    epochs_done: int
    best_val_force_mae: float
    best_epoch: int
    last_report: EvalReport | None


def fit(cfg: TrainConfig, dataset: Dataset, run_dir, resume: bool = False, stop_after: int | None = None,
        log=None) -> FitResult:
    """Train for ``cfg.epochs`` epochs, writing metrics.csv, best.npz and last.npz into ``run_dir``.

    ``resume`` continues from ``run_dir/last.npz``; ``stop_after`` ends the
    run early after that many completed epochs (the schedule still spans
    ``cfg.epochs``), which is how interrupted runs are reproduced.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    train = dataset.split("train")
    val = dataset.split("val")
    stats = compute_norm_stats(train)
    model = EquiLite(cfg.model)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = int(round(cfg.warmup_frac * total))
    betas = (cfg.beta1, cfg.beta2)
    metrics_path = run_dir / "metrics.csv"
    timing_path = run_dir / "timing.csv"

    if resume:
        ck = load_checkpoint(run_dir / "last.npz")
        if ck.meta["config"] != cfg.to_dict():
            raise CheckpointError("resume: checkpoint config differs from the requested config")
        params, adam, ema = ck.params, ck.adam, ck.ema
        start_epoch = ck.meta["epoch"]
        best, best_epoch = ck.meta["best_val_force_mae"], ck.meta["best_epoch"]
        rows = metrics_path.read_text().splitlines()[: start_epoch + 1]
        metrics_path.write_text("\n".join(rows) + "\n")
    else:
        params = model.init_params(np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1417])))
        adam = adamw_init(params)
        ema = {k: v.copy() for k, v in params.items()} if cfg.ema_decay > 0 else None
        start_epoch, best, best_epoch = 0, math.inf, -1
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)
        timing_path.write_text("epoch,train_sec,eval_sec\n")
        save_toml(cfg, run_dir / "config.toml")

    base_meta = {"config": cfg.to_dict(), "norm_stats": asdict(stats), "data_dir": str(dataset.root)}
    report = None
    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start_epoch, end_epoch):
        t0 = time.perf_counter()
        sums = np.zeros(4)
        n_batches = 0
        lr = lam = 0.0
        for batch in make_batches(train, cfg.batch_size, shuffle_rng(cfg.seed, epoch)):
            step = adam.step
            lr = cosine_warmup_lr(step, total, warmup, cfg.lr_max)
            lam = lambda_dens_schedule(step, total, cfg.dens.lambda_dens, cfg.dens.lambda_schedule)
            res = training_step(model, as_tensors(params, True), batch, cfg.dens, stats, cfg.seed, epoch,
                                lam, cfg.mode)
            if not math.isfinite(res.loss):
                raise TrainingDiverged(step, "loss")
            grads, gnorm = clip_grad_norm(res.grads, cfg.clip_norm)
            if not math.isfinite(gnorm):
                raise TrainingDiverged(step, "gradient norm")
            params, adam = adamw_step(params, grads, adam, lr, cfg.weight_decay, betas, cfg.adam_eps)
            if ema is not None:
                ema = ema_update(ema, params, cfg.ema_decay)
            sums += (res.loss, res.energy, res.force, res.dens)
            n_batches += 1
        t_train = time.perf_counter() - t0
        eval_params = ema if ema is not None else params
        report = evaluate(model, eval_params, val, stats, cfg.mode, "val", cfg.eval_batch_size)
        wall = time.perf_counter() - t0
        mean = sums / max(n_batches, 1)
        row = [str(epoch + 1), _fmt(lr), _fmt(lam), *(_fmt(x) for x in mean),
               _fmt(report.energy_mae), _fmt(report.force_mae), _fmt(wall if cfg.log_wall_time else 0.0)]
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(row)
        with open(timing_path, "a") as fh:
            fh.write(f"{epoch + 1},{t_train:.3f},{report.wall_sec:.3f}\n")
        if report.force_mae < best:
            best, best_epoch = report.force_mae, epoch + 1
            save_checkpoint(run_dir / "best.npz", Checkpoint(
                params, dict(base_meta, epoch=epoch + 1, val=report.to_dict(),
                             best_val_force_mae=best, best_epoch=best_epoch), adam, ema))
        save_checkpoint(run_dir / "last.npz", Checkpoint(
            params, dict(base_meta, epoch=epoch + 1, val=report.to_dict(),
                         best_val_force_mae=best, best_epoch=best_epoch), adam, ema))
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {mean[0]:.4g} val E-MAE {report.energy_mae:.4g} "
                f"F-MAE {report.force_mae:.4g} ({wall:.1f}s)")
    return FitResult(run_dir, end_epoch, best, best_epoch, report)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(io.StringIO(fh.read())))
