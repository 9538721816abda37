"""Design-choice ablation: five training configurations over several seeds."""
from __future__ import annotations

import csv
import json
import math
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import load_dataset
from .model import EquiLite
from .train import evaluate, fit, load_checkpoint

CONFIGS = ("baseline", "full", "no_encoding", "no_energy", "no_partial")

# OC20-scale reference values per configuration: force MAE (meV/A), energy MAE (meV)
REFERENCE = {
    "baseline": (20.46, 285),
    "full": (19.09, 269),
    "no_encoding": (21.32, 278),
    "no_energy": (18.87, 285),
    "no_partial": (19.54, 279),
}


def variant(cfg: TrainConfig, name: str) -> TrainConfig:
    if name == "baseline":
        return cfg.with_dens(p_dens=0.0)
    if name == "full":
        return cfg
    if name == "no_encoding":
        return cfg.with_dens(encode_forces=False)
    if name == "no_energy":
        return cfg.with_dens(energy_term=False)
    if name == "no_partial":
        return cfg.with_dens(partial=False)
    raise KeyError(f"unknown ablation configuration {name!r}")


@dataclass
class RunResult:
    config: str
    seed: int
    energy_mae: float
    force_mae: float
    best_epoch: int
    wall_sec: float = 0.0


@dataclass
class Ordering:
    label: str
    lhs: str
    rhs: str
    metric: str
    holds: bool
    lhs_value: float
    rhs_value: float

    def line(self) -> str:
        flag = "PASS" if self.holds else "FAIL"
        return (f"[{flag}] {self.label}: {self.metric} MAE {self.lhs} {self.lhs_value:.5g} < "
                f"{self.rhs} {self.rhs_value:.5g}")


def _run_one(args) -> RunResult:
    cfg, name, seed, data_dir, out_dir, split = args
    run_cfg = replace(variant(cfg, name), seed=seed, data_dir=str(data_dir))
    run_dir = Path(out_dir) / name / f"seed{seed}"
    result_path = run_dir / "result.json"
    if result_path.exists():
        r = json.loads(result_path.read_text())
        if r.get("config_dict") == run_cfg.to_dict() and r.get("split") == split:
            return _from_json(r)
    t0 = time.perf_counter()
    ds = load_dataset(data_dir)
    if run_dir.exists():
        shutil.rmtree(run_dir)
    fit(run_cfg, ds, run_dir)
    ck = load_checkpoint(run_dir / "best.npz")
    rep = evaluate(EquiLite(run_cfg.model), ck.eval_params(), ds.split(split), ck.stats, run_cfg.mode, split,
                   run_cfg.eval_batch_size)
    res = RunResult(name, seed, rep.energy_mae, rep.force_mae, ck.meta["epoch"], time.perf_counter() - t0)
    result_path.write_text(json.dumps(dict(asdict(res), split=split, config_dict=run_cfg.to_dict()), indent=1))
    return res


def _from_json(r: dict) -> RunResult:
    return RunResult(r["config"], r["seed"], r["energy_mae"], r["force_mae"], r["best_epoch"], r["wall_sec"])


def read_results(out_dir) -> list[RunResult]:
    """Every finished run under ``out_dir``, ordered by (config, seed)."""
    found = []
    for path in Path(out_dir).glob("*/seed*/result.json"):
        found.append(_from_json(json.loads(path.read_text())))
    rank = {name: i for i, name in enumerate(CONFIGS)}
    return sorted(found, key=lambda r: (rank.get(r.config, len(rank)), r.seed))


def estimate_minutes(cfg: TrainConfig, data_dir, configs=CONFIGS, seeds: int = 5, probe_steps: int = 5) -> float:
    """Rough wall-clock estimate from timing a few training steps of each configuration."""
    from .denoise import compute_norm_stats, training_step
    from .data import make_batches
    from .model import as_tensors
    ds = load_dataset(data_dir)
    train = ds.split("train")
    stats = compute_norm_stats(train)
    model = EquiLite(cfg.model)
    params = as_tensors(model.init_params(np.random.default_rng(0)), True)
    steps = math.ceil(len(train) / cfg.batch_size) * cfg.epochs
    total = 0.0
    for name in configs:
        c = variant(cfg, name)
        batches = make_batches(train, cfg.batch_size, np.random.default_rng(0))
        t0 = time.perf_counter()
        for _ in range(probe_steps):
            training_step(model, params, next(batches), c.dens, stats, 0, 0, None, c.mode)
        total += (time.perf_counter() - t0) / probe_steps * steps * seeds
    return total * 1.1 / 60.0


def run_ablation(cfg: TrainConfig, data_dir, out_dir, seeds: int = 5, jobs: int = 1, split: str = "test",
                 configs=CONFIGS, log=print) -> list[RunResult]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, name, seed, str(data_dir), str(out_dir), split) for name in configs for seed in range(seeds)]
    results: dict[tuple[str, int], RunResult] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for res in pool.map(_run_one, tasks):
                results[(res.config, res.seed)] = res
                log(f"{res.config} seed {res.seed}: E-MAE {res.energy_mae:.5g} F-MAE {res.force_mae:.5g}")
    else:
        for t in tasks:
            res = _run_one(t)
            results[(res.config, res.seed)] = res
            log(f"{res.config} seed {res.seed}: E-MAE {res.energy_mae:.5g} F-MAE {res.force_mae:.5g}")
    return [results[(name, seed)] for name in configs for seed in range(seeds)]


def medians(results: list[RunResult]) -> dict[str, tuple[float, float]]:
    out = {}
    for name in dict.fromkeys(r.config for r in results):
        rs = [r for r in results if r.config == name]
        out[name] = (float(np.median([r.energy_mae for r in rs])), float(np.median([r.force_mae for r in rs])))
    return out


def orderings(med: dict[str, tuple[float, float]]) -> list[Ordering]:
    """The asserted orderings: DeNS beats the baseline on forces and energy, and needs force encoding."""
    e = {k: v[0] for k, v in med.items()}
    f = {k: v[1] for k, v in med.items()}
    return [
        Ordering("(a) full DeNS beats baseline", "full", "baseline", "force", f["full"] < f["baseline"],
                 f["full"], f["baseline"]),
        Ordering("(b) force encoding helps", "full", "no_encoding", "force", f["no_encoding"] > f["full"],
                 f["full"], f["no_encoding"]),
        Ordering("(c) full DeNS beats baseline", "full", "baseline", "energy", e["full"] < e["baseline"],
                 e["full"], e["baseline"]),
    ]


def write_table(results: list[RunResult], path) -> None:
    med = medians(results)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "seed", "energy_mae", "force_mae", "best_epoch", "ref_force_mae", "ref_energy_mae"])
        for r in results:
            ref = REFERENCE[r.config]
            w.writerow([r.config, r.seed, repr(r.energy_mae), repr(r.force_mae), r.best_epoch, ref[0], ref[1]])
        for name, (e, f) in med.items():
            ref = REFERENCE[name]
            w.writerow([name, "median", repr(e), repr(f), "", ref[0], ref[1]])


def format_table(results: list[RunResult]) -> str:
    med = medians(results)
    seeds = sorted({r.seed for r in results})
    lines = [f"{'config':<12} " + " ".join(f"{'F s' + str(s):>9}" for s in seeds)
             + f" {'median E':>10} {'median F':>10}   reference F/E"]
    for name, (e, f) in med.items():
        per = {r.seed: r.force_mae for r in results if r.config == name}
        ref = REFERENCE[name]
        lines.append(f"{name:<12} " + " ".join(f"{per[s]:9.4f}" for s in seeds)
                     + f" {e:10.4f} {f:10.4f}   {ref[0]}/{ref[1]}")
    return "\n".join(lines)


def write_summary(results: list[RunResult], cfg: TrainConfig, path, split: str, jobs: int) -> dict:
    med = medians(results)
    checks = orderings(med)
    summary = {
        "passed": all(o.holds for o in checks),
        "split": split,
        "seeds": sorted({r.seed for r in results}),
        "jobs": jobs,
        # summed per-run time: the wall clock of a sequential run
        "wall_sec": float(sum(r.wall_sec for r in results)),
        "orderings": [asdict(o) for o in checks],
        "medians": {k: {"energy_mae": e, "force_mae": f} for k, (e, f) in med.items()},
        "config": cfg.to_dict(),
    }
    Path(path).write_text(json.dumps(summary, indent=1))
    return summary
