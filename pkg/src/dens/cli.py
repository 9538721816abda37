"""Command-line entry point: ``dens gen|train|eval|check|ablate``.

Exit codes: 0 success, 1 validation failure (bad input, failed check or
ordering), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, TrainConfig, load_toml, resolve, save_toml

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_VALIDATION)


def _prepare_out(path: Path, overwrite: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise ValidationError(f"{path} exists and is not empty; pass --overwrite to replace it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# --------------------------------------------------------------------------
# gen

def cmd_gen(args) -> int:
    from .data import GeneratorConfig, generate_dataset, load_dataset
    from .checks import check_dataset
    values = {}
    if args.config:
        raw = load_toml(args.config)
        values = raw.get("generator", raw)
    if args.seed is not None:
        values["seed"] = args.seed
    known = {f.name for f in dataclasses.fields(GeneratorConfig)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown generator key {key!r}")
    cfg = GeneratorConfig(**values)
    out = _prepare_out(Path(args.out), args.overwrite)
    manifest = generate_dataset(out, cfg)
    ds = load_dataset(out)
    n_traj = {k: len(v) for k, v in manifest["splits"].items()}
    for name, info in manifest["files"].items():
        print(f"{name}: {n_traj[name]} trajectories, {info['frames']} frames")
    results = check_dataset(out, regenerate=False)
    for r in results:
        print(r.line())
    print(f"total frames: {sum(len(v) for v in ds.splits.values())}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


# --------------------------------------------------------------------------
# train

def _train_config(args) -> TrainConfig:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.data is not None:
        overrides["data_dir"] = args.data
    if args.mode is not None:
        overrides["mode"] = args.mode
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if args.dens == "off":
        overrides["dens"] = {"p_dens": 0.0}
    return resolve(args.config, args.preset, overrides)


def cmd_train(args) -> int:
    from .data import load_dataset
    from .train import fit
    cfg = _train_config(args)
    run_dir = Path(args.out)
    if args.resume:
        if not (run_dir / "last.npz").exists():
            raise ValidationError(f"nothing to resume in {run_dir}")
    else:
        _prepare_out(run_dir, args.overwrite)
    ds = load_dataset(cfg.data_dir)
    save_toml(cfg, run_dir / "resolved_config.toml")
    res = fit(cfg, ds, run_dir, resume=args.resume, stop_after=args.stop_after, log=print)
    print(f"best val force MAE {res.best_val_force_mae:.6g} at epoch {res.best_epoch}; run in {run_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    import numpy as np
    from .data import load_dataset
    from .model import EquiLite
    from .train import evaluate, load_checkpoint
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.config
    data_dir = args.data or ck.meta.get("data_dir") or cfg.data_dir
    ds = load_dataset(data_dir)
    if args.split not in ds.splits:
        raise ValidationError(f"unknown split {args.split!r}; valid splits: {', '.join(ds.splits)}")
    frames = ds.split(args.split)
    top = max(int(np.max(s.species)) for s in frames)
    if top >= cfg.model.num_species:
        raise ValidationError(f"dataset species id {top} does not fit the checkpoint's embedding table "
                              f"(num_species={cfg.model.num_species})")
    mode = args.mode or cfg.mode
    rep = evaluate(EquiLite(cfg.model), ck.eval_params(), frames, ck.stats, mode, args.split, cfg.eval_batch_size)
    print(f"{args.split} ({mode}): energy MAE {rep.energy_mae:.10g}  force MAE {rep.force_mae:.10g}  "
          f"[{rep.num_structures} structures, {rep.num_atoms} atoms]")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(
        f"eval_{Path(args.checkpoint).stem}_{args.split}_{mode}.json")
    out.write_text(json.dumps(rep.to_dict(), indent=1))
    print(f"report written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# check

def cmd_check(args) -> int:
    from .checks import run_suite
    try:
        results, secs = run_suite(args.suite, args.data)
    except KeyError as err:
        raise ValidationError(err.args[0]) from None
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {secs:.1f}s")
    return EXIT_OK if not failed else EXIT_VALIDATION


# --------------------------------------------------------------------------
# ablate

def cmd_ablate(args) -> int:
    from .ablate import (estimate_minutes, format_table, medians, orderings, run_ablation, write_summary,
                         write_table)
    cfg = _train_config(args)
    data_dir = cfg.data_dir
    if not (Path(data_dir) / "manifest.toml").exists():
        raise ValidationError(f"no dataset at {data_dir}; run `dens gen` first")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    free_mb = shutil.disk_usage(out).free / 2 ** 20
    if free_mb < args.min_free_mb:
        raise ValidationError(f"only {free_mb:.0f} MB free under {out}; need {args.min_free_mb} MB")
    if args.max_minutes is not None:
        est = estimate_minutes(cfg, data_dir, seeds=args.seeds) / max(args.jobs, 1)
        print(f"estimated runtime {est:.1f} min (budget {args.max_minutes} min)")
        if est > args.max_minutes:
            raise ValidationError(f"estimated runtime {est:.1f} min exceeds the budget of {args.max_minutes} min")
    save_toml(cfg, out / "resolved_config.toml")
    results = run_ablation(cfg, data_dir, out, seeds=args.seeds, jobs=args.jobs, split=args.split)
    write_table(results, out / "ablation.csv")
    print(format_table(results))
    for o in orderings(medians(results)):
        print(o.line())
    ok = write_summary(results, cfg, out / "summary.json", args.split, args.jobs)["passed"]
    if not ok:
        print("ABLATION ACCEPTANCE FAILED: at least one expected ordering does not hold (full table above)")
        return EXIT_VALIDATION
    print("ablation acceptance passed")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dens", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dens {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate the synthetic relaxation dataset")
    g.add_argument("--config", help="TOML with generator settings (top level or [generator])")
    g.add_argument("--out", default="data")
    g.add_argument("--seed", type=int)
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen)

    def train_opts(sp, out_default):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--out", default=out_default)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", choices=["oc20", "md17", "desk"])
        sp.add_argument("--dens", choices=["on", "off"], default="on")
        sp.add_argument("--mode", choices=["direct", "gradient"])
        sp.add_argument("--data", help="dataset directory (overrides data_dir)")
        sp.add_argument("--epochs", type=int)

    t = sub.add_parser("train", help="train one model")
    train_opts(t, "runs/train")
    t.add_argument("--overwrite", action="store_true")
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.npz")
    t.add_argument("--stop-after", type=int, help="stop after this many completed epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--split", default="test")
    e.add_argument("--mode", choices=["direct", "gradient"])
    e.add_argument("--data")
    e.add_argument("--out", help="report JSON path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run a property suite")
    c.add_argument("suite", help="so3 | equivariance | grad | loss | dataset | all")
    c.add_argument("--data", help="dataset directory for the dataset suite")
    c.set_defaults(func=cmd_check)

    a = sub.add_parser("ablate", help="run the design-choice ablation")
    train_opts(a, "runs/ablation")
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--split", default="test")
    a.add_argument("--max-minutes", type=float, help="refuse to start if the estimate exceeds this")
    a.add_argument("--min-free-mb", type=float, default=50.0)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001 - every other failure is a runtime error
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
