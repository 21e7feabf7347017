"""Experiment runner: pretrain, adapt, eval, sweeps, oracle checks.

Every command takes an optional JSON config (strict schema, defaults for
everything) plus a few overriding flags, and writes CSV outputs, each with a
rendered PNG figure next to it, into its own output directory. Exit
codes: 0 success, 1 config error, 2 runtime/numerical error, 3 failed
acceptance/oracle check.

The adapt command is structurally source-free: it accepts no source-data
path and never touches the source side of the config.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys

from . import report
from .adaptation import (
    AdaptConfig,
    PretrainConfig,
    adapt,
    evaluate,
    mean_std,
    moving_average_monotone,
    pretrain,
    split_and_freeze,
)
from .config import RunConfig, load_config
from .data import (
    ShiftSpec,
    apply_shift,
    load_csv,
    make_blobs,
    split_train_test,
    subsample_preserving_prior,
)
from .errors import ConfigError, ParseError
from .nn import build_mlp, load_checkpoint, save_checkpoint
from .numerics import make_rng
from .oracle import run_oracle_checks

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3

METRICS_HEADER = "iteration,loss_im,loss_bnm,loss_total,target_test_acc,seconds"
PRETRAIN_HEADER = "iteration,loss_ce,source_test_acc,seconds"

# Sub-stream ids hung off data.seed / run seed, so independent draws never
# share a random stream.
_STREAM_MODEL_INIT = 0
_STREAM_SOURCE_BLOBS = 3
_STREAM_SOURCE_SPLIT = 4
_STREAM_TARGET_BLOBS = 5
_STREAM_TARGET_NOISE = 6
_STREAM_TARGET_SPLIT = 7
_STREAM_SUBSAMPLE = 8


def _write_text(path: str, text: str) -> None:
    """Atomic write: temp file then rename."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _num(x) -> str:
    return f"{x:.6g}"


def _metrics_csv(records) -> str:
    lines = [METRICS_HEADER]
    for r in records:
        lines.append(
            f"{r.iteration},{_num(r.loss_im)},{_num(r.loss_bnm)},"
            f"{_num(r.loss_total)},{_num(r.target_test_acc)},{_num(r.seconds)}"
        )
    return "\n".join(lines) + "\n"


def _pretrain_csv(records) -> str:
    lines = [PRETRAIN_HEADER]
    for r in records:
        lines.append(
            f"{r.iteration},{_num(r.loss_ce)},{_num(r.source_test_acc)},{_num(r.seconds)}"
        )
    return "\n".join(lines) + "\n"


def _require_out_dir(cfg: RunConfig) -> str:
    if not cfg.out_dir:
        raise ConfigError("out_dir is required (pass --out or set out_dir)")
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def _require_csv(path, field: str):
    if not path:
        raise ConfigError(f"data.{field} is required when data.kind is 'csv'")
    return path


def _build_source(cfg: RunConfig):
    d = cfg.data
    if d.kind == "csv":
        return (
            load_csv(_require_csv(d.source_train_csv, "source_train_csv"), "source"),
            load_csv(_require_csv(d.source_test_csv, "source_test_csv"), "source"),
        )
    full = make_blobs(
        make_rng([d.seed, _STREAM_SOURCE_BLOBS]),
        d.classes,
        d.dim,
        d.n_per_class,
        d.spread,
        d.ring_radius,
        "source",
    )
    return split_train_test(
        full, make_rng([d.seed, _STREAM_SOURCE_SPLIT]), d.train_fraction
    )


def _build_target(cfg: RunConfig):
    d = cfg.data
    if d.kind == "csv":
        return (
            load_csv(_require_csv(d.target_train_csv, "target_train_csv"), "target"),
            load_csv(_require_csv(d.target_test_csv, "target_test_csv"), "target"),
        )
    base = make_blobs(
        make_rng([d.seed, _STREAM_TARGET_BLOBS]),
        d.classes,
        d.dim,
        d.n_per_class,
        d.spread,
        d.ring_radius,
        "target",
    )
    spec = ShiftSpec(
        angle=float(d.shift.angle_deg) * 3.141592653589793 / 180.0,
        translation=tuple(d.shift.translation),
        scale=tuple(d.shift.scale),
        noise_std=d.shift.noise_std,
    )
    shifted = apply_shift(base, spec, make_rng([d.seed, _STREAM_TARGET_NOISE]))
    return split_train_test(
        shifted, make_rng([d.seed, _STREAM_TARGET_SPLIT]), d.train_fraction
    )


def _seed_name(base: str, seed: int, many: bool, ext: str) -> str:
    return f"{base}_seed{seed}.{ext}" if many else f"{base}.{ext}"


def _checkpoint_for_seed(path: str, seed: int) -> str:
    """Resolve a --checkpoint argument (file, or directory of per-seed files)."""
    if os.path.isdir(path):
        per_seed = os.path.join(path, f"checkpoint_seed{seed}.model")
        if os.path.exists(per_seed):
            return per_seed
        single = os.path.join(path, "checkpoint.model")
        if os.path.exists(single):
            return single
        raise ConfigError(
            f"no checkpoint for seed {seed} in {path} "
            f"(looked for checkpoint_seed{seed}.model and checkpoint.model)"
        )
    if os.path.exists(path):
        return path
    raise ConfigError(f"checkpoint {path} does not exist")


def cmd_pretrain(cfg: RunConfig) -> int:
    out_dir = _require_out_dir(cfg)
    source_train, source_test = _build_source(cfg)
    seeds = cfg.resolved_seeds()
    many = len(seeds) > 1
    accs = []
    summary = []
    for seed in seeds:
        model = build_mlp(
            source_train.dim,
            list(cfg.model.hidden),
            source_train.n_classes,
            make_rng([seed, _STREAM_MODEL_INIT]),
            cfg.model.bn_width,
        )
        pcfg = PretrainConfig(
            iterations=cfg.pretrain.iterations,
            batch_size=cfg.pretrain.batch_size,
            learning_rate=cfg.pretrain.learning_rate,
            label_smoothing=cfg.pretrain.label_smoothing,
            seed=seed,
            log_interval=cfg.pretrain.log_interval,
            record_seconds=not cfg.deterministic_timing,
        )
        records = pretrain(model, source_train, pcfg, eval_data=source_test)
        acc = evaluate(model, source_test)
        accs.append(acc)
        save_checkpoint(
            model, os.path.join(out_dir, _seed_name("checkpoint", seed, many, "model")), seed
        )
        _write_text(
            os.path.join(out_dir, _seed_name("metrics", seed, many, "csv")),
            _pretrain_csv(records),
        )
        report.render_pretrain_metrics(
            records, os.path.join(out_dir, _seed_name("metrics", seed, many, "png"))
        )
        line = f"seed {seed}: source test accuracy = {acc:.4f}"
        summary.append(line)
        print(line)
    mean, std = mean_std(accs)
    final = f"source test accuracy: {mean:.4f} +- {std:.4f} ({len(seeds)} seeds)"
    summary.append(final)
    print(final)
    _write_text(os.path.join(out_dir, "summary.txt"), "\n".join(summary) + "\n")
    return EXIT_OK


def _adapt_one_seed(cfg: RunConfig, seed: int, checkpoint_path: str, lam=None, fraction=None):
    """Load, split-and-freeze, adapt, evaluate. Returns (model, result)."""
    model, _ = load_checkpoint(checkpoint_path)
    stored = split_and_freeze(model)
    target_train, target_test = _build_target(cfg)
    fraction = cfg.adapt.target_fraction if fraction is None else fraction
    if fraction < 1.0:
        target_train = subsample_preserving_prior(
            target_train, fraction, make_rng([cfg.data.seed, _STREAM_SUBSAMPLE, seed])
        )
    acfg = AdaptConfig(
        lam=cfg.adapt.lam if lam is None else lam,
        batch_size=cfg.adapt.batch_size,
        iterations=cfg.adapt.iterations,
        learning_rate=cfg.adapt.learning_rate,
        seed=seed,
        bn_frozen_mode=cfg.adapt.bn_frozen_mode,
        log_interval=cfg.adapt.log_interval,
        record_seconds=not cfg.deterministic_timing,
    )
    result = adapt(model, target_train, acfg, eval_data=target_test, stored_stats=stored)
    return model, result


def cmd_adapt(cfg: RunConfig, checkpoint: str | None) -> int:
    out_dir = _require_out_dir(cfg)
    checkpoint = checkpoint or cfg.adapt.checkpoint
    if not checkpoint:
        raise ConfigError("checkpoint is required (pass --checkpoint or set adapt.checkpoint)")
    seeds = cfg.resolved_seeds()
    many = len(seeds) > 1
    accs = []
    summary = []
    for seed in seeds:
        model, result = _adapt_one_seed(cfg, seed, _checkpoint_for_seed(checkpoint, seed))
        accs.append(result.final_acc)
        save_checkpoint(
            model, os.path.join(out_dir, _seed_name("checkpoint", seed, many, "model")), seed
        )
        _write_text(
            os.path.join(out_dir, _seed_name("metrics", seed, many, "csv")),
            _metrics_csv(result.records),
        )
        report.render_adapt_metrics(
            result.records, os.path.join(out_dir, _seed_name("metrics", seed, many, "png"))
        )
        line = (
            f"seed {seed}: target test accuracy {result.initial_acc:.4f} -> "
            f"{result.final_acc:.4f} (bnm {result.initial_loss.components['bnm']:.4g}"
            f" -> {result.final_loss.components['bnm']:.4g})"
        )
        summary.append(line)
        print(line)
    mean, std = mean_std(accs)
    final = f"adapted target accuracy: {mean:.4f} +- {std:.4f} ({len(seeds)} seeds)"
    summary.append(final)
    print(final)
    _write_text(os.path.join(out_dir, "summary.txt"), "\n".join(summary) + "\n")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str | None, on: str) -> int:
    if not checkpoint:
        raise ConfigError("checkpoint is required (pass --checkpoint)")
    model, _ = load_checkpoint(_checkpoint_for_seed(checkpoint, cfg.resolved_seeds()[0]))
    if on.startswith("source"):
        train, test = _build_source(cfg)
    else:
        train, test = _build_target(cfg)
    dataset = train if on.endswith("train") else test
    acc = evaluate(model, dataset)
    print(f"accuracy on {on}: {acc:.4f}")
    return EXIT_OK


def _sweep_cell(args):
    """One (grid value, seed) sweep cell; returns a result dict.

    Module-level so process pools can pickle it. Writes its result
    atomically into the cells directory for interruption tolerance.
    """
    cfg, kind, value, seed, checkpoint, cells_dir = args
    cell = {"kind": kind, "value": value, "seed": seed}
    try:
        lam = value if kind == "lambda" else None
        fraction = value if kind == "fraction" else None
        _, result = _adapt_one_seed(
            cfg, seed, _checkpoint_for_seed(checkpoint, seed), lam=lam, fraction=fraction
        )
        cell["acc"] = result.final_acc
        cell["monotone"] = moving_average_monotone(
            [r.target_test_acc for r in result.records]
        )
    except Exception as exc:  # a failed cell is recorded, not fatal
        cell["acc"] = float("nan")
        cell["monotone"] = False
        cell["error"] = f"{type(exc).__name__}: {exc}"
    _write_text(
        os.path.join(cells_dir, f"{kind}_{value:g}_seed{seed}.json"),
        json.dumps(cell, sort_keys=True) + "\n",
    )
    return cell


def _run_sweep(cfg: RunConfig, checkpoint: str | None, kind: str, grid) -> int:
    out_dir = _require_out_dir(cfg)
    checkpoint = checkpoint or cfg.adapt.checkpoint
    if not checkpoint:
        raise ConfigError("checkpoint is required (pass --checkpoint or set adapt.checkpoint)")
    cells_dir = os.path.join(out_dir, "cells")
    os.makedirs(cells_dir, exist_ok=True)
    seeds = cfg.resolved_seeds()
    tasks = [
        (cfg, kind, float(value), seed, checkpoint, cells_dir)
        for value in grid
        for seed in seeds
    ]
    if cfg.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_sweep_cell, tasks))
    else:
        results = [_sweep_cell(t) for t in tasks]

    with_monotone = kind == "fraction"
    header = f"{kind},seed,acc" + (",monotone" if with_monotone else "")
    lines = [header]
    for cell in results:
        row = f"{cell['value']:g},{cell['seed']},{_num(cell['acc'])}"
        if with_monotone:
            row += f",{int(cell['monotone'])}"
        lines.append(row)
    _write_text(os.path.join(out_dir, "sweep.csv"), "\n".join(lines) + "\n")

    summary_rows = []
    summary_lines = []
    for value in grid:
        cell_accs = [
            c["acc"] for c in results
            if c["value"] == float(value) and c["acc"] == c["acc"]  # drop NaN
        ]
        if cell_accs:
            mean, std = mean_std(cell_accs)
        else:
            mean, std = float("nan"), float("nan")
        summary_rows.append((float(value), mean, std))
        summary_lines.append(f"{kind}={value:g}: {mean:.4f} +- {std:.4f}")
    _write_text(
        os.path.join(out_dir, "sweep_summary.csv"),
        f"{kind},mean,std\n"
        + "\n".join(f"{v:g},{_num(m)},{_num(s)}" for v, m, s in summary_rows)
        + "\n",
    )
    report.render_sweep(
        summary_rows,
        xlabel=kind,
        path=os.path.join(out_dir, "sweep.png"),
        logx=kind == "lambda",
    )
    failed = [c for c in results if "error" in c]
    for cell in failed:
        summary_lines.append(
            f"FAILED {kind}={cell['value']:g} seed={cell['seed']}: {cell['error']}"
        )
    _write_text(os.path.join(out_dir, "summary.txt"), "\n".join(summary_lines) + "\n")
    print("\n".join(summary_lines))
    return EXIT_OK


def cmd_sweep_lambda(cfg: RunConfig, checkpoint: str | None) -> int:
    return _run_sweep(cfg, checkpoint, "lambda", cfg.sweep.lambda_grid)


def cmd_sweep_size(cfg: RunConfig, checkpoint: str | None) -> int:
    return _run_sweep(cfg, checkpoint, "fraction", cfg.sweep.fraction_grid)


def cmd_oracle_check(quick: bool) -> int:
    results = run_oracle_checks(quick=quick)
    width = max(len(r.name) for r in results)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  {r.detail}")
        ok = ok and r.passed
    if not ok:
        failing = ", ".join(r.name for r in results if not r.passed)
        print(f"oracle check failed: {failing}", file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(results)} oracle checks passed")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="bnadapt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--jobs", type=int, help="parallel sweep cells")
        if checkpoint:
            p.add_argument(
                "--checkpoint", help="checkpoint file or directory of per-seed files"
            )

    common(sub.add_parser("pretrain", help="pretrain on the source domain"))
    p_adapt = sub.add_parser("adapt", help="source-free adaptation of a checkpoint")
    common(p_adapt, checkpoint=True)
    p_adapt.add_argument(
        "--lambda", dest="lam", type=float, help="override the matching-loss weight"
    )
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval, checkpoint=True)
    p_eval.add_argument(
        "--on",
        default="target-test",
        choices=["source-train", "source-test", "target-train", "target-test"],
    )
    common(sub.add_parser("sweep-lambda", help="accuracy vs matching weight"), checkpoint=True)
    common(sub.add_parser("sweep-size", help="accuracy vs target dataset size"), checkpoint=True)
    p_oracle = sub.add_parser("oracle-check", help="run the numerical oracle suites")
    p_oracle.add_argument("--quick", action="store_true", help="halve sample counts")
    return parser


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed must be >= 0, got {args.seed}")
        cfg.seed = args.seed
        cfg.seeds = [args.seed]
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "jobs", None) is not None:
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        cfg.jobs = args.jobs
    if getattr(args, "lam", None) is not None:
        if args.lam < 0:
            raise ConfigError(f"--lambda must be >= 0, got {args.lam}")
        cfg.adapt.lam = args.lam
    return cfg


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "oracle-check":
            return cmd_oracle_check(args.quick)
        cfg = _load_cfg(args)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "adapt":
            return cmd_adapt(cfg, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.on)
        if args.command == "sweep-lambda":
            return cmd_sweep_lambda(cfg, args.checkpoint)
        if args.command == "sweep-size":
            return cmd_sweep_size(cfg, args.checkpoint)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
