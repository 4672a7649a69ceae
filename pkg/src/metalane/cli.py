"""Command-line entry point: train-meta, train-pretrained, adapt, eval, report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, TrafficTask, dump_toml, load_run_config, to_dict
from .evaluation import MetricRecord, evaluate
from .maml import EVAL_LOG_COLUMNS, MetaBatchEmpty, TrainingAborted, train_meta, train_pretrained
from .ppo import LaneChangeEnvFactory
from .seeding import make_rng
from .study import (
    StudyError, adaptation_study, emit_outputs, plot_training, read_adaptation_csv,
    summary_columns, summary_rows, write_csv,
)

log = logging.getLogger("metalane")

SUBCOMMANDS = ("train-meta", "train-pretrained", "adapt", "eval", "report")
MANIFEST_PREFIX = "run-manifest"


class CliError(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (TOML)")
    common.add_argument("--scenario", help="scenario config (TOML); overrides the run config's scenario_path")
    common.add_argument("--out", help="output directory (default: out_dir from the run config)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--steps", type=int,
                        help="meta iterations for training, gradient steps for adapt")
    common.add_argument("--eval-episodes", type=int, help="evaluation episodes per point")
    common.add_argument("--shield", choices=("on", "off"), help="safety shield during rollouts and evaluation")
    common.add_argument("--mode", choices=("fo", "so"), help="first- or second-order meta-gradient")
    common.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. meta.outer_lr=3e-4 or scenario.road.dt=0.1")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="metalane", description="Meta-learned highway lane-change policies.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    sub.add_parser("train-meta", parents=[common], help="meta-train the initialization")
    sub.add_parser("train-pretrained", parents=[common], help="train the multi-task baseline")
    p = sub.add_parser("adapt", parents=[common], help="adaptation study on the test task")
    p.add_argument("--meta-ckpt", help="default: <out>/checkpoints/meta.ckpt")
    p.add_argument("--pre-ckpt", help="default: <out>/checkpoints/pretrained.ckpt")
    p = sub.add_parser("eval", parents=[common], help="greedy evaluation of one checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task-f", type=float, help="release probability (default: test task)")
    p.add_argument("--trace", help="write a per-step episode trace CSV here")
    sub.add_parser("report", parents=[common], help="plots and summary from existing CSV outputs")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < run file < dedicated flags < --set overrides."""
    flags: list[str] = []
    if args.seed is not None:
        flags.append(f"seed={args.seed}")
    if args.out is not None:
        flags.append(f"out_dir={json.dumps(args.out)}")
    if args.shield is not None:
        on = "true" if args.shield == "on" else "false"
        flags += [f"shield={on}", f"eval.shield={on}"]
    if args.mode is not None:
        flags.append(f"meta.mode={json.dumps(args.mode)}")
    if args.steps is not None:
        key = "eval.adapt_steps" if args.command == "adapt" else "meta.iterations"
        flags.append(f"{key}={args.steps}")
    if args.eval_episodes is not None:
        key = "meta.eval_episodes" if args.command.startswith("train") else "eval.episodes"
        flags.append(f"{key}={args.eval_episodes}")
    return load_run_config(args.config, args.scenario, flags + list(args.overrides))


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def artifact_hashes(out: Path) -> dict[str, str]:
    return {
        p.relative_to(out).as_posix(): sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and not p.name.startswith(MANIFEST_PREFIX)
    }


def write_manifest(out: Path, command: str, argv: Sequence[str], cfg: RunConfig) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": cfg.seed,
        "config": to_dict(cfg),
        "artifacts": artifact_hashes(out),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = out / f"{MANIFEST_PREFIX}.{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_params(path: str | Path):
    return ckpt.load(path).params


def cmd_train(cfg: RunConfig, out: Path, agent: str, workers: int) -> None:
    fn = train_meta if agent == "meta" else train_pretrained
    res = fn(cfg, out, workers=workers)
    if res.eval_rows:
        plot_training(res.eval_rows, out / "plots" / agent)
    log.info("%s training done: %d env steps, checkpoint %s", agent, res.env_steps, res.checkpoint)


def cmd_adapt(cfg: RunConfig, out: Path, args: argparse.Namespace) -> None:
    meta_path = Path(args.meta_ckpt) if args.meta_ckpt else out / "checkpoints" / "meta.ckpt"
    pre_path = Path(args.pre_ckpt) if args.pre_ckpt else out / "checkpoints" / "pretrained.ckpt"
    meta_p, pre_p = _load_params(meta_path), _load_params(pre_path)
    records = adaptation_study(meta_p, pre_p, TrafficTask(cfg.tasks.test, cfg.seed), cfg.meta, cfg.ppo,
                               cfg.eval, LaneChangeEnvFactory(cfg.scenario), cfg.seed, workers=args.workers)
    emit_outputs(records, out / "adaptation")


def cmd_eval(cfg: RunConfig, out: Path, args: argparse.Namespace) -> None:
    params = _load_params(args.checkpoint)
    f = cfg.tasks.test if args.task_f is None else args.task_f
    task = TrafficTask(f, cfg.seed)
    rng = make_rng(cfg.seed, "cli-eval", f)
    fac = LaneChangeEnvFactory(cfg.scenario)
    if args.trace:
        Path(args.trace).parent.mkdir(parents=True, exist_ok=True)
        with open(args.trace, "w", newline="") as fh:
            rec = evaluate(params, task, cfg.eval.episodes, rng, cfg.eval.shield, fac, trace=fh)
    else:
        rec = evaluate(params, task, cfg.eval.episodes, rng, cfg.eval.shield, fac, workers=args.workers)
    write_csv(out / "eval.csv", ("task_f",) + MetricRecord.columns(), [{"task_f": f} | rec.as_row()])
    print(f"task f={f:g}: success {rec.success_rate:.3f}  collision {rec.collision_rate:.3f}  "
          f"episodes {rec.episodes}")


def _read_rows(path: Path) -> list[dict[str, Any]]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(cfg: RunConfig, out: Path) -> None:
    found = False
    eval_rows: list[dict[str, Any]] = []
    for agent in ("meta", "pretrained"):
        p = out / f"{agent}-eval.csv"
        if p.is_file():
            eval_rows += _read_rows(p)
    if eval_rows:
        found = True
        plot_training(eval_rows, out / "plots")
        write_csv(out / "training-curves.csv", EVAL_LOG_COLUMNS, eval_rows)
    adapt_csv = out / "adaptation" / "adaptation.csv"
    if adapt_csv.is_file():
        found = True
        records = read_adaptation_csv(adapt_csv)
        emit_outputs(records, out / "adaptation")
        for row in summary_rows(records):
            cells = "  ".join(f"{c}={row[c]:.3f}" for c in summary_columns()[2::2] if row[c] != "")
            print(f"{row['metric']:<15}{row['agent']:<11}{cells}")
    if not found:
        raise CliError(f"nothing to report in {out}: no *-eval.csv or adaptation/adaptation.csv")


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise CliError("--workers must be >= 1")
        cfg = resolve_config(args)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"config.{args.command}.toml").write_text(dump_toml(to_dict(cfg)))
        if args.command == "train-meta":
            cmd_train(cfg, out, "meta", args.workers)
        elif args.command == "train-pretrained":
            cmd_train(cfg, out, "pretrained", args.workers)
        elif args.command == "adapt":
            cmd_adapt(cfg, out, args)
        elif args.command == "eval":
            cmd_eval(cfg, out, args)
        else:
            cmd_report(cfg, out)
        write_manifest(out, args.command, argv, cfg)
    except TrainingAborted as exc:
        print(f"metalane: error: {exc} (last checkpoint: {exc.last_checkpoint})", file=sys.stderr)
        return 3
    except (ConfigError, ckpt.CheckpointError, StudyError, MetaBatchEmpty, CliError, OSError, ValueError) as exc:
        print(f"metalane: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
