"""Meta-vs-pretrained adaptation study, CSV/SVG outputs and trend testing."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .config import EvalConfig, MetaHyper, PpoHyper, TrafficTask
from .evaluation import MetricRecord, evaluate
from .maml import adapt
from .nn import PolicyParams
from .ppo import EnvFactory
from .seeding import make_rng

AGENTS = ("meta", "pretrained")
SUMMARY_STEPS = (5, 20, 40)
SUMMARY_METRICS = ("success_rate", "collision_rate")
PLOT_METRICS = ("success_rate", "collision_rate", "total")
ADAPTATION_COLUMNS = ("step", "agent", "seed") + tuple(
    c for c in MetricRecord.columns() if c != "gradient_step"
)


class StudyError(ValueError):
    pass


@dataclass
class StudyRecord:
    agent: str
    seed: int
    metrics: MetricRecord

    @property
    def step(self) -> int:
        return self.metrics.gradient_step


def eval_steps(steps: int, eval_every: int, extra: Iterable[int] = SUMMARY_STEPS) -> list[int]:
    if steps < 0 or eval_every < 1:
        raise StudyError("steps must be >= 0 and eval_every >= 1")
    pts = set(range(0, steps + 1, eval_every)) | {steps} | {s for s in extra if s <= steps}
    return sorted(pts)


def adaptation_study(
    meta_params: PolicyParams,
    pre_params: PolicyParams,
    test_task: TrafficTask,
    meta: MetaHyper,
    ppo: PpoHyper,
    ev: EvalConfig,
    env_factory: EnvFactory,
    master_seed: int,
    workers: int = 1,
) -> list[StudyRecord]:
    """Adapt both agents on ``test_task`` and evaluate at the recorded steps.

    For a given seed both agents see the same adaptation traffic and the same
    evaluation episodes, so identical checkpoints give identical curves.
    """
    if meta_params.layout != pre_params.layout:
        raise StudyError(f"checkpoint layouts differ: {meta_params.layout} vs {pre_params.layout}")
    points = eval_steps(ev.adapt_steps, ev.eval_every)
    out: list[StudyRecord] = []
    for seed in range(ev.seeds):
        for agent, params in zip(AGENTS, (meta_params, pre_params)):
            seq = adapt(params, test_task, ev.adapt_steps, make_rng(master_seed, "adapt", seed),
                        meta, ppo, env_factory, ev.shield)
            for k in points:
                if k >= len(seq):
                    break
                rec = evaluate(seq[k], test_task, ev.episodes, make_rng(master_seed, "study-eval", seed, k),
                               ev.shield, env_factory, gradient_step=k, workers=workers)
                out.append(StudyRecord(agent, seed, rec))
    return out


# ------------------------------------------------------------------ aggregation
def curve(records: Sequence[StudyRecord], agent: str, metric: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Steps, mean and population std across seeds of one metric for one agent."""
    by_step: dict[int, list[float]] = {}
    for r in records:
        if r.agent == agent:
            by_step.setdefault(r.step, []).append(float(getattr(r.metrics, metric)))
    steps = np.array(sorted(by_step), dtype=int)
    vals = [np.array(by_step[s]) for s in steps]
    return steps, np.array([v.mean() for v in vals]), np.array([v.std() for v in vals])


def summary_rows(records: Sequence[StudyRecord], steps: Sequence[int] = SUMMARY_STEPS) -> list[dict[str, Any]]:
    rows = []
    for metric in SUMMARY_METRICS:
        for agent in AGENTS:
            s, mean, std = curve(records, agent, metric)
            if len(s) == 0:
                continue
            row: dict[str, Any] = {"metric": metric, "agent": agent}
            for k in steps:
                hit = np.nonzero(s == k)[0]
                row[f"step_{k}"] = float(mean[hit[0]]) if len(hit) else ""
                row[f"step_{k}_std"] = float(std[hit[0]]) if len(hit) else ""
            rows.append(row)
    return rows


def summary_columns(steps: Sequence[int] = SUMMARY_STEPS) -> list[str]:
    cols = ["metric", "agent"]
    for k in steps:
        cols += [f"step_{k}", f"step_{k}_std"]
    return cols


# ------------------------------------------------------------------ files
def _fmt(v: Any) -> Any:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict[str, Any]]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


def adaptation_rows(records: Sequence[StudyRecord]) -> list[dict[str, Any]]:
    rows = []
    for r in records:
        row = r.metrics.as_row()
        row.pop("gradient_step")
        rows.append({"step": r.step, "agent": r.agent, "seed": r.seed} | row)
    return rows


def read_adaptation_csv(path: str | Path) -> list[StudyRecord]:
    types = {f.name: f.type for f in fields(MetricRecord)}
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for name in MetricRecord.columns():
                if name == "gradient_step":
                    kw[name] = int(row["step"])
                else:
                    kw[name] = int(row[name]) if types[name] in ("int", int) else float(row[name])
            out.append(StudyRecord(row["agent"], int(row["seed"]), MetricRecord(**kw)))
    return out


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "metalane"
    plt.rcParams["svg.fonttype"] = "path"
    return plt


def plot_series(path: Path, series: Sequence[tuple[str, np.ndarray, np.ndarray]], xlabel: str, ylabel: str,
                title: str) -> Path:
    """One line per series; each line carries ``gid="series-<label>"`` in the SVG."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, x, y in series:
        (line,) = ax.plot(x, y, marker="o", markersize=3, label=label)
        line.set_gid(f"series-{label}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if series:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_outputs(records: Sequence[StudyRecord], out_dir: str | Path) -> list[Path]:
    """adaptation.csv, summary.csv and one SVG per plotted metric."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StudyError(f"cannot create output directory {out}: {exc}") from exc
    paths = [out / "adaptation.csv", out / "summary.csv"]
    write_csv(paths[0], ADAPTATION_COLUMNS, adaptation_rows(records))
    write_csv(paths[1], summary_columns(), summary_rows(records))
    for metric in PLOT_METRICS:
        series = []
        for agent in AGENTS:
            s, mean, _ = curve(records, agent, metric)
            if len(s):
                series.append((f"{agent}-{metric}", s, mean))
        paths.append(plot_series(out / f"adaptation-{metric}.svg", series, "gradient steps", metric,
                                 f"{metric} during adaptation"))
    return paths


def plot_training(eval_rows: Sequence[dict[str, Any]], out_dir: str | Path) -> list[Path]:
    """Training curves (one-step-adapted metrics vs iteration), one line per (agent, task)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    keys = sorted({(r["agent"], float(r["task_f"])) for r in eval_rows})
    for metric in PLOT_METRICS:
        series = []
        for agent, f in keys:
            pts = sorted((int(r["iteration"]), float(r[metric])) for r in eval_rows
                         if r["agent"] == agent and float(r["task_f"]) == f)
            series.append((f"{agent}-f{f:g}-{metric}", np.array([p[0] for p in pts]), np.array([p[1] for p in pts])))
        paths.append(plot_series(out / f"training-{metric}.svg", series, "meta iteration", metric,
                                 f"{metric} after one adaptation step"))
    return paths


# ------------------------------------------------------------------ statistics
@dataclass
class TrendResult:
    s: int
    var_s: float
    z: float
    p_value: float

    def increasing(self, alpha: float = 0.05) -> bool:
        return self.s > 0 and self.p_value < alpha


def mann_kendall(x: Sequence[float]) -> TrendResult:
    """Mann-Kendall trend test with the tie-corrected variance; two-sided p-value."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n < 3:
        raise ValueError("Mann-Kendall needs at least 3 points")
    s = 0
    for i in range(n - 1):
        s += int(np.sum(np.sign(x[i + 1:] - x[i])))
    _, counts = np.unique(x, return_counts=True)
    ties = sum(int(t) * (t - 1) * (2 * t + 5) for t in counts if t > 1)
    var_s = (n * (n - 1) * (2 * n + 5) - ties) / 18.0
    if var_s <= 0:
        return TrendResult(s, var_s, 0.0, 1.0)
    if s > 0:
        z = (s - 1) / math.sqrt(var_s)
    elif s < 0:
        z = (s + 1) / math.sqrt(var_s)
    else:
        z = 0.0
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return TrendResult(s, var_s, z, p)
