"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The desk-scale pipeline (both trainings plus the adaptation study) runs once
per session through the CLI with ``configs/desk.toml``; criteria 2 and 3 read
its CSV outputs.  Expect roughly ten to twenty minutes on one CPU core.
"""
import csv
import itertools
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from metalane.cli import main
from metalane.reward import near_collision_f, near_collision_penalty
from metalane.sim import ABORT, CHANGE, KEEP
from metalane.study import mann_kendall

ROOT = Path(__file__).resolve().parents[1]
DESK = str(ROOT / "configs" / "desk.toml")

PROPERTY_SUITE = (
    "tests/test_nn.py::test_gradient_matches_finite_differences",
    "tests/test_nn.py::test_softmax_normalizes",
    "tests/test_ppo.py::test_clip_dominance_on_random_samples",
    "tests/test_ppo.py::test_gae_lambda_one_is_monte_carlo",
    "tests/test_sim.py::test_abort_symmetry",
    "tests/test_reward.py::test_shield_soundness_on_random_states",
    "tests/test_maml.py::test_degenerate_maml_equals_pretrained_step",
    "tests/test_maml.py::test_second_order_matches_quadratic_closed_form",
)

pytestmark = pytest.mark.slow


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    common = ["--config", DESK, "--out", str(out)]
    t0 = time.perf_counter()
    for cmd in ("train-meta", "train-pretrained", "adapt"):
        assert main([cmd, *common]) == 0, cmd
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------- 1
def test_criterion_1_property_suite(criterion):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_SUITE],
                          cwd=ROOT, capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and elapsed < 300
    criterion(1, ok, f"property suite: {summary}; {elapsed:.1f}s (limit 300s)")
    assert proc.returncode == 0, proc.stdout[-3000:]
    assert elapsed < 300


# ---------------------------------------------------------------- 2
def test_criterion_2_desk_meta_training(desk_run, criterion):
    out, _ = desk_run
    rows = [r for r in _rows(out / "meta-eval.csv") if r["agent"] == "meta"]
    last_it = max(int(r["iteration"]) for r in rows)
    final = {float(r["task_f"]): r for r in rows if int(r["iteration"]) == last_it}
    assert sorted(final) == [0.3, 0.4, 0.5]
    succ = {f: float(r["success_rate"]) for f, r in final.items()}
    coll = {f: float(r["collision_rate"]) for f, r in final.items()}
    iters = sorted({int(r["iteration"]) for r in rows})
    mean_curve = [np.mean([float(r["success_rate"]) for r in rows if int(r["iteration"]) == it]) for it in iters]
    trend = mann_kendall(mean_curve)
    ok_final = all(s >= 0.9 for s in succ.values()) and all(c <= 0.05 for c in coll.values())
    ok = ok_final and trend.increasing(0.05)
    criterion(2, ok, f"iteration {last_it}: one-step success {succ}, collision {coll}; "
                     f"trend S={trend.s} p={trend.p_value:.2g}")
    assert ok_final
    assert trend.increasing(0.05)


# ---------------------------------------------------------------- 3
def test_criterion_3_adaptation_ordering(desk_run, criterion):
    out, elapsed = desk_run
    train_steps = {a: int(_rows(out / f"{a}-train.csv")[-1]["env_steps"]) for a in ("meta", "pretrained")}
    summary = {(r["metric"], r["agent"]): r for r in _rows(out / "adaptation" / "summary.csv")}
    table = _rows(out / "adaptation" / "adaptation.csv")
    seeds = {r["seed"] for r in table}
    episodes = {int(r["episodes"]) for r in table}

    def val(metric, agent, k):
        return float(summary[(metric, agent)][f"step_{k}"])

    checks = []
    for k in (5, 20):
        checks.append(val("success_rate", "meta", k) >= val("success_rate", "pretrained", k))
        checks.append(val("collision_rate", "meta", k) <= val("collision_rate", "pretrained", k))
    checks.append(val("success_rate", "meta", 40) >= 0.85)
    checks.append(val("collision_rate", "meta", 40) <= 0.05)
    ok = all(checks) and len(seeds) >= 5 and episodes == {50} and train_steps["meta"] == train_steps["pretrained"]
    detail = "; ".join(
        f"step {k}: success {val('success_rate', 'meta', k):.3f} vs {val('success_rate', 'pretrained', k):.3f}, "
        f"collision {val('collision_rate', 'meta', k):.3f} vs {val('collision_rate', 'pretrained', k):.3f}"
        for k in (5, 20, 40))
    criterion(3, ok, f"meta vs pretrained at f=0.7 ({len(seeds)} seeds x {sorted(episodes)} episodes, "
                     f"{train_steps['meta']} env steps each, pipeline {elapsed / 60:.1f} min): {detail}")
    assert len(seeds) >= 5 and episodes == {50}
    assert train_steps["meta"] == train_steps["pretrained"]
    assert all(checks)


# ---------------------------------------------------------------- 4
DETERMINISM_RUN = (
    ["train-meta", "--config", DESK, "--steps", "3", "--eval-episodes", "5", "--set", "meta.eval_every=1",
     "--set", "meta.checkpoint_every=1"],
    ["train-pretrained", "--config", DESK, "--steps", "3", "--eval-episodes", "5", "--set", "meta.eval_every=1",
     "--set", "meta.checkpoint_every=1"],
    ["adapt", "--config", DESK, "--steps", "5", "--eval-episodes", "5", "--set", "eval.seeds=2"],
    ["report", "--config", DESK],
)


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_4_determinism(tmp_path, criterion):
    out = tmp_path / "run"
    trees = []
    for name in ("first", "second"):
        for argv in DETERMINISM_RUN:
            assert main([*argv, "--out", str(out)]) == 0
        trees.append(_tree(out))
        out.rename(tmp_path / name)
    a, b = trees
    differing = []
    for name in sorted(set(a) | set(b)):
        if name not in a or name not in b:
            differing.append(name)
        elif name.startswith("run-manifest"):
            ma, mb = json.loads(a[name]), json.loads(b[name])
            ma.pop("created"), mb.pop("created")
            if ma != mb:
                differing.append(name)
        elif a[name] != b[name]:
            differing.append(name)
    kinds = {k: sum(n.endswith(k) for n in a) for k in (".ckpt", ".csv", ".svg")}
    ok = not differing and all(kinds.values())
    criterion(4, ok, f"{len(a)} files compared ({kinds}); differing: {differing or 'none'}")
    assert not differing
    assert all(kinds.values())


# ---------------------------------------------------------------- 5
ACTIVE = {KEEP: ("C1",), CHANGE: ("C1", "C3"), ABORT: ("C0", "C2")}


def test_criterion_5_reward_table(criterion):
    slots = ("C0", "C1", "C2", "C3")
    rng = np.random.default_rng(0)
    mismatches = 0
    cases = 0
    for lateral, present in itertools.product((KEEP, CHANGE, ABORT), itertools.product((False, True), repeat=4)):
        dist = {s: (float(rng.uniform(0.0, 9.0)) if p else None) for s, p in zip(slots, present)}
        terms = [-1.0 / (dist[s] + 0.1) for s in ACTIVE[lateral] if dist[s] is not None]
        expected = min(terms) if terms else 0.0
        cases += 1
        mismatches += abs(near_collision_penalty(lateral, dist) - expected) > 1e-12
        # recover the active set: a present slot is active iff zero distance on it gives the floor value
        probed = {s for s in slots if dist[s] is not None
                  and abs(near_collision_penalty(lateral, dict(dist, **{s: 0.0})) + 10.0) <= 1e-12}
        mismatches += probed != {s for s in ACTIVE[lateral] if dist[s] is not None}
    ok = mismatches == 0 and cases == 48
    criterion(5, ok, f"{cases} (lateral action x presence pattern) cases, {mismatches} mismatches")
    assert ok


# ---------------------------------------------------------------- 6
def test_criterion_6_penalty_spot_values(criterion):
    at0, at09 = near_collision_f(0.0), near_collision_f(0.9)
    ok = abs(at0 + 10.0) <= 1e-12 and abs(at09 + 1.0) <= 1e-12
    criterion(6, ok, f"F(0) = {at0!r}, F(0.9) = {at09!r}")
    assert ok
