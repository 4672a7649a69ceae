import csv
import math
import statistics
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from metalane.config import EvalConfig, MetaHyper, PpoHyper, ScenarioConfig, TrafficTask
from metalane.evaluation import MetricRecord
from metalane.nn import Layout, init_params
from metalane.ppo import LaneChangeEnvFactory
from metalane.study import (
    ADAPTATION_COLUMNS, PLOT_METRICS, StudyError, StudyRecord, adaptation_study, emit_outputs, eval_steps,
    mann_kendall, read_adaptation_csv, summary_columns, summary_rows,
)

LAYOUT = Layout(hidden=16)
FACTORY = LaneChangeEnvFactory(ScenarioConfig())
META = MetaHyper(inner_lr=1e-2)
PPO = PpoHyper(horizon=64)
TEST = TrafficTask(0.7)


def _params(seed):
    return init_params(LAYOUT, np.random.default_rng(seed), actor_gain=3.0)


def _study(meta_p, pre_p, steps=2, seeds=2, episodes=2):
    ev = EvalConfig(episodes=episodes, adapt_steps=steps, eval_every=1, seeds=seeds)
    return adaptation_study(meta_p, pre_p, TEST, META, PPO, ev, FACTORY, master_seed=11)


def _fake_records(rng, steps=(0, 5, 20, 40), seeds=3):
    out = []
    for agent in ("meta", "pretrained"):
        for seed in range(seeds):
            for k in steps:
                s, c = rng.uniform(0, 0.6), rng.uniform(0, 0.4)
                rec = MetricRecord(k, s, c, 1.0 - s - c, *rng.normal(size=5).tolist(), 50)
                out.append(StudyRecord(agent, seed, rec))
    return out


# ---------------------------------------------------------------- study
def test_zero_steps_gives_pre_adaptation_rows():
    recs = _study(_params(1), _params(2), steps=0, seeds=1)
    assert [(r.agent, r.step) for r in recs] == [("meta", 0), ("pretrained", 0)]


def test_identical_checkpoints_give_identical_curves():
    p = _params(3)
    recs = _study(p, p.copy())
    meta = [(r.seed, r.metrics) for r in recs if r.agent == "meta"]
    pre = [(r.seed, r.metrics) for r in recs if r.agent == "pretrained"]
    assert meta == pre and len(meta) == 2 * 3


def test_incompatible_checkpoints_rejected():
    with pytest.raises(StudyError):
        _study(_params(1), init_params(Layout(hidden=8), np.random.default_rng(0)))


def test_eval_steps_include_summary_points():
    assert eval_steps(40, 10) == [0, 5, 10, 20, 30, 40]
    assert eval_steps(7, 3) == [0, 3, 5, 6, 7]
    with pytest.raises(StudyError):
        eval_steps(-1, 1)


# ---------------------------------------------------------------- outputs
def test_summary_matches_independent_csv_query(tmp_path):
    recs = _fake_records(np.random.default_rng(0))
    emit_outputs(recs, tmp_path)
    with open(tmp_path / "adaptation.csv", newline="") as fh:
        table = list(csv.DictReader(fh))
    with open(tmp_path / "summary.csv", newline="") as fh:
        summary = list(csv.DictReader(fh))
    assert len(summary) == 4
    for row in summary:
        for k in (5, 20, 40):
            vals = [float(r[row["metric"]]) for r in table if r["agent"] == row["agent"] and int(r["step"]) == k]
            assert len(vals) == 3
            assert abs(float(row[f"step_{k}"]) - statistics.fmean(vals)) < 1e-12
            assert abs(float(row[f"step_{k}_std"]) - statistics.pstdev(vals)) < 1e-12


def test_empty_records_give_header_only_csvs(tmp_path):
    emit_outputs([], tmp_path)
    assert (tmp_path / "adaptation.csv").read_text() == ",".join(ADAPTATION_COLUMNS) + "\n"
    assert (tmp_path / "summary.csv").read_text() == ",".join(summary_columns()) + "\n"


def test_csv_round_trip(tmp_path):
    recs = _fake_records(np.random.default_rng(1))
    emit_outputs(recs, tmp_path)
    assert read_adaptation_csv(tmp_path / "adaptation.csv") == recs


def test_unwritable_directory_raises(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(StudyError):
        emit_outputs([], blocker / "sub")


def test_plots_have_one_polyline_per_series(tmp_path):
    recs = _fake_records(np.random.default_rng(2))
    emit_outputs(recs, tmp_path)
    ns = "{http://www.w3.org/2000/svg}"
    for metric in PLOT_METRICS:
        root = ET.parse(tmp_path / f"adaptation-{metric}.svg").getroot()
        groups = {g.get("id"): g for g in root.iter(f"{ns}g") if (g.get("id") or "").startswith("series-")}
        assert sorted(groups) == [f"series-meta-{metric}", f"series-pretrained-{metric}"]
        for g in groups.values():
            # the polyline is the group's only direct path child; marker glyphs sit under <defs>
            assert len(g.findall(f"{ns}path")) == 1


def test_outputs_are_byte_stable(tmp_path):
    recs = _fake_records(np.random.default_rng(3))
    emit_outputs(recs, tmp_path / "a")
    emit_outputs(recs, tmp_path / "b")
    for name in ["adaptation.csv", "summary.csv"] + [f"adaptation-{m}.svg" for m in PLOT_METRICS]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_summary_leaves_missing_steps_blank():
    recs = _fake_records(np.random.default_rng(4), steps=(0, 5))
    row = summary_rows(recs)[0]
    assert row["step_5"] != "" and row["step_20"] == "" and row["step_40"] == ""


# ---------------------------------------------------------------- trend test
def _mk_oracle(x):
    n = len(x)
    s = sum(np.sign(x[j] - x[i]) for i in range(n) for j in range(i + 1, n))
    var = n * (n - 1) * (2 * n + 5) / 18
    z = (s - np.sign(s)) / math.sqrt(var)
    return s, var, 2 * (1 - statistics.NormalDist().cdf(abs(z)))


def test_mann_kendall_without_ties():
    x = np.random.default_rng(0).standard_normal(15) + 0.2 * np.arange(15)
    s, var, p = _mk_oracle(x)
    res = mann_kendall(x)
    assert res.s == s and res.var_s == pytest.approx(var) and res.p_value == pytest.approx(p, rel=1e-9)


def test_mann_kendall_detects_trend_and_ties():
    assert mann_kendall(np.arange(10.0)).increasing()
    assert not mann_kendall(np.arange(10.0)[::-1]).increasing()
    flat = mann_kendall(np.ones(8))
    assert flat.s == 0 and flat.p_value == 1.0
    # tie correction: one pair of ties among 4 points reduces the variance by 2*1*9/18
    assert mann_kendall([1.0, 2.0, 2.0, 3.0]).var_s == pytest.approx((4 * 3 * 13 - 18) / 18)
    with pytest.raises(ValueError):
        mann_kendall([1.0, 2.0])
