import json

import pytest

from metalane import checkpoint as ckpt
from metalane.cli import main

TINY = ["--set", "net.hidden=16", "--set", "ppo.horizon=64", "--set", "meta.inner_lr=0.01",
        "--set", "meta.eval_every=1", "--set", "meta.checkpoint_every=1", "--seed", "4"]


def _pipeline(out):
    o = ["--out", str(out)]
    assert main(["train-meta", *o, *TINY, "--steps", "1", "--eval-episodes", "2"]) == 0
    assert main(["train-pretrained", *o, *TINY, "--steps", "1", "--eval-episodes", "2"]) == 0
    assert main(["adapt", *o, *TINY, "--steps", "2", "--eval-episodes", "2", "--set", "eval.seeds=2"]) == 0
    assert main(["eval", *o, *TINY, "--checkpoint", str(out / "checkpoints" / "meta.ckpt"),
                 "--eval-episodes", "2", "--trace", str(out / "trace.csv")]) == 0
    assert main(["report", *o, *TINY]) == 0


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def twin_runs(tmp_path_factory):
    # same argv both times, so the same output path; each finished run is moved aside
    base = tmp_path_factory.mktemp("cli")
    for name in ("a", "b"):
        _pipeline(base / "run")
        (base / "run").rename(base / name)
    return base / "a", base / "b"


def test_pipeline_writes_expected_artifacts(twin_runs):
    a, _ = twin_runs
    names = set(_tree(a))
    for expected in ("checkpoints/meta.ckpt", "checkpoints/pretrained.ckpt", "checkpoints/meta-00001.ckpt",
                     "meta-train.csv", "meta-eval.csv", "pretrained-train.csv", "pretrained-eval.csv",
                     "adaptation/adaptation.csv", "adaptation/summary.csv",
                     "adaptation/adaptation-success_rate.svg", "plots/meta/training-success_rate.svg",
                     "plots/training-collision_rate.svg", "eval.csv", "trace.csv", "training-curves.csv",
                     "config.train-meta.toml", "run-manifest.train-meta.json", "run-manifest.adapt.json"):
        assert expected in names, expected


def test_outputs_are_byte_identical_except_manifest_timestamps(twin_runs):
    a, b = twin_runs
    ta, tb = _tree(a), _tree(b)
    assert sorted(ta) == sorted(tb)
    for name in ta:
        if name.startswith("run-manifest"):
            ma, mb = json.loads(ta[name]), json.loads(tb[name])
            ma.pop("created")
            mb.pop("created")
            assert ma == mb and ma["seed"] == 4
            continue
        assert ta[name] == tb[name], name


def test_manifest_contents(twin_runs):
    a, _ = twin_runs
    m = json.loads((a / "run-manifest.train-meta.json").read_text())
    assert m["command"] == "train-meta" and "--steps" in m["argv"]
    assert m["config"]["net"]["hidden"] == 16 and m["config"]["meta"]["iterations"] == 1
    import hashlib
    digest = hashlib.sha256((a / "checkpoints" / "meta.ckpt").read_bytes()).hexdigest()
    assert m["artifacts"]["checkpoints/meta.ckpt"] == digest
    assert not any(k.startswith("run-manifest") for k in m["artifacts"])
    assert ckpt.load(a / "checkpoints" / "meta.ckpt").meta["iteration"] == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "train-meta" in capsys.readouterr().out
    assert main(["adapt", "--help"]) == 0
    assert "--meta-ckpt" in capsys.readouterr().out


def test_unknown_subcommand(capsys):
    assert main(["frobnicate"]) != 0
    assert "frobnicate" in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert main(["eval", "--checkpoint", "x", "--bogus-flag"]) != 0
    assert "--bogus-flag" in capsys.readouterr().err


def test_unknown_config_key_is_named(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path), "--set", "meta.bogus=1"]) == 2
    assert "meta.bogus" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "none.ckpt")]) == 2
    assert "none.ckpt" in capsys.readouterr().err
    assert main(["adapt", "--out", str(tmp_path)]) == 2
    assert "meta.ckpt" in capsys.readouterr().err


def test_report_with_nothing_to_do(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) == 2
    assert "nothing to report" in capsys.readouterr().err


def test_flags_map_onto_config(tmp_path):
    out = tmp_path / "o"
    assert main(["train-meta", "--out", str(out), *TINY, "--steps", "0", "--eval-episodes", "1",
                 "--shield", "off", "--mode", "so"]) == 0
    cfg = (out / "config.train-meta.toml").read_text()
    assert "mode = \"so\"" in cfg and "shield = false" in cfg and "iterations = 0" in cfg
