import struct

import numpy as np
import pytest

from metalane import checkpoint as ckpt
from metalane.nn import AdamState, Layout, PolicyParams


def _params(layout, seed=0):
    return PolicyParams(layout, np.random.default_rng(seed).standard_normal(layout.size))


@pytest.mark.parametrize("layout", [Layout(), Layout(hidden=16, separate_critic=True)])
def test_round_trip_is_bit_exact(tmp_path, layout):
    p = _params(layout)
    adam = AdamState(np.random.default_rng(1).standard_normal(layout.size),
                     np.random.default_rng(2).random(layout.size), 17)
    path = ckpt.save(tmp_path / "deep" / "x.ckpt", p, adam, {"iteration": 3, "agent": "meta"})
    back = ckpt.load(path)
    assert back.params == p and back.params.layout == layout
    assert back.adam == adam
    assert back.meta == {"iteration": 3, "agent": "meta"}
    assert ckpt.dumps(back.params, back.adam, back.meta) == path.read_bytes()


def test_without_adam():
    p = _params(Layout(hidden=8))
    back = ckpt.loads(ckpt.dumps(p))
    assert back.adam is None and back.meta == {} and back.params == p


def test_header_layout():
    data = ckpt.dumps(_params(Layout(hidden=8)), AdamState.zeros(Layout(hidden=8).size))
    assert data[:8] == ckpt.MAGIC
    assert struct.unpack("<6I", data[8:32]) == (ckpt.VERSION, 1, 21, 8, 6, 8)


def test_corrupt_files_rejected(tmp_path):
    data = ckpt.dumps(_params(Layout(hidden=8)))
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.loads(b"XXXXXXXX" + data[8:])
    with pytest.raises(ckpt.CheckpointError, match="truncated"):
        ckpt.loads(data[:-20])
    with pytest.raises(ckpt.CheckpointError, match="trailing"):
        ckpt.loads(data + b"\0")
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.loads(data[:8] + struct.pack("<I", 99) + data[12:])
    with pytest.raises(ckpt.CheckpointError, match="not found"):
        ckpt.load(tmp_path / "missing.ckpt")
