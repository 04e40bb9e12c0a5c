import struct

import numpy as np
import pytest

from gradcheck import perturbed_params
from remind.checkpoint import MAGIC, VERSION, group_shapes, load_checkpoint, save_checkpoint
from remind.errors import DataError
from remind.model import ModelConfig, ParamSet


@pytest.fixture
def saved(tmp_path):
    cfg = ModelConfig(4, 64, 4, d_enc=6, k_t=9, n_classes=3, gamma=2e-3)
    params = perturbed_params(cfg, 0)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, params, cfg)
    return path, params, cfg


def test_round_trip(saved):
    path, params, cfg = saved
    back, back_cfg = load_checkpoint(path)
    assert back_cfg == cfg
    for name, value in params.items():
        assert np.array_equal(getattr(back, name), value)


def test_layout_on_disk(saved):
    path, params, cfg = saved
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack_from("<I", raw, 4)[0] == VERSION
    assert struct.unpack_from("<4I", raw, 8) == (4, 64, 4, 6)
    body = np.frombuffer(raw[-8 * params.flat().size:], dtype="<f8")
    assert np.array_equal(body, params.flat())


def test_group_shapes_match_init():
    cfg = ModelConfig(5, 60, 3)
    p = ParamSet.init(cfg, 0)
    assert {k: v.shape for k, v in p.items()} == group_shapes(cfg)
    assert list(group_shapes(cfg)) == list(ParamSet.names())


def test_bad_magic(saved, tmp_path):
    path, _, _ = saved
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(DataError):
        load_checkpoint(bad)


@pytest.mark.parametrize("cut", [10, 200, -8])
def test_truncated(saved, tmp_path, cut):
    path, _, _ = saved
    bad = tmp_path / "short.bin"
    bad.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(DataError):
        load_checkpoint(bad)


def test_trailing_bytes(saved, tmp_path):
    path, _, _ = saved
    bad = tmp_path / "long.bin"
    bad.write_bytes(path.read_bytes() + b"\0" * 8)
    with pytest.raises(DataError):
        load_checkpoint(bad)
