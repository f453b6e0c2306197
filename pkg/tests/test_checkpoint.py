import numpy as np
import pytest

from soundpatch.checkpoint import (Checkpoint, CheckpointError, load_checkpoint,
                                   save_checkpoint)
from soundpatch.config import RunConfig


def make_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint(config=RunConfig(), stage="vae",
                      arrays={"vae.w": rng.standard_normal((3, 4)).astype(np.float32),
                              "vae.b": rng.standard_normal(4)},
                      stats={"note": 1.5})


def test_save_load_save_identical_bytes(tmp_path):
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    ckpt = make_ckpt()
    save_checkpoint(p1, ckpt)
    loaded = load_checkpoint(p1)
    save_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    for key in ckpt.arrays:
        assert np.array_equal(ckpt.arrays[key], loaded.arrays[key])
    assert loaded.stats == {"note": 1.5}


def test_rejects_non_checkpoint(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"garbage" * 10)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(p)


def test_rejects_version_mismatch(tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, make_ckpt())
    raw = bytearray(p.read_bytes())
    idx = raw.find(b'"format_version": "1"')
    raw[idx: idx + len(b'"format_version": "9"')] = b'"format_version": "9"'
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="format version"):
        load_checkpoint(p)


def test_rejects_config_hash_mismatch(tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, make_ckpt())
    raw = bytearray(p.read_bytes())
    idx = raw.find(b'"config_hash": "')
    raw[idx + 17] = ord("0") if raw[idx + 17] != ord("0") else ord("1")
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(p)


def test_stage_ordering():
    ckpt = make_ckpt()
    ckpt.require_stage("vae")
    with pytest.raises(CheckpointError, match="stage"):
        ckpt.require_stage("full")


def test_unknown_stage(tmp_path):
    ckpt = make_ckpt()
    ckpt.stage = "bogus"
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.ckpt", ckpt)
