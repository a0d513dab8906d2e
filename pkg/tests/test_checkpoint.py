import numpy as np
import pytest

from garmentanim.backbone import BackboneConfig, init_backbone
from garmentanim.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from garmentanim.dual_module import init_adapters


def test_round_trip_is_bitwise(tmp_path, tiny_cfg):
    params = init_adapters(init_backbone(tiny_cfg, 4), tiny_cfg)
    aux = {"optim.m.x": np.arange(6, dtype=np.float32).reshape(2, 3)}
    path = save_checkpoint(tmp_path / "a.ckpt", params, tiny_cfg, {"step": 7}, aux)
    loaded, cfg, extra, aux2 = load_checkpoint(path)
    assert cfg == tiny_cfg
    assert extra == {"step": 7}
    assert loaded.digest() == params.digest()
    assert sorted(loaded.trainable_names()) == sorted(params.trainable_names())
    np.testing.assert_array_equal(aux2["optim.m.x"], aux["optim.m.x"])


def test_save_is_deterministic(tmp_path, tiny_cfg):
    params = init_backbone(tiny_cfg, 0)
    a = save_checkpoint(tmp_path / "a.ckpt", params, tiny_cfg).read_bytes()
    b = save_checkpoint(tmp_path / "b.ckpt", params, tiny_cfg).read_bytes()
    assert a == b


def test_header_records_config_and_version(tmp_path, tiny_cfg):
    path = save_checkpoint(tmp_path / "a.ckpt", init_backbone(tiny_cfg, 0), tiny_cfg)
    header = read_header(path)
    assert header["format_version"] == 1
    assert BackboneConfig.from_dict(header["config"]) == tiny_cfg


def test_bad_files(tmp_path, tiny_cfg):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    good = save_checkpoint(tmp_path / "good.ckpt", init_backbone(tiny_cfg, 0), tiny_cfg).read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(good[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(cut)
    newer = tmp_path / "newer.ckpt"
    newer.write_bytes(good[:8] + (2).to_bytes(4, "little") + good[12:])
    with pytest.raises(CheckpointError):
        load_checkpoint(newer)
