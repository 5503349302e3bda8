import json

import numpy as np
import pytest

from gatedlora.checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint, write_checkpoint
from gatedlora.config import RunConfig
from gatedlora.errors import FormatError
from gatedlora.model import ModelConfig, TinyViT

SMALL = ModelConfig(image_size=8, patch_size=4, dim=8, heads=2, layers=2, mlp_ratio=2, num_classes=3)


@pytest.fixture
def adapted():
    model = TinyViT(SMALL, seed=1)
    blocks = model.attach_adapters(kind="lora", rank=2, seed=3)
    rng = np.random.default_rng(0)
    for blk in blocks:
        blk.b.data[...] = rng.normal(size=blk.b.shape)
    blocks[2].gate.set_score(0.1 - 1e-12)
    blocks[4].gate.set_score(0.1)
    return model


def test_save_load_save_byte_identical(tmp_path, adapted):
    save_checkpoint(tmp_path / "a", adapted, RunConfig(model=SMALL))
    again = model_from_checkpoint(load_checkpoint(tmp_path / "a"))
    save_checkpoint(tmp_path / "b", again, RunConfig(model=SMALL))
    for name in ("tensors.bin", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_scores_survive_exactly(tmp_path, adapted):
    save_checkpoint(tmp_path / "a", adapted)
    back = model_from_checkpoint(load_checkpoint(tmp_path / "a"))
    assert [g.value for g in back.gates()] == [g.value for g in adapted.gates()]
    assert [g.active for g in back.gates()] == [g.active for g in adapted.gates()]


def test_float64_round_trip_is_exact(tmp_path, adapted):
    save_checkpoint(tmp_path / "a", adapted, precision="float64")
    back = model_from_checkpoint(load_checkpoint(tmp_path / "a"))
    x = np.random.default_rng(2).normal(size=(4, 1, 8, 8))
    assert np.array_equal(back(x).data, adapted(x).data)


def test_manifest_contents(tmp_path, adapted):
    save_checkpoint(tmp_path / "a", adapted, RunConfig(model=SMALL))
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    entry = manifest["adapters"][0]
    assert {"site", "kind", "rank", "alpha", "score", "tau", "active"} <= set(entry)
    assert manifest["run"]["model"]["dim"] == 8
    names = {t["name"] for t in manifest["tensors"]}
    assert "layers.0.attn.q.weight" in names and "adapters.0.q.score" in names


def test_missing_tensor_is_an_error(tmp_path, adapted):
    save_checkpoint(tmp_path / "a", adapted)
    ckpt = load_checkpoint(tmp_path / "a")
    del ckpt.tensors["adapters.1.v.b"]
    write_checkpoint(ckpt, tmp_path / "b")
    with pytest.raises(FormatError, match="lacks"):
        model_from_checkpoint(load_checkpoint(tmp_path / "b"))


def test_extra_tensor_is_an_error(tmp_path, adapted):
    save_checkpoint(tmp_path / "a", adapted)
    ckpt = load_checkpoint(tmp_path / "a")
    ckpt.tensors["stray"] = np.zeros(2)
    with pytest.raises(FormatError):
        model_from_checkpoint(ckpt)


def test_shape_mismatch_is_an_error(tmp_path, adapted):
    save_checkpoint(tmp_path / "a", adapted)
    ckpt = load_checkpoint(tmp_path / "a")
    ckpt.tensors["head.bias"] = np.zeros(5)
    with pytest.raises(FormatError):
        model_from_checkpoint(ckpt)


def test_foreign_config_warns(tmp_path, adapted):
    save_checkpoint(tmp_path / "a", adapted, RunConfig(model=SMALL))
    with pytest.warns(UserWarning, match="different run config"):
        load_checkpoint(tmp_path / "a", expect=RunConfig(model=SMALL, seed=9))


def test_corrupt_or_missing_files(tmp_path, adapted):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "nowhere")
    save_checkpoint(tmp_path / "a", adapted)
    (tmp_path / "a" / "manifest.json").write_text("{nope")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "a")
