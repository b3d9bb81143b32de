import os

import numpy as np
import pytest

from promptseg.checkpoint import load_delta, load_full, read_checkpoint, save_delta, save_full
from promptseg.errors import FingerprintError, FormatError
from promptseg.model import ModelConfig, PromptConfig, SegModel

CFG = ModelConfig.toy()
DEEP = PromptConfig.deep(8, CFG.default_deep_sites())


def perturb(model, names, seed=0):
    rng = np.random.default_rng(seed)
    for n in names:
        p = model.params[n]
        p.data[...] = p.data + rng.standard_normal(p.shape).astype(p.dtype) * 0.1


@pytest.fixture(scope="module")
def x():
    return np.random.default_rng(0).standard_normal((2,) + CFG.volume_shape).astype(np.float32)


def test_full_round_trip_is_bitwise(tmp_path, x):
    model = SegModel(CFG, PromptConfig.shallow(4), seed=1)
    perturb(model, model.params)
    path = tmp_path / "m.ckpt"
    save_full(model, path)
    loaded = load_full(path)
    assert loaded.fingerprint == model.fingerprint
    assert all(np.array_equal(loaded.params[n].data, p.data) for n, p in model.params.items())
    assert np.array_equal(loaded(x).data, model(x).data)


def test_float64_round_trip(tmp_path):
    model = SegModel(CFG, seed=2, dtype=np.float64)
    save_full(model, tmp_path / "m.ckpt")
    loaded = load_full(tmp_path / "m.ckpt")
    assert loaded.params["head.weight"].dtype == np.float64
    assert np.array_equal(loaded.params["embed.pos"].data, model.params["embed.pos"].data)


def test_delta_onto_fresh_backbone_reproduces_tuned_logits(tmp_path, x):
    base = SegModel(CFG, seed=3)
    save_full(base, tmp_path / "base.ckpt", strategy="pretrain")
    tuned = base.with_prompts(DEEP, seed=11)
    perturb(tuned, tuned.prompt_names + tuned.head_names)
    save_delta(tuned, tmp_path / "d.ckpt", "deep_prompt")
    restored = load_delta(tmp_path / "d.ckpt", load_full(tmp_path / "base.ckpt"))
    assert np.array_equal(restored(x).data, tuned(x).data)


def test_delta_holds_only_learnables(tmp_path):
    tuned = SegModel(CFG, DEEP, seed=0)
    save_delta(tuned, tmp_path / "d.ckpt", "deep_prompt")
    _, _, header, blobs = read_checkpoint(tmp_path / "d.ckpt")
    assert set(blobs) == set(tuned.prompt_names + tuned.head_names)
    assert header["strategy"] == "deep_prompt"


def test_delta_size_below_one_percent_of_full(tmp_path):
    tuned = SegModel(CFG, DEEP, seed=0)
    save_full(tuned, tmp_path / "f.ckpt")
    save_delta(tuned, tmp_path / "d.ckpt", "deep_prompt")
    assert os.path.getsize(tmp_path / "d.ckpt") / os.path.getsize(tmp_path / "f.ckpt") < 0.01


def test_fingerprint_mismatch_names_both(tmp_path):
    tuned = SegModel(CFG, DEEP, seed=0)
    save_delta(tuned, tmp_path / "d.ckpt", "deep_prompt")
    other = SegModel(ModelConfig.toy(embed_dim=16), seed=0)
    with pytest.raises(FingerprintError) as info:
        load_delta(tmp_path / "d.ckpt", other)
    assert tuned.fingerprint in str(info.value)
    assert other.with_prompts(DEEP).fingerprint in str(info.value)


def test_delta_refuses_a_different_backbone_of_same_shape(tmp_path):
    tuned = SegModel(CFG, DEEP, seed=0)
    save_delta(tuned, tmp_path / "d.ckpt", "deep_prompt")
    with pytest.raises(FingerprintError, match="digest"):
        load_delta(tmp_path / "d.ckpt", SegModel(CFG, seed=1))


def test_kind_mismatch(tmp_path):
    model = SegModel(CFG, DEEP)
    save_full(model, tmp_path / "f.ckpt")
    save_delta(model, tmp_path / "d.ckpt", "deep_prompt")
    with pytest.raises(FormatError):
        load_full(tmp_path / "d.ckpt")
    with pytest.raises(FormatError):
        load_delta(tmp_path / "f.ckpt", model)


@pytest.mark.parametrize("keep", [0, 5, 20, 60, -1])
def test_truncated_file_is_a_format_error(tmp_path, keep):
    model = SegModel(CFG, PromptConfig.shallow(2))
    path = tmp_path / "m.ckpt"
    save_full(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:keep] if keep >= 0 else raw[: len(raw) - 1])
    with pytest.raises(FormatError):
        load_full(path)


def test_bad_magic_and_trailing_bytes(tmp_path):
    path = tmp_path / "m.ckpt"
    save_full(SegModel(CFG), path)
    raw = path.read_bytes()
    path.write_bytes(b"X" + raw[1:])
    with pytest.raises(FormatError, match="magic"):
        read_checkpoint(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_checkpoint(path)
