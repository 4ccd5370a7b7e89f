import numpy as np
import pytest

from aesthadapt.data import AugmentationConfig, NormalizationStats
from aesthadapt.model import AdapterConfig, Placement, ProfileMismatch, TrainMode, attach_adapters, make_profile, predict
from aesthadapt.persistence import (
    Checkpoint,
    FormatError,
    ProfileFile,
    decode_container,
    encode_container,
    load_checkpoint,
    load_profile,
    profile_model,
    save_checkpoint,
    save_profile,
    write_json,
)


def make_ckpt(model, extra=None):
    return Checkpoint(model, NormalizationStats(3.1, 0.9), AugmentationConfig(channel_mean=(0.1, 0.2, 0.3)), extra or {"test_users": ["u1"]})


def test_container_roundtrip_preserves_dtype_and_shape():
    tensors = {"b": np.arange(6, dtype=np.float64).reshape(2, 3), "a": np.ones((1, 1, 1, 1), np.float32), "s": np.float32(2) * np.ones(())}
    meta, out = decode_container(encode_container(b"TESTMAG\0", {"k": [1, 2]}, tensors), b"TESTMAG\0")
    assert meta == {"k": [1, 2]}
    for k, v in tensors.items():
        assert out[k].dtype == v.dtype and np.array_equal(out[k], v)


def test_checkpoint_roundtrip_is_byte_identical(tmp_path, tiny_model):
    ck = make_ckpt(tiny_model)
    save_checkpoint(tmp_path / "a.ckpt", ck)
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", loaded)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert loaded.config_hash == ck.config_hash
    assert loaded.stats == ck.stats and loaded.augmentation == ck.augmentation and loaded.extra == ck.extra
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(predict(loaded.model, None, x), predict(tiny_model, None, x))
    assert [f.name for f in tmp_path.iterdir() if f.name.startswith(".")] == []


def test_hash_tracks_weights(tiny_model):
    a = make_ckpt(tiny_model).config_hash
    other = tiny_model.copy()
    other.params["out.b"] = other.params["out.b"] + 1
    assert make_ckpt(other).config_hash != a


def test_profile_roundtrip_and_hash_check(tmp_path, tiny_model):
    ck = make_ckpt(tiny_model)
    adapted = attach_adapters(tiny_model, AdapterConfig(Placement.LATE_BLOCKS, "half"))
    prof = make_profile(adapted, "u1", TrainMode.ADAPTERS_PLUS_BOTTLENECK)
    save_profile(tmp_path / "p.prof", ProfileFile(prof, ck.config_hash, {"fold": 0}))
    pf = load_profile(tmp_path / "p.prof", ck)
    assert pf.profile.user_id == "u1" and pf.profile.mode is TrainMode.ADAPTERS_PLUS_BOTTLENECK
    assert pf.extra == {"fold": 0}
    assert all(np.array_equal(pf.profile.tensors[k], v) for k, v in prof.tensors.items())
    m = profile_model(ck, pf.profile)
    assert m.adapter_config == prof.adapter_config

    other = tiny_model.copy()
    other.params["out.b"] = other.params["out.b"] + 1
    ck2 = make_ckpt(other)
    with pytest.raises(ProfileMismatch) as err:
        load_profile(tmp_path / "p.prof", ck2)
    assert ck.config_hash in str(err.value) and ck2.config_hash in str(err.value)


def test_corrupt_files_raise_format_error(tmp_path, tiny_model):
    save_checkpoint(tmp_path / "a.ckpt", make_ckpt(tiny_model))
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m.ckpt")
    with pytest.raises(FormatError):
        load_profile(tmp_path / "a.ckpt")


def test_write_json_is_canonical(tmp_path):
    write_json(tmp_path / "a.json", {"b": 1, "a": [1.5, None]})
    write_json(tmp_path / "b.json", {"a": [1.5, None], "b": 1})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    with pytest.raises(ValueError):
        write_json(tmp_path / "c.json", {"x": float("nan")})
