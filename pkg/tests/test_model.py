import numpy as np
import pytest

from aesthadapt.model import (
    AdapterConfig,
    BackboneConfig,
    Placement,
    ProfileMismatch,
    TrainMode,
    attach_adapters,
    build_backbone,
    check_profile,
    forward,
    make_profile,
    parameter_count,
    partition_parameters,
    predict,
)
from aesthadapt.numerics import RandomSource, ShapeError

DESK = BackboneConfig()


def enumerate_backbone_params(cfg: BackboneConfig) -> int:
    """Parameter count derived by walking the architecture by hand."""
    c = cfg.stage_channels
    total = 3 * c[0] * 9 + 2 * c[0]  # stem conv + bn
    cin = c[0]
    for s, cout in enumerate(c):
        for b in range(cfg.blocks_per_stage):
            stride = 2 if s > 0 and b == 0 else 1
            total += cin * cout * 9 + 2 * cout + cout * cout * 9 + 2 * cout
            if stride != 1 or cin != cout:
                total += cin * cout + 2 * cout
            cin = cout
    w = cfg.head_width
    head = (c[-1] * w + w + 1 + 2 * w) + 2 * (w * w + w + 1 + 2 * w) + (w + 1)
    return total + head


def enumerate_adapter_params(cfg: BackboneConfig, placement: str, k1_of) -> int:
    c = cfg.stage_channels
    total, cin = 0, c[0]
    for s, cout in enumerate(c):
        for b in range(cfg.blocks_per_stage):
            for (ci, co) in ((cin, cout), (cout, cout)):
                if placement == "all" or s >= 1:
                    k1 = k1_of(co)
                    total += ci * co if k1 is None else ci * k1 + k1 * k1 + k1 * co
            cin = cout
    return total


def test_backbone_count_matches_enumeration():
    model = build_backbone(DESK, RandomSource(0))
    assert model.num_parameters() == enumerate_backbone_params(DESK)
    big = BackboneConfig.full_scale()
    assert enumerate_backbone_params(big) > 11_000_000


@pytest.mark.parametrize("reduction", ["full", "1", "quarter", "half"])
@pytest.mark.parametrize("placement", [Placement.ALL_BLOCKS, Placement.LATE_BLOCKS])
def test_adapter_counts_match_enumeration(reduction, placement):
    cfg = AdapterConfig(placement, reduction)
    base = build_backbone(DESK, RandomSource(0))
    adapted = attach_adapters(base, cfg, RandomSource(1))
    added = adapted.num_parameters() - base.num_parameters()
    assert added == enumerate_adapter_params(DESK, "all" if placement is Placement.ALL_BLOCKS else "late", cfg.k1)


def test_square_adapter_closed_forms():
    base = build_backbone(DESK, RandomSource(0))
    full = attach_adapters(base, AdapterConfig(Placement.ALL_BLOCKS, "full"))
    red = attach_adapters(base, AdapterConfig(Placement.ALL_BLOCKS, "1"))
    for spec in full.adapted_convs():
        if spec.cin == spec.cout:
            k = spec.cout
            assert sum(np.prod(s) for s in full.adapter_shapes(spec).values()) == k * k
            assert sum(np.prod(s) for s in red.adapter_shapes(spec).values()) == 2 * k + 1
    k, k1 = 64, 1
    assert k * k1 + k1 * k1 + k1 * k == 129


def test_k1_values():
    assert AdapterConfig(Placement.ALL_BLOCKS, "quarter").k1(64) == 16
    assert AdapterConfig(Placement.ALL_BLOCKS, "half").k1(64) == 32
    assert AdapterConfig(Placement.ALL_BLOCKS, "1").k1(64) == 1
    assert AdapterConfig(Placement.ALL_BLOCKS, "full").k1(64) is None
    with pytest.raises(ValueError):
        AdapterConfig(Placement.ALL_BLOCKS, "eighth")


def test_user_specific_ordering():
    base = build_backbone(DESK, RandomSource(0))
    full = attach_adapters(base, AdapterConfig(Placement.ALL_BLOCKS, "full"))
    k1 = attach_adapters(base, AdapterConfig(Placement.ALL_BLOCKS, "1"))
    n_bottle = parameter_count(base, partition_parameters(base, TrainMode.BOTTLENECK_ONLY))["user_specific"]
    n_k1 = parameter_count(k1, partition_parameters(k1, TrainMode.ADAPTERS_PLUS_BOTTLENECK))["user_specific"]
    n_full = parameter_count(full, partition_parameters(full, TrainMode.ADAPTERS_PLUS_BOTTLENECK))["user_specific"]
    n_ft = parameter_count(base, partition_parameters(base, TrainMode.FULL_FINETUNE))["user_specific"]
    assert n_bottle < n_k1 < n_full < n_ft


def test_partitions_are_disjoint_and_cover():
    m = attach_adapters(build_backbone(DESK, RandomSource(0)), AdapterConfig(Placement.LATE_BLOCKS, "full"))
    for mode in TrainMode:
        part = partition_parameters(m, mode)
        assert set(part.generic) | set(part.user_specific) == set(m.params)
        assert not set(part.generic) & set(part.user_specific)
    bottle = partition_parameters(m, TrainMode.BOTTLENECK_ONLY).user_specific
    assert all(k.startswith(("head.", "out.")) for k in bottle)
    generic = partition_parameters(m, TrainMode.GENERIC_ALL).user_specific
    assert not any(".adapter." in k for k in generic)


def test_zero_adapters_are_identity(tiny_model):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(10, 3, 11, 9)).astype(np.float32)
    for red in ("full", "1", "half"):
        adapted = attach_adapters(tiny_model, AdapterConfig(Placement.ALL_BLOCKS, red), RandomSource(2))
        np.testing.assert_array_equal(predict(adapted, None, x), predict(tiny_model, None, x))


def test_attach_twice_is_error(tiny_model):
    a = attach_adapters(tiny_model, AdapterConfig(Placement.ALL_BLOCKS))
    with pytest.raises(ValueError):
        attach_adapters(a, AdapterConfig(Placement.ALL_BLOCKS))


def test_late_blocks_skip_first_stage(tiny_model):
    a = attach_adapters(tiny_model, AdapterConfig(Placement.LATE_BLOCKS))
    names = {k for k in a.params if ".adapter." in k}
    assert names and not any(k.startswith("s0.") for k in names)
    assert not any(k.startswith("stem") for k in names)


def test_forward_shapes_and_eval_determinism(tiny_model):
    x = np.random.default_rng(1).normal(size=(4, 3, 8, 8)).astype(np.float32)
    a = forward(tiny_model, None, x).data
    b = forward(tiny_model, None, x).data
    assert a.shape == (4,) and np.array_equal(a, b)
    t1 = forward(tiny_model, None, x, training=True, rng=RandomSource(1)).data
    t2 = forward(tiny_model, None, x, training=True, rng=RandomSource(2)).data
    assert not np.array_equal(t1, t2)
    with pytest.raises(ShapeError):
        forward(tiny_model, None, x[:, :2])


def test_frozen_bn_keeps_statistics(tiny_model):
    x = np.random.default_rng(1).normal(size=(4, 3, 8, 8)).astype(np.float32)
    res = tiny_model.apply(x, training=True, rng=RandomSource(0), trainable={"head.0.bn.gamma", "head.0.bn.beta"})
    for k, v in res.buffers.items():
        if k.startswith("head.0.bn"):
            assert not np.array_equal(v, tiny_model.buffers[k])
        else:
            assert v is tiny_model.buffers[k]


def test_profile_roundtrip_and_mismatch(tiny_model):
    adapted = attach_adapters(tiny_model, AdapterConfig(Placement.ALL_BLOCKS))
    prof = make_profile(adapted, "u1", TrainMode.ADAPTERS_PLUS_BOTTLENECK)
    check_profile(adapted, prof)
    assert prof.adapter_weights and prof.head_weights and prof.bn_params
    with pytest.raises(ProfileMismatch):
        check_profile(tiny_model, prof)
    bad = make_profile(adapted, "u1", TrainMode.ADAPTERS_PLUS_BOTTLENECK)
    k = next(iter(bad.adapter_weights))
    bad.tensors[k] = np.zeros((1, 1, 1, 1), np.float32)
    with pytest.raises(ProfileMismatch):
        check_profile(adapted, bad)
    bottle = make_profile(tiny_model, "u1", TrainMode.BOTTLENECK_ONLY)
    bottle.tensors["stem.conv.w"] = tiny_model.params["stem.conv.w"]
    with pytest.raises(ProfileMismatch):
        check_profile(tiny_model, bottle)


def test_profile_overrides_change_output(tiny_model):
    x = np.random.default_rng(3).normal(size=(3, 3, 8, 8)).astype(np.float32)
    prof = make_profile(tiny_model, "u", TrainMode.BOTTLENECK_ONLY)
    np.testing.assert_array_equal(predict(tiny_model, prof, x), predict(tiny_model, None, x))
    prof.tensors["out.b"] = prof.tensors["out.b"] + 1
    np.testing.assert_allclose(predict(tiny_model, prof, x), predict(tiny_model, None, x) + 1, atol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(stage_channels=(8, 8, 16, 32))
    with pytest.raises(ValueError):
        BackboneConfig(head_blocks=2)
    with pytest.raises(ValueError):
        BackboneConfig(dropout_p=1.0)
    assert BackboneConfig.from_dict(DESK.to_dict()) == DESK


def test_build_is_seed_deterministic(tiny_config):
    a = build_backbone(tiny_config, RandomSource(4))
    b = build_backbone(tiny_config, RandomSource(4))
    c = build_backbone(tiny_config, RandomSource(5))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params if k.endswith(".w"))
