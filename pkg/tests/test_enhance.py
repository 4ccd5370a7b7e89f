import numpy as np
import pytest

from aesthadapt.data import AugmentationConfig
from aesthadapt.enhance import EnhanceConfig, enhance, score_and_grad
from aesthadapt.model import AdapterConfig, Placement, TrainMode, attach_adapters, make_profile
from aesthadapt.numerics import RandomSource

NORM = AugmentationConfig(channel_mean=(0.4, 0.5, 0.45), channel_std=(0.2, 0.25, 0.3))


def image(seed, h=12, w=10):
    return np.random.default_rng(seed).random((3, h, w)).astype(np.float32)


def test_zero_epsilon_is_bit_identity(tiny_model):
    img = image(0)
    res = enhance(img, tiny_model, config=EnhanceConfig(0.0), norm=NORM)
    assert res.image.dtype == img.dtype and np.array_equal(res.image, img)
    assert res.score_after == res.score_before


def test_small_step_raises_score_and_stays_clamped(tiny_model64):
    for seed in range(5):
        res = enhance(image(seed), tiny_model64, config=EnhanceConfig(1e-3), norm=NORM)
        assert res.score_after > res.score_before
        assert res.image.min() >= 0 and res.image.max() <= 1
        assert res.image.shape == (3, 12, 10)


def test_large_step_clamps(tiny_model):
    res = enhance(image(1), tiny_model, config=EnhanceConfig(1e6), norm=NORM)
    assert res.image.min() >= 0 and res.image.max() <= 1
    assert np.isin(res.image, [0.0, 1.0]).mean() > 0.5


def test_gradient_matches_finite_difference(tiny_model64):
    img = image(2).astype(np.float64)
    s0, g = score_and_grad(img, tiny_model64, None, NORM)
    rng = np.random.default_rng(0)
    for _ in range(5):
        c, i, j = rng.integers(3), rng.integers(12), rng.integers(10)
        e = np.zeros_like(img)
        e[c, i, j] = 1e-6
        hi, _ = score_and_grad(img + e, tiny_model64, None, NORM, need_grad=False)
        lo, _ = score_and_grad(img - e, tiny_model64, None, NORM, need_grad=False)
        assert abs((hi - lo) / 2e-6 - g[c, i, j]) < 1e-5 * max(1, abs(g[c, i, j]))


def test_multi_step_records_scores(tiny_model):
    res = enhance(image(3), tiny_model, config=EnhanceConfig(1e-3, steps=3), norm=NORM)
    assert len(res.step_scores) == 4
    assert res.step_scores[0] == res.score_before and res.step_scores[-1] == res.score_after
    side = res.sidecar(EnhanceConfig(1e-3, steps=3))
    assert side["delta"] == pytest.approx(res.score_after - res.score_before)
    assert (side["height"], side["width"]) == (12, 10)


def test_profile_is_used(tiny_model):
    adapted = attach_adapters(tiny_model, AdapterConfig(Placement.ALL_BLOCKS))
    prof = make_profile(adapted, "u", TrainMode.ADAPTERS_PLUS_BOTTLENECK)
    prof.tensors["out.b"] = prof.tensors["out.b"] + 2
    a = enhance(image(4), adapted, None, EnhanceConfig(0.0), NORM)
    b = enhance(image(4), adapted, prof, EnhanceConfig(0.0), NORM)
    assert b.score_before == pytest.approx(a.score_before + 2, abs=1e-5)


def test_input_validation(tiny_model):
    with pytest.raises(ValueError):
        enhance(np.zeros((4, 5, 5), np.float32), tiny_model)
    with pytest.raises(ValueError):
        enhance(np.full((3, 5, 5), 1.5, np.float32), tiny_model)
    with pytest.raises(ValueError):
        enhance(np.zeros((3, 0, 5), np.float32), tiny_model)
    with pytest.raises(ValueError):
        EnhanceConfig(-1.0)
    with pytest.raises(ValueError):
        EnhanceConfig(0.1, steps=0)
