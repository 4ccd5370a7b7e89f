"""Gradient-ascent enhancement: nudge pixels along the input-gradient of the predicted score."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import AugmentationConfig
from .model import AestheticsNet, UserProfile, check_profile
from .numerics import Tensor


@dataclass(frozen=True)
class EnhanceConfig:
    epsilon: float = 0.01
    steps: int = 1
    clamp: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")


@dataclass
class EnhanceResult:
    image: np.ndarray
    score_before: float
    score_after: float
    step_scores: list[float] = field(default_factory=list)

    @property
    def delta(self) -> float:
        return self.score_after - self.score_before

    @property
    def ratio(self) -> float | None:
        return self.score_after / self.score_before if self.score_before != 0 else None

    def sidecar(self, config: EnhanceConfig) -> dict:
        return {
            "epsilon": config.epsilon,
            "steps": config.steps,
            "score_before": self.score_before,
            "score_after": self.score_after,
            "delta": self.delta,
            "ratio": self.ratio,
            "step_scores": self.step_scores,
            "height": int(self.image.shape[1]),
            "width": int(self.image.shape[2]),
        }


def score_and_grad(
    image: np.ndarray, model: AestheticsNet, profile: UserProfile | None, norm: AugmentationConfig, need_grad: bool = True
) -> tuple[float, np.ndarray | None]:
    """Eval-mode score of a raw ``[3,H,W]`` image and its gradient w.r.t. the pixels."""
    x = Tensor(image[None].astype(model.dtype), requires_grad=need_grad)
    std = np.asarray(norm.channel_std, dtype=np.float64)
    xn = nx.channel_affine(x, 1.0 / std, -np.asarray(norm.channel_mean) / std)
    score = model.apply(xn, overrides=profile.tensors if profile else None).scores
    if not need_grad:
        return float(score.data[0]), None
    g = nx.backward(nx.tsum(score))[x][0]
    return float(score.data[0]), g


def enhance(
    image: np.ndarray,
    model: AestheticsNet,
    profile: UserProfile | None = None,
    config: EnhanceConfig = EnhanceConfig(),
    norm: AugmentationConfig = AugmentationConfig(),
) -> EnhanceResult:
    """Apply ``x <- clamp(x + epsilon * d score / d x)`` for ``config.steps`` steps.

    The image keeps its native resolution; only the network's internal view
    is pooled down. Dropout is off and batch norm uses running statistics.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3 or image.size == 0:
        raise ValueError(f"expected a non-empty [3,H,W] image, got shape {image.shape}")
    lo, hi = config.clamp
    if image.min() < lo or image.max() > hi:
        raise ValueError(f"pixel values must lie in [{lo}, {hi}]")
    if profile is not None:
        check_profile(model, profile)

    x = image.copy()
    scores = []
    for _ in range(config.steps):
        s, g = score_and_grad(x, model, profile, norm)
        if not np.isfinite(g).all():
            raise nx.NumericalError("non-finite input gradient")
        scores.append(s)
        x = np.clip(x + np.float32(config.epsilon) * g, lo, hi).astype(np.float32)
    after, _ = score_and_grad(x, model, profile, norm, need_grad=False)
    scores.append(after)
    return EnhanceResult(x, scores[0], after, scores)
