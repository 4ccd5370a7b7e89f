"""Adam with step decay, generic training, per-user adaptation and the regime suite."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import NormalizationStats, Preprocessor, RatingRecord, fit_normalization, normalize_ratings, records_by_user
from .evaluation import EvalReport, UserEvalResult, aggregate, combine_folds, evaluate_user
from .model import (
    AdapterConfig,
    AestheticsNet,
    Placement,
    TrainMode,
    UserProfile,
    attach_adapters,
    make_profile,
    partition_parameters,
)
from .numerics import RandomSource

log = logging.getLogger(__name__)


class DivergenceError(nx.NumericalError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    lr0: float = 0.001
    factor: float = 0.9
    period: int = 2

    def __post_init__(self):
        if not self.lr0 > 0 or not 0 < self.factor <= 1 or self.period < 1:
            raise ValueError("need lr0 > 0, 0 < factor <= 1, period >= 1")


def lr_at(epoch: int, schedule: ScheduleConfig = ScheduleConfig()) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return schedule.lr0 * schedule.factor ** (epoch // schedule.period)


@dataclass(frozen=True)
class WeightDecayPolicy:
    """L2 penalty applied to adapter tensors only."""

    coefficient: float = 0.005

    def applies(self, name: str) -> bool:
        return ".adapter." in name


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    decay: WeightDecayPolicy | None = WeightDecayPolicy(),
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update of every parameter that has a gradient.

    Returns a new parameter dict (untouched entries are shared); ``state`` is
    advanced in place.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1**state.t, 1 - b2**state.t
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise nx.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise nx.NumericalError(f"non-finite gradient for {name}")
        g = g.astype(np.float64)
        if decay is not None and decay.applies(name):
            g = g + decay.coefficient * p
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = (p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return out


def _batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a lone trailing sample cannot be batch-normalized in training mode
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def fit_epochs(
    model: AestheticsNet,
    records: Sequence[RatingRecord],
    prep: Preprocessor,
    trainable: dict[str, np.ndarray],
    buffers: dict[str, np.ndarray],
    epochs: int,
    batch_size: int,
    schedule: ScheduleConfig,
    rng: RandomSource,
    decay: WeightDecayPolicy | None = WeightDecayPolicy(),
    on_epoch: Callable[[int, float], None] | None = None,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], list[float]]:
    """Minimize MSE over ``records`` w.r.t. ``trainable`` (overlaid on the model).

    ``buffers`` are the running statistics owned by this job; only those are
    updated. Returns the trained tensors, buffers and per-epoch mean loss.
    """
    if not records:
        raise ValueError("cannot train on an empty record set")
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2 (batch norm trains on batch statistics)")
    names = frozenset(trainable)
    state = OptimizerState()
    targets = np.array([r.rating for r in records], dtype=model.dtype)
    refs = [r.image for r in records]
    losses = []
    for epoch in range(epochs):
        erng = rng.child("epoch", epoch)
        lr = lr_at(epoch, schedule)
        total = 0.0
        for b, idx in enumerate(_batches(len(records), batch_size, erng.permutation(len(records)))):
            brng = erng.child("batch", b)
            x = prep.train_batch([refs[i] for i in idx], brng.child("augment"))
            try:
                res = model.apply(x, training=True, rng=brng.child("dropout"), trainable=names, overrides={**trainable, **buffers})
                loss = nx.mse(res.scores, targets[idx])
                grads = nx.backward(loss)
            except nx.NumericalError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, batch {b}: {exc}") from exc
            trainable = adam_step(trainable, {k: grads.get(res.leaves[k], np.zeros_like(trainable[k])) for k in names}, state, lr, decay)
            buffers = {k: res.buffers[k] for k in buffers}
            total += float(loss.data) * len(idx)
        mean_loss = total / len(records)
        if not math.isfinite(mean_loss):
            raise DivergenceError(f"non-finite mean loss at epoch {epoch}")
        losses.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return trainable, buffers, losses


@dataclass
class GenericTrainResult:
    model: AestheticsNet
    stats: NormalizationStats
    losses: list[float]


def train_generic(
    model: AestheticsNet,
    records: Sequence[RatingRecord],
    prep: Preprocessor,
    epochs: int = 30,
    batch_size: int = 16,
    schedule: ScheduleConfig = ScheduleConfig(),
    rng: RandomSource | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> GenericTrainResult:
    """Train every non-adapter parameter on the raw-rated training split.

    Ratings are normalized with statistics fitted on ``records`` themselves.
    """
    if not records:
        raise ValueError("generic training needs a non-empty split")
    stats = fit_normalization(records)
    norm = normalize_ratings(records, stats)
    rng = rng or RandomSource(0)
    trainable = dict(partition_parameters(model, TrainMode.GENERIC_ALL).user_specific)
    params, buffers, losses = fit_epochs(
        model, norm, prep, trainable, dict(model.buffers), epochs, batch_size, schedule, rng.child("generic"), None, on_epoch
    )
    trained = model.copy()
    trained.params.update(params)
    trained.buffers.update(buffers)
    return GenericTrainResult(trained, stats, losses)


@dataclass(frozen=True)
class FoldPlan:
    """``n_observed`` ratings for training; ``kind`` is "random" (independent draws) or "rotating"."""

    n_observed: int
    repeats: int
    kind: str = "random"

    @classmethod
    def n10(cls) -> "FoldPlan":
        return cls(10, 10, "random")

    @classmethod
    def n100(cls) -> "FoldPlan":
        return cls(100, 3, "rotating")

    def to_dict(self) -> dict:
        return {"n_observed": self.n_observed, "repeats": self.repeats, "kind": self.kind}


def make_folds(records: Sequence[RatingRecord], plan: FoldPlan, rng: RandomSource) -> list[tuple[list[RatingRecord], list[RatingRecord]]]:
    """Split one user's ratings into (observed, holdout) pairs.

    "random": each repeat draws ``n_observed`` ratings independently.
    "rotating": one shuffle, then window ``k`` starts at ``k*L/repeats`` and
    wraps around, so with ``L = n_observed * repeats / (repeats - 1)`` the
    holdouts tile the user's ratings exactly (classic k-fold).
    """
    L = len(records)
    if L <= plan.n_observed:
        raise ValueError(f"user has {L} ratings; need more than {plan.n_observed}")
    folds = []
    if plan.kind == "random":
        for k in range(plan.repeats):
            pick = set(rng.child("draw", k).choice(L, size=plan.n_observed, replace=False).tolist())
            folds.append(([records[i] for i in sorted(pick)], [records[i] for i in range(L) if i not in pick]))
    elif plan.kind == "rotating":
        perm = rng.child("shuffle").permutation(L)
        for k in range(plan.repeats):
            start = (k * L) // plan.repeats
            pick = {int(perm[(start + j) % L]) for j in range(plan.n_observed)}
            folds.append(([records[i] for i in sorted(pick)], [records[i] for i in range(L) if i not in pick]))
    else:
        raise ValueError(f"unknown fold plan kind {plan.kind!r}")
    return folds


@dataclass
class FoldResult:
    profile: UserProfile
    observed: list[RatingRecord]
    holdout: list[RatingRecord]
    losses: list[float]
    fold: int


def adapt_user(
    model: AestheticsNet,
    records: Sequence[RatingRecord],
    mode: TrainMode | str,
    plan: FoldPlan,
    prep: Preprocessor,
    epochs: int = 15,
    batch_size: int = 16,
    rng: RandomSource | None = None,
    schedule: ScheduleConfig = ScheduleConfig(),
    decay: WeightDecayPolicy = WeightDecayPolicy(),
) -> list[FoldResult]:
    """Fit one user's profile on each fold's observed ratings (already normalized).

    ``model`` is never modified: every fold starts from a profile initialised
    with the model's current values for the mode's user-specific partition.
    """
    mode = TrainMode(mode)
    if mode is TrainMode.GENERIC_ALL:
        raise ValueError("generic_all is not a user adaptation mode")
    if mode is TrainMode.ADAPTERS_PLUS_BOTTLENECK and (model.adapter_config.placement is Placement.NONE or not model.has_adapters):
        raise ValueError("adapters_plus_bottleneck needs adapters attached (placement is none)")
    if not records:
        raise ValueError("no ratings for this user")
    user = records[0].user
    rng = rng or RandomSource(0)
    results = []
    for k, (observed, holdout) in enumerate(make_folds(list(records), plan, rng.child("folds"))):
        base = make_profile(model, user, mode)
        trainable = {n: v for n, v in base.tensors.items() if n in model.params}
        buffers = {n: v for n, v in base.tensors.items() if n in model.buffers}
        params, buffers, losses = fit_epochs(
            model, observed, prep, trainable, buffers, epochs, min(batch_size, len(observed)), schedule, rng.child("fold", k), decay
        )
        profile = UserProfile(user, mode, model.adapter_config, {**params, **buffers})
        results.append(FoldResult(profile, observed, holdout, losses, k))
    return results


@dataclass(frozen=True)
class Regime:
    """One row of the comparison table; ``mode=None`` is the generic baseline."""

    name: str
    mode: TrainMode | None = None
    plan: FoldPlan | None = None
    adapters: AdapterConfig = AdapterConfig()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mode": self.mode.value if self.mode else None,
            "plan": self.plan.to_dict() if self.plan else None,
            "adapters": self.adapters.to_dict(),
        }


def table_regimes() -> list[Regime]:
    """The nine comparison regimes: baseline, N=10 and N=100 head-only, full fine-tune, adapter variants."""
    ab = TrainMode.ADAPTERS_PLUS_BOTTLENECK
    return [
        Regime("baseline"),
        Regime("n10_bottleneck", TrainMode.BOTTLENECK_ONLY, FoldPlan.n10()),
        Regime("n100_bottleneck", TrainMode.BOTTLENECK_ONLY, FoldPlan.n100()),
        Regime("n100_full_finetune", TrainMode.FULL_FINETUNE, FoldPlan.n100()),
        Regime("n100_adapters_late", ab, FoldPlan.n100(), AdapterConfig(Placement.LATE_BLOCKS, "full")),
        Regime("n100_adapters_all", ab, FoldPlan.n100(), AdapterConfig(Placement.ALL_BLOCKS, "full")),
        Regime("n100_k1_1", ab, FoldPlan.n100(), AdapterConfig(Placement.ALL_BLOCKS, "1")),
        Regime("n100_k1_quarter", ab, FoldPlan.n100(), AdapterConfig(Placement.ALL_BLOCKS, "quarter")),
        Regime("n100_k1_half", ab, FoldPlan.n100(), AdapterConfig(Placement.ALL_BLOCKS, "half")),
    ]


def run_regime_suite(
    model: AestheticsNet,
    test_records: Sequence[RatingRecord],
    regimes: Sequence[Regime],
    prep: Preprocessor,
    stats: NormalizationStats,
    rng: RandomSource,
    epochs: int = 15,
    batch_size: int = 16,
    schedule: ScheduleConfig = ScheduleConfig(),
) -> dict[str, EvalReport]:
    """Run every regime for every test user and aggregate per-user rho.

    Seeds depend only on (master seed, user), so all regimes see the same
    observed/holdout draws for a given plan.
    """
    by_user = records_by_user(normalize_ratings(test_records, stats))
    reports = {}
    for regime in regimes:
        adapted = model
        if regime.mode is TrainMode.ADAPTERS_PLUS_BOTTLENECK:
            adapted = attach_adapters(model, regime.adapters, rng.child("adapters"))
        per_user: list[UserEvalResult] = []
        for user in sorted(by_user):
            recs = by_user[user]
            if regime.mode is None:
                per_user.append(evaluate_user(model, None, recs, prep, user))
                continue
            folds = adapt_user(adapted, recs, regime.mode, regime.plan, prep, epochs, batch_size, rng.child("user", user), schedule)
            fold_results = [evaluate_user(adapted, f.profile, f.holdout, prep, user) for f in folds]
            per_user.append(combine_folds(fold_results))
            log.info("%s %s rho=%.3f", regime.name, user, per_user[-1].rho)
        report = aggregate(per_user)
        report.extra["regime"] = regime.to_dict()
        reports[regime.name] = report
    return reports
