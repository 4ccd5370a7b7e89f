"""Spearman rank correlation, per-user evaluation and table-style aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import Preprocessor, RatingRecord
from .model import AestheticsNet, UserProfile, predict


class DegenerateRanking(ValueError):
    """One side of a rank correlation is constant (or too short), so rho is undefined."""


def spearman(truth, pred) -> float:
    """Pearson correlation of average ranks; ties share the mean of their positions."""
    a = np.asarray(truth, dtype=np.float64).ravel()
    b = np.asarray(pred, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"spearman needs equal lengths, got {a.size} and {b.size}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("spearman inputs must be finite")
    if a.size < 2:
        raise DegenerateRanking("spearman needs at least 2 values")
    ra, rb = rankdata(a), rankdata(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0 or sbb == 0:
        raise DegenerateRanking("all values tied on one side; rank correlation undefined")
    return float(np.clip((da @ db) / math.sqrt(saa * sbb), -1.0, 1.0))


@dataclass(frozen=True)
class UserEvalResult:
    user_id: str
    rho: float
    n_holdout: int
    flag: str | None = None

    def to_dict(self) -> dict:
        d = {"user_id": self.user_id, "rho": self.rho, "n_holdout": self.n_holdout}
        if self.flag:
            d["flag"] = self.flag
        return d


@dataclass
class EvalReport:
    results: list[UserEvalResult]
    mean_rho: float
    sigma_rho: float
    median_rho: float
    min_rho: float
    max_rho: float
    global_rho: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "per_user": [r.to_dict() for r in self.results],
            "mean_rho": self.mean_rho,
            "sigma_rho": self.sigma_rho,
            "median_rho": self.median_rho,
            "min_rho": self.min_rho,
            "max_rho": self.max_rho,
        }
        if self.global_rho is not None:
            d["global_rho"] = self.global_rho
        d.update(self.extra)
        return d


def aggregate(results: Sequence[UserEvalResult]) -> EvalReport:
    """Mean, population sigma, lower median, min and max of per-user rho.

    Sums use ``math.fsum`` so the report does not depend on input order.
    """
    if not results:
        raise ValueError("cannot aggregate zero results")
    ordered = sorted(results, key=lambda r: r.user_id)
    rhos = sorted(r.rho for r in ordered)
    n = len(rhos)
    mean = math.fsum(rhos) / n
    sigma = math.sqrt(math.fsum((r - mean) ** 2 for r in rhos) / n)
    return EvalReport(list(ordered), mean, sigma, rhos[(n - 1) // 2], rhos[0], rhos[-1])


def combine_folds(results: Sequence[UserEvalResult]) -> UserEvalResult:
    """Average one user's per-fold rho into a single result."""
    users = {r.user_id for r in results}
    if len(users) != 1:
        raise ValueError(f"expected results for one user, got {sorted(users)}")
    flags = sorted({r.flag for r in results if r.flag})
    return UserEvalResult(
        results[0].user_id,
        math.fsum(r.rho for r in results) / len(results),
        sum(r.n_holdout for r in results),
        "; ".join(flags) or None,
    )


def evaluate_user(
    model: AestheticsNet,
    profile: UserProfile | None,
    holdout: Sequence[RatingRecord],
    prep: Preprocessor,
    user_id: str | None = None,
) -> UserEvalResult:
    """Rank correlation between a user's (normalized) ratings and eval-mode predictions.

    Constant predictions or constant ratings give rho = 0 with a ``flag``
    explaining why, instead of an exception, so one degenerate user does not
    sink a whole report.
    """
    if len(holdout) < 2:
        raise DegenerateRanking("holdout needs at least 2 records")
    uid = user_id or holdout[0].user
    pred = predict(model, profile, prep.eval_batch([r.image for r in holdout]))
    truth = [r.rating for r in holdout]
    try:
        return UserEvalResult(uid, spearman(truth, pred), len(holdout))
    except DegenerateRanking as exc:
        return UserEvalResult(uid, 0.0, len(holdout), flag=str(exc))


def global_rho(model: AestheticsNet, records: Sequence[RatingRecord], prep: Preprocessor) -> float:
    """Rank correlation over distinct images, truth = mean of each image's ratings."""
    sums: dict[str, list[float]] = {}
    for r in records:
        sums.setdefault(r.image, []).append(r.rating)
    if len(sums) < 2:
        raise DegenerateRanking("global rho needs at least 2 distinct images")
    refs = sorted(sums)
    truth = [math.fsum(sums[k]) / len(sums[k]) for k in refs]
    return spearman(truth, predict(model, None, prep.eval_batch(refs)))
