"""Scalar metrics, the combined score, reliability and selection fitness."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreWeights:
    alpha: float = 0.8
    beta: float = 0.1
    gamma: float = 0.1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0 or self.alpha + self.beta + self.gamma <= 0:
            raise ValueError("score weights must be >= 0 with a positive sum")


@dataclass(frozen=True)
class FitnessWeights:
    accuracy: float = 1.0
    reliability: float = 0.5
    complexity: float = 0.1
    complexity_scale: float = 1e4

    def __post_init__(self):
        if min(self.accuracy, self.reliability, self.complexity) < 0 or self.complexity_scale <= 0:
            raise ValueError("fitness weights must be >= 0 and complexity_scale > 0")


@dataclass(frozen=True)
class MetricBundle:
    mae: float
    rmse: float
    sign_accuracy: float
    spearman_rho: float
    combined_score: float

    def to_dict(self) -> dict:
        return {
            "mae": fmt(self.mae),
            "rmse": fmt(self.rmse),
            "sign_accuracy": fmt(self.sign_accuracy),
            "spearman_rho": fmt(self.spearman_rho),
            "combined_score": fmt(self.combined_score),
        }

    def serialize(self) -> str:
        d = self.to_dict()
        return ";".join(f"{k}={d[k]}" for k in sorted(d))


def fmt(x: float) -> str:
    """Fixed 6-fractional-digit rendering used in logs and determinism checks."""
    return f"{x:.6f}"


def _as_arrays(pred, labels):
    p = np.asarray(pred, dtype=float)
    y = np.asarray(labels, dtype=float)
    if p.shape != y.shape or p.ndim != 1 or p.size == 0:
        raise ValueError(f"predictions and labels must be equal-length nonempty vectors "
                         f"(got {p.shape} and {y.shape})")
    if not (np.isfinite(p).all() and np.isfinite(y).all()):
        raise ValueError("non-finite predictions or labels")
    return p, y


def error_metrics(pred, labels) -> tuple[float, float]:
    p, y = _as_arrays(pred, labels)
    r = p - y
    return float(np.mean(np.abs(r))), float(np.sqrt(np.mean(r * r)))


def pair_indices(pairs) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a PairSet, an ``(i, j)`` tuple of arrays or a list of pairs."""
    if pairs is None:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    if hasattr(pairs, "i"):
        return np.asarray(pairs.i, dtype=np.int64), np.asarray(pairs.j, dtype=np.int64)
    if isinstance(pairs, tuple) and len(pairs) == 2 and np.ndim(pairs[0]) == 1:
        return np.asarray(pairs[0], dtype=np.int64), np.asarray(pairs[1], dtype=np.int64)
    arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def sign_accuracy(pred, labels, pairs) -> float:
    """Fraction of pairs whose predicted difference has the true sign.

    ``pairs`` index ``pred`` and ``labels`` (see :func:`pair_indices`).
    Predicted ties are counted as wrong.
    """
    p, y = _as_arrays(pred, labels)
    i, j = pair_indices(pairs)
    if len(i) == 0:
        raise UndefinedMetricError("sign accuracy needs at least one pair")
    dp = np.sign(p[i] - p[j])
    dy = np.sign(y[i] - y[j])
    return float(np.mean((dp == dy) & (dp != 0)))


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(len(x))
    start = 0
    n = len(x)
    while start < n:
        stop = start + 1
        while stop < n and sx[stop] == sx[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def spearman(pred, labels) -> float:
    p, y = _as_arrays(pred, labels)
    if len(p) < 2:
        raise UndefinedMetricError("spearman needs at least two samples")
    rp, ry = average_ranks(p), average_ranks(y)
    rp -= rp.mean()
    ry -= ry.mean()
    den = math.sqrt(float(rp @ rp) * float(ry @ ry))
    if den == 0:
        raise UndefinedMetricError("zero rank variance")
    return float(np.clip((rp @ ry) / den, -1.0, 1.0))


def combined_score(sign_acc: float, mae: float, rmse: float, w: ScoreWeights = ScoreWeights()) -> float:
    if not 0.0 <= sign_acc <= 1.0:
        raise ValueError(f"sign accuracy {sign_acc} outside [0, 1]")
    if mae < 0 or rmse < 0:
        raise ValueError("mae and rmse must be >= 0")
    return w.alpha * sign_acc + w.beta / (1.0 + rmse) + w.gamma / (1.0 + mae)


def bundle(pred, labels, pairs, w: ScoreWeights = ScoreWeights()) -> MetricBundle:
    """All validation metrics for one (seed, fold) run.

    A constant predictor has no rank information; its Spearman correlation is
    reported as 0 rather than raising.
    """
    mae, rmse = error_metrics(pred, labels)
    acc = sign_accuracy(pred, labels, pairs)
    try:
        rho = spearman(pred, labels)
    except UndefinedMetricError:
        rho = 0.0
    return MetricBundle(mae=mae, rmse=rmse, sign_accuracy=acc, spearman_rho=rho,
                        combined_score=combined_score(acc, mae, rmse, w))


def population_std(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=float)
    return float(np.sqrt(np.mean((v - v.mean()) ** 2)))


def reliability(per_seed_scores: Sequence[float]) -> float:
    if len(per_seed_scores) < 2:
        raise ValueError("reliability needs at least two seed scores")
    return 1.0 - population_std(per_seed_scores)


@dataclass(frozen=True)
class Rejected:
    """Fitness marker for a candidate that failed a hard gate."""
    gate: str = ""

    def __bool__(self):
        return False


REJECTED = Rejected()


def fitness_value(mean_rho: float, rel: float, n_params: int, w: FitnessWeights = FitnessWeights()) -> float:
    return w.accuracy * mean_rho + w.reliability * rel - w.complexity * (n_params / w.complexity_scale)


def fitness(e, w: FitnessWeights = FitnessWeights()):
    """Fitness of an evaluation, or a :class:`Rejected` marker if any gate failed."""
    if e.rejected:
        return Rejected(e.failed_gate or "")
    return fitness_value(e.aggregate.spearman_rho, e.reliability, e.n_params, w)


def fitness_key(f) -> tuple:
    """Total-order key: every rejected marker sorts below every accepted value."""
    if isinstance(f, Rejected) or f is None:
        return (0, 0.0)
    return (1, float(f))


def qd_score(archive) -> float:
    cells: Iterable = archive.values() if isinstance(archive, Mapping) else archive
    total = 0.0
    for c in cells:
        total += float(getattr(c, "fitness", c))
    return total


PUBLISHED_ROWS = {
    # operator: (combined score, sign accuracy, MAE, RMSE)
    "gemini-3.0-pro": (0.9335, 0.9180, 0.0279, 0.0354),
    "gpt-5.2": (0.8880, 0.8671, 0.0261, 0.0322),
    "gemini-2.5-pro": (0.8832, 0.8617, 0.0283, 0.0352),
    "qwen3-coder-480b": (0.8702, 0.8454, 0.0285, 0.0353),
    "deepseek-r1": (0.8437, 0.8121, 0.0276, 0.0339),
    "deepseek-v3.2-think": (0.8241, 0.7917, 0.0447, 0.0546),
    "deepseek-v3.2": (0.6269, 0.5471, 0.0519, 0.0637),
}


def recover_weights(rows: Mapping[str, tuple] = PUBLISHED_ROWS, exclude: Sequence[str] = ("gemini-3.0-pro",),
                    resolution: float = 0.05) -> list[tuple[float, tuple[float, float, float]]]:
    """Grid search over the weight simplex, best first.

    Returns (max absolute residual, (alpha, beta, gamma)) for every grid point,
    sorted ascending by residual.
    """
    steps = int(round(1.0 / resolution))
    used = [r for name, r in rows.items() if name not in set(exclude)]
    out = []
    for ia in range(steps + 1):
        for ib in range(steps + 1 - ia):
            ig = steps - ia - ib
            w = ScoreWeights(ia / steps, ib / steps, ig / steps)
            worst = max(abs(combined_score(s, m, r, w) - c) for c, s, m, r in used)
            out.append((worst, (w.alpha, w.beta, w.gamma)))
    out.sort()
    return out

