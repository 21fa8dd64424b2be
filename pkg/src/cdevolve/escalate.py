"""Screen-and-escalate simulation on top of a fitted multi-replica pipeline.

The surrogate accepts a design only when its replicas agree (spread at most
``sigma_max``) and the design sits inside the training envelope; everything
else is escalated to the high-fidelity solver.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .genome import Genome
from .phenotype import Pipeline
from .taskbench import Dataset
from .taskbench import split as make_split

ENVELOPE_MARGIN = 0.05


@dataclass(frozen=True)
class ScreeningDecision:
    sample_id: int
    mean: float
    sigma: float
    decision: str                 # accept | escalate
    reason: Optional[str] = None  # high_uncertainty | out_of_envelope

    def __post_init__(self):
        if (self.decision == "escalate") != (self.reason is not None):
            raise ValueError("escalations need a reason and acceptances must not have one")

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "mean": f"{self.mean:.6f}", "sigma": f"{self.sigma:.6f}",
                "decision": self.decision, "reason": self.reason or ""}


@dataclass(frozen=True)
class Envelope:
    lo: np.ndarray
    hi: np.ndarray
    columns: tuple

    @classmethod
    def from_training(cls, X, columns: Optional[Sequence[int]] = None, margin: float = ENVELOPE_MARGIN):
        X = np.asarray(X, dtype=float)
        cols = tuple(range(X.shape[1])) if columns is None else tuple(int(c) for c in columns)
        if margin < 0:
            raise ValueError("margin must be >= 0")
        sub = X[:, list(cols)]
        lo, hi = sub.min(0), sub.max(0)
        pad = margin * (hi - lo)
        return cls(lo=lo - pad, hi=hi + pad, columns=cols)

    def contains(self, X) -> np.ndarray:
        sub = np.atleast_2d(np.asarray(X, dtype=float))[:, list(self.columns)]
        return np.all((sub >= self.lo) & (sub <= self.hi), axis=1)


def fit_replicas(genome: Genome, ds: Dataset, train_idx, seeds: Sequence[int]) -> Pipeline:
    """A pipeline with one replica per seed on a common training set."""
    pipe = Pipeline(genome, ds)
    for s in seeds:
        pipe.fit(train_idx, s)
    return pipe


class SeedEnsemble:
    """One pipeline per seed, each trained on that seed's first training fold.

    Closed-form model families are deterministic given their training rows, so
    replicas on a shared training set would never disagree; drawing each
    replica's rows from its own seed's family-disjoint split gives spread that
    reflects family extrapolation.
    """

    def __init__(self, genome: Genome, ds: Dataset, seeds: Sequence[int]):
        if len(seeds) < 2:
            raise ValueError("an ensemble needs at least two seeds")
        self.genome, self.ds = genome, ds
        self.replicas = []
        rows = []
        for s in seeds:
            train = make_split(ds, genome.split, s).folds[0][0]
            pipe = Pipeline(genome, ds)
            pipe.fit(train, s)
            self.replicas.append(pipe)
            rows.append(train)
        self.train_idx = np.unique(np.concatenate(rows))

    def predict_with_uncertainty(self, X, versions=None):
        P = np.stack([p.predict(X, versions) for p in self.replicas])
        return P.mean(axis=0), P.std(axis=0)

    def predict(self, X, versions=None):
        return self.predict_with_uncertainty(X, versions)[0]


def pipeline_envelope(pipe, margin: float = ENVELOPE_MARGIN) -> Envelope:
    cols = [k for k, on in enumerate(pipe.genome.data_ops.feature_mask) if on]
    return Envelope.from_training(pipe.ds.X[pipe.train_idx], cols, margin)


def screen(X, pipe, sigma_max: float, envelope: Optional[Envelope] = None,
           versions=None, sample_ids=None) -> tuple[list[ScreeningDecision], list[int]]:
    """Decide accept/escalate per design; returns decisions and accepted ids ranked by predicted drag."""
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return [], []
    X = np.atleast_2d(X)
    if len(pipe.replicas) < 2:
        raise ValueError("screening needs at least two seed replicas")
    if envelope is None:
        envelope = pipeline_envelope(pipe)
    ids = list(range(len(X))) if sample_ids is None else [int(i) for i in sample_ids]
    mean, sigma = pipe.predict_with_uncertainty(X, versions)
    inside = envelope.contains(X)
    decisions = []
    for k, sid in enumerate(ids):
        reason = None
        if not inside[k]:
            reason = "out_of_envelope"
        elif sigma[k] > sigma_max:
            reason = "high_uncertainty"
        decisions.append(ScreeningDecision(sid, float(mean[k]), float(sigma[k]),
                                           "accept" if reason is None else "escalate", reason))
    accepted = [d for d in decisions if d.decision == "accept"]
    ranking = [d.sample_id for d in sorted(accepted, key=lambda d: (d.mean, d.sample_id))]
    return decisions, ranking


# ---------------------------------------------------------------------------
# economics

@dataclass(frozen=True)
class RoiInputs:
    n_screened: float
    cost_cfd: float
    cost_surrogate: float
    cost_validation: float

    def __post_init__(self):
        if min(self.n_screened, self.cost_cfd, self.cost_surrogate, self.cost_validation) < 0:
            raise ValueError("ROI inputs must be nonnegative")


def roi(r: RoiInputs | float, cost_cfd: float = None, cost_surrogate: float = None,
        cost_validation: float = None) -> float:
    """(avoided high-fidelity cost - incurred cost) / incurred cost."""
    if not isinstance(r, RoiInputs):
        r = RoiInputs(r, cost_cfd, cost_surrogate, cost_validation)
    spent = r.cost_surrogate + r.cost_validation
    if spent <= 0:
        raise ValueError("surrogate plus validation cost must be positive")
    return (r.n_screened * r.cost_cfd - spent) / spent


def kpis(decisions: Sequence[ScreeningDecision], labels, K: int) -> dict:
    """Escalation rate, top-K ranking fidelity over accepted designs, throughput proxy.

    ``labels`` maps sample id to ground truth (a mapping or an id-indexed array).
    Fidelity is over min(K, accepted) designs and is None when nothing was accepted.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    total = len(decisions)
    escalated = sum(d.decision == "escalate" for d in decisions)
    accepted = [d for d in decisions if d.decision == "accept"]
    k_eff = min(K, len(accepted))
    fidelity = None
    if k_eff:
        truth = {d.sample_id: float(labels[d.sample_id]) for d in accepted}
        pred_top = {d.sample_id for d in sorted(accepted, key=lambda d: (d.mean, d.sample_id))[:k_eff]}
        true_top = set(sorted(truth, key=lambda s: (truth[s], s))[:k_eff])
        fidelity = len(pred_top & true_top) / k_eff
    runs = escalated + k_eff
    return {
        "n_screened": total,
        "escalated": escalated,
        "escalation_rate": escalated / total if total else None,
        "topK": k_eff,
        "topK_ranking_fidelity": fidelity,
        "throughput_gain": total / runs if runs else None,
    }


def escalation_sweep(X, pipe, thresholds: Sequence[float], envelope: Optional[Envelope] = None,
                     versions=None) -> list[int]:
    """Escalation count at each threshold (non-increasing in the threshold)."""
    return [sum(d.decision == "escalate" for d in screen(X, pipe, t, envelope, versions)[0])
            for t in thresholds]
