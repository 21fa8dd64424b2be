"""Executable pipelines instantiated from genomes.

A :class:`Pipeline` owns the preprocessing plan (feature mask, IQR clipping,
normalization, solver-version drift removal), fits one model replica per seed
and predicts with cross-replica uncertainty.  All preprocessing statistics
come from the training rows handed to :meth:`Pipeline.fit`.

Model families:

* ``ridge_linear`` -- closed-form ridge with an unpenalized intercept
* ``kernel_ridge_rbf`` -- RBF kernel ridge solved by Cholesky
* ``mlp_1hidden`` -- one tanh hidden layer trained full-batch with Adam on the
  genome's loss (the only family that consumes ranking losses)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import metrics
from .genome import Genome, LossSpec, canonical_json
from .taskbench import Dataset, pair_positions, split as make_split

MAX_TRAIN_PAIRS = 2048
PAIR_EPS = 1e-6
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

_fit_calls = 0


class NumericFailure(RuntimeError):
    pass


class NotFittedError(RuntimeError):
    pass


class InstantiationError(ValueError):
    pass


def fit_call_count() -> int:
    """Number of replica fits performed in this process so far."""
    return _fit_calls


def _count_fit():
    global _fit_calls
    _fit_calls += 1


# ---------------------------------------------------------------------------
# losses

def effective_threshold(loss: LossSpec, labels, i, j) -> float:
    """Margin used by the logistic ranking term.

    With ``adaptive_threshold`` the margin scales with the median absolute
    label gap of the supplied pairs.
    """
    if loss.adaptive_threshold and loss.kind in ("logsigmoid_rank", "multitask") and len(i):
        return float(loss.tau * np.median(np.abs(labels[i] - labels[j])))
    return float(loss.tau)


def _scatter(i, j, coef, n):
    return np.bincount(i, coef, minlength=n) - np.bincount(j, coef, minlength=n)


def make_loss(loss: LossSpec, labels, pairs=None):
    """Return ``f(predictions, value=True) -> (value, gradient)`` for fixed labels and pairs.

    Everything that depends only on the labels (pair signs, the adaptive
    margin) is computed once, which matters inside training loops.
    """
    y = np.asarray(labels, dtype=float)
    n = len(y)
    if loss.kind == "mse":
        def mse(p, value=True):
            r = p - y
            return (float(r @ r) / n if value else None), (2.0 / n) * r
        return mse

    i, j = metrics.pair_indices(pairs)
    if len(i) == 0:
        raise ValueError(f"{loss.kind} loss needs a nonempty pair set")
    s = np.sign(y[i] - y[j])
    m = len(i)

    if loss.kind == "pairwise_hinge":
        tau = float(loss.tau)

        def hinge(p, value=True):
            slack = tau - s * (p[i] - p[j])
            active = slack > 0
            v = float(np.sum(slack[active])) / m if value else None
            return v, _scatter(i, j, np.where(active, -s, 0.0) / m, n)
        return hinge

    tau_eff = effective_threshold(loss, y, i, j)

    def logsig(p, value=True):
        z = s * (p[i] - p[j]) - tau_eff
        # -log(sigmoid(z)) = softplus(-z); sigmoid(-z) written via tanh to avoid overflow
        v = float(np.mean(np.logaddexp(0.0, -z))) if value else None
        coef = (-0.5 / m) * s * (1.0 - np.tanh(0.5 * z))
        return v, _scatter(i, j, coef, n)

    if loss.kind == "logsigmoid_rank":
        return logsig
    if loss.kind == "multitask":
        lam = float(loss.rank_weight)

        def multitask(p, value=True):
            r = p - y
            v2, g2 = logsig(p, value)
            v = (1.0 - lam) * float(r @ r) / n + lam * v2 if value else None
            return v, ((1.0 - lam) * 2.0 / n) * r + lam * g2
        return multitask
    raise ValueError(f"unknown loss kind {loss.kind!r}")


def loss_value_and_gradient(loss: LossSpec, predictions, labels, pairs=None) -> tuple[float, np.ndarray]:
    """Loss value and its exact gradient with respect to ``predictions``.

    ``pairs`` index into ``predictions``/``labels`` and may be a PairSet, an
    ``(i, j)`` tuple of arrays or a sequence of index pairs.
    """
    return make_loss(loss, labels, pairs)(np.asarray(predictions, dtype=float))


# ---------------------------------------------------------------------------
# preprocessing

@dataclass
class Preprocessor:
    columns: np.ndarray
    clip_lo: Optional[np.ndarray]
    clip_hi: Optional[np.ndarray]
    shift: np.ndarray
    scale: np.ndarray
    version_offset: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, genome: Genome, X: np.ndarray, y: np.ndarray, versions: np.ndarray) -> "Preprocessor":
        d = genome.data_ops
        cols = np.flatnonzero(np.asarray(d.feature_mask))
        Z = X[:, cols]
        lo = hi = None
        if d.outlier_clip is not None:
            q1, q3 = np.percentile(Z, [25, 75], axis=0)
            iqr = q3 - q1
            lo, hi = q1 - d.outlier_clip * iqr, q3 + d.outlier_clip * iqr
            Z = np.clip(Z, lo, hi)
        if d.normalization == "zscore":
            shift = Z.mean(axis=0)
            scale = Z.std(axis=0)
        elif d.normalization == "minmax":
            shift = Z.min(axis=0)
            scale = Z.max(axis=0) - shift
        else:
            shift = np.zeros(len(cols))
            scale = np.ones(len(cols))
        scale = np.where(scale > 0, scale, 1.0)
        offsets = {}
        if d.drift_compensation:
            overall = float(y.mean())
            for v in np.unique(versions):
                offsets[int(v)] = float(y[versions == v].mean()) - overall
        return cls(cols, lo, hi, shift, scale, offsets)

    def transform(self, X: np.ndarray) -> np.ndarray:
        Z = X[:, self.columns]
        if self.clip_lo is not None:
            Z = np.clip(Z, self.clip_lo, self.clip_hi)
        return (Z - self.shift) / self.scale

    def offsets_for(self, versions) -> np.ndarray:
        if not self.version_offset or versions is None:
            return 0.0
        return np.array([self.version_offset.get(int(v), 0.0) for v in versions])

    def compensate(self, y: np.ndarray, versions: np.ndarray) -> np.ndarray:
        """Training labels with each solver version's mean offset removed."""
        return y - self.offsets_for(versions)


# ---------------------------------------------------------------------------
# models

def _solve_spd(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        c, low = scipy.linalg.cho_factor(A, check_finite=True)
        x = scipy.linalg.cho_solve((c, low), b)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericFailure(f"singular system: {exc}") from None
    if not np.isfinite(x).all():
        raise NumericFailure("non-finite solution")
    return x


def _solve_general(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        x = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"singular system: {exc}") from None
    if not np.isfinite(x).all():
        raise NumericFailure("non-finite solution")
    return x


@dataclass
class RidgeModel:
    coef: np.ndarray
    intercept: float

    @classmethod
    def fit(cls, Z, t, lam):
        zm, tm = Z.mean(axis=0), t.mean()
        Zc = Z - zm
        A = Zc.T @ Zc + lam * np.eye(Z.shape[1])
        w = _solve_general(A, Zc.T @ (t - tm))
        return cls(w, float(tm - zm @ w))

    def predict(self, Z):
        return Z @ self.coef + self.intercept


def rbf_kernel(A, B, gamma):
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass
class KernelRidgeModel:
    support: np.ndarray
    dual: np.ndarray
    intercept: float
    gamma: float

    @classmethod
    def fit(cls, Z, t, lam, gamma):
        tm = float(t.mean())
        K = rbf_kernel(Z, Z, gamma)
        K[np.diag_indices_from(K)] += lam
        return cls(Z.copy(), _solve_spd(K, t - tm), tm, gamma)

    def predict(self, Z):
        return rbf_kernel(Z, self.support, self.gamma) @ self.dual + self.intercept


@dataclass
class MLPModel:
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    y_mean: float
    y_scale: float

    @classmethod
    def init(cls, n_in, hidden, rng, y_mean, y_scale):
        W1 = rng.standard_normal((n_in, hidden)) / np.sqrt(n_in)
        w2 = rng.standard_normal(hidden) / np.sqrt(hidden)
        return cls(W1, np.zeros(hidden), w2, 0.0, y_mean, y_scale)

    def raw(self, Z):
        return np.tanh(Z @ self.W1 + self.b1) @ self.w2 + self.b2

    def predict(self, Z):
        return self.y_mean + self.y_scale * self.raw(Z)

    def train(self, Z, t_std, loss: LossSpec, pairs, epochs, lr, lam):
        """Full-batch Adam on ``loss`` in standardized target units."""
        n_in, h = self.W1.shape
        sizes = [n_in * h, h, h, 1]
        bounds = np.cumsum([0] + sizes)
        theta = np.concatenate([self.W1.ravel(), self.b1, self.w2, [self.b2]])
        grad = np.zeros_like(theta)
        views = [theta[bounds[k]:bounds[k + 1]] for k in range(4)]
        gviews = [grad[bounds[k]:bounds[k + 1]] for k in range(4)]
        W1, b1, w2, b2 = views[0].reshape(n_in, h), views[1], views[2], views[3]
        gW1 = gviews[0].reshape(n_in, h)
        decay = np.zeros_like(theta)
        decay[bounds[0]:bounds[1]] = lam
        decay[bounds[2]:bounds[3]] = lam
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        beta1, beta2 = ADAM_BETAS
        objective = make_loss(loss, t_std, pairs)
        for step in range(1, epochs + 1):
            H = np.tanh(Z @ W1 + b1)
            _, g = objective(H @ w2 + b2[0], False)
            dH = np.outer(g, w2)
            dH *= 1.0 - H * H
            np.matmul(Z.T, dH, out=gW1)
            gviews[1][:] = dH.sum(0)
            np.matmul(H.T, g, out=gviews[2])
            gviews[3][0] = g.sum()
            grad += decay * theta
            m *= beta1
            m += (1.0 - beta1) * grad
            v *= beta2
            v += (1.0 - beta2) * grad * grad
            step_size = lr * np.sqrt(1.0 - beta2 ** step) / (1.0 - beta1 ** step)
            theta -= step_size * m / (np.sqrt(v) + ADAM_EPS)
        # divergence anywhere in training propagates into the weights
        if not np.isfinite(theta).all():
            raise NumericFailure("non-finite network weights")
        self.W1, self.b1, self.w2, self.b2 = W1.copy(), b1.copy(), w2.copy(), float(b2[0])
        return self


# ---------------------------------------------------------------------------
# resource accounting (analytic multiply-accumulate counts)

def fit_macs(genome: Genome, n_train: int, n_pairs: int = 0) -> int:
    d = int(sum(genome.data_ops.feature_mask))
    m = genome.model
    if m.family == "ridge_linear":
        return n_train * d * d + d ** 3
    if m.family == "kernel_ridge_rbf":
        return n_train * n_train * (d + 1) + n_train ** 3 // 6
    h, epochs = m.hidden_units, m.epochs
    per_epoch = n_train * (2 * d * h + 3 * h + 2)
    if genome.loss.uses_pairs:
        per_epoch += 4 * min(n_pairs, MAX_TRAIN_PAIRS)
    return epochs * per_epoch


def inference_macs(genome: Genome, n_train: int) -> int:
    """Per-sample prediction cost."""
    d = int(sum(genome.data_ops.feature_mask))
    m = genome.model
    if m.family == "ridge_linear":
        return d
    if m.family == "kernel_ridge_rbf":
        return n_train * (d + 1)
    return m.hidden_units * (d + 1)


def parameter_count(genome: Genome, n_train: int) -> int:
    d = int(sum(genome.data_ops.feature_mask))
    m = genome.model
    if m.family == "ridge_linear":
        return d + 1
    if m.family == "kernel_ridge_rbf":
        return n_train + 1
    return m.hidden_units * (d + 2) + 1


def execution_key(genome: Genome) -> str:
    """Canonical description of what actually executes.

    Closed-form families ignore the loss block, so it is left out.
    """
    c = genome.content()
    if genome.model.family != "mlp_1hidden":
        c.pop("loss")
    return canonical_json(c)


# ---------------------------------------------------------------------------
# pipeline

class Pipeline:
    """Executable form of a genome on one dataset."""

    def __init__(self, genome: Genome, ds: Dataset):
        if genome.n_features != ds.n_features:
            raise InstantiationError(
                f"feature_mask has {genome.n_features} entries but dataset has {ds.n_features} features")
        self.genome = genome
        self.ds = ds
        self.prep: Optional[Preprocessor] = None
        self.train_idx: Optional[np.ndarray] = None
        self.replicas: list = []
        self.seeds: list[int] = []

    def _prepare(self, train_idx):
        train_idx = np.asarray(train_idx, dtype=np.int64)
        if self.train_idx is None or not np.array_equal(train_idx, self.train_idx):
            ds = self.ds
            self.prep = Preprocessor.fit(self.genome, ds.X[train_idx], ds.y[train_idx], ds.version[train_idx])
            self.train_idx = train_idx
            self.replicas, self.seeds = [], []
        return train_idx

    def fit(self, train_idx, seed: int):
        """Train one replica on ``train_idx``; returns the fitted model."""
        _count_fit()
        idx = self._prepare(train_idx)
        ds, g, prep = self.ds, self.genome, self.prep
        Z = prep.transform(ds.X[idx])
        t = prep.compensate(ds.y[idx], ds.version[idx])
        m = g.model
        if m.family == "ridge_linear":
            model = RidgeModel.fit(Z, t, m.lambda_reg)
        elif m.family == "kernel_ridge_rbf":
            model = KernelRidgeModel.fit(Z, t, m.lambda_reg, m.gamma)
        else:
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x3A7]))
            y_mean = float(t.mean())
            y_scale = float(t.std()) or 1.0
            model = MLPModel.init(Z.shape[1], m.hidden_units, rng, y_mean, y_scale)
            t_std = (t - y_mean) / y_scale
            pairs = None
            if g.loss.uses_pairs:
                pairs = pair_positions(t_std, PAIR_EPS / y_scale)
                if len(pairs[0]) > MAX_TRAIN_PAIRS:
                    pick = np.sort(rng.choice(len(pairs[0]), MAX_TRAIN_PAIRS, replace=False))
                    pairs = (pairs[0][pick], pairs[1][pick])
                if len(pairs[0]) == 0:
                    raise NumericFailure("no usable training pairs")
            model.train(Z, t_std, g.loss, pairs, m.epochs, m.learning_rate, m.lambda_reg)
        self.replicas.append(model)
        self.seeds.append(int(seed))
        return model

    def _check(self):
        if not self.replicas:
            raise NotFittedError("pipeline has no fitted replica")

    def replica_predictions(self, X, versions=None) -> np.ndarray:
        """Array of shape (n_replicas, n_samples)."""
        self._check()
        Z = self.prep.transform(np.asarray(X, dtype=float))
        off = self.prep.offsets_for(versions)
        return np.stack([r.predict(Z) + off for r in self.replicas])

    def predict(self, X, versions=None) -> np.ndarray:
        return self.replica_predictions(X, versions).mean(axis=0)

    def predict_with_uncertainty(self, X, versions=None) -> tuple[np.ndarray, np.ndarray]:
        P = self.replica_predictions(X, versions)
        if len(P) < 2:
            raise NotFittedError("uncertainty needs at least two seed replicas")
        return P.mean(axis=0), P.std(axis=0)

    @property
    def n_train(self) -> int:
        return 0 if self.train_idx is None else len(self.train_idx)


def instantiate(genome: Genome, ds: Dataset) -> Pipeline:
    return Pipeline(genome, ds)


# ---------------------------------------------------------------------------
# harness-level execution

@dataclass
class RunResult:
    bundles: dict  # (seed, fold) -> MetricBundle
    predictions: dict  # (seed, fold) -> validation predictions
    macs: int
    n_params: int
    inference_macs: int
    status: str = "ok"  # ok | numeric_failure | budget_exceeded
    message: str = ""

    def per_seed_scores(self) -> list[float]:
        seeds = sorted({s for s, _ in self.bundles})
        return [float(np.mean([b.combined_score for (s, _), b in sorted(self.bundles.items()) if s == seed]))
                for seed in seeds]


def plan_macs(genome: Genome, ds: Dataset, seeds) -> tuple[int, int, int]:
    """Analytic cost of evaluating ``genome`` over every seed and fold.

    Returns (total MACs, parameter count, per-sample inference MACs); the last
    two use the largest training fold.
    """
    total = 0
    n_max = 0
    for seed in seeds:
        sp = make_split(ds, genome.split, seed)
        for train, val in sp.folds:
            n = len(train)
            n_max = max(n_max, n)
            total += fit_macs(genome, n, n * (n - 1) // 2) + len(val) * inference_macs(genome, n)
    return total, parameter_count(genome, n_max), inference_macs(genome, n_max)


def run_fold(genome: Genome, ds: Dataset, seed: int, fold: int,
             weights: metrics.ScoreWeights = metrics.ScoreWeights()):
    """Fit on one fold with one seed; returns (MetricBundle, validation predictions)."""
    sp = make_split(ds, genome.split, seed)
    train, val = sp.folds[fold]
    pipe = Pipeline(genome, ds)
    pipe.fit(train, seed)
    pred = pipe.predict(ds.X[val], ds.version[val])
    if not np.isfinite(pred).all():
        raise NumericFailure("non-finite predictions")
    y_val = ds.y[val]
    pairs = ds.memo(("val_pairs", genome.split, int(seed), fold), lambda: pair_positions(y_val, PAIR_EPS))
    try:
        b = metrics.bundle(pred, y_val, pairs, weights)
    except metrics.UndefinedMetricError as exc:
        raise NumericFailure(str(exc)) from None
    return b, pred


def run(genome: Genome, ds: Dataset, seeds, budget: Optional[float] = None,
        weights: metrics.ScoreWeights = metrics.ScoreWeights()) -> RunResult:
    """Execute every (seed, fold) of ``genome``.

    If the analytic MAC estimate exceeds ``budget`` nothing is fitted and the
    result carries status ``budget_exceeded``.
    """
    macs, n_params, inf = plan_macs(genome, ds, seeds)
    result = RunResult({}, {}, macs, n_params, inf)
    if budget is not None and macs > budget:
        result.status = "budget_exceeded"
        result.message = f"estimated {macs} MACs > budget {budget:g}"
        return result
    for seed in seeds:
        for fold in range(genome.split.folds):
            try:
                with np.errstate(all="ignore"):
                    b, pred = run_fold(genome, ds, seed, fold, weights)
            except NumericFailure as exc:
                result.status = "numeric_failure"
                result.message = f"seed {seed} fold {fold}: {exc}"
                return result
            result.bundles[(int(seed), fold)] = b
            result.predictions[(int(seed), fold)] = pred
    return result
