import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdevolve import phenotype
from cdevolve.genome import DataOpsSpec, Genome, LossSpec, ModelSpec, SplitSpec, default_genome
from cdevolve.phenotype import (InstantiationError, MLPModel, NotFittedError, Pipeline, Preprocessor,
                                RidgeModel, fit_macs, loss_value_and_gradient, run, run_fold)
from cdevolve.taskbench import Dataset, TaskSpec, generate, split

from conftest import family_genome

LOSSES = [
    LossSpec("mse"),
    LossSpec("pairwise_hinge", tau=0.5),
    LossSpec("pairwise_hinge", tau=0.0),
    LossSpec("logsigmoid_rank", tau=0.0),
    LossSpec("logsigmoid_rank", tau=0.5, adaptive_threshold=True),
    LossSpec("multitask", tau=0.25, rank_weight=0.3),
    LossSpec("multitask", tau=1.0, rank_weight=0.7, adaptive_threshold=True),
]


def all_pairs(y):
    return [(i, j) for i in range(len(y)) for j in range(i + 1, len(y)) if abs(y[i] - y[j]) > 1e-6]


def fd_gradient(loss, p, y, pairs, h=1e-6):
    g = np.zeros_like(p)
    for k in range(len(p)):
        e = np.zeros_like(p)
        e[k] = h
        g[k] = (loss_value_and_gradient(loss, p + e, y, pairs)[0]
                - loss_value_and_gradient(loss, p - e, y, pairs)[0]) / (2 * h)
    return g


def hinge_kink_free(loss, p, y, pairs, margin=1e-4):
    if loss.kind != "pairwise_hinge":
        return True
    i, j = np.array(pairs).T
    slack = loss.tau - np.sign(y[i] - y[j]) * (p[i] - p[j])
    return np.min(np.abs(slack)) > margin


def gradient_check(loss, rng, n_instances=50):
    """Central finite differences on random instances; returns worst relative error."""
    worst = 0.0
    done = 0
    while done < n_instances:
        n = int(rng.integers(3, 12))
        y = rng.normal(0.3, 0.05, n)
        p = rng.normal(0.3, 0.1, n)
        pairs = all_pairs(y)
        if not hinge_kink_free(loss, p, y, pairs):
            continue
        _, g = loss_value_and_gradient(loss, p, y, pairs)
        fd = fd_gradient(loss, p, y, pairs)
        scale = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)
        worst = max(worst, float(np.linalg.norm(g - fd) / scale))
        done += 1
    return worst


@pytest.mark.parametrize("loss", LOSSES, ids=lambda l: f"{l.kind}-{l.tau}-{l.adaptive_threshold}")
def test_gradient_matches_finite_differences(loss):
    assert gradient_check(loss, np.random.default_rng(42)) <= 1e-6


def test_hinge_zero_for_perfect_predictions():
    y = np.array([0.1, 0.3, 0.2])
    v, g = loss_value_and_gradient(LossSpec("pairwise_hinge", tau=0.0), y, y, all_pairs(y))
    assert v == 0.0 and not g.any()


def test_logsigmoid_tie_is_ln2():
    y = np.array([0.1, 0.3])
    v, _ = loss_value_and_gradient(LossSpec("logsigmoid_rank"), np.zeros(2), y, [(0, 1)])
    assert v == pytest.approx(np.log(2))


def test_adaptive_threshold_uses_median_gap():
    y = np.array([0.0, 0.1, 0.4])
    i, j = np.array([0, 0, 1]), np.array([1, 2, 2])
    tau = phenotype.effective_threshold(LossSpec("logsigmoid_rank", tau=2.0, adaptive_threshold=True), y, i, j)
    assert tau == pytest.approx(2.0 * 0.3)


def test_mse_value():
    v, g = loss_value_and_gradient(LossSpec("mse"), np.array([1.0, 2.0]), np.array([0.0, 0.0]))
    assert v == pytest.approx(2.5)
    assert np.allclose(g, [1.0, 2.0])


# ---------------------------------------------------------------------------
# preprocessing

def test_zscore_train_columns(ds):
    idx = np.arange(400)
    prep = Preprocessor.fit(default_genome(), ds.X[idx], ds.y[idx], ds.version[idx])
    Z = prep.transform(ds.X[idx])
    assert np.allclose(Z.mean(0), 0, atol=1e-9)
    assert np.allclose(Z.var(0), 1, atol=1e-9)
    assert Z.shape[1] == 8  # leaky column masked out


def test_identity_transform(ds):
    g = dataclasses.replace(default_genome(), data_ops=DataOpsSpec(feature_mask=(True,) * 8 + (False,),
                                                                   normalization="none"))
    prep = Preprocessor.fit(g, ds.X, ds.y, ds.version)
    assert np.array_equal(prep.transform(ds.X), ds.X[:, :8])


def test_drift_compensation_equalizes_version_means(ds):
    g = dataclasses.replace(default_genome(), data_ops=DataOpsSpec(feature_mask=(True,) * 8 + (False,),
                                                                   drift_compensation=True))
    idx = split(ds, g.split, 0).folds[0][0]
    prep = Preprocessor.fit(g, ds.X[idx], ds.y[idx], ds.version[idx])
    t = prep.compensate(ds.y[idx], ds.version[idx])
    means = [t[ds.version[idx] == v].mean() for v in np.unique(ds.version[idx])]
    assert max(means) - min(means) < 1e-9


def test_preprocessing_uses_training_rows_only(ds):
    g = default_genome()
    train, val = split(ds, g.split, 0).folds[0]
    pipe = Pipeline(g, ds)
    pipe.fit(train, 0)
    both = np.concatenate([train, val])
    ref_train = Preprocessor.fit(g, ds.X[train], ds.y[train], ds.version[train])
    ref_both = Preprocessor.fit(g, ds.X[both], ds.y[both], ds.version[both])
    assert np.array_equal(pipe.prep.shift, ref_train.shift)
    assert not np.allclose(ref_both.shift, ref_train.shift)


def test_clip_bounds_from_iqr(ds):
    g = dataclasses.replace(default_genome(), data_ops=dataclasses.replace(default_genome().data_ops,
                                                                           outlier_clip=1.0))
    prep = Preprocessor.fit(g, ds.X, ds.y, ds.version)
    q1, q3 = np.percentile(ds.X[:, :8], [25, 75], axis=0)
    assert np.allclose(prep.clip_lo, q1 - (q3 - q1))
    assert np.allclose(prep.clip_hi, q3 + (q3 - q1))


def test_mask_mismatch_raises(ds):
    g = default_genome(n_features=5, masked=())
    with pytest.raises(InstantiationError):
        phenotype.instantiate(g, ds)


# ---------------------------------------------------------------------------
# models

def test_ridge_recovers_linear_coefficients():
    rng = np.random.default_rng(0)
    Z = rng.uniform(-1, 1, (50, 4))
    a = np.array([0.3, -0.2, 0.05, 0.1])
    m = RidgeModel.fit(Z, Z @ a + 0.28, 0.0)
    assert np.allclose(m.coef, a, atol=1e-8)
    assert m.intercept == pytest.approx(0.28, abs=1e-8)


def test_ridge_recovers_coefficients_through_pipeline():
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, (60, 3))
    a = np.array([0.04, -0.03, 0.02])
    d = Dataset(X=X, y=X @ a + 0.3, family=np.arange(60) % 4, version=np.zeros(60, dtype=np.int64))
    g = Genome(data_ops=DataOpsSpec(feature_mask=(True,) * 3, normalization="none"),
               model=ModelSpec.for_family("ridge_linear", lambda_reg=0.0))
    pipe = Pipeline(g, d)
    model = pipe.fit(np.arange(60), 0)
    assert np.allclose(model.coef, a, atol=1e-8)


def test_ridge_huge_lambda_predicts_mean():
    rng = np.random.default_rng(2)
    Z = rng.uniform(-1, 1, (40, 3))
    t = rng.normal(0.3, 0.05, 40)
    m = RidgeModel.fit(Z, t, 1e12)
    assert np.all(np.abs(m.coef) < 1e-6)
    assert np.allclose(m.predict(Z), t.mean(), atol=1e-6)


def test_mlp_zero_epochs_is_initial_network():
    rng_a = np.random.default_rng(5)
    rng_b = np.random.default_rng(5)
    Z = np.random.default_rng(0).normal(size=(20, 3))
    a = MLPModel.init(3, 8, rng_a, 0.3, 0.05)
    b = MLPModel.init(3, 8, rng_b, 0.3, 0.05)
    a.train(Z, np.zeros(20), LossSpec("mse"), None, epochs=0, lr=0.1, lam=0.0)
    assert np.array_equal(a.predict(Z), b.predict(Z))


@pytest.mark.parametrize("family", ["ridge_linear", "kernel_ridge_rbf", "mlp_1hidden"])
def test_run_fold_bit_identical(ds, family):
    g = family_genome(family)
    b1, p1 = run_fold(g, ds, 3, 1)
    b2, p2 = run_fold(g, ds, 3, 1)
    assert np.array_equal(p1, p2)
    assert b1.serialize() == b2.serialize()


@pytest.mark.parametrize("loss", LOSSES[1:], ids=lambda l: l.kind)
def test_mlp_ranking_losses_train(ds, loss):
    g = dataclasses.replace(family_genome("mlp_1hidden"), loss=loss)
    b, _ = run_fold(g, ds, 0, 0)
    assert b.spearman_rho > 0.5


def test_unfitted_pipeline_raises(ds):
    with pytest.raises(NotFittedError):
        Pipeline(default_genome(), ds).predict(ds.X[:3])


def test_uncertainty_needs_two_replicas(ds):
    pipe = Pipeline(default_genome(), ds)
    pipe.fit(np.arange(300), 0)
    with pytest.raises(NotFittedError):
        pipe.predict_with_uncertainty(ds.X[:3])


def test_identical_replicas_zero_sigma(ds):
    pipe = Pipeline(default_genome(), ds)
    for s in range(3):
        pipe.fit(np.arange(300), s)
    _, sigma = pipe.predict_with_uncertainty(ds.X[300:])
    assert np.all(sigma < 1e-12)


class _Const:
    def __init__(self, v):
        self.v = v

    def predict(self, Z):
        return np.full(len(Z), self.v)


def test_two_replica_arithmetic(ds):
    pipe = Pipeline(default_genome(), ds)
    pipe.fit(np.arange(100), 0)
    pipe.replicas = [_Const(0.30), _Const(0.32)]
    mean, sigma = pipe.predict_with_uncertainty(ds.X[:2])
    assert np.allclose(mean, 0.31) and np.allclose(sigma, 0.01)


def test_sigma_brute_force(ds):
    g = family_genome("mlp_1hidden", epochs=30)
    pipe = Pipeline(g, ds)
    for s in range(4):
        pipe.fit(np.arange(200), s)
    X = ds.X[400:420]
    mean, sigma = pipe.predict_with_uncertainty(X)
    preds = [[r.predict(pipe.prep.transform(X[k:k + 1]))[0] for r in pipe.replicas] for k in range(len(X))]
    for k, row in enumerate(preds):
        mu = sum(row) / len(row)
        sd = (sum((v - mu) ** 2 for v in row) / len(row)) ** 0.5
        assert mean[k] == pytest.approx(mu, abs=1e-12)
        assert sigma[k] == pytest.approx(sd, abs=1e-12)


# ---------------------------------------------------------------------------
# resources

def test_ridge_default_estimate(ds):
    """Analytic oracle: sum over seeds and folds of N d^2 + d^3 plus validation inference."""
    g = default_genome()
    seeds = (0, 1, 2)
    expected = 0
    d = 8
    for s in seeds:
        for train, val in split(ds, g.split, s).folds:
            expected += len(train) * d * d + d ** 3 + len(val) * d
    macs, n_params, inf = phenotype.plan_macs(g, ds, seeds)
    assert macs == expected
    assert macs < 1e9
    assert n_params == d + 1 and inf == d


def test_mlp_estimate_exceeds_small_budget(ds):
    g = dataclasses.replace(family_genome("mlp_1hidden", hidden_units=64, epochs=500))
    before = phenotype.fit_call_count()
    res = run(g, ds, (0, 1, 2), budget=1e5)
    assert res.status == "budget_exceeded" and res.macs > 1e5
    assert phenotype.fit_call_count() == before


def _genome(d, family, h=16, epochs=100, loss="mse"):
    mask = (True,) * d
    m = ModelSpec.for_family(family) if family != "mlp_1hidden" else ModelSpec.for_family(
        family, hidden_units=h, epochs=epochs)
    lo = LossSpec(loss) if loss == "mse" else LossSpec(loss, tau=0.5)
    return Genome(data_ops=DataOpsSpec(feature_mask=mask), model=m, loss=lo)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(2, 2000), d=st.integers(1, 12), h=st.integers(4, 63), e=st.integers(10, 499),
       family=st.sampled_from(["ridge_linear", "kernel_ridge_rbf", "mlp_1hidden"]),
       loss=st.sampled_from(["mse", "logsigmoid_rank"]))
def test_mac_estimate_monotone(n, d, h, e, family, loss):
    base = fit_macs(_genome(d, family, h, e, loss), n, n * (n - 1) // 2)
    assert fit_macs(_genome(d, family, h, e, loss), n + 1, (n + 1) * n // 2) >= base
    assert fit_macs(_genome(d + 1, family, h, e, loss), n, n * (n - 1) // 2) >= base
    assert fit_macs(_genome(d, family, h + 1, e, loss), n, n * (n - 1) // 2) >= base
    assert fit_macs(_genome(d, family, h, e + 1, loss), n, n * (n - 1) // 2) >= base


def test_execution_key_ignores_loss_for_closed_form():
    a = default_genome()
    b = dataclasses.replace(a, loss=LossSpec("logsigmoid_rank", tau=0.5))
    assert phenotype.execution_key(a) == phenotype.execution_key(b)
    am = dataclasses.replace(a, model=ModelSpec.for_family("mlp_1hidden"))
    bm = dataclasses.replace(b, model=ModelSpec.for_family("mlp_1hidden"))
    assert phenotype.execution_key(am) != phenotype.execution_key(bm)


def test_run_result_ok(ds):
    res = run(family_genome("kernel_ridge_rbf"), ds, (0, 1))
    assert res.status == "ok"
    assert sorted(res.bundles) == [(s, f) for s in (0, 1) for f in range(3)]
    assert all(np.isfinite(p).all() for p in res.predictions.values())
    assert len(res.per_seed_scores()) == 2


@pytest.mark.parametrize("family", ["ridge_linear", "mlp_1hidden"])
def test_numeric_failure_status(ds, family):
    X = ds.X.copy()
    X[:, 0] = np.inf
    bad = Dataset(X=X, y=ds.y, family=ds.family, version=ds.version, card=ds.card)
    res = run(family_genome(family), bad, (0,))
    assert res.status == "numeric_failure"
    assert "non-finite" in res.message
