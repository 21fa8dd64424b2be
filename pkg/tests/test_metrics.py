import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdevolve import metrics
from cdevolve.metrics import (PUBLISHED_ROWS, REJECTED, MetricBundle, Rejected, ScoreWeights, combined_score,
                              fitness_key, fitness_value, recover_weights, reliability, sign_accuracy, spearman)


def brute_sign_accuracy(p, y, pairs):
    ok = 0
    for i, j in pairs:
        dp, dy = p[i] - p[j], y[i] - y[j]
        ok += (dp > 0 and dy > 0) or (dp < 0 and dy < 0)
    return ok / len(pairs)


def brute_spearman(p, y):
    def ranks(v):
        out = []
        for a in v:
            less = sum(b < a for b in v)
            equal = sum(b == a for b in v)
            out.append(less + (equal + 1) / 2)
        return out
    rp, ry = ranks(p), ranks(y)
    mp, my = sum(rp) / len(rp), sum(ry) / len(ry)
    cov = sum((a - mp) * (b - my) for a, b in zip(rp, ry))
    vp = sum((a - mp) ** 2 for a in rp)
    vy = sum((b - my) ** 2 for b in ry)
    return cov / math.sqrt(vp * vy)


def test_sign_accuracy_examples():
    y = [0.1, 0.2, 0.3]
    assert sign_accuracy([1, 2, 3], y, [(0, 1), (1, 2), (0, 2)]) == 1.0
    assert sign_accuracy([3, 2, 1], y, [(0, 1), (1, 2), (0, 2)]) == 0.0
    # predicted tie counts as wrong
    assert sign_accuracy([1, 1, 3], y, [(0, 1), (0, 2)]) == 0.5


def test_sign_accuracy_pair_formats():
    y = np.array([0.1, 0.3, 0.2])
    p = np.array([0.0, 1.0, 2.0])
    pairs = [(0, 1), (1, 2)]
    as_arrays = (np.array([0, 1]), np.array([1, 2]))
    assert sign_accuracy(p, y, pairs) == sign_accuracy(p, y, as_arrays) == 0.5


def test_spearman_known():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    with pytest.raises(metrics.UndefinedMetricError):
        spearman([1, 1, 1], [1, 2, 3])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 20).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 6).map(lambda k: k / 6), min_size=n, max_size=n),
    st.lists(st.integers(0, 9).map(lambda k: k / 9), min_size=n, max_size=n))))
def test_metric_oracles(pl):
    p, y = np.array(pl[0]), np.array(pl[1])
    pairs = [(i, j) for i in range(len(y)) for j in range(i + 1, len(y)) if abs(y[i] - y[j]) > 1e-6]
    if pairs:
        assert sign_accuracy(p, y, pairs) == pytest.approx(brute_sign_accuracy(p, y, pairs), abs=1e-12)
    if len(set(p.tolist())) > 1 and len(set(y.tolist())) > 1:
        assert spearman(p, y) == pytest.approx(brute_spearman(p, y), abs=1e-9)


def test_combined_score_formula():
    assert combined_score(1.0, 0.0, 0.0) == pytest.approx(1.0)
    assert combined_score(0.5, 1.0, 1.0) == pytest.approx(0.4 + 0.05 + 0.05)
    with pytest.raises(ValueError):
        combined_score(1.2, 0, 0)


@pytest.mark.parametrize("name", [n for n in PUBLISHED_ROWS if n != "gemini-3.0-pro"])
def test_published_rows(name):
    s, acc, mae, rmse = PUBLISHED_ROWS[name]
    assert abs(combined_score(acc, mae, rmse) - s) <= 0.0015


def test_outlier_row_residual():
    s, acc, mae, rmse = PUBLISHED_ROWS["gemini-3.0-pro"]
    resid = s - combined_score(acc, mae, rmse)
    assert 0.004 < abs(resid) < 0.006


def test_weight_recovery_unique():
    ranked = recover_weights()
    best_resid, best_w = ranked[0]
    assert best_w == pytest.approx((0.8, 0.1, 0.1))
    assert best_resid <= 0.0015
    assert ranked[1][0] - best_resid > 1e-9
    assert len(ranked) == 231


def test_weight_recovery_oracle():
    """Independent brute force over the 0.05 simplex grid."""
    rows = [r for name, r in PUBLISHED_ROWS.items() if name != "gemini-3.0-pro"]
    best = None
    for a, b in itertools.product(range(21), repeat=2):
        if a + b > 20:
            continue
        w = (a / 20, b / 20, (20 - a - b) / 20)
        resid = max(abs(w[0] * acc + w[1] / (1 + rmse) + w[2] / (1 + mae) - s) for s, acc, mae, rmse in rows)
        if best is None or resid < best[0]:
            best = (resid, w)
    assert best[1] == pytest.approx(recover_weights()[0][1])


def test_bundle_and_serialize():
    y = np.array([0.1, 0.2, 0.3, 0.4])
    b = metrics.bundle(y + 0.01, y, [(0, 1), (0, 2), (2, 3)])
    assert b.sign_accuracy == 1.0
    assert b.mae == pytest.approx(0.01)
    assert b.serialize() == ("combined_score=%.6f;mae=0.010000;rmse=0.010000;sign_accuracy=1.000000;"
                             "spearman_rho=1.000000" % b.combined_score)


def test_constant_predictor_rho_zero():
    y = np.array([0.1, 0.2, 0.3])
    assert metrics.bundle(np.zeros(3), y, [(0, 1)]).spearman_rho == 0.0


def test_reliability():
    assert reliability([0.9, 0.9, 0.9]) == pytest.approx(1.0)
    assert reliability([0.5, 0.9]) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        reliability([0.9])


def test_fitness_value_formula():
    assert fitness_value(0.8, 0.98, 10_000) == pytest.approx(0.8 + 0.49 - 0.1)


def test_rejected_sorts_below_everything():
    assert not REJECTED
    keys = sorted([fitness_key(-5.0), fitness_key(Rejected("leakage")), fitness_key(2.0)])
    assert keys[0] == fitness_key(REJECTED)
    assert fitness_key(Rejected("x")) < fitness_key(-1e9)


def test_fitness_of_evaluation_like():
    class E:
        rejected = False
        failed_gate = None
        aggregate = MetricBundle(0.01, 0.02, 0.9, 0.85, 0.9)
        reliability = 0.97
        n_params = 10
    assert metrics.fitness(E()) == pytest.approx(0.85 + 0.485 - 1e-4)
    E.rejected, E.failed_gate = True, "split"
    f = metrics.fitness(E())
    assert isinstance(f, Rejected) and f.gate == "split"


def test_qd_score_sum():
    assert metrics.qd_score({(0, 0): 1.0, (1, 2): 0.5}) == pytest.approx(1.5)
