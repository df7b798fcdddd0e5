import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qexpand.classic import (QEMethodConfig, aggregate, classic_weights, dqe_vector, expand_query,
                             weights_alpha, weights_aqe, weights_aqewd)
from qexpand.errors import ConfigError, ConvergenceError, DegenerateError, InvalidArgumentError, ShapeError
from qexpand.index import EmbeddingMatrix, VectorIndex
from qexpand.svm import svm_train

from oracles import aggregate_ref, svm_dual_oracle


def test_aggregate_examples():
    np.testing.assert_allclose(aggregate(np.array([1.0, 0]), np.array([[0.0, 1]]), [1, 1]),
                               [0.70711, 0.70711], atol=1e-5)
    np.testing.assert_allclose(aggregate(np.array([1.0, 0]), np.array([[0.6, 0.8]]), [1, 0.5]),
                               [0.95577, 0.29408], atol=1e-5)
    q = np.array([0.6, 0.8])
    assert np.array_equal(aggregate(q, np.array([[1.0, 0], [0, 1]]), [1, 0, 0]), q)


def test_aggregate_errors():
    with pytest.raises(ShapeError):
        aggregate(np.array([1.0, 0]), np.array([[0.0, 1]]), [1])
    with pytest.raises(DegenerateError):
        aggregate(np.array([1.0, 0]), np.array([[-1.0, 0]]), [1, 1])


def test_weight_examples():
    assert list(weights_aqe(2)) == [1, 1, 1] and list(weights_aqe(0)) == [1]
    assert list(weights_aqewd(4)) == [1.0, 0.75, 0.5, 0.25, 0.0]
    assert list(weights_aqewd(1)) == [1.0, 0.0] and list(weights_aqewd(2)) == [1.0, 0.5, 0.0]
    assert list(weights_aqewd(0)) == [1.0]
    np.testing.assert_allclose(weights_alpha([0.8, 0.5], 3), [1.0, 0.512, 0.125])
    assert list(weights_alpha([0.9, 0.1], 0)) == [1, 1, 1]
    assert list(weights_alpha([-0.2], 3)) == [1.0, 0.0]


def test_aqe_is_mean_direction():
    rng = np.random.default_rng(0)
    vs = rng.normal(size=(4, 5))
    vs /= np.linalg.norm(vs, axis=1, keepdims=True)
    mean = vs.mean(axis=0)
    np.testing.assert_allclose(aggregate(vs[0], vs[1:], weights_aqe(3)), mean / np.linalg.norm(mean))


sorted_sims = st.lists(st.floats(-1, 1, allow_nan=False), min_size=0, max_size=30).map(
    lambda xs: sorted(xs, reverse=True))


@given(sorted_sims, st.floats(0, 8))
def test_weights_monotone(sims, alpha):
    k = len(sims)
    for w in (weights_aqe(k), weights_aqewd(k), weights_alpha(sims, alpha)):
        assert len(w) == k + 1
        assert np.all(np.diff(w) <= 0)


def _toy_index(seed=0, n=60, d=8):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(n, d))
    return VectorIndex(EmbeddingMatrix.from_raw(rows, [f"d{i:03d}" for i in range(n)])), rng


def test_expand_query_none_and_zero_nqe():
    idx, rng = _toy_index()
    q = idx.rows[3]
    assert np.array_equal(expand_query(q, idx, QEMethodConfig("none")), q)
    assert np.array_equal(expand_query(q, idx, QEMethodConfig("aqe", 0)), q)


def test_alpha_qe_matches_manual_composition():
    rows = np.array([[1.0, 0.2, 0.0], [0.9, 0.5, 0.1], [0.1, 1.0, 0.3]])
    idx = VectorIndex(EmbeddingMatrix.from_raw(rows, ["a", "b", "c"]))
    q = np.array([1.0, 0.0, 0.0])
    got = expand_query(q, idx, QEMethodConfig("alpha-qe", 2, alpha=3))
    nl = idx.knn(q, 2)
    w = [1.0] + [max(s, 0) ** 3 for s in nl.sims]
    np.testing.assert_allclose(got, aggregate_ref([q, *idx.rows[nl.rows]], w), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 20))
def test_alpha_zero_bit_equals_aqe_and_unit_norm(seed, nqe):
    idx, rng = _toy_index(seed % 7)
    q = rng.normal(size=8)
    q /= np.linalg.norm(q)
    aqe = expand_query(q, idx, QEMethodConfig("aqe", nqe))
    assert np.array_equal(expand_query(q, idx, QEMethodConfig("alpha-qe", nqe, alpha=0)), aqe)
    for method in ("aqe", "aqewd", "alpha-qe"):
        out = expand_query(q, idx, QEMethodConfig(method, nqe))
        assert abs(np.linalg.norm(out) - 1) < 1e-5


def test_fewer_items_than_nqe_uses_all():
    idx, rng = _toy_index(n=5)
    q = idx.rows[0]
    np.testing.assert_allclose(expand_query(q, idx, QEMethodConfig("aqe", 50)),
                               aggregate_ref([q, *idx.rows], np.ones(6)), atol=1e-6)


def test_dqe_unit_norm_and_uses_bottom_k():
    idx, rng = _toy_index(2)
    q = idx.rows[0]
    out = expand_query(q, idx, QEMethodConfig("dqe", 4, neg=5), exclude=["d000"])
    assert abs(np.linalg.norm(out) - 1) < 1e-5
    pos = idx.rows[idx.knn(q, 4, ["d000"]).rows]
    neg = idx.rows[idx.bottom_k(q, 5, ["d000"]).rows]
    np.testing.assert_allclose(out, dqe_vector(q, pos, neg, 0.1), atol=1e-12)


def test_config_validation():
    for bad in (dict(method="xqe"), dict(method="aqe", nqe=-1), dict(method="alpha-qe", alpha=-1),
                dict(method="dqe", svm_c=0), dict(method="dqe", neg=0),
                dict(method="lattqe", weight_mode="bogus")):
        with pytest.raises(ConfigError):
            QEMethodConfig(**bad)
    with pytest.raises(ConfigError):
        classic_weights(QEMethodConfig("dqe", 2), np.ones(2))


# ---------------------------------------------------------------- SVM

def test_svm_two_point_fixture():
    fit = svm_train([[1.0, 0.0]], [[-1.0, 0.0]], 10.0)
    np.testing.assert_allclose(fit.w / np.linalg.norm(fit.w), [1.0, 0.0], atol=1e-6)
    assert abs(fit.b) < 1e-6


def test_svm_mirror_symmetry():
    pos = np.array([[1.0, 0.5], [2.0, -0.5], [1.5, 0.0]])
    neg = pos * np.array([-1.0, 1.0])
    fit = svm_train(pos, neg, 1.0, tol=1e-9)
    w = fit.w / np.linalg.norm(fit.w)
    assert abs(w[1]) < 1e-6


def _separable(rng, n, d):
    w = rng.normal(size=d)
    x = rng.normal(size=(n, d))
    y = np.sign(x @ w)
    x += 0.3 * y[:, None] * w / np.linalg.norm(w)
    pos, neg = x[y > 0], x[y < 0]
    if len(pos) == 0 or len(neg) == 0:
        return _separable(rng, n, d)
    return pos, neg


@pytest.mark.parametrize("seed", range(20))
def test_svm_matches_qp_oracle(seed):
    rng = np.random.default_rng(seed)
    pos, neg = _separable(rng, int(rng.integers(2, 11)), int(rng.integers(1, 6)))
    c = float(rng.choice([0.1, 1.0, 10.0]))
    fit = svm_train(pos, neg, c)
    _, obj = svm_dual_oracle(pos, neg, c)
    assert abs(fit.objective - obj) < 1e-4
    assert np.all(fit.duals >= 0) and np.all(fit.duals <= c)
    assert fit.kkt_violation < 1e-6


def test_svm_errors():
    with pytest.raises(InvalidArgumentError):
        svm_train(np.zeros((0, 2)), [[1.0, 0]], 1.0)
    with pytest.raises(InvalidArgumentError):
        svm_train([[1.0, 0]], [[0.0, 1]], 0.0)
    with pytest.raises(ConvergenceError) as info:
        svm_train(np.random.default_rng(0).normal(size=(6, 3)), np.random.default_rng(1).normal(size=(6, 3)),
                  100.0, max_sweeps=1, tol=1e-12)
    assert info.value.residual > 0
