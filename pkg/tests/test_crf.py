import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import crf_reference

from weakpoint.cloudstore import PointCloud
from weakpoint.crf import EXACT_BUDGET, MASKED_PENALTY, CrfConfig, crf_refine, mean_field, unary_potentials
from weakpoint.mprm import ScoreMap, argmax_positive


def _instance(n, num_classes, seed, spread=1.0):
    rng = np.random.default_rng(seed)
    pos = rng.random((n, 3)) * spread
    col = rng.random((n, 3))
    mask = np.ones(num_classes, dtype=bool)
    if num_classes > 2:
        mask[rng.integers(num_classes)] = False
    scores = ScoreMap(rng.standard_normal((n, num_classes)) * 2 * mask, mask, "fused")
    return pos, col, scores


def test_pairwise_off_returns_unary_argmax():
    pos, col, scores = _instance(40, 4, 0)
    out = crf_refine(PointCloud(pos, col), scores, CrfConfig(w1=0, w2=0))
    np.testing.assert_array_equal(out.labels, argmax_positive(scores).labels)


@pytest.mark.parametrize("seed", range(5))
def test_matches_reference_every_iteration(seed):
    pos, col, scores = _instance(50, 3, seed, spread=0.6)
    cfg = CrfConfig(w1=2.0, theta_alpha=0.3, theta_beta=0.4, w2=1.0, theta_gamma=0.15, iterations=5, chunk=16)
    unary = unary_potentials(scores)
    history = []
    mean_field(pos, col, unary, cfg, history)
    ref = crf_reference(pos, col, unary, 2.0, 0.3, 0.4, 1.0, 0.15, 5)
    assert len(history) == len(ref) == 6
    for got, want in zip(history, ref):
        assert np.max(np.abs(got - want)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(2, 5), st.integers(0, 2**31 - 1), st.floats(0.0, 30.0))
def test_rows_stay_normalised(n, num_classes, seed, weight):
    pos, col, scores = _instance(n, num_classes, seed)
    history = []
    mean_field(pos, col, unary_potentials(scores), CrfConfig(w1=weight, w2=weight / 2, iterations=6), history)
    for q in history:
        assert np.all(q >= 0)
        assert np.max(np.abs(q.sum(axis=1) - 1.0)) < 1e-9


def _two_point_closed_form(d, k, iterations):
    """Q_i(A) for two colocated identical points and two labels.

    With Potts messages the update is Q_i(A) = sigmoid(d_i + k (2 Q_j(A) - 1)),
    where d_i = u_i(B) - u_i(A).
    """
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))  # noqa: E731
    q = [sig(d[0]), sig(d[1])]
    for _ in range(iterations):
        q = [sig(d[0] + k * (2 * q[1] - 1)), sig(d[1] + k * (2 * q[0] - 1))]
    return q


def test_two_point_flip_correction():
    pos = np.zeros((2, 3))
    col = np.full((2, 3), 0.5)
    scores = ScoreMap([[4.0, 0.0], [0.0, 0.3]], [1, 1], "fused")  # point 1 weakly prefers B
    assert argmax_positive(scores).labels.tolist() == [0, 1]
    cfg = CrfConfig(w1=3.0, w2=1.0, iterations=5)
    unary = unary_potentials(scores)
    q = mean_field(pos, col, unary, cfg)
    d = unary[:, 1] - unary[:, 0]
    want = _two_point_closed_form(d, cfg.w1 + cfg.w2, cfg.iterations)
    np.testing.assert_allclose(q[:, 0], want, rtol=0, atol=1e-12)
    assert crf_refine(PointCloud(pos, col), scores, cfg).labels.tolist() == [0, 0]


@pytest.mark.parametrize("k", [0.0, 0.05, 0.1, 0.15, 0.2, 0.5, 1.0, 4.0])
def test_two_point_sweep_follows_closed_form(k):
    pos = np.zeros((2, 3))
    col = np.zeros((2, 3))
    scores = ScoreMap([[2.0, 0.0], [0.0, 0.3]], [1, 1], "fused")
    cfg = CrfConfig(w1=k, w2=0.0, iterations=10)
    unary = unary_potentials(scores)
    want = _two_point_closed_form(unary[:, 1] - unary[:, 0], k, 10)
    got = crf_refine(PointCloud(pos, col), scores, cfg).labels
    assert got.tolist() == [0 if w > 0.5 else 1 for w in want]


def test_masked_classes_get_finite_penalty():
    scores = ScoreMap([[0.0, 9.0, 1.0]], [1, 0, 1], "fused")
    u = unary_potentials(scores)
    assert u[0, 1] == MASKED_PENALTY and np.all(np.isfinite(u))
    assert u[0, 2] == pytest.approx(-math.log(math.e / (1 + math.e)))


def test_errors():
    with pytest.raises(FloatingPointError):
        ScoreMap([[np.nan, 0.0]], [1, 1], "fused")
    with pytest.raises(ValueError):
        unary_potentials(ScoreMap([[0.0, 0.0]], [0, 0], "fused"))
    big = np.zeros((EXACT_BUDGET + 1, 3))
    with pytest.raises(ValueError, match="budget"):
        mean_field(big, big, np.zeros((EXACT_BUDGET + 1, 2)), CrfConfig())
    with pytest.raises(ValueError):
        crf_refine(PointCloud(np.zeros((2, 3)), np.zeros((2, 3))), ScoreMap([[1.0]], [1], "f"))


def test_config_from_mapping():
    cfg = CrfConfig.from_mapping({"w1": "4", "iterations": "3"})
    assert cfg.w1 == 4.0 and cfg.iterations == 3
    with pytest.raises(KeyError):
        CrfConfig.from_mapping({"bandwidth": 1})


def test_large_instance_uses_chunks_consistently():
    pos, col, scores = _instance(300, 3, 9)
    unary = unary_potentials(scores)
    a = mean_field(pos, col, unary, CrfConfig(iterations=3, chunk=1024))
    b = mean_field(pos, col, unary, CrfConfig(iterations=3, chunk=37))
    np.testing.assert_allclose(a, b, atol=1e-13)
