import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

import oracles
from astro_outliers.exceptions import ConfigError
from astro_outliers.knn import (
    KnnConfig,
    KnnOutlierDetector,
    detect,
    knn_scores,
    read_scores,
    round_half_up,
    top_m_flagged,
    write_scores,
)


def test_collinear_hand_geometry():
    np.testing.assert_array_equal(knn_scores(np.array([[0.0], [1.0], [10.0]]), KnnConfig(k=1)), [1.0, 1.0, 9.0])


def test_duplicates_score_zero():
    pts = np.repeat(np.random.default_rng(0).standard_normal((5, 3)), 2, axis=0)
    np.testing.assert_array_equal(knn_scores(pts, KnnConfig(k=1)), np.zeros(10))


@pytest.mark.parametrize("mode", ["kth_distance", "mean_k_distance"])
def test_random_matrix_vs_full_sort(mode):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((50, 4))
    for k in (1, 3, 5):
        np.testing.assert_array_equal(knn_scores(x, KnnConfig(k, mode)), oracles.kth_distance_sort(x, k, mode))


def test_n_not_above_k():
    with pytest.raises(ConfigError):
        knn_scores(np.zeros((5, 2)), KnnConfig(k=5))
    with pytest.raises(ConfigError):
        KnnConfig(k=0)
    with pytest.raises(ConfigError):
        KnnConfig(score_mode="median")


def test_blocked_evaluation_matches_single_block(monkeypatch):
    import astro_outliers.knn as knn_mod

    x = np.random.default_rng(2).standard_normal((40, 6))
    full = knn_scores(x)
    monkeypatch.setattr(knn_mod, "_BLOCK_ELEMENTS", 50)
    np.testing.assert_array_equal(knn_scores(x), full)


def test_top_m_examples():
    assert top_m_flagged([3, 1, 2], 1) == [0]
    assert top_m_flagged([3, 1, 2], 3) == [0, 1, 2]
    assert top_m_flagged([3, 1, 2], 0) == []
    assert top_m_flagged([1, 5, 5, 5, 0], 2) == [1, 2]
    with pytest.raises(ConfigError):
        top_m_flagged([1, 2], 3)


def test_top_m_large_vs_sort():
    scores = np.random.default_rng(3).standard_normal(10_000)
    assert top_m_flagged(scores, 533) == oracles.top_m_sort(scores.tolist(), 533)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=60), st.data())
def test_top_m_ties_vs_sort(values, data):
    m = data.draw(st.integers(0, len(values)))
    scores = [float(v) for v in values]
    got = top_m_flagged(scores, m)
    assert got == oracles.top_m_sort(scores, m)
    if got and len(got) < len(scores):
        rest = set(range(len(scores))) - set(got)
        assert min(scores[i] for i in got) >= max(scores[i] for i in rest)


def test_detect_counts_and_planted_outliers():
    rng = np.random.default_rng(4)
    assert len(detect(rng.standard_normal((5330, 2)), fraction=0.1).flagged) == 533
    ball = rng.normal(0, 0.05, size=(100, 3))
    far = rng.normal(0, 1, size=(10, 3)) + 20 * np.sign(rng.standard_normal((10, 3)))
    res = detect(np.vstack([ball, far]), KnnConfig(k=3), fraction=10 / 110)
    assert res.flagged == list(range(100, 110))
    assert len(detect(np.array([[0.0], [1.0]]), KnnConfig(k=1), 0.5).flagged) == 1
    with pytest.raises(ConfigError):
        detect(ball, fraction=1.0)


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 533.4, 533.5)] == [1, 2, 3, 533, 534]


point_sets = arrays(np.float64, st.tuples(st.integers(7, 25), st.integers(1, 4)),
                    elements=st.floats(-100, 100, allow_nan=False).map(lambda v: round(v, 2)))


@settings(max_examples=40, deadline=None)
@given(point_sets, st.integers(0, 2**31))
def test_permutation_equivariance(x, seed):
    perm = np.random.default_rng(seed).permutation(len(x))
    np.testing.assert_array_equal(knn_scores(x[perm]), knn_scores(x)[perm])


@settings(max_examples=40, deadline=None)
@given(point_sets, st.floats(0.1, 10), st.floats(-50, 50))
def test_translation_and_scaling(x, a, c):
    np.testing.assert_allclose(knn_scores(a * x + c), a * knn_scores(x), rtol=1e-9, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(point_sets)
def test_far_point_does_not_lower_scores(x):
    span = np.ptp(x, axis=0).max() if len(x) else 0.0
    far = x.max(axis=0) + 10 * (span + 1)
    before = knn_scores(x)
    after = knn_scores(np.vstack([x, far]))[:-1]
    assert np.all(after >= before)


def test_score_file_roundtrip(tmp_path):
    s = np.random.default_rng(5).standard_normal(20)
    write_scores(tmp_path / "s.csv", s, [f"id{i}" for i in range(20)])
    ids, back = read_scores(tmp_path / "s.csv")
    assert ids[0] == "id0"
    np.testing.assert_array_equal(back, s)


def test_detector_estimator_api():
    rng = np.random.default_rng(6)
    x = np.vstack([rng.normal(0, 0.1, (60, 2)), [[5.0, 5.0], [-5.0, 5.0]]])
    det = KnnOutlierDetector(n_neighbors=3, contamination=2 / 62)
    assert clone(det).get_params() == det.get_params()
    labels = det.fit_predict(x)
    assert labels[-2:].tolist() == [1, 1] and labels.sum() == 2
    assert det.decision_scores_.shape == (62,)
    assert det.predict(np.array([[10.0, 10.0], [0.0, 0.0]])).tolist() == [1, 0]
