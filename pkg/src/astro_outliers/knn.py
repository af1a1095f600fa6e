"""Distance-based outlier scoring (k-th nearest neighbour distance).

Scores are exact brute-force Euclidean distances (direct differences, no
Gram-matrix shortcut), evaluated in row blocks so memory stays bounded.
The declared outliers are the ``m`` highest scores, picked with a bounded
min-heap.
"""

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points
from .exceptions import ConfigError

SCORE_MODES = ("kth_distance", "mean_k_distance")

# upper bound on entries of one (block, n) distance block
_BLOCK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class KnnConfig:
    k: int = 5
    score_mode: str = "kth_distance"
    metric: str = "euclidean"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.score_mode not in SCORE_MODES:
            raise ConfigError(f"score_mode must be one of {SCORE_MODES}")
        if self.metric != "euclidean":
            raise ConfigError("only the euclidean metric is supported")


@dataclass
class OutlierScores:
    scores: np.ndarray
    flagged: list = field(default_factory=list)
    fraction: float = 0.1


def round_half_up(x):
    return int(np.floor(x + 0.5))


def _squared_distances_block(queries, points):
    return cdist(queries, points, "sqeuclidean")


def pairwise_sq_distances(queries, points):
    """Exact squared Euclidean distances, rows computed in bounded blocks."""
    n = len(points)
    block = max(1, _BLOCK_ELEMENTS // max(1, n))
    out = np.empty((len(queries), n))
    for start in range(0, len(queries), block):
        out[start:start + block] = _squared_distances_block(queries[start:start + block], points)
    return out


def _reduce_neighbours(sq, k, score_mode):
    if score_mode == "kth_distance":
        return np.sqrt(np.partition(sq, k - 1, axis=1)[:, k - 1])
    nearest = np.sqrt(np.sort(np.partition(sq, k - 1, axis=1)[:, :k], axis=1))
    # left-to-right sum from the nearest outward, so the result does not
    # depend on numpy's pairwise-summation blocking
    total = nearest[:, 0].copy()
    for j in range(1, k):
        total += nearest[:, j]
    return total / k


def knn_scores(points, config=None):
    """Distance from each point to its k-th nearest other point.

    ``mean_k_distance`` mode averages the k nearest distances instead.  The
    point itself is excluded by index, so exact duplicates score 0 at k=1.
    """
    config = config or KnnConfig()
    X = check_points(points)
    n = len(X)
    if n <= config.k:
        raise ConfigError(f"need more than k={config.k} points, got {n}")
    block = max(1, _BLOCK_ELEMENTS // n)
    scores = np.empty(n)
    for start in range(0, n, block):
        stop = min(n, start + block)
        sq = _squared_distances_block(X[start:stop], X)
        sq[np.arange(stop - start), np.arange(start, stop)] = np.inf
        scores[start:stop] = _reduce_neighbours(sq, config.k, config.score_mode)
    return scores


def top_m_flagged(scores, m):
    """Sorted indices of the ``m`` largest scores.

    Uses a size-``m`` min-heap keyed on ``(score, -index)``, so on equal
    scores the lower index is kept.
    """
    scores = np.asarray(scores, dtype=float)
    n = len(scores)
    if m < 0 or m > n:
        raise ConfigError(f"cannot flag {m} of {n} samples")
    if m == 0:
        return []
    heap = []
    for i, s in enumerate(scores.tolist()):
        key = (s, -i)
        if len(heap) < m:
            heapq.heappush(heap, key)
        elif key > heap[0]:
            heapq.heapreplace(heap, key)
    return sorted(-neg for _, neg in heap)


def detect(points, config=None, fraction=0.1):
    """Score ``points`` and flag the top ``round(fraction * n)`` as outliers."""
    if not 0 < fraction < 1:
        raise ConfigError("fraction must lie in (0, 1)")
    scores = knn_scores(points, config)
    m = round_half_up(fraction * len(scores))
    return OutlierScores(scores, top_m_flagged(scores, m), fraction)


def write_scores(path, scores, sample_ids=None):
    """Write a ``sample_id,score`` delimited text file."""
    scores = np.asarray(scores, dtype=float)
    ids = range(len(scores)) if sample_ids is None else sample_ids
    with open(path, "w") as fh:
        fh.write("sample_id,score\n")
        for sid, s in zip(ids, scores):
            fh.write(f"{sid},{float(s)!r}\n")


def read_scores(path):
    ids, scores = [], []
    with open(path) as fh:
        next(fh)
        for line in fh:
            sid, s = line.rstrip("\n").rsplit(",", 1)
            ids.append(sid)
            scores.append(float(s))
    return ids, np.array(scores)


class KnnOutlierDetector(OutlierMixin, BaseEstimator):
    """k-NN distance outlier detector with a scikit-learn interface.

    ``fit`` scores the training points against each other (self excluded);
    ``decision_scores_`` and ``labels_`` (1 = outlier) describe that set.
    ``decision_function`` scores new points against the fitted set.  Larger
    scores are more anomalous.
    """

    def __init__(self, n_neighbors=5, score_mode="kth_distance", contamination=0.1):
        self.n_neighbors = n_neighbors
        self.score_mode = score_mode
        self.contamination = contamination

    def _config(self):
        return KnnConfig(self.n_neighbors, self.score_mode)

    def fit(self, X, y=None):
        X = check_points(X)
        result = detect(X, self._config(), self.contamination)
        self.fit_points_ = X
        self.decision_scores_ = result.scores
        self.flagged_ = np.asarray(result.flagged, dtype=int)
        self.labels_ = np.zeros(len(X), dtype=int)
        self.labels_[self.flagged_] = 1
        m = len(self.flagged_)
        self.threshold_ = float(np.min(result.scores[self.flagged_])) if m else np.inf
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "fit_points_")
        X = check_points(X)
        k = self.n_neighbors
        if k > len(self.fit_points_):
            raise ConfigError("fewer fitted points than n_neighbors")
        sq = pairwise_sq_distances(X, self.fit_points_)
        return _reduce_neighbours(sq, k, self.score_mode)

    def predict(self, X):
        """1 for outliers, 0 for inliers (threshold taken from the fitted set)."""
        return (self.decision_function(X) >= self.threshold_).astype(int)

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_
