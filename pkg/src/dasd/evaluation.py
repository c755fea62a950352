"""Retrieval metrics, clustering purity and pair-classification diagnostics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

KS = (1, 5, 10)


class EmptySplit(ValueError):
    pass


class DegenerateFeatures(ValueError):
    pass


@dataclass
class RetrievalMetrics:
    r1_tv: float
    r5_tv: float
    r10_tv: float
    r1_vt: float
    r5_vt: float
    r10_vt: float
    mAR: float
    median_rank_tv: float
    median_rank_vt: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    def recalls(self) -> list[float]:
        return [self.r1_tv, self.r5_tv, self.r10_tv, self.r1_vt, self.r5_vt, self.r10_vt]


def ranks_from_similarity(sim: np.ndarray) -> np.ndarray:
    """1-based rank of the diagonal item in each row.

    Higher similarity ranks first; ties go to the lower column index.
    """
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    if n == 0:
        raise EmptySplit("no items to rank")
    diag = np.diag(sim)[:, None]
    above = (sim > diag).sum(axis=1)
    cols = np.arange(n)[None, :]
    tied_before = ((sim == diag) & (cols < np.arange(n)[:, None])).sum(axis=1)
    return above + tied_before + 1


def retrieval_metrics(sim: np.ndarray) -> RetrievalMetrics:
    """Metrics for a square text-by-visual similarity matrix; row i pairs with column i."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity must be square, got {sim.shape}")
    if sim.shape[0] == 0:
        raise EmptySplit("no items to rank")
    tv = ranks_from_similarity(sim)
    vt = ranks_from_similarity(sim.T)
    rec = {}
    for name, ranks in (("tv", tv), ("vt", vt)):
        for k in KS:
            rec[f"r{k}_{name}"] = float(np.mean(ranks <= k))
    mar = float(np.mean([rec[f"r{k}_{d}"] for d in ("tv", "vt") for k in KS]))
    return RetrievalMetrics(
        **rec,
        mAR=mar,
        median_rank_tv=float(np.median(tv)),
        median_rank_vt=float(np.median(vt)),
        n=int(sim.shape[0]),
    )


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


def style_cluster_purity(features, labels, k: int | None = None, seed: int = 0, restarts: int = 20) -> float:
    """k-means (k = number of styles) purity of ``features`` against ``labels``."""
    from sklearn.cluster import KMeans

    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    k = len(np.unique(y)) if k is None else k
    if len(X) < 10 * k:
        raise ValueError(f"need at least {10 * k} samples for k={k}, got {len(X)}")
    if np.allclose(X, X[0]):
        raise DegenerateFeatures("all feature vectors are identical")
    assign = KMeans(n_clusters=k, n_init=restarts, random_state=seed).fit_predict(X)
    hits = 0
    for c in np.unique(assign):
        members = y[assign == c]
        hits += np.bincount(members).max()
    return hits / len(y)


def pair_accuracy(p_pos: np.ndarray, p_neg: np.ndarray) -> float:
    """Fraction of correct decisions at threshold 0.5 over positives and negatives."""
    p_pos, p_neg = np.asarray(p_pos), np.asarray(p_neg)
    return float((np.sum(p_pos > 0.5) + np.sum(p_neg < 0.5)) / (p_pos.size + p_neg.size))
