"""Coverage and sharpness metrics for prediction regions."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence as Seq

import numpy as np
from sklearn.cluster import KMeans

DEFAULT_EPS = 0.01
DEFAULT_DELTA = 0.2
DEFAULT_N_DIRS = 1000
DEFAULT_J = 4
DEFAULT_M = 100


@dataclass
class EvalRecord:
    covered: bool
    length: float
    embedding: np.ndarray
    log_z: Optional[np.ndarray] = None  # sorted log-density samples
    unbounded: bool = False


def marginal_coverage(records: Seq[EvalRecord]) -> float:
    if not records:
        raise ValueError("no records")
    return float(np.mean([r.covered for r in records]))


def avg_length(records: Seq[EvalRecord]) -> float:
    return float(np.mean([r.length for r in records]))


def region_length(region) -> float:
    return float(region.length)


def geo_length(records: Seq[EvalRecord], eps: float = DEFAULT_EPS) -> float:
    """Mean of log(length + eps)."""
    return float(np.mean(np.log(np.array([r.length for r in records]) + eps)))


def rel_length(lengths: dict[str, float]) -> dict[str, float]:
    """Average length of each method divided by the smallest one."""
    best = min(lengths.values())
    return {k: (v / best if best > 0 else (1.0 if v == best else math.inf)) for k, v in lengths.items()}


def sample_simplex(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws on the probability simplex (normalized exponentials)."""
    e = rng.exponential(size=(n, d))
    return e / e.sum(axis=1, keepdims=True)


def _worst_slab(proj: np.ndarray, covered: np.ndarray, min_count: int, stride: int = 1):
    """Contiguous window of sorted projections with >= min_count points and
    the lowest coverage. Returns (coverage, a, b)."""
    order = np.argsort(proj, kind="stable")
    p, c = proj[order], covered[order].astype(float)
    n = p.size
    csum = np.concatenate([[0.0], np.cumsum(c)])
    starts = np.arange(0, n, stride)
    stops = np.arange(1, n + 1)  # exclusive
    cnt = stops[None, :] - starts[:, None]
    ok = cnt >= min_count
    if not ok.any():
        return None
    cov = np.where(ok, (csum[stops][None, :] - csum[starts][:, None]) / np.maximum(cnt, 1), np.inf)
    i, j = np.unravel_index(np.argmin(cov), cov.shape)
    # windows touching either end of the sample extend to infinity on that side
    a = -math.inf if starts[i] == 0 else float(p[starts[i]])
    b = math.inf if stops[j] == n else float(p[stops[j] - 1])
    return float(cov[i, j]), a, b


def wsc(
    records: Seq[EvalRecord],
    delta: float = DEFAULT_DELTA,
    n_dirs: int = DEFAULT_N_DIRS,
    rng: Optional[np.random.Generator] = None,
    stride: int = 1,
    return_search: bool = False,
):
    """Worst-slab coverage: slab chosen on the first half, evaluated on the second."""
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(records)
    n1 = n // 2
    X = np.stack([r.embedding for r in records])
    cov = np.array([r.covered for r in records], dtype=bool)
    X1, c1, X2, c2 = X[:n1], cov[:n1], X[n1:], cov[n1:]
    min_count = max(int(math.ceil(delta * n1 - 1e-9)), 1)
    if n1 < 2 or n1 < min_count:
        raise ValueError("too few records for the requested slab mass")
    dirs = sample_simplex(n_dirs, X.shape[1], rng)
    best = (math.inf, None, 0.0, 0.0)
    proj1 = X1 @ dirs.T
    for d in range(n_dirs):
        found = _worst_slab(proj1[:, d], c1, min_count, stride)
        if found is not None and found[0] < best[0]:
            best = (found[0], d, found[1], found[2])
    if best[1] is None:
        raise ValueError("no admissible slab")
    search_cov, d, a, b = best
    proj2 = X2 @ dirs[d]
    inside = (proj2 >= a) & (proj2 <= b)
    value = float(c2[inside].mean()) if inside.any() else float(c2.mean())
    if return_search:
        return value, search_cov
    return value


def wasserstein_order_stat(za: np.ndarray, zb: np.ndarray) -> float:
    """2-Wasserstein estimate between two equal-size samples via order statistics."""
    return float(np.sqrt(np.sum((np.sort(za) - np.sort(zb)) ** 2)))


def fit_partition(cal_log_z: np.ndarray, J: int = DEFAULT_J, seed: int = 0) -> KMeans:
    """k-means++ on sorted log-density vectors (Euclidean = order-statistic W2)."""
    if J > cal_log_z.shape[0]:
        raise ValueError("J exceeds the number of calibration records")
    km = KMeans(n_clusters=J, init="k-means++", n_init=10, max_iter=100, tol=1e-8, random_state=seed)
    return km.fit(cal_log_z)


def cce(
    records: Seq[EvalRecord],
    alpha: float,
    cal_records: Seq[EvalRecord] | None = None,
    J: int = DEFAULT_J,
    seed: int = 0,
    weighting: str = "literal",
    partition: KMeans | None = None,
) -> float:
    """Conditional coverage error over a k-means partition of log-density profiles.

    `weighting="literal"` sums squared per-cluster deviations; `"size"` weights
    them by the fraction of test records in each cluster.
    """
    if partition is None:
        if cal_records is None:
            raise ValueError("need calibration records or a fitted partition")
        partition = fit_partition(np.stack([r.log_z for r in cal_records]), J, seed)
    Z = np.stack([r.log_z for r in records])
    labels = partition.predict(Z)
    cov = np.array([r.covered for r in records], dtype=float)
    total = 0.0
    for j in range(partition.n_clusters):
        mask = labels == j
        if not mask.any():
            continue
        dev = (cov[mask].mean() - (1 - alpha)) ** 2
        total += dev if weighting == "literal" else dev * mask.mean()
    if weighting not in ("literal", "size"):
        raise ValueError(f"unknown weighting {weighting!r}")
    return float(total)
