"""Point samplers (random, farthest-point, inverse-density, Gumbel-softmax relaxation)
with wall-clock and peak-allocation instrumentation."""
from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ArgumentError, BudgetExceeded, MemoryBudgetExceeded
from .neighbors import knn, knn_grid

DEFAULT_IDIS_T = 16
DEFAULT_MEMORY_BUDGET = 1 << 30
SCORE_SUM_TOL = 1e-6


@dataclass
class SampleResult:
    selected: np.ndarray  # K indices, or K x (d+3) soft points for CRS
    elapsed: float = 0.0
    peak_bytes: int = 0
    weights: Optional[np.ndarray] = None  # CRS only: K x N mixing weights


@dataclass(frozen=True)
class DecimationPlan:
    steps: int = 5
    ratio: float = 0.25

    def __post_init__(self):
        if self.steps < 1:
            raise ArgumentError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 < self.ratio < 1.0:
            raise ArgumentError(f"ratio must be in (0, 1), got {self.ratio}")

    def sizes(self, n: int):
        """Point count entering each step."""
        out = []
        for _ in range(self.steps):
            out.append(n)
            n = int(np.ceil(n * self.ratio))
        return out


class Deadline:
    """Cooperative wall-clock budget; samplers call ``check()`` inside their loops."""

    def __init__(self, seconds: Optional[float]):
        self.seconds = seconds
        self.expires = None if seconds is None else time.perf_counter() + seconds

    def expired(self) -> bool:
        return self.expires is not None and time.perf_counter() > self.expires

    def check(self):
        if self.expired():
            raise BudgetExceeded(f"time budget of {self.seconds} s exceeded")


def _positions(cloud) -> np.ndarray:
    pos = np.asarray(getattr(cloud, "positions", cloud), dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ArgumentError(f"expected N x 3 coordinates, got shape {pos.shape}")
    return pos


def _check_k(k, n):
    if not 0 < k <= n:
        raise ArgumentError(f"k must satisfy 0 < k <= N={n}, got {k}")


def instrumented(fn, *args, **kwargs):
    """Run ``fn`` and return (result, elapsed seconds, peak transient bytes)."""
    started_here = not tracemalloc.is_tracing()
    if started_here:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base = tracemalloc.get_traced_memory()[0]
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kwargs)
    finally:
        elapsed = time.perf_counter() - t0
        peak = max(0, tracemalloc.get_traced_memory()[1] - base)
        if started_here:
            tracemalloc.stop()
    return out, elapsed, peak


def _wrap(fn, *args, **kwargs) -> SampleResult:
    res, elapsed, peak = instrumented(fn, *args, **kwargs)
    if isinstance(res, SampleResult):
        res.elapsed, res.peak_bytes = elapsed, peak
        return res
    return SampleResult(res, elapsed, peak)


# ---------------------------------------------------------------------------
# random


def random_indices(n: int, k: int, seed) -> np.ndarray:
    _check_k(k, n)
    return np.random.default_rng(seed).choice(n, size=k, replace=False)


def random_sample(cloud, k: int, seed) -> SampleResult:
    n = len(_positions(cloud))
    _check_k(k, n)
    return _wrap(random_indices, n, k, seed)


# ---------------------------------------------------------------------------
# farthest point


def farthest_point_indices(pos: np.ndarray, k: int, start: int = 0, deadline: Deadline = None) -> np.ndarray:
    n = len(pos)
    _check_k(k, n)
    if not 0 <= start < n:
        raise ArgumentError(f"start index {start} out of range for N={n}")
    x, y, z = (np.ascontiguousarray(pos[:, i]) for i in range(3))
    mind = np.full(n, np.inf)
    d = np.empty(n)
    t = np.empty(n)
    out = np.empty(k, dtype=np.int64)
    cur = start
    for m in range(k):
        out[m] = cur
        if m == k - 1:
            break
        # squared distance from the newest sample, same evaluation order as the KNN backends
        np.subtract(x, x[cur], out=d)
        np.multiply(d, d, out=d)
        np.subtract(y, y[cur], out=t)
        np.multiply(t, t, out=t)
        d += t
        np.subtract(z, z[cur], out=t)
        np.multiply(t, t, out=t)
        d += t
        np.minimum(mind, d, out=mind)
        mind[cur] = -np.inf  # selected points never win again, even at distance 0
        cur = int(np.argmax(mind))  # first maximum = lowest index on ties
        if deadline is not None and (m & 63) == 0:
            deadline.check()
    return out


def farthest_point_sample(cloud, k: int, start: int = 0, deadline: Deadline = None) -> SampleResult:
    return _wrap(farthest_point_indices, _positions(cloud), k, start, deadline)


# ---------------------------------------------------------------------------
# inverse density


def idis_density(pos: np.ndarray, t: int = DEFAULT_IDIS_T, deadline: Deadline = None) -> np.ndarray:
    """Sum of distances to the t nearest other points."""
    n = len(pos)
    if not 1 <= t < n:
        raise ArgumentError(f"t must satisfy 1 <= t < N={n}, got {t}")
    if deadline is not None and n * n > (1 << 20):
        nb = knn_grid(pos, pos, t + 1, deadline=deadline)
    else:
        nb = knn(pos, pos, t + 1)
    # the row holds the point itself at distance 0, so summing all t+1 entries
    # equals the sum over the t nearest others; accumulate left to right
    rho = nb.distances[:, 0].copy()
    for j in range(1, t + 1):
        rho += nb.distances[:, j]
    return rho


def rank_by_inverse_density(rho: np.ndarray, invert: bool = False) -> np.ndarray:
    with np.errstate(divide="ignore"):
        inv = 1.0 / rho
    key = inv if invert else -inv
    return np.lexsort((np.arange(len(rho)), key))


def inverse_density_indices(pos, k: int, t: int = DEFAULT_IDIS_T, invert: bool = False,
                            deadline: Deadline = None) -> np.ndarray:
    _check_k(k, len(pos))
    rho = idis_density(pos, t, deadline)
    return rank_by_inverse_density(rho, invert)[:k]


def inverse_density_sample(cloud, k: int, t: int = DEFAULT_IDIS_T, invert: bool = False,
                           deadline: Deadline = None) -> SampleResult:
    """Keep the k points with the largest 1/rho (``invert`` keeps the smallest)."""
    return _wrap(inverse_density_indices, _positions(cloud), k, t, invert, deadline)


# ---------------------------------------------------------------------------
# continuous relaxation


def gumbel_noise(k: int, n: int, seed) -> np.ndarray:
    return np.random.default_rng(seed).gumbel(0.0, 1.0, size=(k, n))


def crs_weights(scores: np.ndarray, k: int, tau: float, seed=0, noise: bool = True) -> np.ndarray:
    """K x N Gumbel-softmax mixing weights; row i uses its own noise draw."""
    scores = np.asarray(scores, dtype=np.float64)
    if not tau > 0:
        raise ArgumentError(f"tau must be positive, got {tau}")
    if scores.ndim != 1 or len(scores) == 0:
        raise ArgumentError("scores must be a non-empty vector")
    if not (np.all(scores > 0) and abs(scores.sum() - 1.0) <= SCORE_SUM_TOL):
        raise ArgumentError("scores must be strictly positive and sum to 1")
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    logits = np.broadcast_to(np.log(scores), (k, len(scores)))
    if noise:
        logits = logits + gumbel_noise(k, len(scores), seed)
    logits = logits / tau
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return w


def crs_sample(features, scores, k: int, tau: float, seed=0, noise: bool = True,
               memory_budget: Optional[int] = None) -> SampleResult:
    """k soft points, each a convex combination of every feature row."""
    feats = np.asarray(getattr(features, "data", features), dtype=np.float64)
    scores = np.asarray(getattr(scores, "data", scores), dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != scores.shape[0]:
        raise ArgumentError(f"features {feats.shape} do not match {scores.shape[0]} scores")
    need = 8 * k * feats.shape[0]
    if memory_budget is not None and need > memory_budget:
        raise MemoryBudgetExceeded(
            f"CRS needs a {k} x {feats.shape[0]} weight matrix ({need} bytes)", need
        )

    def run():
        w = crs_weights(scores, k, tau, seed, noise)
        return SampleResult(w @ feats, weights=w)

    return _wrap(run)


METHODS = ("RS", "FPS", "IDIS", "CRS")
