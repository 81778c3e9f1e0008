"""Decimation benchmark: time and peak memory of each sampler under a repeated plan."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional

import numpy as np

from .errors import ArgumentError, BudgetExceeded, MemoryBudgetExceeded
from .samplers import (
    DEFAULT_IDIS_T,
    DEFAULT_MEMORY_BUDGET,
    METHODS,
    DecimationPlan,
    Deadline,
    SampleResult,
    crs_sample,
    farthest_point_sample,
    inverse_density_sample,
    random_sample,
)

CSV_HEADER = ("method", "n_points", "step_ratio", "steps", "elapsed_s", "peak_bytes", "status")
DEFAULT_TIME_BUDGET = 300.0


@dataclass
class BenchmarkRow:
    method: str
    n_points: int
    step_ratio: float
    steps: int
    elapsed_s: float
    peak_bytes: int
    status: str = "ok"  # ok | timeout | oom

    def as_tuple(self):
        return (self.method, self.n_points, self.step_ratio, self.steps,
                f"{self.elapsed_s:.9f}", self.peak_bytes, self.status)


@dataclass
class BenchmarkReport:
    rows: List[BenchmarkRow] = field(default_factory=list)

    def row(self, method: str, n_points: int) -> BenchmarkRow:
        for r in self.rows:
            if r.method == method and r.n_points == n_points:
                return r
        raise KeyError((method, n_points))

    @property
    def has_failures(self) -> bool:
        return any(r.status != "ok" for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(r.as_tuple())
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(self.to_csv())


def normalize_methods(methods: Iterable[str]) -> List[str]:
    out = []
    for m in methods:
        name = m.strip().upper()
        if name not in METHODS:
            raise ArgumentError(f"unknown sampling method {m!r}; choose from {', '.join(METHODS)}")
        if name not in out:
            out.append(name)
    if not out:
        raise ArgumentError("no sampling methods given")
    return out


def uniform_cloud(n: int, seed: int, extent: float = 1.0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, extent, size=(n, 3))


def _run_cell(method, pos, plan, seed, deadline, memory_budget, fps_start, idis_t, idis_invert, crs_tau):
    elapsed, peak = 0.0, 0
    for step in range(plan.steps):
        n = len(pos)
        k = int(math.ceil(n * plan.ratio))
        if method == "RS":
            res = random_sample(pos, k, seed + step)
        elif method == "FPS":
            res = farthest_point_sample(pos, k, fps_start, deadline=deadline)
        elif method == "IDIS" and n == 1:
            res = SampleResult(np.zeros(1, dtype=np.int64))  # nothing to rank
        elif method == "IDIS":
            res = inverse_density_sample(pos, k, min(idis_t, n - 1), idis_invert, deadline=deadline)
        else:
            scores = np.full(n, 1.0 / n)
            res = crs_sample(pos, scores, k, crs_tau, seed + step, memory_budget=memory_budget)
        elapsed += res.elapsed
        peak = max(peak, res.peak_bytes)
        pos = res.selected if method == "CRS" else pos[res.selected]
        deadline.check()
    return elapsed, peak


def run_decimation_benchmark(
    cloud_sizes: Iterable[int],
    plan: DecimationPlan = DecimationPlan(),
    methods: Iterable[str] = METHODS,
    seed: int = 0,
    time_budget: Optional[float] = DEFAULT_TIME_BUDGET,
    memory_budget: Optional[int] = DEFAULT_MEMORY_BUDGET,
    fps_start: int = 0,
    idis_t: int = DEFAULT_IDIS_T,
    idis_invert: bool = False,
    crs_tau: float = 1.0,
    progress: Optional[Callable[[BenchmarkRow], None]] = None,
) -> BenchmarkReport:
    """One row per (size, method); cells run sequentially.

    A cell that passes ``time_budget`` is recorded as ``timeout`` and one whose
    CRS weight matrix would exceed ``memory_budget`` as ``oom`` (with the bytes
    it would have needed); neither aborts the run.
    """
    sizes = [int(s) for s in cloud_sizes]
    if not sizes:
        raise ArgumentError("no cloud sizes given")
    if any(s < 1 for s in sizes):
        raise ArgumentError("cloud sizes must be positive")
    if sizes != sorted(sizes):
        raise ArgumentError("cloud sizes must be sorted ascending")
    methods = normalize_methods(methods)
    report = BenchmarkReport()
    for n in sizes:
        pos = uniform_cloud(n, seed)
        for method in methods:
            deadline = Deadline(time_budget)
            try:
                elapsed, peak = _run_cell(method, pos, plan, seed, deadline, memory_budget,
                                          fps_start, idis_t, idis_invert, crs_tau)
                status = "ok"
            except BudgetExceeded:
                elapsed, peak, status = time_budget, 0, "timeout"
            except MemoryBudgetExceeded as e:
                elapsed, peak, status = 0.0, e.required_bytes, "oom"
            row = BenchmarkRow(method, n, plan.ratio, plan.steps, elapsed, peak, status)
            report.rows.append(row)
            if progress is not None:
                progress(row)
    return report
