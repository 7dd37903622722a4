"""Correlation statistics, detection metrics and the forward/backward timing
benchmark.

Rankings sort by descending score; ties go to the smaller source index.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import models
from .data import Dataset
from .errors import ConfigError, DataError
from .estimators import InfluenceReport


@dataclass(frozen=True)
class CorrelationResult:
    pearson: float
    spearman: float
    n_pairs: int

    def __post_init__(self):
        if self.n_pairs < 2:
            raise ConfigError("a correlation needs at least two pairs")
        for name in ("pearson", "spearman"):
            value = getattr(self, name)
            if not -1.0 <= value <= 1.0:
                raise ConfigError(f"{name}={value} outside [-1, 1]")

    def to_dict(self):
        return {"pearson": self.pearson, "spearman": self.spearman, "n_pairs": self.n_pairs}


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ConfigError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ConfigError("a correlation needs at least two pairs")
    return x, y


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(xc @ xc), np.sqrt(yc @ yc)
    if sx == 0.0 or sy == 0.0:
        raise ConfigError("undefined correlation: zero variance")
    r = float((xc @ yc) / (sx * sy))
    return min(1.0, max(-1.0, r))


def spearman(x, y) -> float:
    """Pearson on average ranks."""
    x, y = _pair(x, y)
    return pearson(rankdata(x, method="average"), rankdata(y, method="average"))


def correlate(x, y) -> CorrelationResult:
    x, y = _pair(x, y)
    return CorrelationResult(pearson(x, y), spearman(x, y), int(x.size))


def mean_correlation(results) -> CorrelationResult:
    """Plain (not Fisher-z) mean over several correlation results."""
    results = list(results)
    if not results:
        raise ConfigError("nothing to average")
    return CorrelationResult(
        float(np.mean([r.pearson for r in results])),
        float(np.mean([r.spearman for r in results])),
        int(min(r.n_pairs for r in results)),
    )


def ranking(scores) -> np.ndarray:
    """Source indices by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def topk_detection(report: InfluenceReport, truth_ids, k: int) -> float:
    if k < 1:
        raise ConfigError("k must be >= 1")
    truth = list(truth_ids)
    if not truth:
        raise DataError("no truth ids given")
    position = {sid: i for i, sid in enumerate(report.source_ids)}
    missing = [t for t in truth if t not in position]
    if missing:
        raise DataError(f"unknown truth id {missing[0]!r}")
    rank = np.empty(len(report.source_ids), dtype=np.int64)
    rank[ranking(report.scores)] = np.arange(1, rank.size + 1)
    return float(np.mean([rank[position[t]] <= k for t in truth]))


@dataclass(frozen=True)
class DetectionCurve:
    inspected_fraction: np.ndarray
    found_fraction: np.ndarray

    def __post_init__(self):
        a, b = self.inspected_fraction, self.found_fraction
        assert a.shape == b.shape
        assert np.all(np.diff(a) > 0) and a[0] > 0 and a[-1] <= 1.0
        assert np.all(np.diff(b) >= 0) and b.min() >= 0 and b.max() <= 1.0

    def found_at(self, inspected: float) -> float:
        """Found fraction after inspecting ``inspected`` of the sources."""
        i = int(np.searchsorted(self.inspected_fraction, inspected - 1e-12))
        return float(self.found_fraction[min(i, self.found_fraction.size - 1)])

    def to_csv(self) -> str:
        rows = ["inspected_fraction,found_fraction"]
        rows += [f"{a!r},{b!r}" for a, b in zip(self.inspected_fraction.tolist(),
                                                 self.found_fraction.tolist())]
        return "\n".join(rows) + "\n"


def detection_curve(report: InfluenceReport, corrupt_mask) -> DetectionCurve:
    mask = np.asarray(corrupt_mask, dtype=bool).reshape(-1)
    if mask.size != len(report.source_ids):
        raise ConfigError("mask length must equal the number of sources")
    n = mask.size
    found = np.cumsum(mask[ranking(report.scores)]).astype(np.float64)
    total = mask.sum()
    found = found / total if total else np.zeros(n)
    return DetectionCurve(np.arange(1, n + 1) / n, found)


def _median_time(fn, repeats):
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def bench_passes(spec, data: Dataset, tst: Dataset, repeats: int = 5, params=None) -> dict:
    """Median wall time per example of a loss evaluation versus a gradient.

    Each repeat walks over every row of ``data`` one row at a time, then
    divides by the row count. ``tst`` is touched once so that caches are warm.
    Parameters default to the model's initialisation.
    """
    if repeats < 3:
        raise ConfigError("repeats must be >= 3")
    params = models.init_params(spec) if params is None else params
    rows = range(data.n)
    models.data_loss(spec, params, tst)

    def forward():
        for i in rows:
            models.data_loss(spec, params, data, [i])

    def backward():
        for i in rows:
            models.grad(spec, params, data, [i], regularized=False)

    fwd = _median_time(forward, repeats) / data.n
    bwd = _median_time(backward, repeats) / data.n
    return {"forward_per_point_s": fwd, "backward_per_point_s": bwd, "ratio": bwd / fwd}
