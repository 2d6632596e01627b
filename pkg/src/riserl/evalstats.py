"""Score normalization, interquartile mean and stratified bootstrap intervals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, UsageError


def normalize(score, ref_min: float, ref_max: float):
    if ref_max == ref_min:
        raise ConfigError("normalization references must differ")
    return (np.asarray(score, dtype=np.float64) - ref_min) / (ref_max - ref_min)


def denormalize(value, ref_min: float, ref_max: float):
    if ref_max == ref_min:
        raise ConfigError("normalization references must differ")
    return np.asarray(value, dtype=np.float64) * (ref_max - ref_min) + ref_min


def iqm(values) -> float:
    """Mean of the middle half of the sorted values.

    A quarter of the mass is cut from each end; a value straddling a cut
    point contributes in proportion to the part of it that lies inside.
    """
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = x.shape[0]
    if n == 0:
        raise UsageError("iqm of an empty sequence")
    lo, hi = n / 4.0, n - n / 4.0
    i = np.arange(n)
    w = np.clip(np.minimum(i + 1, hi) - np.maximum(i, lo), 0.0, None)
    return float(np.dot(w, x) / (n / 2.0))


@dataclass
class ScoreMatrix:
    scores: np.ndarray          # [runs, tasks]
    tasks: Sequence[str] = ()
    seeds: Sequence[int] = ()

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim == 1:
            self.scores = self.scores[:, None]
        if self.scores.ndim != 2 or self.scores.size == 0:
            raise ConfigError("scores must be a non-empty [runs, tasks] matrix")
        if not np.isfinite(self.scores).all():
            raise ConfigError("scores contain missing or non-finite entries")

    @property
    def num_runs(self) -> int:
        return self.scores.shape[0]


@dataclass
class Interval:
    point: float
    lo: float
    hi: float
    degenerate: bool = False

    @property
    def width(self) -> float:
        return self.hi - self.lo


def bootstrap_ci(matrix: ScoreMatrix | np.ndarray, statistic: Callable = iqm, resamples: int = 2000,
                 level: float = 0.95, seed: int = 0) -> Interval:
    """Percentile interval; runs are resampled with replacement independently per task."""
    if not isinstance(matrix, ScoreMatrix):
        matrix = ScoreMatrix(matrix)
    if resamples < 1 or not 0.0 < level < 1.0:
        raise ConfigError("need resamples >= 1 and level in (0, 1)")
    s = matrix.scores
    R, T = s.shape
    point = float(statistic(s))
    if R < 2:
        return Interval(point, point, point, degenerate=True)
    rng = np.random.default_rng(seed)
    idx = rng.integers(R, size=(resamples, R, T))
    boot = s[idx, np.arange(T)[None, None, :]]
    stats = np.array([statistic(b) for b in boot])
    a = (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [100 * a, 100 * (1 - a)])
    return Interval(point, float(lo), float(hi))
