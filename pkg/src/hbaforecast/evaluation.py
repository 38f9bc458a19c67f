"""Forecast skill metrics and reference forecasts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import poisson


@dataclass(frozen=True)
class Skill:
    mspe: float
    corr: float  # NaN when either vector has zero variance

    @property
    def corr_defined(self) -> bool:
        return not math.isnan(self.corr)


def evaluate(predicted, observed) -> Skill:
    """Mean squared prediction error and Pearson correlation across sites."""
    p = np.asarray(predicted, dtype=float).ravel()
    o = np.asarray(observed, dtype=float).ravel()
    if p.shape != o.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {o.shape}")
    mspe = float(np.mean((p - o) ** 2))
    pc, oc = p - p.mean(), o - o.mean()
    denom = math.sqrt(float(pc @ pc) * float(oc @ oc))
    corr = float(pc @ oc) / denom if denom > 0 else math.nan
    return Skill(mspe, corr)


@dataclass(eq=False)
class Grids:
    """Per-site predictive summaries in the common output format."""

    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def table(self) -> np.ndarray:
        return np.column_stack([self.mean, self.lower, self.upper])


def _poisson_band(mean):
    return Grids(mean, poisson.ppf(0.025, mean), poisson.ppf(0.975, mean))


def climatology(train_counts) -> Grids:
    """Per-site training mean with Poisson 95% bands."""
    y = np.asarray(train_counts, dtype=float)
    return _poisson_band(y.mean(axis=1))


def persistence(train_counts) -> Grids:
    """The last training period's counts with Poisson 95% bands."""
    y = np.asarray(train_counts, dtype=float)
    return _poisson_band(y[:, -1].copy())
