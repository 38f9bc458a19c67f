"""Synthetic count/forcing pairs with known structure, for desk-scale validation.

Both generators produce yearly counts stamped in May and monthly forcing that
covers every aligned anchor (``tau`` months before each count stamp) for the
``T`` recorded years plus one year beyond, so the period after the record can
be forecast.

``planted-analog-cycle``
    Years cycle through ``period`` regimes. Within each year's forcing window
    (counting back from the anchor) the first ``planted_lag - 1`` months carry
    a fixed climatology that anomalies remove exactly, the month at lag
    ``planted_lag - 1`` carries the regime signature, and every earlier month
    carries fresh random filler. Only embeddings of length ``planted_lag``
    therefore find exact analogs: same-regime years.

``lorenz63``
    A Lorenz-63 trajectory sampled once per forcing month drives both fields:
    forcing = spatial patterns times the latent state plus noise, counts =
    Poisson with intensity ``Psi_true @ g(state)`` where the state is taken at
    the aligned anchor, i.e. the forcing leads the counts by ``tau`` months.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import CountField, ForcingField, Location

SYSTEMS = ("planted-analog-cycle", "lorenz63")


@dataclass(frozen=True)
class SyntheticSpec:
    system: str = "planted-analog-cycle"
    n_y: int = 30
    n_x: int = 20
    T: int = 40
    n_latent: int = 4  # rank of the true intensity basis
    n_pattern: int = 5  # forcing spatial patterns (planted design)
    period: int = 8
    planted_lag: int = 6
    tau: int = 12
    lead_in: int = 12  # forcing months up to and including the first anchor
    forcing_scale: float = 1.0
    forcing_noise: float = 0.0
    filler_scale: float = 3.0
    count_scale: float = 20.0
    dt: float = 0.04  # Lorenz time units per forcing month
    link: str = "state"  # Lorenz link: softplus of the state, or "phase": its direction
    link_gain: float = 1.5
    start_year: int = 1970
    seed: int = 0

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system {self.system!r}; expected one of {SYSTEMS}")
        for name in ("n_y", "n_x", "T", "n_latent", "n_pattern", "period", "planted_lag"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lead_in < 12:
            raise ValueError("lead_in must cover at least one year")
        if self.planted_lag > 12:
            raise ValueError("planted_lag must fit inside one year of monthly forcing")
        if self.forcing_noise < 0 or self.forcing_scale <= 0 or self.dt <= 0:
            raise ValueError("noise scales must be >= 0 and dt > 0")


@dataclass(eq=False)
class SyntheticTruth:
    psi: np.ndarray  # n_y x n_latent
    g: np.ndarray  # n_latent x (T + 1) true coefficients (last column: next period)
    intensity: np.ndarray  # n_y x (T + 1)
    patterns: np.ndarray  # n_x x n_pattern
    latent: np.ndarray  # latent path at forcing resolution
    regime: np.ndarray | None = None  # per response period (planted design)
    analogs: list = field(default_factory=list)  # per period, same-regime periods
    next_counts: np.ndarray | None = None  # counts for the period after the record


def _locations(prefix: str, n: int, rng) -> tuple:
    lon = rng.uniform(-125.0, -65.0, n)
    lat = rng.uniform(25.0, 50.0, n)
    return tuple(Location(f"{prefix}{i:03d}", float(lon[i]), float(lat[i])) for i in range(n))


def _stamps(spec: SyntheticSpec):
    count_times = np.array(
        [np.datetime64(f"{spec.start_year + 1 + t}-05", "M") for t in range(spec.T)]
    )
    first_anchor = count_times[0] - np.timedelta64(spec.tau, "M")
    first = first_anchor - np.timedelta64(spec.lead_in - 1, "M")
    n_months = spec.lead_in + 12 * spec.T
    forcing_times = first + np.arange(n_months).astype("timedelta64[M]")
    return count_times, forcing_times


def lorenz63(n_steps: int, dt: float, rng, spin_up: int = 2000, substeps: int = 4,
             sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0) -> np.ndarray:
    """RK4 trajectory (3 x n_steps) sampled every ``dt`` after a spin-up."""

    def f(s):
        x, y, z = s
        return np.array([sigma * (y - x), x * (rho - z) - y, x * y - beta * z])

    h = dt / substeps
    s = np.array([1.0, 1.0, 20.0]) + rng.normal(0.0, 1.0, 3)
    out = np.empty((3, n_steps))
    for i in range(spin_up + n_steps):
        for _ in range(substeps):
            k1 = f(s)
            k2 = f(s + 0.5 * h * k1)
            k3 = f(s + 0.5 * h * k2)
            k4 = f(s + h * k3)
            s = s + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if i >= spin_up:
            out[:, i - spin_up] = s
    return out


def _planted(spec, rng, n_months):
    n_p = spec.n_pattern
    patterns = rng.normal(size=(spec.n_x, n_p))
    # dyadic climatology: its yearly mean is exact, so anomalies are exactly 0
    clim = np.round(rng.normal(0.0, 2.0, (spec.n_x, 12)) * 4.0) / 4.0
    signatures = rng.normal(size=(n_p, spec.period))
    regime = np.arange(spec.T + 1) % spec.period
    latent = spec.filler_scale * rng.normal(size=(n_p, n_months))
    first_anchor = spec.lead_in - 1
    for t in range(spec.T + 1):
        latent[:, first_anchor + 12 * t - spec.planted_lag + 1] = signatures[:, regime[t]]
    values = patterns @ latent
    lag = (first_anchor - np.arange(n_months)) % 12
    is_clim = lag < spec.planted_lag - 1
    values[:, is_clim] = clim[:, np.arange(n_months)[is_clim] % 12]
    latent[:, is_clim] = 0.0
    g = rng.gamma(2.0, 1.0, (spec.n_latent, spec.period))[:, regime]
    analogs = [np.flatnonzero((regime[: spec.T] == regime[t]) & (np.arange(spec.T) != t))
               for t in range(spec.T + 1)]
    return values, patterns, latent, g, regime, analogs


def _lorenz(spec, rng, n_months):
    path = lorenz63(n_months, spec.dt, rng)
    z = (path - path.mean(axis=1, keepdims=True)) / path.std(axis=1, keepdims=True)
    patterns = rng.normal(size=(spec.n_x, 3))
    values = patterns @ z
    at_anchor = z[:, [spec.lead_in - 1 + 12 * t for t in range(spec.T + 1)]]
    # nonnegative link: softplus of random projections of the state
    mix = rng.normal(size=(spec.n_latent, 3)) * spec.link_gain
    if spec.link == "state":
        g = np.logaddexp(0.0, mix @ at_anchor)
    else:
        unit = at_anchor / np.linalg.norm(at_anchor, axis=0)
        if spec.link == "phase":
            g = np.logaddexp(0.0, mix @ unit)
        else:  # axis: sign- and scale-free
            g = np.exp(spec.link_gain * (mix / np.linalg.norm(mix, axis=1, keepdims=True) @ unit) ** 2)
    return values, patterns, z, g


def generate_synthetic(spec: SyntheticSpec):
    """Return ``(CountField, ForcingField, SyntheticTruth)``; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    count_times, forcing_times = _stamps(spec)
    n_months = forcing_times.size
    if spec.system == "planted-analog-cycle":
        values, patterns, latent, g, regime, analogs = _planted(spec, rng, n_months)
    else:
        values, patterns, latent, g = _lorenz(spec, rng, n_months)
        regime, analogs = None, []
    values = spec.forcing_scale * values
    if spec.forcing_noise > 0:
        values = values + spec.forcing_noise * rng.normal(size=values.shape)
    psi = rng.gamma(0.7, 1.0, (spec.n_y, spec.n_latent))
    psi *= spec.count_scale / max(float((psi @ g).mean()), 1e-12)
    lam = psi @ g
    counts = rng.poisson(lam)
    count_locs = _locations("s", spec.n_y, rng)
    forcing_locs = _locations("x", spec.n_x, rng)
    cf = CountField(counts[:, : spec.T], count_locs, count_times, "Y")
    ff = ForcingField(values, forcing_locs, forcing_times, "M")
    truth = SyntheticTruth(psi, g, lam, patterns, latent, regime, analogs, counts[:, spec.T])
    return cf, ff, truth
