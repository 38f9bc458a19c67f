"""Metropolis-within-Gibbs sampler and posterior-predictive forecasts.

One iteration updates, in order: every coefficient beta[j, t]
(componentwise log-normal Metropolis-Hastings), the neighbour count m, the
embedding length q and, with Laplacian-eigenmap forcing, the graph size k_nn
(inverse-transform draws from their discrete full conditionals), then the
kernel bandwidth theta1 and the process variance sigma2 (log-normal
Metropolis-Hastings).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .analog import DistanceCache, neighbor_order, target_weights, weight_matrix
from .errors import NumericalError, StageError
from .stochastic import (
    Hyperparams,
    ModelParams,
    bias_correct_h,
    invgamma_logpdf,
    poisson_loglik,
    prior_logpdf,
    tn_logpdf,
    tn_sample,
)

INIT_FLOOR_SCALE = 1e-3
ADAPT_MIN, ADAPT_MAX = 1e-10, 1e6  # bounds on log-scale proposal variances
LOG_TINY = math.log(np.finfo(float).tiny)
LOG_MAX = math.log(np.finfo(float).max)


@dataclass
class SamplerSettings:
    n_iter: int = 20000
    burn_in: int = 2000
    thin: int = 1
    adapt_every: int = 50
    accept_low: float = 0.30
    accept_high: float = 0.45
    zeta0: float = 0.05
    theta1_step0: float = 0.5
    sigma2_step0: float = 0.5
    jacobian: bool = True  # False reproduces ratios without the log-scale correction
    random_order: bool = False
    process_term: bool = True
    ref_loc: float = 1.0  # reference prior on beta when the process term is off
    ref_sigma2: float = 1.0
    frozen: tuple = ()  # names of blocks to skip: beta, m, q, k_nn, theta1, sigma2
    check_weights: bool = False

    def __post_init__(self):
        if self.n_iter < 0 or self.burn_in < 0 or self.burn_in > self.n_iter:
            raise ValueError("need 0 <= burn_in <= n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


@dataclass(eq=False)
class AnalogModel:
    """Training data and precomputed distance blocks for one fit."""

    y: np.ndarray  # n_y x N training counts
    psi: np.ndarray
    offset: np.ndarray
    cache: DistanceCache
    train_index: np.ndarray  # response indices of the N training periods
    hyper: Hyperparams
    blocks: dict = field(default_factory=dict)
    orders: dict = field(default_factory=dict)

    @classmethod
    def build(cls, y, factorization, cache, train_index, hyper) -> "AnalogModel":
        train_index = np.asarray(train_index, dtype=int)
        pos = np.array([cache.pos(t) for t in train_index])
        n = pos.size
        if hyper.m_max > n - 1:
            raise ValueError(f"m_max={hyper.m_max} exceeds the {n - 1} candidate analogs")
        missing = set(hyper.q_grid.tolist()) - set(cache.q_values.tolist())
        if missing:
            raise ValueError(f"distance cache lacks q values {sorted(missing)}")
        model = cls(
            np.asarray(y, dtype=float), factorization.psi, factorization.offset,
            cache, train_index, hyper,
        )
        for k in cache.k_values:
            for q in hyper.q_grid:
                block = np.ascontiguousarray(cache.matrix(int(q), k)[np.ix_(pos, pos)])
                model.blocks[k, int(q)] = block
                model.orders[k, int(q)] = neighbor_order(block)
        return model

    @property
    def le_mode(self) -> bool:
        return None not in self.cache.dist

    @property
    def k_grid(self) -> list:
        if not self.le_mode:
            return [None]
        return [k for k in self.hyper.k_nn_grid if k in self.cache.dist]

    def weights(self, p: ModelParams) -> np.ndarray:
        key = (p.k_nn, p.q)
        return weight_matrix(self.blocks[key], self.orders[key], p.m, p.theta1)

    def intensity(self, beta) -> np.ndarray:
        return self.psi @ beta + self.offset[:, None]


@dataclass(eq=False)
class ChainState:
    beta: np.ndarray
    params: ModelParams
    weights: np.ndarray  # W[t, l] = omega_t[l] under params
    log_posterior: float = math.nan

    def weight_vector(self, t: int) -> np.ndarray:
        return self.weights[t]


@dataclass(eq=False)
class ChainOutput:
    beta: np.ndarray  # n_keep x n_beta x N
    m: np.ndarray
    q: np.ndarray
    theta1: np.ndarray
    sigma2: np.ndarray
    k_nn: np.ndarray  # -1 in EOF mode
    log_posterior: np.ndarray
    acceptance: dict
    zeta: np.ndarray
    seed: int | None = None

    @property
    def n_keep(self) -> int:
        return self.m.size

    def params(self, i: int) -> ModelParams:
        k = int(self.k_nn[i])
        return ModelParams(int(self.m[i]), int(self.q[i]), float(self.theta1[i]),
                           float(self.sigma2[i]), None if k < 0 else k)

    def trace_table(self) -> np.ndarray:
        return np.column_stack([self.m, self.q, self.theta1, self.sigma2, self.k_nn,
                                self.log_posterior])

    def equals(self, other: "ChainOutput") -> bool:
        arrays = ("beta", "m", "q", "theta1", "sigma2", "k_nn", "log_posterior", "zeta")
        return all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)


# ---------------------------------------------------------------------------
# log densities


def log_process(model: AnalogModel, beta, weights, sigma2, settings: SamplerSettings) -> float:
    if not settings.process_term:
        return 0.0
    return float(K.process_total(beta, weights, sigma2, model.hyper.eps))


def log_reference(beta, settings: SamplerSettings) -> float:
    return float(np.sum(tn_logpdf(beta, settings.ref_loc, settings.ref_sigma2)))


def log_posterior(model: AnalogModel, state: ChainState, settings: SamplerSettings) -> float:
    lp = poisson_loglik(model.y, model.intensity(state.beta))
    if settings.process_term:
        lp += log_process(model, state.beta, state.weights, state.params.sigma2_eta, settings)
    else:
        lp += log_reference(state.beta, settings)
    return lp + prior_logpdf(state.params, model.hyper)


# ---------------------------------------------------------------------------
# blocks


def step_beta(state, model, zeta, rng, settings, accepted) -> ChainState:
    """One componentwise sweep over beta; ``accepted`` counts acceptances in place."""
    nb, n = state.beta.shape
    normals = rng.standard_normal((nb, n))
    uniforms = rng.random((nb, n))
    if settings.random_order:
        flat = rng.permutation(nb * n)
        order_j, order_t = flat // n, flat % n
    else:
        order_j = np.repeat(np.arange(nb), n)
        order_t = np.tile(np.arange(n), nb)
    bad = K.beta_sweep(
        model.y, model.psi, model.offset, state.beta, state.weights,
        state.params.sigma2_eta, model.hyper.eps, zeta, normals, uniforms,
        order_j, order_t, settings.jacobian, settings.process_term,
        settings.ref_loc, settings.ref_sigma2, accepted,
    )
    if bad >= 0:
        raise NumericalError(f"non-finite acceptance ratio for beta[{bad // n}, {bad % n}]")
    return state


def _inverse_transform(log_p: np.ndarray, rng) -> int:
    top = np.max(log_p)
    if not np.isfinite(top):
        raise NumericalError("every grid candidate has zero posterior mass")
    cdf = np.cumsum(np.exp(log_p - top))
    return int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))


def grid_log_probs(state, model, name, grid, settings) -> np.ndarray:
    out = np.empty(len(grid))
    for i, v in enumerate(grid):
        p = replace(state.params, **{name: v})
        out[i] = log_process(model, state.beta, model.weights(p), p.sigma2_eta, settings)
    return out


def _discrete_step(state, model, name, grid, rng, settings) -> ChainState:
    grid = list(grid)
    if len(grid) == 1:
        v = grid[0]
    else:
        lp = grid_log_probs(state, model, name, grid, settings)
        v = grid[_inverse_transform(lp, rng)]
    if v != getattr(state.params, name):
        state.params = replace(state.params, **{name: v})
        state.weights = model.weights(state.params)
    return state


def step_m(state, model, rng, settings) -> ChainState:
    return _discrete_step(state, model, "m", [int(v) for v in model.hyper.m_grid], rng, settings)


def step_q(state, model, rng, settings) -> ChainState:
    return _discrete_step(state, model, "q", [int(v) for v in model.hyper.q_grid], rng, settings)


def step_k(state, model, rng, settings) -> ChainState:
    return _discrete_step(state, model, "k_nn", model.k_grid, rng, settings)


def _scale_step(state, model, name, a, b, step_var, rng, settings) -> bool:
    old = getattr(state.params, name)
    log_new = math.log(old) + math.sqrt(step_var) * rng.standard_normal()
    log_u = math.log(rng.random())
    if not LOG_TINY < log_new < LOG_MAX:
        return False  # outside the representable support: zero density
    new = math.exp(log_new)
    if new == old:
        return True
    p_new = replace(state.params, **{name: new})
    w_new = model.weights(p_new) if name == "theta1" else state.weights
    if settings.process_term:
        lr = log_process(model, state.beta, w_new, p_new.sigma2_eta, settings) - log_process(
            model, state.beta, state.weights, state.params.sigma2_eta, settings
        )
    else:
        lr = 0.0
    lr += invgamma_logpdf(new, a, b) - invgamma_logpdf(old, a, b)
    if settings.jacobian:
        lr += math.log(new) - math.log(old)
    if math.isnan(lr) or lr == math.inf:
        raise NumericalError(f"non-finite acceptance ratio for {name} ({old} -> {new})")
    if log_u < lr:
        state.params = p_new
        state.weights = w_new
        return True
    return False


def step_theta1(state, model, step_var, rng, settings) -> bool:
    h = model.hyper
    return _scale_step(state, model, "theta1", h.a1, h.b1, step_var, rng, settings)


def step_sigma2(state, model, step_var, rng, settings) -> bool:
    h = model.hyper
    return _scale_step(state, model, "sigma2_eta", h.a2, h.b2, step_var, rng, settings)


# ---------------------------------------------------------------------------
# driver


def initial_state(model: AnalogModel, b0, params: ModelParams | None = None) -> ChainState:
    """Start from the NMF coefficients; near-zero entries are lifted so log proposals can move."""
    beta = np.array(b0, dtype=float, copy=True)
    floor = INIT_FLOOR_SCALE * max(float(beta.mean()), 1e-12)
    beta = np.maximum(beta, floor)
    h = model.hyper
    if params is None:
        params = ModelParams(
            m=int(h.m_grid[len(h.m_grid) // 2]),
            q=int(h.q_grid[len(h.q_grid) // 2]),
            theta1=h.b1 / (h.a1 + 1.0),
            sigma2_eta=max(float(np.mean(np.var(beta, axis=1))), 1e-6),
            k_nn=model.k_grid[len(model.k_grid) // 2] if model.le_mode else None,
        )
    return ChainState(beta, params, model.weights(params))


def _adapt(var, rate, settings):
    factor = np.where(rate < settings.accept_low, 0.6, np.where(rate > settings.accept_high, 1.5, 1.0))
    return np.clip(var * factor, ADAPT_MIN, ADAPT_MAX)


def run_sampler(
    model: AnalogModel,
    b0,
    settings: SamplerSettings,
    seed: int,
    params: ModelParams | None = None,
) -> ChainOutput:
    """Run one chain; deterministic given ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    state = initial_state(model, b0, params)
    nb, n = state.beta.shape
    zeta = np.full((nb, n), settings.zeta0)
    var_t, var_s = settings.theta1_step0, settings.sigma2_step0
    frozen = set(settings.frozen)

    keep = list(range(settings.burn_in, settings.n_iter, settings.thin))
    n_keep = len(keep)
    out_beta = np.empty((n_keep, nb, n))
    tr = {k: np.empty(n_keep) for k in ("m", "q", "theta1", "sigma2", "k_nn", "lp")}

    acc_b = np.zeros((nb, n), dtype=np.int64)
    win_b = np.zeros((nb, n), dtype=np.int64)
    acc_t = acc_s = win_t = win_s = 0
    post_iters = 0
    ik = 0
    for it in range(settings.n_iter):
        stage = "beta"
        try:
            if "beta" not in frozen:
                win_b_before = win_b.copy()
                step_beta(state, model, zeta, rng, settings, win_b)
                if it >= settings.burn_in:
                    acc_b += win_b - win_b_before
            stage = "m"
            if "m" not in frozen:
                step_m(state, model, rng, settings)
            stage = "q"
            if "q" not in frozen:
                step_q(state, model, rng, settings)
            stage = "k_nn"
            if model.le_mode and "k_nn" not in frozen:
                step_k(state, model, rng, settings)
            stage = "theta1"
            if "theta1" not in frozen:
                ok = step_theta1(state, model, var_t, rng, settings)
                win_t += ok
                acc_t += ok and it >= settings.burn_in
            stage = "sigma2"
            if "sigma2" not in frozen:
                ok = step_sigma2(state, model, var_s, rng, settings)
                win_s += ok
                acc_s += ok and it >= settings.burn_in
        except (NumericalError, ArithmeticError, ValueError) as exc:
            raise StageError(f"sampler/{stage}", f"iteration {it}: {exc}") from exc

        if settings.check_weights:
            fresh = model.weights(state.params)
            if not np.array_equal(fresh, state.weights):
                raise StageError("sampler", f"iteration {it}: cached weights are stale")

        if it < settings.burn_in and (it + 1) % settings.adapt_every == 0:
            zeta = _adapt(zeta, win_b / settings.adapt_every, settings)
            var_t = float(_adapt(var_t, win_t / settings.adapt_every, settings))
            var_s = float(_adapt(var_s, win_s / settings.adapt_every, settings))
            win_b[:] = 0
            win_t = win_s = 0
        if it >= settings.burn_in:
            post_iters += 1

        if ik < n_keep and it == keep[ik]:
            p = state.params
            out_beta[ik] = state.beta
            tr["m"][ik], tr["q"][ik] = p.m, p.q
            tr["theta1"][ik], tr["sigma2"][ik] = p.theta1, p.sigma2_eta
            tr["k_nn"][ik] = -1 if p.k_nn is None else p.k_nn
            state.log_posterior = log_posterior(model, state, settings)
            tr["lp"][ik] = state.log_posterior
            ik += 1

    denom = max(post_iters, 1)
    acceptance = {
        "beta": acc_b / denom,
        "theta1": acc_t / denom,
        "sigma2": acc_s / denom,
    }
    return ChainOutput(
        out_beta, tr["m"].astype(int), tr["q"].astype(int), tr["theta1"], tr["sigma2"],
        tr["k_nn"].astype(int), tr["lp"], acceptance, zeta, seed,
    )


# ---------------------------------------------------------------------------
# forecasting


@dataclass(eq=False)
class ForecastResult:
    target: int
    draws: np.ndarray  # n_keep x n_y sampled counts
    intensity: np.ndarray  # n_keep x n_y
    beta: np.ndarray  # n_keep x n_beta
    omega: np.ndarray  # n_keep x N weights over the training periods
    train_index: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    @property
    def lower(self) -> np.ndarray:
        return np.percentile(self.draws, 2.5, axis=0)

    @property
    def upper(self) -> np.ndarray:
        return np.percentile(self.draws, 97.5, axis=0)

    @property
    def mean_weights(self) -> np.ndarray:
        return self.omega.mean(axis=0)

    def top_analog(self) -> np.ndarray:
        """Training index of the largest weight in each draw (ties to the earlier period)."""
        return self.train_index[np.argmax(self.omega, axis=1)]


def forecast(
    output: ChainOutput,
    model: AnalogModel,
    target: int,
    seed: int,
    noise: bool = False,
) -> ForecastResult:
    """Posterior-predictive draws of the counts at response index ``target``.

    Each kept draw composes ``beta = B omega`` with ``omega`` the kernel weights
    of the target's embedding against the training periods under that draw's
    parameters; ``noise=True`` instead draws beta from the truncated-normal
    process around that composition.
    """
    if output.n_keep == 0:
        raise ValueError("no kept draws to forecast from")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    cache = model.cache
    row = cache.pos(target)
    cols = np.array([cache.pos(t) for t in model.train_index])
    n_keep, nb, n = output.beta.shape
    omega = np.empty((n_keep, n))
    beta = np.empty((n_keep, nb))
    for i in range(n_keep):
        p = output.params(i)
        d_row = cache.matrix(p.q, p.k_nn)[row, cols]
        omega[i] = target_weights(d_row, p.m, p.theta1)
        beta[i] = output.beta[i] @ omega[i]
        if noise:
            loc = bias_correct_h(beta[i], p.sigma2_eta, model.hyper.eps)
            beta[i] = tn_sample(rng, loc, p.sigma2_eta)
    lam = beta @ model.psi.T + model.offset
    draws = rng.poisson(lam).astype(float)
    return ForecastResult(target, draws, lam, beta, omega, model.train_index)
