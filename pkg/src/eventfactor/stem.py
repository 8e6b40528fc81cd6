"""Stochastic EM: Metropolis E-step, penalized coordinate-descent M-step.

Each iteration draws one Metropolis step per subject from the factor
posterior at the current parameters, then performs one coordinate-descent
pass through every free parameter and the closed-form covariance
update.  Proposal scales adapt during burn-in only; the reported
estimate is the entrywise average over the final ``avg_window``
iterations, with penalized coordinates snapped to exact zero when they
were exactly zero in at least 90% of that window.

The fast path keeps the per-interval exposure weights
``duration * exp(linear predictor)`` alive across the E-step (rows of
accepted subjects are rescaled) and the M-step (the kernel updates them
per coordinate step), with periodic exact refreshes to bound drift.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._rng import counter_rng
from ._stack import StackedData, segment_sum
from .covariates import CovariateSpec
from .events import Dataset
from .lik import compile_dataset
from .model import (
    ConstraintMask,
    Mask,
    ModelParams,
    PenaltyConfig,
    apply_mask,
    canonicalize_scale,
)
from .mstep import PsiCache, penalty_total, sweep, update_sigma
from .sampler import ADAPT_BAND, ADAPT_GROW, ADAPT_SHRINK, ADAPT_TARGET, ADAPT_WINDOW, INITIAL_SCALE

__all__ = ["FitConfig", "FitResult", "ConfigInvalid", "fit"]

logger = logging.getLogger(__name__)

ZERO_SNAP_FRACTION = 0.9
REFRESH_EVERY = 50  # exact exposure-weight refresh cadence (drift control)


class ConfigInvalid(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    """Iteration budgets and engine knobs for one stochastic-EM run."""

    total_iters: int = 500
    burn_in: int = 300
    avg_window: int = 200
    inner_steps: int = 1
    msweeps: int = 1
    seed: int = 0
    threads: int = 1
    engine: str = "auto"  # "numba" | "numpy" | "auto"
    progress: bool = False
    intercept_delay: int = 30  # sweeps with intercepts frozen at their init

    def __post_init__(self):
        if self.avg_window < 1:
            raise ConfigInvalid("avg_window must be at least 1")
        if self.burn_in < 0 or self.total_iters < 1:
            raise ConfigInvalid("iteration counts must be positive")
        if self.burn_in + self.avg_window > self.total_iters:
            raise ConfigInvalid("burn_in + avg_window must not exceed total_iters")
        if self.inner_steps < 1 or self.msweeps < 1:
            raise ConfigInvalid("inner_steps and msweeps must be at least 1")
        if self.engine not in ("numba", "numpy", "auto"):
            raise ConfigInvalid(f"unknown engine {self.engine!r}")
        if self.threads < 1:
            raise ConfigInvalid("threads must be at least 1")
        if self.intercept_delay < 0:
            raise ConfigInvalid("intercept_delay must be nonnegative")

    @property
    def effective_intercept_delay(self) -> int:
        # the freeze always ends within burn-in
        return min(self.intercept_delay, self.burn_in)


@dataclass
class FitResult:
    """Averaged estimates, supports, and run diagnostics."""

    params_avg: ModelParams
    params_last: ModelParams
    support_beta: list[np.ndarray]
    support_loadings: list[np.ndarray]
    objective_trace: np.ndarray
    acceptance_trace: np.ndarray
    theta_last: np.ndarray
    proposal_sd: np.ndarray
    mask: ConstraintMask
    config: FitConfig
    diagnostics: dict = field(default_factory=dict)


def _as_works(dataset, spec: CovariateSpec | None):
    if isinstance(dataset, Dataset):
        if spec is None:
            raise ConfigInvalid("a CovariateSpec is required with a raw Dataset")
        return compile_dataset(dataset, spec)
    if isinstance(dataset, StackedData):
        return dataset.works
    return list(dataset)


def _gauss_loglik_sum(theta: np.ndarray, params: ModelParams) -> float:
    n, K = theta.shape
    if K == 0:
        return 0.0
    L = params.sigma_chol()
    half = np.linalg.solve(L, theta.T)
    return float(
        -0.5 * n * K * np.log(2 * np.pi)
        - n * np.sum(np.log(np.diag(L)))
        - 0.5 * np.sum(half * half)
    )


def _stationarity(trace: np.ndarray) -> dict:
    """Trend-vs-noise smoke test over the averaging window."""
    t = np.arange(trace.size, dtype=float)
    if trace.size < 8 or np.allclose(trace, trace[0]):
        return {"trend": 0.0, "scale": 0.0, "stationary": True}
    slope = np.polyfit(t, trace, 1)[0]
    trend = abs(slope) * (trace.size - 1)
    scale = float(np.std(trace))
    return {"trend": float(trend), "scale": scale, "stationary": bool(trend <= 3 * scale)}


class _Averager:
    """Entrywise averages plus exact-zero counts over the final window."""

    def __init__(self, stack: StackedData, K: int):
        self.count = 0
        self.beta0 = np.zeros(stack.J)
        self.beta = [np.zeros(L) for L in stack.dims_fixed()]
        self.A = [np.zeros((L, K)) for L in stack.dims_random()]
        self.sigma = np.zeros((K, K))
        self.zero_beta = [np.zeros(L) for L in stack.dims_fixed()]
        self.zero_A = [np.zeros((L, K)) for L in stack.dims_random()]

    def add(self, params: ModelParams):
        self.count += 1
        self.beta0 += params.beta0
        self.sigma += params.sigma
        for j in range(len(self.beta)):
            self.beta[j] += params.beta[j]
            self.A[j] += params.loadings[j]
            self.zero_beta[j] += params.beta[j] == 0.0
            self.zero_A[j] += params.loadings[j] == 0.0

    def finalize(self, mask: ConstraintMask, K: int) -> ModelParams:
        B = self.count
        avg = ModelParams(
            self.beta0 / B,
            [s / B for s in self.beta],
            [s / B for s in self.A],
            self.sigma / B if K else np.zeros((0, 0)),
        )
        for j in range(len(self.beta)):
            snap = (self.zero_beta[j] / B >= ZERO_SNAP_FRACTION) & (
                mask.beta[j] == Mask.PENALIZED
            )
            avg.beta[j][snap] = 0.0
            snap_A = (self.zero_A[j] / B >= ZERO_SNAP_FRACTION) & (
                mask.loadings[j] == Mask.PENALIZED
            )
            avg.loadings[j][snap_A] = 0.0
        return apply_mask(avg, mask)


def fit(
    dataset,
    spec: CovariateSpec | None,
    mask: ConstraintMask,
    penalty: PenaltyConfig,
    config: FitConfig = FitConfig(),
) -> FitResult:
    """Fit the penalized model by stochastic EM.

    ``dataset`` may be a parsed :class:`Dataset` (with ``spec``), a list
    of precompiled :class:`SubjectWork`, or a :class:`StackedData`.
    Results are a pure function of (data, mask, penalty, config): all
    randomness derives from ``config.seed``, independent of threading.
    """
    t_start = time.perf_counter()
    works = _as_works(dataset, spec)
    stack = dataset if isinstance(dataset, StackedData) else StackedData(works)
    n = stack.n
    K = mask.n_factors
    params = apply_mask(
        ModelParams.zeros(stack.dims_fixed(), stack.dims_random(), K), mask
    )
    # intercepts start at the zero-covariate exposure rates: a zero start
    # lets the first intercept update absorb the covariate-block average
    # and strands the fit in a shifted local optimum
    params.beta0[:] = stack.baseline_rates()
    mask.check_shapes(params)

    engine = config.engine if config.engine != "auto" else "numba"
    if engine == "numba":
        return _fit_numba(stack, mask, penalty, config, params, t_start)
    return _fit_numpy(stack, works, mask, penalty, config, params, t_start)


def _finish(stack, mask, config, averager, params, theta, sd, obj_trace, acc_trace, t_start, engine):
    K = mask.n_factors
    avg = averager.finalize(mask, K)
    support_beta = [b != 0.0 for b in avg.beta]
    support_loadings = [A != 0.0 for A in avg.loadings]
    window_trace = obj_trace[config.total_iters - config.avg_window:]
    diagnostics = {
        "wall_time": time.perf_counter() - t_start,
        "n_subjects": stack.n,
        "mean_acceptance": float(np.mean(acc_trace)),
        "stationarity": _stationarity(window_trace),
        "engine": engine,
    }
    return FitResult(
        params_avg=avg,
        params_last=params.copy(),
        support_beta=support_beta,
        support_loadings=support_loadings,
        objective_trace=obj_trace,
        acceptance_trace=acc_trace,
        theta_last=theta.copy(),
        proposal_sd=sd,
        mask=mask,
        config=config,
        diagnostics=diagnostics,
    )


def _fit_numba(stack, mask, penalty, config, params, t_start):
    n, J, K = stack.n, stack.J, mask.n_factors
    theta = np.zeros((n, K))
    sd = np.full(n, INITIAL_SCALE)
    accept_count = np.zeros(n)
    window_steps = 0
    sigma_inv = np.eye(K)

    obj_trace = np.zeros(config.total_iters)
    acc_trace = np.zeros(config.total_iters)
    averager = _Averager(stack, K)
    avg_start = config.total_iters - config.avg_window

    # persistent per-row exposure weights and per-iteration pieces
    w = [stack.exposure_weights(params, j, theta) for j in range(J)]
    V = [stack.loading_directions(params, j) for j in range(J)]
    w_prop = [np.empty_like(w[j]) for j in range(J)]
    G = stack.event_theta_coef(params) if K else np.zeros((n, 0))
    lam = np.zeros(n)
    for j in range(J):
        _kernels.segment_totals(w[j], stack.blocks[j].iv_subj, lam)

    total_steps = 0
    for it in range(1, config.total_iters + 1):
        adaptive = it <= config.burn_in

        if it % REFRESH_EVERY == 0:
            lam[:] = 0.0
            for j in range(J):
                w[j] = stack.exposure_weights(params, j, theta)
                V[j] = stack.loading_directions(params, j)
                w_prop[j] = np.empty_like(w[j])
                _kernels.segment_totals(w[j], stack.blocks[j].iv_subj, lam)

        # ---- stochastic E-step -------------------------------------------
        accepted_any = np.zeros(n, dtype=bool)
        for _ in range(config.inner_steps):
            total_steps += 1
            rng = counter_rng(config.seed, "estep", counter=total_steps)
            noise = rng.standard_normal((n, K))
            log_u = np.log(rng.random(n))
            if K:
                prop = theta + sd[:, None] * noise
                dtheta = prop - theta
                lam_prop = np.zeros(n)
                for j in range(J):
                    _kernels.estep_propose(
                        w[j], V[j], stack.blocks[j].iv_subj, dtheta, w_prop[j], lam_prop
                    )
                dq = np.einsum("nk,kl,nl->n", prop, sigma_inv, prop) - np.einsum(
                    "nk,kl,nl->n", theta, sigma_inv, theta
                )
                log_r = np.einsum("nk,nk->n", G, dtheta) - (lam_prop - lam) - 0.5 * dq
                log_r = np.where(np.isnan(log_r), -np.inf, log_r)
                acc = log_u < log_r
                theta[acc] = prop[acc]
                lam[acc] = lam_prop[acc]
                for j in range(J):
                    _kernels.estep_commit(w[j], w_prop[j], stack.blocks[j].iv_subj, acc)
                accept_count += acc
                accepted_any |= acc
            window_steps += 1
            if adaptive and window_steps == ADAPT_WINDOW:
                rates = accept_count / ADAPT_WINDOW
                sd[rates > ADAPT_TARGET + ADAPT_BAND] *= ADAPT_GROW
                sd[rates < ADAPT_TARGET - ADAPT_BAND] *= ADAPT_SHRINK
                accept_count[:] = 0.0
                window_steps = 0
        acc_trace[it - 1] = float(np.mean(accepted_any))

        # ---- M-step --------------------------------------------------------
        free_intercepts = it > config.effective_intercept_delay
        psi_total = 0.0
        for _ in range(config.msweeps):
            psi_total = 0.0
            for j in range(J):
                blk = stack.blocks[j]
                se_A = blk.ev_Z.T @ theta[blk.ev_subj]
                beta0_box = params.beta0[j: j + 1]
                psi_j, _skipped = _kernels.sweep_type(
                    w[j],
                    float(blk.n_events),
                    blk.sum_Xe,
                    se_A,
                    theta[blk.iv_subj],
                    blk.x_indptr, blk.x_rows, blk.x_vals,
                    blk.z_indptr, blk.z_rows, blk.z_vals,
                    beta0_box,
                    params.beta[j],
                    params.loadings[j],
                    V[j],
                    mask.beta[j],
                    mask.loadings[j],
                    float(n),
                    penalty.gamma1,
                    penalty.gamma2,
                    penalty.a,
                    20,
                    free_intercepts,
                )
                psi_total += psi_j
        if K:
            params.set_sigma(update_sigma(theta))
            if mask.mode == "anchor_sigma":
                params, theta_mult = canonicalize_scale(params, mask)
                if not np.all(theta_mult == 1.0):
                    theta = theta * theta_mult[None, :]
                    # V tracks Z @ A: columns rescale with 1/theta_mult
                    for j in range(J):
                        V[j] = V[j] / theta_mult[None, :]
            L = params.sigma_chol()
            sigma_inv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(K)))
            G = stack.event_theta_coef(params)
        lam[:] = 0.0
        for j in range(J):
            _kernels.segment_totals(w[j], stack.blocks[j].iv_subj, lam)

        objective = psi_total + _gauss_loglik_sum(theta, params)
        objective -= n * penalty_total(params, mask, penalty)
        obj_trace[it - 1] = objective
        if config.progress:
            logger.info(
                "iter %d objective %.4f acceptance %.3f", it, objective, acc_trace[it - 1]
            )
        if it > avg_start:
            averager.add(params)

    return _finish(
        stack, mask, config, averager, params, theta, sd, obj_trace, acc_trace, t_start, "numba"
    )


def _fit_numpy(stack, works, mask, penalty, config, params, t_start):
    n, J, K = stack.n, stack.J, mask.n_factors
    theta = np.zeros((n, K))
    sd = np.full(n, INITIAL_SCALE)
    accept_count = np.zeros(n)
    window_steps = 0
    sigma_inv = np.eye(K)

    obj_trace = np.zeros(config.total_iters)
    acc_trace = np.zeros(config.total_iters)
    averager = _Averager(stack, K)
    avg_start = config.total_iters - config.avg_window

    cache = PsiCache(works, params.copy(), theta)
    data_ll = stack.data_loglik_by_subject(params, theta)
    total_steps = 0
    for it in range(1, config.total_iters + 1):
        adaptive = it <= config.burn_in
        accepted_any = np.zeros(n, dtype=bool)
        for _ in range(config.inner_steps):
            total_steps += 1
            rng = counter_rng(config.seed, "estep", counter=total_steps)
            noise = rng.standard_normal((n, K))
            log_u = np.log(rng.random(n))
            if K:
                prop = theta + sd[:, None] * noise
                data_prop = stack.data_loglik_by_subject(params, prop)
                dq = np.einsum("nk,kl,nl->n", prop, sigma_inv, prop) - np.einsum(
                    "nk,kl,nl->n", theta, sigma_inv, theta
                )
                log_r = (data_prop - data_ll) - 0.5 * dq
                log_r = np.where(np.isnan(log_r), -np.inf, log_r)
                acc = log_u < log_r
                theta[acc] = prop[acc]
                data_ll[acc] = data_prop[acc]
                accept_count += acc
                accepted_any |= acc
            window_steps += 1
            if adaptive and window_steps == ADAPT_WINDOW:
                rates = accept_count / ADAPT_WINDOW
                sd[rates > ADAPT_TARGET + ADAPT_BAND] *= ADAPT_GROW
                sd[rates < ADAPT_TARGET - ADAPT_BAND] *= ADAPT_SHRINK
                accept_count[:] = 0.0
                window_steps = 0
        acc_trace[it - 1] = float(np.mean(accepted_any))

        cache.set_draws(theta)
        free_intercepts = it > config.effective_intercept_delay
        for _ in range(config.msweeps):
            params, objective = sweep(
                cache, params, mask, penalty, update_intercepts=free_intercepts
            )
        theta = cache.theta
        if K:
            L = params.sigma_chol()
            sigma_inv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(K)))
        data_ll = stack.data_loglik_by_subject(params, theta)
        obj_trace[it - 1] = objective
        if config.progress:
            logger.info(
                "iter %d objective %.4f acceptance %.3f", it, objective, acc_trace[it - 1]
            )
        if it > avg_start:
            averager.add(params)

    return _finish(
        stack, mask, config, averager, params, theta, sd, obj_trace, acc_trace, t_start, "numpy"
    )
