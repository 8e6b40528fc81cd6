"""Complete-data and marginal log-likelihood for one subject.

Because covariates are piecewise constant, every cumulative-intensity
integral reduces to a finite sum of ``duration * exp(log-intensity)``
terms over the subject's merged covariate grid: those closed forms are
exact, no quadrature enters the complete-data likelihood.  The marginal
(observed-data) likelihood integrates the factor out by adaptive
Gauss-Hermite quadrature centered at the posterior mode, or by prior
Monte Carlo.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .covariates import CovariatePanel, CovariateSpec, build_panel, path_value, refine_breakpoints
from .events import Dataset, EventCatalog, EventSequence
from .model import DimensionMismatch, ModelParams, SigmaNotPD

__all__ = [
    "SubjectWork",
    "QuadratureConfig",
    "ModeSearchFailure",
    "QuadratureUnstable",
    "compile_subject",
    "compile_dataset",
    "cumulative_integral",
    "complete_loglik",
    "complete_score",
    "ScoreParts",
    "sigma_score",
    "tril_indices",
    "marginal_loglik",
    "marginal_loglik_mc",
    "posterior_mode",
    "posterior_moments",
    "gauss_hermite_nodes",
]


class ModeSearchFailure(RuntimeError):
    pass


class QuadratureUnstable(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadratureConfig:
    """How to integrate the factor out of the likelihood."""

    method: str = "adaptive_gauss_hermite"
    nodes_per_dim: int = 15
    mc_draws: int = 4000
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("adaptive_gauss_hermite", "monte_carlo"):
            raise ValueError(f"unknown quadrature method {self.method!r}")
        if self.nodes_per_dim < 3:
            raise ValueError("nodes_per_dim must be at least 3")
        if self.mc_draws < 100:
            raise ValueError("mc_draws must be at least 100")


@dataclass
class SubjectWork:
    """One subject's data compiled onto its merged covariate grid.

    Per event type ``j``: interval covariate values and at-risk flags,
    plus covariate values at that type's event times (left limits).
    """

    subject_id: str
    grid: np.ndarray                      # (M+1,)
    durations: np.ndarray                 # (M,)
    at_risk: list[np.ndarray]             # per type, bool (M,)
    x_iv: list[np.ndarray]                # per type, (M, L1j)
    z_iv: list[np.ndarray]                # per type, (M, L2j)
    ev_times: list[np.ndarray]            # per type, (E_j,)
    x_ev: list[np.ndarray]                # per type, (E_j, L1j)
    z_ev: list[np.ndarray]                # per type, (E_j, L2j)

    @property
    def n_types(self) -> int:
        return len(self.at_risk)

    @property
    def n_events(self) -> int:
        return int(sum(t.size for t in self.ev_times))

    def dims_fixed(self) -> list[int]:
        return [x.shape[1] for x in self.x_iv]

    def dims_random(self) -> list[int]:
        return [z.shape[1] for z in self.z_iv]


def compile_subject(
    sequence: EventSequence,
    spec: CovariateSpec,
    catalog: EventCatalog,
    panel: CovariatePanel | None = None,
) -> SubjectWork:
    """Build the SubjectWork for one sequence (panel built on demand)."""
    if panel is None:
        panel = build_panel(sequence, spec, catalog)
    grid = refine_breakpoints(panel)
    durations = np.diff(grid)
    right = grid[1:]  # interval value of a left-continuous path sits at its right end
    J = catalog.n_types

    at_risk, x_iv, z_iv = [], [], []
    ev_times, x_ev, z_ev = [], [], []
    for j in range(J):
        xp, zp, rp = panel.x_paths[j], panel.z_paths[j], panel.at_risk[j]
        x_iv.append(np.array([path_value(xp, t) for t in right], dtype=float))
        z_iv.append(np.array([path_value(zp, t) for t in right], dtype=float))
        at_risk.append(
            np.array([path_value(rp, t)[0] != 0.0 for t in right], dtype=bool)
        )
        times = np.array(
            [r.time for r in sequence.records if r.event_type == j and r.time <= panel.end],
            dtype=float,
        )
        ev_times.append(times)
        x_ev.append(
            np.array([path_value(xp, t) for t in times], dtype=float).reshape(
                times.size, xp.dim
            )
        )
        z_ev.append(
            np.array([path_value(zp, t) for t in times], dtype=float).reshape(
                times.size, zp.dim
            )
        )
    return SubjectWork(
        sequence.subject_id, grid, durations, at_risk, x_iv, z_iv, ev_times, x_ev, z_ev
    )


def compile_dataset(dataset: Dataset, spec: CovariateSpec) -> list[SubjectWork]:
    return [compile_subject(seq, spec, dataset.catalog) for seq in dataset.sequences]


def _check_dims(params: ModelParams, work: SubjectWork):
    if params.n_types != work.n_types:
        raise DimensionMismatch("params and work disagree on the number of types")
    if params.dims_fixed() != work.dims_fixed():
        raise DimensionMismatch("fixed-effect dimensions disagree")
    if params.dims_random() != work.dims_random():
        raise DimensionMismatch("random-effect dimensions disagree")


def _interval_linpred(params: ModelParams, work: SubjectWork, j: int, theta) -> np.ndarray:
    eta = params.beta0[j] + work.x_iv[j] @ params.beta[j]
    if params.n_factors:
        eta = eta + work.z_iv[j] @ (params.loadings[j] @ theta)
    return eta


def cumulative_integral(params: ModelParams, work: SubjectWork, j: int, theta) -> float:
    """Exact integral of the type-``j`` intensity over the observation window."""
    theta = np.asarray(theta, dtype=float)
    risk = work.at_risk[j]
    if not risk.any():
        return 0.0
    eta = _interval_linpred(params, work, j, theta)
    return float(np.sum(work.durations[risk] * np.exp(eta[risk])))


def _gauss_logpdf(theta: np.ndarray, params: ModelParams) -> float:
    K = params.n_factors
    L = params.sigma_chol()
    half = np.linalg.solve(L, theta)
    return float(
        -0.5 * K * np.log(2 * np.pi) - np.sum(np.log(np.diag(L))) - 0.5 * half @ half
    )


def data_loglik(params: ModelParams, work: SubjectWork, theta) -> float:
    """Event-history part of the complete-data log-likelihood (prior excluded)."""
    _check_dims(params, work)
    theta = np.asarray(theta, dtype=float)
    total = 0.0
    for j in range(work.n_types):
        ev = work.x_ev[j]
        if ev.shape[0]:
            eta_ev = params.beta0[j] + ev @ params.beta[j]
            if params.n_factors:
                eta_ev = eta_ev + work.z_ev[j] @ (params.loadings[j] @ theta)
            total += float(np.sum(eta_ev))
        total -= cumulative_integral(params, work, j, theta)
    return total


def complete_loglik(params: ModelParams, work: SubjectWork, theta) -> float:
    """Complete-data log-likelihood: event history plus the Gaussian factor density."""
    theta = np.asarray(theta, dtype=float)
    return data_loglik(params, work, theta) + _gauss_logpdf(theta, params)


@dataclass
class ScoreParts:
    """Gradient of the complete-data log-likelihood by parameter block."""

    beta0: np.ndarray
    beta: list[np.ndarray]
    loadings: list[np.ndarray]
    sigma_tril: np.ndarray | None = None


def complete_score(params: ModelParams, work: SubjectWork, theta) -> ScoreParts:
    """Analytic gradient with respect to intercepts, fixed effects, loadings."""
    _check_dims(params, work)
    theta = np.asarray(theta, dtype=float)
    params.validate_pd()
    J = work.n_types
    g0 = np.zeros(J)
    gb: list[np.ndarray] = []
    gA: list[np.ndarray] = []
    for j in range(J):
        risk = work.at_risk[j]
        dur = work.durations[risk]
        eta = _interval_linpred(params, work, j, theta)[risk]
        w = dur * np.exp(eta)
        n_j = work.ev_times[j].size
        g0[j] = n_j - np.sum(w)
        x_int = w @ work.x_iv[j][risk] if w.size else np.zeros(work.x_iv[j].shape[1])
        gb.append(work.x_ev[j].sum(axis=0) - x_int)
        z_diff = work.z_ev[j].sum(axis=0) - (
            w @ work.z_iv[j][risk] if w.size else np.zeros(work.z_iv[j].shape[1])
        )
        gA.append(np.outer(z_diff, theta))
    return ScoreParts(g0, gb, gA)


def tril_indices(K: int) -> list[tuple[int, int]]:
    """Canonical order of the unique covariance coordinates: (0,0), (1,0), (1,1), ..."""
    return [(k, l) for k in range(K) for l in range(k + 1)]


def sigma_score(params: ModelParams, theta) -> np.ndarray:
    """Gradient of ``log phi_K(theta; 0, Sigma)`` in lower-triangular coordinates."""
    theta = np.asarray(theta, dtype=float)
    K = params.n_factors
    L = params.sigma_chol()
    si_theta = np.linalg.solve(L.T, np.linalg.solve(L, theta))
    sigma_inv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(K)))
    W = np.outer(si_theta, si_theta) - sigma_inv
    out = np.empty(K * (K + 1) // 2)
    for i, (k, l) in enumerate(tril_indices(K)):
        out[i] = 0.5 * W[k, k] if k == l else W[k, l]
    return out


def _work_pieces(params: ModelParams, work: SubjectWork):
    """Stacked pieces for theta-parametrized evaluation.

    Returns (c0, g, w0, V): the data log-likelihood at factor value
    ``theta`` equals ``c0 + g.theta - sum(w0 * exp(V @ theta))``.
    """
    K = params.n_factors
    c0 = 0.0
    g = np.zeros(K)
    w0_parts, v_parts = [], []
    for j in range(work.n_types):
        ev = work.x_ev[j]
        if ev.shape[0]:
            c0 += float(np.sum(params.beta0[j] + ev @ params.beta[j]))
            g += params.loadings[j].T @ work.z_ev[j].sum(axis=0)
        risk = work.at_risk[j]
        if risk.any():
            w0_parts.append(
                work.durations[risk]
                * np.exp(params.beta0[j] + work.x_iv[j][risk] @ params.beta[j])
            )
            v_parts.append(work.z_iv[j][risk] @ params.loadings[j])
    if w0_parts:
        w0 = np.concatenate(w0_parts)
        V = np.concatenate(v_parts, axis=0)
    else:
        w0 = np.zeros(0)
        V = np.zeros((0, K))
    return c0, g, w0, V


def posterior_mode(
    params: ModelParams,
    work: SubjectWork,
    max_iter: int = 50,
    tol: float = 1e-8,
):
    """Newton search for the mode of the factor posterior.

    Returns ``(mode, neg_hessian)`` of ``data_loglik + log prior``.
    Raises ModeSearchFailure when the gradient tolerance is not reached.
    """
    K = params.n_factors
    L = params.sigma_chol()
    sigma_inv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(K)))
    c0, g, w0, V = _work_pieces(params, work)

    theta = np.zeros(K)

    def objective(th):
        return c0 + g @ th - float(w0 @ np.exp(V @ th)) - 0.5 * th @ sigma_inv @ th

    f_cur = objective(theta)
    for _ in range(max_iter):
        ew = w0 * np.exp(V @ theta)
        grad = g - V.T @ ew - sigma_inv @ theta
        H = V.T @ (ew[:, None] * V) + sigma_inv
        if np.max(np.abs(grad)) < tol:
            return theta, H
        step = np.linalg.solve(H, grad)
        scale = 1.0
        for _ in range(30):
            cand = theta + scale * step
            f_new = objective(cand)
            if np.isfinite(f_new) and f_new >= f_cur:
                break
            scale *= 0.5
        else:
            raise ModeSearchFailure(
                f"line search stalled at gradient norm {np.max(np.abs(grad)):.3e}"
            )
        theta = theta + scale * step
        f_cur = f_new
    ew = w0 * np.exp(V @ theta)
    grad = g - V.T @ ew - sigma_inv @ theta
    if np.max(np.abs(grad)) < tol:
        return theta, V.T @ (ew[:, None] * V) + sigma_inv
    raise ModeSearchFailure(
        f"no convergence in {max_iter} iterations (grad {np.max(np.abs(grad)):.3e})"
    )


def gauss_hermite_nodes(K: int, nodes_per_dim: int):
    """Tensor-product Gauss-Hermite nodes and log-weights for K dimensions."""
    x, w = np.polynomial.hermite.hermgauss(nodes_per_dim)
    grids = np.meshgrid(*([x] * K), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    lw_grids = np.meshgrid(*([np.log(w)] * K), indexing="ij")
    logw = np.sum([g.ravel() for g in lw_grids], axis=0)
    return nodes, logw


def _log_integrand_at(params, c0, g, w0, V, thetas):
    """Data + prior log density at each row of ``thetas`` (Q, K)."""
    K = params.n_factors
    L = params.sigma_chol()
    half = np.linalg.solve(L, thetas.T)
    log_prior = (
        -0.5 * K * np.log(2 * np.pi)
        - np.sum(np.log(np.diag(L)))
        - 0.5 * np.sum(half * half, axis=0)
    )
    expo = np.exp(thetas @ V.T)  # (Q, R)
    return c0 + thetas @ g - expo @ w0 + log_prior


def marginal_loglik(
    params: ModelParams, work: SubjectWork, quad: QuadratureConfig
) -> float:
    """Observed-data log-likelihood for one subject.

    Adaptive Gauss-Hermite centers the node cloud at the posterior mode
    with the mode's curvature as scaling; on mode-search failure it
    falls back to prior Monte Carlo.  K = 0 and zero-loading models
    reduce exactly to the factor-free log-likelihood.
    """
    _check_dims(params, work)
    params.validate_pd()
    K = params.n_factors
    c0, g, w0, V = _work_pieces(params, work)
    if K == 0 or (not np.any(g) and not np.any(V)):
        # integrand is constant in theta: prior integrates to one
        return c0 - float(np.sum(w0))

    if quad.method == "monte_carlo":
        return marginal_loglik_mc(params, work, quad)[0]

    if K > 4:
        raise ValueError("adaptive Gauss-Hermite supports K <= 4; use monte_carlo")
    try:
        mode, H = posterior_mode(params, work)
    except ModeSearchFailure as err:
        warnings.warn(
            f"posterior mode search failed ({err}); falling back to Monte Carlo",
            RuntimeWarning,
        )
        return marginal_loglik_mc(params, work, quad)[0]

    Hl = np.linalg.cholesky(H)
    # nodes theta = mode + sqrt(2) * L_H x with L_H = inv(Hl)^T (so L_H L_H^T = H^-1)
    nodes, logw = gauss_hermite_nodes(K, quad.nodes_per_dim)
    L_H = np.linalg.inv(Hl).T
    thetas = mode[None, :] + np.sqrt(2.0) * nodes @ L_H.T
    logf = _log_integrand_at(params, c0, g, w0, V, thetas)
    log_det_LH = -np.sum(np.log(np.diag(Hl)))
    value = (
        0.5 * K * np.log(2.0)
        + log_det_LH
        + logsumexp(logw + np.sum(nodes**2, axis=1) + logf)
    )
    if not np.isfinite(value):
        raise QuadratureUnstable("non-finite marginal likelihood")
    return float(value)


def marginal_loglik_mc(
    params: ModelParams, work: SubjectWork, quad: QuadratureConfig
) -> tuple[float, float]:
    """Prior Monte Carlo marginal log-likelihood, with its standard error."""
    K = params.n_factors
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(quad.seed)))
    L = params.sigma_chol()
    draws = rng.standard_normal((quad.mc_draws, K)) @ L.T
    c0, g, w0, V = _work_pieces(params, work)
    # log p(data | theta) at prior draws; log E = logsumexp - log R
    logp = c0 + draws @ g - np.exp(draws @ V.T) @ w0
    m = np.max(logp)
    ratios = np.exp(logp - m)
    mean = float(np.mean(ratios))
    value = m + np.log(mean)
    se_log = float(np.std(ratios, ddof=1) / (np.sqrt(quad.mc_draws) * mean))
    return float(value), se_log


def posterior_moments(
    params: ModelParams, work: SubjectWork, quad: QuadratureConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance of the factor, by adaptive quadrature."""
    K = params.n_factors
    mode, H = posterior_mode(params, work)
    Hl = np.linalg.cholesky(H)
    nodes, logw = gauss_hermite_nodes(K, quad.nodes_per_dim)
    L_H = np.linalg.inv(Hl).T
    thetas = mode[None, :] + np.sqrt(2.0) * nodes @ L_H.T
    c0, g, w0, V = _work_pieces(params, work)
    logf = _log_integrand_at(params, c0, g, w0, V, thetas)
    logq = logw + np.sum(nodes**2, axis=1) + logf
    q = np.exp(logq - np.max(logq))
    q /= np.sum(q)
    mean = q @ thetas
    centered = thetas - mean
    cov = centered.T @ (q[:, None] * centered)
    return mean, cov
