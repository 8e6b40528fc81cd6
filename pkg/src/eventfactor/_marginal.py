"""Batched marginal log-likelihood over a whole dataset (internal).

Vectorizes the per-subject adaptive Gauss-Hermite evaluation of
:func:`eventfactor.lik.marginal_loglik`: one Newton mode search runs
for all subjects simultaneously, and the node-cloud evaluation streams
over the stacked interval rows in node chunks.  Subjects whose mode
search stalls fall back to prior Monte Carlo, exactly as the
per-subject path does.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import logsumexp

from ._stack import StackedData, segment_sum
from .lik import QuadratureConfig, gauss_hermite_nodes, marginal_loglik_mc
from .model import ModelParams

__all__ = ["batched_posterior_mode", "batched_marginal_loglik"]

logger = logging.getLogger(__name__)

NODE_CHUNK = 512


def _sigma_inv(params: ModelParams) -> np.ndarray:
    L = params.sigma_chol()
    K = params.n_factors
    return np.linalg.solve(L.T, np.linalg.solve(L, np.eye(K)))


def batched_posterior_mode(
    stack: StackedData,
    params: ModelParams,
    max_iter: int = 50,
    tol: float = 1e-8,
):
    """Newton mode search for every subject at once.

    Returns ``(modes, neg_hessians, converged)`` with shapes
    ``(n, K)``, ``(n, K, K)``, ``(n,)``.
    """
    n, K = stack.n, params.n_factors
    sigma_inv = _sigma_inv(params)
    G = stack.event_theta_coef(params)
    theta = np.zeros((n, K))

    w0 = [stack.base_weights(params, j) for j in range(stack.J)]
    V = [stack.loading_directions(params, j) for j in range(stack.J)]

    def neg_parts(th):
        """(cumulative intensity, integral gradient, integral hessian) per subject."""
        cum = np.zeros(n)
        grad = np.zeros((n, K))
        hess = np.zeros((n, K, K))
        for j in range(stack.J):
            blk = stack.blocks[j]
            if blk.iv_subj.size == 0:
                continue
            ew = w0[j] * np.exp(np.einsum("rk,rk->r", V[j], th[blk.iv_subj]))
            cum += segment_sum(ew, blk.iv_starts, blk.iv_seg_subj, n)
            grad += segment_sum(
                ew[:, None] * V[j], blk.iv_starts, blk.iv_seg_subj, n
            )
            outer = np.einsum("r,rk,rl->rkl", ew, V[j], V[j])
            hess += segment_sum(outer, blk.iv_starts, blk.iv_seg_subj, n)
        return cum, grad, hess

    def objective(th, cum):
        return (
            np.einsum("nk,nk->n", G, th)
            - cum
            - 0.5 * np.einsum("nk,kl,nl->n", th, sigma_inv, th)
        )

    cum, igrad, ihess = neg_parts(theta)
    f_cur = objective(theta, cum)
    converged = np.zeros(n, dtype=bool)
    for _ in range(max_iter):
        grad = G - igrad - theta @ sigma_inv
        hess = ihess + sigma_inv[None, :, :]
        converged = np.max(np.abs(grad), axis=1) < tol
        if converged.all():
            break
        step = np.linalg.solve(hess, grad)
        step[converged] = 0.0
        scale = np.ones(n)
        best = theta
        for _ in range(30):
            cand = theta + scale[:, None] * step
            cum_new, igrad_new, ihess_new = neg_parts(cand)
            f_new = objective(cand, cum_new)
            ok = converged | (np.isfinite(f_new) & (f_new >= f_cur))
            if ok.all():
                best = cand
                break
            scale[~ok] *= 0.5
        else:
            # subjects that never passed the line search keep their position
            stuck = ~(converged | (np.isfinite(f_new) & (f_new >= f_cur)))
            cand[stuck] = theta[stuck]
            best = cand
            cum_new, igrad_new, ihess_new = neg_parts(best)
            f_new = objective(best, cum_new)
        theta = best
        cum, igrad, ihess = cum_new, igrad_new, ihess_new
        f_cur = np.maximum(f_cur, f_new)
    grad = G - igrad - theta @ sigma_inv
    converged = np.max(np.abs(grad), axis=1) < tol
    return theta, ihess + sigma_inv[None, :, :], converged


def batched_marginal_loglik(
    stack: StackedData,
    params: ModelParams,
    quad: QuadratureConfig,
) -> np.ndarray:
    """Per-subject observed-data log-likelihood, shape (n,)."""
    params.validate_pd()
    n, K = stack.n, params.n_factors
    c0 = stack.event_const(params)
    no_factor = K == 0 or all(not np.any(A) for A in params.loadings)
    if no_factor:
        theta0 = np.zeros((n, max(K, 1)))[:, :K]
        return c0 - stack.cumulative_by_subject(params, theta0)

    if quad.method == "monte_carlo":
        return _batched_mc(stack, params, quad)

    if K > 4:
        raise ValueError("adaptive Gauss-Hermite supports K <= 4; use monte_carlo")

    modes, H, converged = batched_posterior_mode(stack, params)
    out = np.empty(n)
    failed = np.nonzero(~converged)[0]
    if failed.size:
        logger.warning(
            "posterior mode search failed for %d subjects; Monte Carlo fallback",
            failed.size,
        )

    Hl = np.linalg.cholesky(H)
    nodes, logw = gauss_hermite_nodes(K, quad.nodes_per_dim)
    Q = nodes.shape[0]
    # L_H[i] = inv(Hl[i])^T so that L_H L_H^T = H^{-1}
    eye = np.broadcast_to(np.eye(K), (n, K, K))
    L_H = np.transpose(np.linalg.solve(Hl, eye), (0, 2, 1))
    G = stack.event_theta_coef(params)
    L = params.sigma_chol()
    sigma_inv = _sigma_inv(params)
    half_logdet_sigma = np.sum(np.log(np.diag(L)))

    logf = np.zeros((n, Q))
    w0 = [stack.base_weights(params, j) for j in range(stack.J)]
    V = [stack.loading_directions(params, j) for j in range(stack.J)]
    for q0 in range(0, Q, NODE_CHUNK):
        q1 = min(q0 + NODE_CHUNK, Q)
        # thetas: (n, qc, K)
        thetas = modes[:, None, :] + np.sqrt(2.0) * np.einsum(
            "nab,qb->nqa", L_H, nodes[q0:q1]
        )
        acc = np.einsum("nqk,nk->nq", thetas, G)
        for j in range(stack.J):
            blk = stack.blocks[j]
            if blk.iv_subj.size == 0:
                continue
            eta = np.einsum("rk,rqk->rq", V[j], thetas[blk.iv_subj])
            contrib = w0[j][:, None] * np.exp(eta)
            acc -= segment_sum(contrib, blk.iv_starts, blk.iv_seg_subj, n)
        quad_form = np.einsum("nqk,kl,nql->nq", thetas, sigma_inv, thetas)
        acc += (
            -0.5 * K * np.log(2 * np.pi) - half_logdet_sigma - 0.5 * quad_form
        )
        logf[:, q0:q1] = acc

    log_det_LH = -np.sum(np.log(np.diagonal(Hl, axis1=1, axis2=2)), axis=1)
    out = (
        c0
        + 0.5 * K * np.log(2.0)
        + log_det_LH
        + logsumexp(logw[None, :] + np.sum(nodes**2, axis=1)[None, :] + logf, axis=1)
    )

    for i in failed:
        out[i] = marginal_loglik_mc(params, stack.works[i], quad)[0]
    return out


def _batched_mc(stack: StackedData, params: ModelParams, quad: QuadratureConfig):
    n, K = stack.n, params.n_factors
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(quad.seed)))
    L = params.sigma_chol()
    draws = rng.standard_normal((quad.mc_draws, K)) @ L.T
    G = stack.event_theta_coef(params)
    logp = G @ draws.T  # (n, R)
    w0 = [stack.base_weights(params, j) for j in range(stack.J)]
    V = [stack.loading_directions(params, j) for j in range(stack.J)]
    for j in range(stack.J):
        blk = stack.blocks[j]
        if blk.iv_subj.size == 0:
            continue
        expo = np.exp(V[j] @ draws.T)  # (rows, R)
        contrib = w0[j][:, None] * expo
        logp -= segment_sum(contrib, blk.iv_starts, blk.iv_seg_subj, n)
    return stack.event_const(params) + logsumexp(logp, axis=1) - np.log(quad.mc_draws)
