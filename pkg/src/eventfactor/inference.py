"""Standard errors from the approximate observed Fisher information.

The information matrix is the sum of outer products of per-subject
posterior-expected complete-data scores: each subject's score is
averaged over posterior draws of its factor from a fresh fixed-phase
Metropolis chain at the fitted parameters, and the Gram matrix of those
averages approximates the observed information.  Standard errors are
the square roots of the diagonal of its inverse.  After selection, only
the nonzero coordinates enter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._rng import counter_rng
from ._stack import StackedData, segment_sum
from .lik import tril_indices
from .model import ConstraintMask, Mask, ModelParams
from .sampler import INITIAL_SCALE

__all__ = [
    "InfoMatrix",
    "SingularInfo",
    "Coordinate",
    "free_coordinates",
    "posterior_draws",
    "observed_info",
    "standard_errors",
]

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12


class SingularInfo(RuntimeError):
    pass


@dataclass(frozen=True)
class Coordinate:
    """One free parameter coordinate: kind in {beta0, beta, loading, sigma}."""

    kind: str
    j: int = -1
    l: int = -1
    k: int = -1

    def name(self, event_labels=None, covariate_labels=None) -> str:
        ev = (
            event_labels[self.j]
            if event_labels is not None and self.j >= 0
            else f"type{self.j}"
        )
        cov = (
            covariate_labels[self.l]
            if covariate_labels is not None and self.l >= 0
            else f"x{self.l}"
        )
        if self.kind == "beta0":
            return f"beta0/{ev}"
        if self.kind == "beta":
            return f"beta/{ev}/{cov}"
        if self.kind == "loading":
            return f"A/{ev}/{cov}/{self.k}"
        return f"sigma/{self.l}/{self.k}"


@dataclass
class InfoMatrix:
    matrix: np.ndarray
    coordinates: list[Coordinate]
    condition_number: float

    @property
    def singular(self) -> bool:
        return not np.isfinite(self.condition_number) or (
            self.condition_number > CONDITION_LIMIT
        )


def free_coordinates(
    params: ModelParams, mask: ConstraintMask, nonzero_only: bool = True
) -> list[Coordinate]:
    """Free coordinates in canonical order; optionally only nonzero estimates."""
    out: list[Coordinate] = []
    J, K = params.n_types, params.n_factors
    for j in range(J):
        out.append(Coordinate("beta0", j=j))
    for j in range(J):
        for l in range(params.beta[j].shape[0]):
            if mask.beta[j][l] in (Mask.ZERO, Mask.ONE):
                continue
            if nonzero_only and params.beta[j][l] == 0.0:
                continue
            out.append(Coordinate("beta", j=j, l=l))
    for j in range(J):
        A = params.loadings[j]
        for l in range(A.shape[0]):
            for k in range(K):
                if mask.loadings[j][l, k] in (Mask.ZERO, Mask.ONE):
                    continue
                if nonzero_only and A[l, k] == 0.0:
                    continue
                out.append(Coordinate("loading", j=j, l=l, k=k))
    for (k, l) in tril_indices(K):
        if mask.mode == "anchor_sigma" and k == l:
            continue  # unit diagonal is fixed
        out.append(Coordinate("sigma", l=k, k=l))
    return out


def posterior_draws(
    stack: StackedData,
    params: ModelParams,
    n_draws: int = 500,
    warmup: int = 500,
    thin: int = 5,
    seed: int = 0,
    proposal_sd: float = INITIAL_SCALE,
) -> np.ndarray:
    """Fixed-phase Metropolis draws of every subject's factor, (R, n, K)."""
    n, J, K = stack.n, stack.J, params.n_factors
    if K == 0:
        return np.zeros((n_draws, n, 0))
    params.validate_pd()
    L = params.sigma_chol()
    sigma_inv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(K)))
    theta = np.zeros((n, K))
    sd = np.full(n, proposal_sd)

    w = [stack.exposure_weights(params, j, theta) for j in range(J)]
    V = [stack.loading_directions(params, j) for j in range(J)]
    w_prop = [np.empty_like(w[j]) for j in range(J)]
    G = stack.event_theta_coef(params)
    lam = np.zeros(n)
    for j in range(J):
        _kernels.segment_totals(w[j], stack.blocks[j].iv_subj, lam)

    draws = np.empty((n_draws, n, K))
    total = warmup + n_draws * thin
    kept = 0
    for t in range(1, total + 1):
        rng = counter_rng(seed, "se-chain", counter=t)
        noise = rng.standard_normal((n, K))
        log_u = np.log(rng.random(n))
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
        if t > warmup and (t - warmup) % thin == 0:
            draws[kept] = theta
            kept += 1
    return draws


def observed_info(
    params: ModelParams,
    dataset,
    mask: ConstraintMask,
    n_draws: int = 500,
    warmup: int = 500,
    thin: int = 5,
    seed: int = 0,
    coordinates: list[Coordinate] | None = None,
) -> InfoMatrix:
    """Gram matrix of per-subject posterior-expected complete-data scores."""
    stack = dataset if isinstance(dataset, StackedData) else StackedData(dataset)
    n, J, K = stack.n, stack.J, params.n_factors
    if coordinates is None:
        coordinates = free_coordinates(params, mask, nonzero_only=True)
    else:
        # must be an order-preserving subset of the canonical ordering
        full = free_coordinates(params, mask, nonzero_only=False)
        order = {c: i for i, c in enumerate(full)}
        ranks = [order.get(c, -1) for c in coordinates]
        if -1 in ranks or any(a >= b for a, b in zip(ranks, ranks[1:])):
            raise ValueError("coordinates must follow the canonical free ordering")
    draws = posterior_draws(stack, params, n_draws, warmup, thin, seed)
    R = draws.shape[0]

    # per-type support columns entering the score
    beta_cols = [
        [c.l for c in coordinates if c.kind == "beta" and c.j == j] for j in range(J)
    ]
    load_cells = [
        [(c.l, c.k) for c in coordinates if c.kind == "loading" and c.j == j]
        for j in range(J)
    ]
    sigma_cells = [(c.l, c.k) for c in coordinates if c.kind == "sigma"]

    L = params.sigma_chol()
    sigma_inv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(K)))

    d = len(coordinates)
    score_sum = np.zeros((n, d))
    for r in range(R):
        theta = draws[r]
        s = np.zeros((n, d))
        lam = {}
        int_x = {}
        int_z = {}
        for j in range(J):
            blk = stack.blocks[j]
            w = stack.exposure_weights(params, j, theta)
            lam[j] = segment_sum(w, blk.iv_starts, blk.iv_seg_subj, n)
            if beta_cols[j]:
                cols = beta_cols[j]
                vals = segment_sum(
                    w[:, None] * blk.iv_X[:, cols], blk.iv_starts, blk.iv_seg_subj, n
                )
                int_x.update({(j, l): vals[:, i] for i, l in enumerate(cols)})
            zcols = sorted({l for l, _ in load_cells[j]})
            if zcols:
                vals = segment_sum(
                    w[:, None] * blk.iv_Z[:, zcols], blk.iv_starts, blk.iv_seg_subj, n
                )
                int_z.update({(j, l): vals[:, i] for i, l in enumerate(zcols)})
        si = theta @ sigma_inv if K else theta
        for idx, c in enumerate(coordinates):
            if c.kind == "beta0":
                s[:, idx] = stack.ev_counts[:, c.j] - lam[c.j]
            elif c.kind == "beta":
                s[:, idx] = stack.ev_x_by_subj[c.j][:, c.l] - int_x[(c.j, c.l)]
            elif c.kind == "loading":
                zdiff = stack.ev_z_by_subj[c.j][:, c.l] - int_z[(c.j, c.l)]
                s[:, idx] = theta[:, c.k] * zdiff
            else:  # sigma coordinate (row c.l, column c.k of the lower triangle)
                k, l = c.l, c.k
                if k == l:
                    s[:, idx] = 0.5 * (si[:, k] ** 2 - sigma_inv[k, k])
                else:
                    s[:, idx] = si[:, k] * si[:, l] - sigma_inv[k, l]
        score_sum += s
    s_bar = score_sum / R
    info = s_bar.T @ s_bar
    info = 0.5 * (info + info.T)
    eigvals = np.linalg.eigvalsh(info)
    cond = float(eigvals[-1] / eigvals[0]) if eigvals[0] > 0 else np.inf
    return InfoMatrix(info, list(coordinates), cond)


def standard_errors(info: InfoMatrix, strict: bool = False) -> np.ndarray:
    """Square roots of the diagonal of the inverse information.

    When the matrix is singular beyond the condition limit, coordinates
    loading on the near-null space get NaN (``strict=True`` raises
    SingularInfo instead).
    """
    d = info.matrix.shape[0]
    if d == 0:
        return np.zeros(0)
    if not info.singular:
        inv = np.linalg.inv(info.matrix)
        return np.sqrt(np.diag(inv))
    if strict:
        raise SingularInfo(
            f"information matrix condition number {info.condition_number:.3e}"
        )
    val, vec = np.linalg.eigh(info.matrix)
    good = val > val[-1] / CONDITION_LIMIT
    inv = (vec[:, good] / val[good]) @ vec[:, good].T
    se = np.sqrt(np.diag(inv))
    null_load = np.sum(vec[:, ~good] ** 2, axis=1)
    se[null_load > 1e-8] = np.nan
    logger.warning(
        "information matrix singular (cond %.2e); %d coordinates unavailable",
        info.condition_number,
        int(np.sum(null_load > 1e-8)),
    )
    return se
