"""Penalized M-step: coordinate descent over intercepts, fixed effects, loadings.

Given the factor draws of a stochastic E-step, each event type's
contribution to the complete-data log-likelihood is maximized by
cyclic coordinate updates: an exact Newton step for the intercept, and
for every penalized coordinate a closed-form soft-thresholding update
obtained from a quadratic model of the fit term and a local linear
approximation of the SCAD penalty.  Every step is safeguarded by
halving against the exact (penalized) objective, so a full sweep never
decreases it.  The factor covariance has a closed-form update: the
empirical second moment of the draws.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .lik import SubjectWork
from .model import (
    ConstraintMask,
    Mask,
    ModelParams,
    PenaltyConfig,
    SIGMA_EIG_FLOOR,
    canonicalize_scale,
    scad_derivative,
    scad_penalty,
    soft_threshold,
)

__all__ = [
    "PsiCache",
    "ZeroExposure",
    "psi_partials",
    "psi_value",
    "update_intercept",
    "update_penalized",
    "update_sigma",
    "sweep",
    "penalty_total",
    "MAX_HALVINGS",
]

logger = logging.getLogger(__name__)

MAX_HALVINGS = 20


class ZeroExposure(RuntimeError):
    """A coordinate has no at-risk exposure this iteration (d2 = 0)."""


@dataclass
class PsiCache:
    """Sufficient pieces to evaluate each type's fit term and its partials.

    Holds, per event type, the at-risk interval covariates stacked over
    subjects, the event-side sums, and the running exposure weights
    ``w = duration * exp(linear predictor)``.  Refresh with
    :meth:`set_draws` whenever the factor draws change and with
    :meth:`set_params` when parameters change outside the sweep.
    """

    works: list[SubjectWork]
    params: ModelParams
    theta: np.ndarray  # (n, K) current draws

    def __post_init__(self):
        from ._stack import StackedData

        self.stack = StackedData(self.works)
        self.n = self.stack.n
        self.J = self.stack.J
        self.K = self.params.n_factors
        self.iv_subj = [blk.iv_subj for blk in self.stack.blocks]
        self.iv_dur = [blk.iv_dur for blk in self.stack.blocks]
        self.iv_X = [blk.iv_X for blk in self.stack.blocks]
        self.iv_Z = [blk.iv_Z for blk in self.stack.blocks]
        self.n_ev = np.array([blk.n_events for blk in self.stack.blocks], dtype=float)
        self.sum_Xe = [blk.sum_Xe for blk in self.stack.blocks]
        self.ev_subj = [blk.ev_subj for blk in self.stack.blocks]
        self.ev_Z = [blk.ev_Z for blk in self.stack.blocks]
        self.Th: list[np.ndarray] = [None] * self.J
        self.se_A: list[np.ndarray] = [None] * self.J
        self.w: list[np.ndarray] = [None] * self.J
        self.set_draws(self.theta)

    def set_draws(self, theta: np.ndarray):
        """Install new factor draws and refresh every theta-dependent piece."""
        self.theta = np.asarray(theta, dtype=float)
        for j in range(self.J):
            self.Th[j] = self.theta[self.iv_subj[j]]
            self.se_A[j] = self.ev_Z[j].T @ self.theta[self.ev_subj[j]]
        self._refresh_w()

    def set_params(self, params: ModelParams):
        self.params = params
        self._refresh_w()

    def _refresh_w(self):
        for j in range(self.J):
            eta = self.params.beta0[j] + self.iv_X[j] @ self.params.beta[j]
            if self.K:
                eta = eta + np.einsum(
                    "rl,rl->r", self.iv_Z[j] @ self.params.loadings[j], self.Th[j]
                )
            self.w[j] = self.iv_dur[j] * np.exp(eta)

    def feature(self, j: int, coord) -> np.ndarray:
        """Interval values of the coordinate's regressor."""
        kind = coord[0]
        if kind == "beta0":
            return np.ones_like(self.w[j])
        if kind == "beta":
            return self.iv_X[j][:, coord[1]]
        if kind == "loading":
            l, k = coord[1], coord[2]
            return self.iv_Z[j][:, l] * self.Th[j][:, k]
        raise ValueError(f"unknown coordinate {coord!r}")

    def event_side(self, j: int, coord) -> float:
        kind = coord[0]
        if kind == "beta0":
            return float(self.n_ev[j])
        if kind == "beta":
            return float(self.sum_Xe[j][coord[1]])
        return float(self.se_A[j][coord[1], coord[2]])


def psi_value(cache: PsiCache, j: int) -> float:
    """Exact fit term for event type ``j`` at the cache's current parameters."""
    p = cache.params
    value = cache.n_ev[j] * p.beta0[j] + cache.sum_Xe[j] @ p.beta[j]
    if cache.K:
        value += float(np.sum(cache.se_A[j] * p.loadings[j]))
    return float(value - np.sum(cache.w[j]))


def psi_partials(cache: PsiCache, j: int, coord) -> tuple[float, float, float]:
    """(value, d1, d2) of the fit term in one coordinate at current values.

    Raises ZeroExposure when the curvature vanishes (the coordinate has
    no at-risk exposure this iteration and cannot be identified).
    """
    f = cache.feature(j, coord)
    wf = cache.w[j] * f
    d1 = cache.event_side(j, coord) - float(np.sum(wf))
    d2 = -float(np.sum(wf * f))
    if d2 == 0.0:
        raise ZeroExposure(f"coordinate {coord!r} of type {j} has no exposure")
    return psi_value(cache, j), d1, d2


def _coordinate_value(cache: PsiCache, j: int, coord) -> float:
    kind = coord[0]
    if kind == "beta0":
        return float(cache.params.beta0[j])
    if kind == "beta":
        return float(cache.params.beta[j][coord[1]])
    return float(cache.params.loadings[j][coord[1], coord[2]])


def _apply_coordinate(cache: PsiCache, j: int, coord, new: float):
    """Write the coordinate and update the exposure weights incrementally."""
    old = _coordinate_value(cache, j, coord)
    delta = new - old
    kind = coord[0]
    if kind == "beta0":
        cache.params.beta0[j] = new
    elif kind == "beta":
        cache.params.beta[j][coord[1]] = new
    else:
        cache.params.loadings[j][coord[1], coord[2]] = new
    if delta != 0.0:
        f = cache.feature(j, coord)
        cache.w[j] = cache.w[j] * np.exp(delta * f)


def _delta_psi(cache: PsiCache, j: int, coord, delta: float, d1: float) -> float:
    """Exact change of the fit term if the coordinate moves by ``delta``."""
    if delta == 0.0:
        return 0.0
    f = cache.feature(j, coord)
    event_change = cache.event_side(j, coord) * delta
    integral_change = float(np.sum(cache.w[j] * np.expm1(delta * f)))
    return event_change - integral_change


def update_intercept(cache: PsiCache, j: int) -> float:
    """Newton step for the intercept, halved until the fit term does not decrease."""
    _, d1, d2 = psi_partials(cache, j, ("beta0",))
    old = float(cache.params.beta0[j])
    delta = -d1 / d2
    for _ in range(MAX_HALVINGS + 1):
        if _delta_psi(cache, j, ("beta0",), delta, d1) >= 0.0:
            break
        delta *= 0.5
    else:
        delta = 0.0
    new = old + delta
    _apply_coordinate(cache, j, ("beta0",), new)
    return new


def update_penalized(
    cache: PsiCache, j: int, coord, gamma: float, a: float = 3.7
) -> float:
    """Closed-form coordinate update with the locally linearized SCAD penalty.

    ``new = -T(d1 - old * d2, n * p'_gamma(|old|)) / d2`` with T the
    soft-thresholding operator; unpenalized coordinates (``gamma = 0``)
    reduce to a pure Newton step.  The step is halved toward the old
    value until the exact penalized objective piece does not decrease.
    """
    _, d1, d2 = psi_partials(cache, j, coord)
    old = _coordinate_value(cache, j, coord)
    if gamma > 0:
        weight = cache.n * scad_derivative(abs(old), gamma, a)
        candidate = -soft_threshold(d1 - old * d2, weight) / d2
    else:
        candidate = old - d1 / d2

    def penalized_gain(new):
        gain = _delta_psi(cache, j, coord, new - old, d1)
        if gamma > 0:
            gain -= cache.n * (
                scad_penalty(new, gamma, a) - scad_penalty(old, gamma, a)
            )
        return gain

    new = candidate
    for _ in range(MAX_HALVINGS + 1):
        if penalized_gain(new) >= 0.0:
            break
        new = old + 0.5 * (new - old)
    else:
        new = old
    _apply_coordinate(cache, j, coord, new)
    return new


def update_sigma(theta_draws: np.ndarray) -> np.ndarray:
    """Closed-form covariance update: empirical second moment of the draws.

    Eigenvalues are floored at 1e-8 only when the moment matrix
    degenerates, so the no-floor case is exact.
    """
    theta = np.asarray(theta_draws, dtype=float)
    if theta.ndim != 2 or theta.shape[0] < 1:
        raise ValueError("theta_draws must be (n, K) with n >= 1")
    sigma = theta.T @ theta / theta.shape[0]
    eigval = np.linalg.eigvalsh(sigma)
    if eigval.size and eigval[0] < SIGMA_EIG_FLOOR:
        val, vec = np.linalg.eigh(sigma)
        val = np.maximum(val, SIGMA_EIG_FLOOR)
        sigma = (vec * val) @ vec.T
        sigma = 0.5 * (sigma + sigma.T)
    return sigma


def penalty_total(params: ModelParams, mask: ConstraintMask, penalty: PenaltyConfig) -> float:
    """Total SCAD penalty of the penalized coordinates (without the n factor)."""
    total = 0.0
    if penalty.gamma1 > 0:
        for m, b in zip(mask.beta, params.beta):
            sel = m == Mask.PENALIZED
            if sel.any():
                total += float(np.sum(scad_penalty(b[sel], penalty.gamma1, penalty.a)))
    if penalty.gamma2 > 0:
        for m, A in zip(mask.loadings, params.loadings):
            sel = m == Mask.PENALIZED
            if sel.any():
                total += float(np.sum(scad_penalty(A[sel], penalty.gamma2, penalty.a)))
    return total


def sweep(
    cache: PsiCache,
    params: ModelParams,
    mask: ConstraintMask,
    penalty: PenaltyConfig,
    update_intercepts: bool = True,
) -> tuple[ModelParams, float]:
    """One full coordinate pass plus the covariance update.

    Per event type: intercept, then fixed-effect coordinates in index
    order, then loading coordinates in index order; fixed coordinates
    are skipped, zero-exposure coordinates are skipped with a warning
    count.  Returns the updated parameters and the penalized objective
    (complete-data log-likelihood sum minus ``n`` times the penalty).
    ``update_intercepts=False`` freezes the intercepts (used by the
    warm-start schedule of the EM driver).
    """
    mask.check_shapes(params)
    cache.set_params(params.copy())
    skipped = 0
    for j in range(cache.J):
        if update_intercepts:
            try:
                update_intercept(cache, j)
            except ZeroExposure:
                skipped += 1
        for l in range(params.beta[j].shape[0]):
            code = mask.beta[j][l]
            if code in (Mask.ZERO, Mask.ONE):
                continue
            gamma = penalty.gamma1 if code == Mask.PENALIZED else 0.0
            try:
                update_penalized(cache, j, ("beta", l), gamma, penalty.a)
            except ZeroExposure:
                skipped += 1
        for l in range(params.loadings[j].shape[0]):
            for k in range(cache.K):
                code = mask.loadings[j][l, k]
                if code in (Mask.ZERO, Mask.ONE):
                    continue
                gamma = penalty.gamma2 if code == Mask.PENALIZED else 0.0
                try:
                    update_penalized(cache, j, ("loading", l, k), gamma, penalty.a)
                except ZeroExposure:
                    skipped += 1
    if skipped:
        logger.debug("sweep skipped %d zero-exposure coordinates", skipped)

    new_params = cache.params
    if cache.K:
        new_params.set_sigma(update_sigma(cache.theta))
        if mask.mode == "anchor_sigma":
            new_params, theta_mult = canonicalize_scale(new_params, mask)
            cache.params = new_params
            if not np.all(theta_mult == 1.0):
                # keep the draws on the rescaled parameterization
                cache.set_draws(cache.theta * theta_mult[None, :])

    objective = float(sum(psi_value(cache, j) for j in range(cache.J)))
    if cache.K:
        L = new_params.sigma_chol()
        half = np.linalg.solve(L, cache.theta.T)
        objective += float(
            -0.5 * cache.n * cache.K * np.log(2 * np.pi)
            - cache.n * np.sum(np.log(np.diag(L)))
            - 0.5 * np.sum(half * half)
        )
    objective -= cache.n * penalty_total(new_params, mask, penalty)
    return new_params, objective
