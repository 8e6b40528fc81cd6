"""Random-walk Metropolis sampling of the per-subject factor posterior.

Each subject runs an independent chain targeting the factor posterior
under the current parameters.  Proposals are spherical Gaussian steps
whose scale is tuned during an adaptive phase and then frozen, so the
fixed-phase chain leaves the target distribution invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lik import SubjectWork, data_loglik
from .model import ModelParams

__all__ = ["ChainState", "metropolis_step", "adapt"]

ADAPT_WINDOW = 50
ADAPT_TARGET = 0.3
ADAPT_BAND = 0.1
ADAPT_GROW = 1.25
ADAPT_SHRINK = 0.8
INITIAL_SCALE = 0.5


@dataclass
class ChainState:
    """Chain position and proposal-scale bookkeeping for one subject."""

    theta: np.ndarray
    proposal_sd: float = INITIAL_SCALE
    accept_count: int = 0
    step_count: int = 0
    phase: str = "adaptive"

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.proposal_sd <= 0:
            raise ValueError("proposal_sd must be positive")
        if self.phase not in ("adaptive", "fixed"):
            raise ValueError(f"unknown phase {self.phase!r}")

    @property
    def acceptance_rate(self) -> float:
        return self.accept_count / self.step_count if self.step_count else 0.0


def _log_posterior(params: ModelParams, work: SubjectWork, theta: np.ndarray) -> float:
    # prior quadratic form; the normalizing constant cancels in the ratio
    L = params.sigma_chol()
    half = np.linalg.solve(L, theta)
    return data_loglik(params, work, theta) - 0.5 * float(half @ half)


def metropolis_step(
    state: ChainState,
    work: SubjectWork,
    params: ModelParams,
    rng: np.random.Generator,
) -> bool:
    """One random-walk step; returns the accept flag and updates ``state``.

    The proposal is ``N(theta, proposal_sd^2 I)``; acceptance uses the
    complete-data likelihood ratio in the log domain, so overflow in
    either likelihood simply yields a rejection.
    """
    K = state.theta.shape[0]
    proposal = state.theta + state.proposal_sd * rng.standard_normal(K)
    log_u = np.log(rng.uniform())
    log_cur = _log_posterior(params, work, state.theta)
    log_new = _log_posterior(params, work, proposal)
    if np.isnan(log_new):
        log_new = -np.inf
    accept = bool(log_u < log_new - log_cur)
    if accept:
        state.theta = proposal
        state.accept_count += 1
    state.step_count += 1
    return accept


def adapt(
    state: ChainState,
    window: int = ADAPT_WINDOW,
    target: float = ADAPT_TARGET,
) -> float:
    """Tune the proposal scale from the windowed acceptance rate.

    Called after every step; acts only when a full window of steps has
    accumulated and the chain is in its adaptive phase.  Scale grows by
    1.25 when acceptance exceeds ``target + 0.1`` and shrinks by 0.8
    when below ``target - 0.1``; counters reset either way.
    """
    if state.phase != "adaptive" or state.step_count < window:
        return state.proposal_sd
    rate = state.accept_count / state.step_count
    if rate > target + ADAPT_BAND:
        state.proposal_sd *= ADAPT_GROW
    elif rate < target - ADAPT_BAND:
        state.proposal_sd *= ADAPT_SHRINK
    state.accept_count = 0
    state.step_count = 0
    return state.proposal_sd
