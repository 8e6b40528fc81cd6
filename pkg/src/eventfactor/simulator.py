"""Event-sequence simulation by competing exponential clocks.

Between events every covariate path is constant, so each event type's
intensity is a constant rate until the next event: the waiting times
are exponential, the next event is the type attaining the minimum
draw, and covariates are refreshed after every event.  A subject stops
at the terminating event, at an (optional) independent exponential
censoring time, or when a safety guard trips.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._rng import generator
from .covariates import CovariateSpec, HistoryState
from .events import Dataset, EventCatalog, EventRecord, EventSequence
from .model import ModelParams

__all__ = [
    "TrueModel",
    "SimConfig",
    "SimResult",
    "GuardTripped",
    "simulate_subject",
    "simulate_dataset",
    "draw_competing",
    "draw_total_rate",
]


class GuardTripped(RuntimeError):
    def __init__(self, subject_id, reason):
        super().__init__(f"simulation guard tripped for {subject_id!r}: {reason}")
        self.subject_id = subject_id
        self.reason = reason


@dataclass(frozen=True)
class TrueModel:
    """Ground-truth generator: parameters, covariate rules, catalog, censoring."""

    params: ModelParams
    spec: CovariateSpec
    catalog: EventCatalog
    censor_rate: float | None = None

    def __post_init__(self):
        if self.catalog.terminating is None:
            raise ValueError("simulation requires a terminating event type")
        if self.censor_rate is not None and self.censor_rate <= 0:
            raise ValueError("censor_rate must be positive")
        self.params.validate_pd()
        self.spec.check(self.catalog)


@dataclass(frozen=True)
class SimConfig:
    n: int
    seed: int = 0
    max_events: int = 10_000
    horizon: float = 1e7

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")


@dataclass
class SimResult:
    dataset: Dataset
    thetas: np.ndarray  # (n, K) factors actually used, for oracle checks


def draw_competing(rates: np.ndarray, rng: np.random.Generator):
    """(waiting time, type) as the minimum of independent exponential clocks."""
    rates = np.asarray(rates, dtype=float)
    std = rng.exponential(1.0, size=rates.size)
    with np.errstate(divide="ignore"):
        waits = np.where(rates > 0, std / rates, np.inf)
    j = int(np.argmin(waits))
    return float(waits[j]), j


def draw_total_rate(rates: np.ndarray, rng: np.random.Generator):
    """Equivalent draw: exponential total rate plus a categorical type pick."""
    rates = np.asarray(rates, dtype=float)
    total = float(rates.sum())
    if total <= 0:
        return math.inf, -1
    wait = rng.exponential(1.0 / total)
    j = int(rng.choice(rates.size, p=rates / total))
    return wait, j


def simulate_subject(
    model: TrueModel,
    rng: np.random.Generator,
    subject_id: str = "s0",
    max_events: int = 10_000,
    horizon: float = 1e7,
    method: str = "competing",
) -> tuple[EventSequence, np.ndarray]:
    """Simulate one subject; returns the sequence and the factor value used."""
    if method not in ("competing", "total_rate"):
        raise ValueError(f"unknown method {method!r}")
    catalog = model.catalog
    params = model.params
    J = catalog.n_types
    K = params.n_factors
    term = catalog.terminating

    theta = params.sigma_chol() @ rng.standard_normal(K) if K else np.zeros(0)
    censor = (
        rng.exponential(1.0 / model.censor_rate)
        if model.censor_rate is not None
        else math.inf
    )

    # theta enters only through per-type offsets a_j = A_j theta
    a = [params.loadings[j] @ theta for j in range(J)]
    shared = model.spec.shared
    if shared:
        rules = model.spec.rules_fixed[0]
        coef = np.stack([params.beta[j] + a[j] for j in range(J)])  # (J, L)
    risk_rules = [model.spec.risk_rule(j) for j in range(J)]
    all_rules = [r for rs in model.spec.rules_fixed + model.spec.rules_random for r in rs]
    all_rules += [r for r in risk_rules if r is not None]

    draw = draw_competing if method == "competing" else draw_total_rate

    records: list[EventRecord] = []
    state = HistoryState.initial(all_rules)
    t = 0.0
    while True:
        if shared:
            vec = np.array([r.evaluate(state) for r in rules])
            log_rates = params.beta0 + coef @ vec
        else:
            log_rates = np.empty(J)
            for j in range(J):
                x = np.array(
                    [r.evaluate(state) for r in model.spec.rules_fixed[j]]
                )
                z = np.array(
                    [r.evaluate(state) for r in model.spec.rules_random[j]]
                )
                log_rates[j] = params.beta0[j] + params.beta[j] @ x + a[j] @ z
        rates = np.exp(log_rates)
        for j in range(J):
            if risk_rules[j] is not None and risk_rules[j].evaluate(state) == 0.0:
                rates[j] = 0.0
        wait, j = draw(rates, rng)
        t_next = t + wait
        if t_next > censor:
            # observation ends before the next event
            return (
                EventSequence(subject_id, tuple(records), censor, _catalog=catalog),
                theta,
            )
        if not math.isfinite(t_next) or t_next > horizon:
            raise GuardTripped(subject_id, f"horizon {horizon} exceeded")
        records.append(EventRecord(subject_id, j, t_next))
        if j == term:
            return (
                EventSequence(subject_id, tuple(records), t_next, _catalog=catalog),
                theta,
            )
        if len(records) >= max_events:
            raise GuardTripped(subject_id, f"max_events {max_events} exceeded")
        state = state.advance(j)
        t = t_next


def simulate_dataset(model: TrueModel, config: SimConfig) -> SimResult:
    """Simulate independent subjects on per-subject streams of ``config.seed``."""
    sequences = []
    thetas = np.zeros((config.n, model.params.n_factors))
    trips: list[GuardTripped] = []
    for i in range(config.n):
        rng = generator(config.seed, "subject", i)
        sid = f"s{i:05d}"
        try:
            seq, theta = simulate_subject(
                model,
                rng,
                subject_id=sid,
                max_events=config.max_events,
                horizon=config.horizon,
            )
        except GuardTripped as err:
            trips.append(err)
            continue
        sequences.append(seq)
        thetas[i] = theta
    if trips:
        raise GuardTripped(
            trips[0].subject_id, f"{len(trips)} of {config.n} subjects tripped guards"
        )
    return SimResult(Dataset(model.catalog, tuple(sequences)), thetas)
