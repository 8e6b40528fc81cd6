"""The simulated web-browsing benchmark design.

A 15-type item: three website links, each with a secondary "More"
page, a pull-down answer menu, Next/Cancel/OK confirmation, and
toolbar navigation.  Covariates are shared across event types and
blocks: a last-event indicator for every non-terminating type plus
three "returned from website l" patterns.  Three factors drive,
respectively, secondary-page visits, back-navigation, and sequential
website examination; scaling is anchored on the covariance (unit
diagonal) with one diagonal anchor row per factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariates import CovariateSpec, last, lasttwo, since
from .events import EventCatalog
from .model import ConstraintMask, ModelParams

__all__ = ["BenchmarkDesign", "browsing_design", "EVENT_NAMES", "COVARIATE_NAMES"]

EVENT_NAMES = (
    "W1", "W1_M", "W2", "W2_M", "W3", "W3_M",
    "Next", "Next_Cancel", "R_1", "R_2", "R_3",
    "R_Open", "R_Close", "Back", "Next_OK",
)

# 14 last-event indicators (terminating type excluded) + 3 return patterns
COVARIATE_NAMES = EVENT_NAMES[:14] + ("W1,Back", "W2,Back", "W3,Back")

_BASELINES = {
    "W1": -4, "W1_M": -5, "W2": -5, "W2_M": -5, "W3": -5, "W3_M": -4,
    "Next": -7, "Next_Cancel": -4, "R_1": -5, "R_2": -5, "R_3": -5,
    "R_Open": -6, "R_Close": -5, "Back": -7, "Next_OK": -2,
}

# (covariate, event type) -> coefficient
_FIXED_EFFECTS = {
    ("W1", "Back"): 3, ("W1_M", "Back"): 5,
    ("W2", "Back"): 3, ("W2_M", "Back"): 5,
    ("W3", "Back"): 3, ("W3_M", "Back"): 5, ("W3_M", "R_Open"): 2,
    ("Next_Cancel", "W3_M"): 4,
    ("R_1", "Next"): 5, ("R_2", "Next"): 5, ("R_3", "Next"): 5,
    ("Back", "W1"): 1, ("Back", "W2"): 1, ("Back", "W3"): 1, ("Back", "Back"): 3,
    ("W1,Back", "W1"): -2, ("W1,Back", "W2"): 2, ("W1,Back", "W3"): -2,
    ("W2,Back", "W1"): -1, ("W2,Back", "W2"): -2, ("W2,Back", "W3"): 2,
    ("W3,Back", "W3"): -2, ("W3,Back", "R_Open"): 2,
}

# (covariate, event type, factor) -> loading
_LOADINGS = {
    ("W1", "W1_M", 0): 2, ("W2", "W2_M", 0): 2, ("W3", "W3_M", 0): 2,
    ("R_Open", "R_3", 0): 1,
    ("W1", "Back", 1): 1, ("W1_M", "Back", 1): 1,
    ("W2", "Back", 1): 1, ("W2_M", "Back", 1): 1,
    ("W3", "Back", 1): 1, ("W3_M", "Back", 1): 1,
    ("W1,Back", "W2", 2): 1, ("W2,Back", "W3", 2): 1, ("W3,Back", "W1", 2): 1,
}

_SIGMA = np.array(
    [
        [1.0, -0.3, 0.3],
        [-0.3, 1.0, -0.3],
        [0.3, -0.3, 1.0],
    ]
)

# diagonal anchor rows (covariate, event type) per factor
_ANCHORS = (("W1", "W1_M"), ("W1", "Back"), ("W1,Back", "W2"))


@dataclass(frozen=True)
class BenchmarkDesign:
    catalog: EventCatalog
    spec: CovariateSpec
    params: ModelParams
    mask: ConstraintMask

    @property
    def n_factors(self) -> int:
        return self.params.n_factors

    def covariate_index(self, name: str) -> int:
        return COVARIATE_NAMES.index(name)

    def event_index(self, name: str) -> int:
        return EVENT_NAMES.index(name)


def browsing_design(gated: bool = True) -> BenchmarkDesign:
    """Catalog, covariate rules, ground-truth parameters, and constraint mask.

    With ``gated=True`` (the default) the confirmation pop-up events are
    at risk only immediately after Next and the answer choices only
    immediately after opening the menu, mirroring the item mechanics;
    ``gated=False`` keeps every type at risk until termination.
    """
    catalog = EventCatalog(EVENT_NAMES, terminating=EVENT_NAMES.index("Next_OK"))
    rules = [last(l) for l in range(14)]
    back = catalog.index("Back")
    rules += [lasttwo(catalog.index(f"W{i}"), back) for i in (1, 2, 3)]
    risk_rules = None
    if gated:
        idx = catalog.index
        websites = [idx("W1"), idx("W2"), idx("W3")]
        # main page: left by clicking a website link, reached again by Back
        on_main = since(idx("Back"), websites, initially=True)
        menu_open = since(
            idx("R_Open"), [idx("R_1"), idx("R_2"), idx("R_3"), idx("R_Close")]
        )
        # the confirmation dialog is modal: it stays up until answered
        popup = since(idx("Next"), [idx("Next_OK"), idx("Next_Cancel")])
        gates = {
            "W1": on_main, "W2": on_main, "W3": on_main,
            "R_1": menu_open, "R_2": menu_open, "R_3": menu_open,
            "R_Close": menu_open,
            "Next_OK": popup, "Next_Cancel": popup,
        }
        risk_rules = tuple(gates.get(name) for name in EVENT_NAMES)
    spec = CovariateSpec.make_shared(rules, catalog.n_types, risk_rules)

    J, L, K = catalog.n_types, len(rules), 3
    cov_idx = {name: i for i, name in enumerate(COVARIATE_NAMES)}
    ev_idx = {name: j for j, name in enumerate(EVENT_NAMES)}

    beta0 = np.array([_BASELINES[name] for name in EVENT_NAMES], dtype=float)
    beta = [np.zeros(L) for _ in range(J)]
    for (cov, ev), value in _FIXED_EFFECTS.items():
        beta[ev_idx[ev]][cov_idx[cov]] = value
    loadings = [np.zeros((L, K)) for _ in range(J)]
    for (cov, ev, k), value in _LOADINGS.items():
        loadings[ev_idx[ev]][cov_idx[cov], k] = value
    params = ModelParams(beta0, beta, loadings, _SIGMA.copy())

    mask = ConstraintMask.all_penalized([L] * J, [L] * J, K, mode="anchor_sigma")
    mask = mask.with_anchors(
        (ev_idx[ev], cov_idx[cov], k) for k, (cov, ev) in enumerate(_ANCHORS)
    )
    return BenchmarkDesign(catalog, spec, params, mask)
