"""History-derived covariate paths and at-risk indicators.

Covariates are left-continuous, piecewise-constant functions of a
subject's own event history: the value on an interval ``(t_k, t_{k+1}]``
is determined by the events at times ``<= t_k``.  Supported rules are
last-event indicators, last-two-pattern indicators, and a constant.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

from .events import EventCatalog, EventSequence

__all__ = [
    "CovariateRule",
    "CovariateSpec",
    "HistoryState",
    "PiecewiseConstantPath",
    "CovariatePanel",
    "CovariateError",
    "RuleIndexOutOfRange",
    "OutOfDomain",
    "last",
    "lasttwo",
    "const",
    "since",
    "build_panel",
    "path_value",
    "refine_breakpoints",
    "parse_covariate_spec",
    "write_covariate_spec",
]

VALUE_BOUND = 1e6  # covariate values must stay uniformly bounded


class CovariateError(ValueError):
    pass


class RuleIndexOutOfRange(CovariateError):
    pass


class OutOfDomain(CovariateError):
    pass


@dataclass(frozen=True, slots=True)
class CovariateRule:
    """One covariate coordinate as a function of the strict event history.

    kinds:
      - ``last``: 1 if the most recent event has type ``first``
      - ``lasttwo``: 1 if the most recent event has type ``second`` and
        the second most recent has type ``first``
      - ``const``: identically 1
      - ``since``: 1 from an event of type ``first`` until the next
        event whose type is in ``until`` (an on/off state, e.g. a menu
        that stays open until closed; a closing type that equals the
        trigger re-opens)
    """

    kind: str  # "last" | "lasttwo" | "const" | "since"
    first: int = -1
    second: int = -1
    until: tuple[int, ...] = ()
    initially: bool = False  # since-rules only: state before any event

    def __post_init__(self):
        if self.kind not in ("last", "lasttwo", "const", "since"):
            raise CovariateError(f"unknown rule kind {self.kind!r}")

    def check(self, n_types: int):
        if self.kind == "last" and not 0 <= self.first < n_types:
            raise RuleIndexOutOfRange(f"rule index {self.first} out of range")
        if self.kind == "lasttwo" and not (
            0 <= self.first < n_types and 0 <= self.second < n_types
        ):
            raise RuleIndexOutOfRange(
                f"rule indices ({self.first}, {self.second}) out of range"
            )
        if self.kind == "since":
            for idx in (self.first,) + self.until:
                if not 0 <= idx < n_types:
                    raise RuleIndexOutOfRange(f"rule index {idx} out of range")

    def evaluate(self, state: "HistoryState") -> float:
        """Value of the rule given the strict-history state."""
        if self.kind == "const":
            return 1.0
        if self.kind == "last":
            return 1.0 if state.last == self.first else 0.0
        if self.kind == "lasttwo":
            return 1.0 if (state.last == self.second and state.prev == self.first) else 0.0
        return 1.0 if state.flags.get(self._flag_key(), False) else 0.0

    def _flag_key(self):
        return (self.first, self.until, self.initially)

    def label(self, catalog: EventCatalog | None = None) -> str:
        def name(i):
            return catalog.names[i] if catalog is not None else str(i)

        if self.kind == "const":
            return "const"
        if self.kind == "last":
            return f"last({name(self.first)})"
        if self.kind == "lasttwo":
            return f"lasttwo({name(self.first)},{name(self.second)})"
        closers = ",".join(name(i) for i in self.until)
        start = ";start" if self.initially else ""
        return f"since({name(self.first)}|{closers}{start})"


def last(event_type: int) -> CovariateRule:
    return CovariateRule("last", first=event_type)


def lasttwo(second_last: int, last_type: int) -> CovariateRule:
    return CovariateRule("lasttwo", first=second_last, second=last_type)


def const() -> CovariateRule:
    return CovariateRule("const")


def since(trigger: int, until, initially: bool = False) -> CovariateRule:
    return CovariateRule("since", first=trigger, until=tuple(until), initially=initially)


@dataclass
class HistoryState:
    """Strict-history summary the rules read: last two types plus state flags."""

    prev: int = -1
    last: int = -1
    flags: dict = None

    def __post_init__(self):
        if self.flags is None:
            self.flags = {}

    def advance(self, event_type: int) -> "HistoryState":
        flags = dict(self.flags)
        for key in flags:
            trigger, until, _initially = key
            if event_type in until:
                flags[key] = False
            if event_type == trigger:
                flags[key] = True
        return HistoryState(self.last, event_type, flags)

    @classmethod
    def initial(cls, rules) -> "HistoryState":
        flags = {}
        for rule in rules:
            if rule is not None and rule.kind == "since":
                flags[rule._flag_key()] = rule.initially
        return cls(-1, -1, flags)


@dataclass(frozen=True)
class CovariateSpec:
    """Per event type: rule lists for the fixed-effect and random-effect blocks.

    With ``shared=True`` a single rule list applies to every event type
    and to both blocks, so all lengths coincide.  ``risk_rules``
    optionally gates each type's at-risk indicator on the event history
    (e.g. a confirmation event only at risk right after the triggering
    click); ``None`` entries keep the default always-at-risk policy.
    """

    rules_fixed: tuple[tuple[CovariateRule, ...], ...]
    rules_random: tuple[tuple[CovariateRule, ...], ...]
    shared: bool = False
    risk_rules: tuple[CovariateRule | None, ...] | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "rules_fixed", tuple(tuple(r) for r in self.rules_fixed)
        )
        object.__setattr__(
            self, "rules_random", tuple(tuple(r) for r in self.rules_random)
        )
        if len(self.rules_fixed) != len(self.rules_random):
            raise CovariateError("fixed/random rule lists must cover the same types")
        if self.shared:
            ref = self.rules_fixed[0]
            for rules in self.rules_fixed + self.rules_random:
                if rules != ref:
                    raise CovariateError("shared spec requires identical rule lists")
        if self.risk_rules is not None:
            object.__setattr__(self, "risk_rules", tuple(self.risk_rules))
            if len(self.risk_rules) != len(self.rules_fixed):
                raise CovariateError("risk rules must cover every event type")

    @classmethod
    def make_shared(cls, rules, n_types: int, risk_rules=None) -> "CovariateSpec":
        rules = tuple(rules)
        per_type = tuple(rules for _ in range(n_types))
        return cls(per_type, per_type, shared=True, risk_rules=risk_rules)

    def risk_rule(self, j: int) -> CovariateRule | None:
        if self.risk_rules is None:
            return None
        return self.risk_rules[j]

    @property
    def n_types(self) -> int:
        return len(self.rules_fixed)

    def dims_fixed(self) -> list[int]:
        return [len(r) for r in self.rules_fixed]

    def dims_random(self) -> list[int]:
        return [len(r) for r in self.rules_random]

    def check(self, catalog: EventCatalog):
        if self.n_types != catalog.n_types:
            raise CovariateError("spec does not cover every catalog type")
        for rules in self.rules_fixed + self.rules_random:
            for rule in rules:
                rule.check(catalog.n_types)
        if self.risk_rules is not None:
            for rule in self.risk_rules:
                if rule is not None:
                    rule.check(catalog.n_types)


class PiecewiseConstantPath:
    """Left-continuous step function on ``[0, end]`` in canonical (merged) form.

    ``values[0]`` holds on ``[0, breaks[0]]``, ``values[k]`` on
    ``(breaks[k-1], breaks[k]]``, and ``values[-1]`` on
    ``(breaks[-1], end]``.  Adjacent value vectors differ.
    """

    __slots__ = ("breaks", "values", "end")

    def __init__(self, breaks, values, end):
        breaks = np.asarray(breaks, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if breaks.ndim != 1:
            raise CovariateError("breaks must be one-dimensional")
        if np.any(np.diff(breaks) <= 0) or (breaks.size and (breaks[0] <= 0 or breaks[-1] >= end)):
            raise CovariateError("breaks must be strictly increasing inside (0, end)")
        if values.shape[0] != breaks.size + 1:
            raise CovariateError("need exactly one value vector per interval")
        if np.any(np.abs(values) > VALUE_BOUND):
            raise CovariateError(f"covariate values exceed bound {VALUE_BOUND}")
        # canonicalize: merge adjacent equal value vectors (exact comparison)
        keep = [0]
        for k in range(1, values.shape[0]):
            if not np.array_equal(values[k], values[keep[-1]]):
                keep.append(k)
        if len(keep) != values.shape[0]:
            new_breaks = breaks[[k - 1 for k in keep[1:]]]
            values = values[keep]
            breaks = new_breaks
        self.breaks = breaks
        self.values = values
        self.end = float(end)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def value_at(self, t: float) -> np.ndarray:
        return path_value(self, t)

    def __eq__(self, other):
        return (
            isinstance(other, PiecewiseConstantPath)
            and self.end == other.end
            and np.array_equal(self.breaks, other.breaks)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        return (
            f"PiecewiseConstantPath(breaks={self.breaks.tolist()}, "
            f"values={self.values.tolist()}, end={self.end})"
        )


def path_value(path: PiecewiseConstantPath, t: float) -> np.ndarray:
    """Evaluate the left-continuous step function at ``t``.

    ``t`` on a breakpoint returns the value of the interval ending
    there; ``t = 0`` returns the initial value.
    """
    if not 0 <= t <= path.end:
        raise OutOfDomain(f"t={t} outside [0, {path.end}]")
    # value index: number of breaks strictly below t
    idx = bisect.bisect_left(path.breaks.tolist(), t)
    return path.values[idx]


@dataclass(frozen=True)
class CovariatePanel:
    """One subject's covariate paths: per event type, x, z, and at-risk."""

    subject_id: str
    x_paths: tuple[PiecewiseConstantPath, ...]
    z_paths: tuple[PiecewiseConstantPath, ...]
    at_risk: tuple[PiecewiseConstantPath, ...]
    end: float

    @property
    def n_types(self) -> int:
        return len(self.x_paths)


def _history_path(sequence: EventSequence, rules, end: float, risk_off: float | None):
    """Build the step function of the rule vector over the event history.

    ``risk_off``: time after which the subject is no longer at risk;
    values there are irrelevant to the likelihood and set to 0.
    """
    times = [0.0]
    state = HistoryState.initial(rules)
    states = [state]
    for rec in sequence.records:
        if rec.time >= end:
            break
        state = state.advance(rec.event_type)
        times.append(rec.time)
        states.append(state)
    values = np.array(
        [[rule.evaluate(st) for rule in rules] for st in states], dtype=float
    )
    if risk_off is not None and risk_off < end:
        cut = bisect.bisect_left(times, risk_off)
        # intervals entirely after risk_off carry value 0
        for k in range(len(times)):
            if times[k] >= risk_off:
                values[k] = 0.0
        if risk_off not in times:
            values = np.insert(values, cut, 0.0 * values[0], axis=0)
            times.insert(cut, risk_off)
    return PiecewiseConstantPath(np.array(times[1:]), values, end)


def build_panel(
    sequence: EventSequence, spec: CovariateSpec, catalog: EventCatalog
) -> CovariatePanel:
    """Compile one subject's history into covariate and at-risk paths.

    Paths are defined on ``[0, censor_time]``.  The at-risk indicator is
    1 up to and including the terminating event (or throughout when no
    terminating event occurs) and 0 afterwards.
    """
    spec.check(catalog)
    term_time = None
    if sequence.terminated(catalog):
        term_time = sequence.records[-1].time
    end = sequence.censor_time
    if not math.isfinite(end):
        if term_time is not None:
            end = term_time
        else:
            raise CovariateError(
                f"subject {sequence.subject_id!r} has no finite observation end "
                "(not terminated and no censoring time)"
            )

    risk_off = term_time if (term_time is not None and term_time < end) else None

    x_paths = []
    z_paths = []
    risks = []
    cache: dict[tuple, PiecewiseConstantPath] = {}

    def build(rules, zero_after):
        key = (tuple(rules), zero_after)
        if key not in cache:
            cache[key] = _history_path(
                sequence, rules, end, risk_off if zero_after else None
            )
        return cache[key]

    for j in range(catalog.n_types):
        x_paths.append(build(spec.rules_fixed[j], True))
        z_paths.append(build(spec.rules_random[j], True))
        rule = spec.risk_rule(j)
        risks.append(build((rule if rule is not None else const(),), True))

    return CovariatePanel(
        sequence.subject_id, tuple(x_paths), tuple(z_paths), tuple(risks), end
    )


def refine_breakpoints(panel: CovariatePanel) -> np.ndarray:
    """Merged grid ``0 = s_0 < ... < s_M = end`` on which every path is constant."""
    pts = {0.0, panel.end}
    for path in panel.x_paths + panel.z_paths + panel.at_risk:
        pts.update(path.breaks.tolist())
    return np.array(sorted(pts))


# ---------------------------------------------------------------------------
# spec file format


def _parse_rule(token: str, catalog: EventCatalog) -> CovariateRule:
    token = token.strip()
    if token == "const":
        return const()
    if token.startswith("last(") and token.endswith(")"):
        return last(catalog.index(token[5:-1].strip()))
    if token.startswith("lasttwo(") and token.endswith(")"):
        inner = token[8:-1]
        parts = [p.strip() for p in inner.split(",")]
        if len(parts) != 2:
            raise CovariateError(f"malformed rule {token!r}")
        return lasttwo(catalog.index(parts[0]), catalog.index(parts[1]))
    if token.startswith("since(") and token.endswith(")"):
        inner = token[6:-1]
        if "|" not in inner:
            raise CovariateError(f"malformed rule {token!r}")
        trigger, closers = inner.split("|", 1)
        initially = False
        if closers.endswith(";start"):
            closers = closers[: -len(";start")]
            initially = True
        until = [catalog.index(p.strip()) for p in closers.split(",") if p.strip()]
        return since(catalog.index(trigger.strip()), until, initially)
    raise CovariateError(f"unknown rule descriptor {token!r}")


def parse_covariate_spec(lines, catalog: EventCatalog) -> CovariateSpec:
    """Read a covariate-spec file.

    A leading ``shared`` directive makes every following rule line apply
    to all event types and both blocks.  Otherwise the file consists of
    ``fixed <label>:`` / ``random <label>:`` section headers, each
    followed by one rule descriptor per line.  Either way, optional
    ``risk <label>: <rule>`` lines gate a type's at-risk indicator.
    """
    if isinstance(lines, str):
        lines = lines.splitlines()
    rows = [ln.strip() for ln in lines]
    rows = [ln for ln in rows if ln and not ln.startswith("#")]
    if not rows:
        raise CovariateError("empty covariate spec")

    risk: dict[int, CovariateRule] = {}

    def parse_risk(ln):
        _, rest = ln.split(None, 1)
        label, rule_txt = rest.split(":", 1)
        risk[catalog.index(label.strip())] = _parse_rule(rule_txt, catalog)

    def risk_tuple():
        if not risk:
            return None
        return tuple(risk.get(j) for j in range(catalog.n_types))

    if rows[0].lower() == "shared":
        rules = []
        for ln in rows[1:]:
            if ln.lower().startswith("risk "):
                parse_risk(ln)
            else:
                rules.append(_parse_rule(ln, catalog))
        spec = CovariateSpec.make_shared(rules, catalog.n_types, risk_tuple())
        spec.check(catalog)
        return spec

    fixed: dict[int, list[CovariateRule]] = {}
    random: dict[int, list[CovariateRule]] = {}
    current: list[CovariateRule] | None = None
    for ln in rows:
        lower = ln.lower()
        if lower.startswith("risk "):
            parse_risk(ln)
        elif lower.startswith("fixed ") or lower.startswith("random "):
            block, label = ln.split(None, 1)
            label = label.rstrip(":").strip()
            j = catalog.index(label)
            target = fixed if block.lower() == "fixed" else random
            current = target.setdefault(j, [])
        else:
            if current is None:
                raise CovariateError(f"rule {ln!r} outside any section")
            current.append(_parse_rule(ln, catalog))
    J = catalog.n_types
    spec = CovariateSpec(
        tuple(tuple(fixed.get(j, ())) for j in range(J)),
        tuple(tuple(random.get(j, ())) for j in range(J)),
        shared=False,
        risk_rules=risk_tuple(),
    )
    spec.check(catalog)
    return spec


def write_covariate_spec(spec: CovariateSpec, catalog: EventCatalog) -> str:
    lines = []
    if spec.shared:
        lines.append("shared")
        lines += [rule.label(catalog) for rule in spec.rules_fixed[0]]
    else:
        for j, rules in enumerate(spec.rules_fixed):
            lines.append(f"fixed {catalog.names[j]}:")
            lines += [rule.label(catalog) for rule in rules]
        for j, rules in enumerate(spec.rules_random):
            lines.append(f"random {catalog.names[j]}:")
            lines += [rule.label(catalog) for rule in rules]
    if spec.risk_rules is not None:
        for j, rule in enumerate(spec.risk_rules):
            if rule is not None:
                lines.append(f"risk {catalog.names[j]}: {rule.label(catalog)}")
    return "\n".join(lines) + "\n"
