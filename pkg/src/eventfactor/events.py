"""Multivariate event sequences: parsing, validation, serialization.

An event log records, per subject, a time-ordered sequence of typed
events together with an end-of-observation (censoring) time.  Event
times are strictly increasing within a subject; ties are data errors.
A catalog may declare one event type as terminating (absorbing): such
an event, when present, must be the last record of its sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

__all__ = [
    "EventRecord",
    "EventCatalog",
    "EventSequence",
    "Dataset",
    "Violation",
    "EventLogError",
    "UnknownEventLabel",
    "NonIncreasingTimes",
    "EventAfterCensoring",
    "EmptyInput",
    "parse_event_log",
    "serialize_event_log",
    "validate_dataset",
    "read_catalog",
    "write_catalog",
]


class EventLogError(ValueError):
    """Base class for event-log parsing and validation errors."""


class UnknownEventLabel(EventLogError):
    def __init__(self, label, subject=None):
        super().__init__(f"unknown event label {label!r} (subject {subject!r})")
        self.label = label
        self.subject = subject


class NonIncreasingTimes(EventLogError):
    def __init__(self, subject, index):
        super().__init__(
            f"event times must be strictly increasing: subject {subject!r}, record {index}"
        )
        self.subject = subject
        self.index = index


class EventAfterCensoring(EventLogError):
    def __init__(self, subject, index=None):
        super().__init__(f"event after censoring time: subject {subject!r}")
        self.subject = subject
        self.index = index


class EmptyInput(EventLogError):
    def __init__(self):
        super().__init__("event log contains no records")


@dataclass(frozen=True, slots=True)
class EventRecord:
    """One observed event: ``event_type`` is a 0-based catalog index."""

    subject_id: str
    event_type: int
    time: float

    def __post_init__(self):
        if not (self.time >= 0 and math.isfinite(self.time)):
            raise EventLogError(
                f"event time must be finite and nonnegative, got {self.time}"
            )


@dataclass(frozen=True)
class EventCatalog:
    """Ordered list of event-type labels, with an optional terminating type."""

    names: tuple[str, ...]
    terminating: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 1:
            raise EventLogError("catalog must declare at least one event type")
        if len(set(self.names)) != len(self.names):
            raise EventLogError("catalog labels must be unique")
        if self.terminating is not None and not 0 <= self.terminating < len(self.names):
            raise EventLogError("terminating index out of range")
        object.__setattr__(
            self, "_index", {name: i for i, name in enumerate(self.names)}
        )

    @property
    def n_types(self) -> int:
        return len(self.names)

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise UnknownEventLabel(label) from None


@dataclass(frozen=True)
class EventSequence:
    """One subject's ordered records plus censoring time.

    ``censor_time`` is the end of observation; ``math.inf`` means no
    explicit censoring was recorded.  Invariants (strictly increasing
    times, nothing after censoring, terminating event last) are checked
    at construction.
    """

    subject_id: str
    records: tuple[EventRecord, ...]
    censor_time: float = math.inf
    _catalog: EventCatalog | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.censor_time <= 0:
            raise EventLogError(
                f"censor_time must be positive, got {self.censor_time}"
            )
        for i in range(1, len(self.records)):
            if not self.records[i - 1].time < self.records[i].time:
                raise NonIncreasingTimes(self.subject_id, i)
        for i, rec in enumerate(self.records):
            if rec.time > self.censor_time:
                raise EventAfterCensoring(self.subject_id, i)
        if self._catalog is not None:
            term = self._catalog.terminating
            if term is not None:
                hits = [i for i, r in enumerate(self.records) if r.event_type == term]
                if hits and hits[-1] != len(self.records) - 1:
                    raise EventLogError(
                        f"terminating event is not last: subject {self.subject_id!r}"
                    )
                if len(hits) > 1:
                    raise EventLogError(
                        f"multiple terminating events: subject {self.subject_id!r}"
                    )

    @property
    def n_events(self) -> int:
        return len(self.records)

    def times(self) -> list[float]:
        return [r.time for r in self.records]

    def terminated(self, catalog: EventCatalog) -> bool:
        term = catalog.terminating
        return (
            term is not None
            and len(self.records) > 0
            and self.records[-1].event_type == term
        )


@dataclass(frozen=True)
class Dataset:
    """A catalog plus one EventSequence per subject (unique subject ids)."""

    catalog: EventCatalog
    sequences: tuple[EventSequence, ...]

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        ids = [s.subject_id for s in self.sequences]
        if len(set(ids)) != len(ids):
            raise EventLogError("subject ids must be unique")

    @property
    def n_subjects(self) -> int:
        return len(self.sequences)


@dataclass(frozen=True, slots=True)
class Violation:
    """One validation finding; validation reports values, it does not raise."""

    subject_id: str
    rule: str
    detail: str


def parse_event_log(text_stream, catalog: EventCatalog) -> Dataset:
    """Parse a comma-delimited event log into a Dataset.

    One record per line, ``subject,label,time``.  Lines starting with
    ``#`` are directives or comments; the only directive is
    ``#censor,subject,time``.  Records of a subject must arrive in
    strictly increasing time order.  A subject's censoring time defaults
    to its last event time when the sequence ends in the terminating
    event, and to +inf otherwise.
    """
    if isinstance(text_stream, str):
        lines = text_stream.splitlines()
    else:
        lines = text_stream

    order: list[str] = []
    raw: dict[str, list[EventRecord]] = {}
    censor: dict[str, float] = {}

    def _register(subject_id):
        if subject_id not in raw:
            raw[subject_id] = []
            order.append(subject_id)

    n_records = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.lower().startswith("censor"):
                parts = [p.strip() for p in body.split(",")]
                if len(parts) != 3:
                    raise EventLogError(f"malformed censor directive at line {lineno}")
                _, subject_id, time_str = parts
                _register(subject_id)
                censor[subject_id] = float(time_str)
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise EventLogError(f"malformed record at line {lineno}: {line!r}")
        subject_id, label, time_str = parts
        try:
            event_type = catalog.index(label)
        except UnknownEventLabel:
            raise UnknownEventLabel(label, subject_id) from None
        _register(subject_id)
        recs = raw[subject_id]
        time = float(time_str)
        if recs and not recs[-1].time < time:
            raise NonIncreasingTimes(subject_id, len(recs))
        recs.append(EventRecord(subject_id, event_type, time))
        n_records += 1

    if n_records == 0 and not censor:
        raise EmptyInput()

    sequences = []
    for subject_id in order:
        recs = raw[subject_id]
        if subject_id in censor:
            censor_time = censor[subject_id]
        elif recs and catalog.terminating is not None and recs[-1].event_type == catalog.terminating:
            censor_time = recs[-1].time
        else:
            censor_time = math.inf
        sequences.append(
            EventSequence(subject_id, tuple(recs), censor_time, _catalog=catalog)
        )
    return Dataset(catalog, tuple(sequences))


def serialize_event_log(dataset: Dataset) -> str:
    """Render a Dataset back to log text; round-trips bit-exactly."""
    lines = []
    for seq in dataset.sequences:
        explicit_censor = math.isfinite(seq.censor_time) and not (
            seq.terminated(dataset.catalog)
            and seq.censor_time == seq.records[-1].time
        )
        if explicit_censor:
            lines.append(f"#censor,{seq.subject_id},{seq.censor_time!r}")
        for rec in seq.records:
            label = dataset.catalog.names[rec.event_type]
            lines.append(f"{seq.subject_id},{label},{rec.time!r}")
    return "\n".join(lines) + "\n"


def validate_dataset(dataset: Dataset) -> list[Violation]:
    """Check every type invariant; return one Violation per finding."""
    out: list[Violation] = []
    catalog = dataset.catalog
    term = catalog.terminating
    seen: set[str] = set()
    for seq in dataset.sequences:
        sid = seq.subject_id
        if sid in seen:
            out.append(Violation(sid, "DuplicateSubject", "subject id repeated"))
        seen.add(sid)
        for i in range(1, len(seq.records)):
            if not seq.records[i - 1].time < seq.records[i].time:
                out.append(
                    Violation(sid, "NonIncreasingTimes", f"record {i}")
                )
        for i, rec in enumerate(seq.records):
            if not 0 <= rec.event_type < catalog.n_types:
                out.append(Violation(sid, "UnknownEventType", f"record {i}"))
            if rec.time > seq.censor_time:
                out.append(Violation(sid, "EventAfterCensoring", f"record {i}"))
        if term is not None:
            hits = [i for i, r in enumerate(seq.records) if r.event_type == term]
            if hits and hits[-1] != len(seq.records) - 1:
                out.append(
                    Violation(sid, "TerminatingNotLast", f"record {hits[-1]}")
                )
            if len(hits) > 1:
                out.append(Violation(sid, "MultipleTerminating", f"{len(hits)} hits"))
    return out


def read_catalog(lines) -> EventCatalog:
    """Read a catalog file: one label per line, optional ``!terminating`` suffix."""
    if isinstance(lines, str):
        lines = lines.splitlines()
    names: list[str] = []
    terminating = None
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.endswith("!terminating"):
            label = line[: -len("!terminating")].strip()
            if terminating is not None:
                raise EventLogError("catalog declares more than one terminating type")
            terminating = len(names)
        else:
            label = line
        names.append(label)
    return EventCatalog(tuple(names), terminating)


def write_catalog(catalog: EventCatalog) -> str:
    lines = []
    for i, name in enumerate(catalog.names):
        suffix = " !terminating" if i == catalog.terminating else ""
        lines.append(name + suffix)
    return "\n".join(lines) + "\n"
