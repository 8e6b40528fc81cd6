import math

import pytest

from eventfactor.events import (
    Dataset,
    EmptyInput,
    EventAfterCensoring,
    EventCatalog,
    EventRecord,
    EventSequence,
    NonIncreasingTimes,
    UnknownEventLabel,
    parse_event_log,
    read_catalog,
    serialize_event_log,
    validate_dataset,
    write_catalog,
)

CATALOG = EventCatalog(
    ("W1", "Back", "W2", "R_Open", "R_2", "Next", "Next_OK"), terminating=6
)

# the worked example log: 14 records ending in the terminating event
EXAMPLE_TIMES = [
    ("W1", 14), ("Back", 21), ("W2", 33), ("Back", 35), ("W1", 37), ("Back", 39),
    ("W2", 41), ("Back", 46), ("W1", 47), ("Back", 50), ("R_Open", 53),
    ("R_2", 59), ("Next", 65), ("Next_OK", 67),
]


def example_log() -> str:
    return "\n".join(f"s1,{label},{t}" for label, t in EXAMPLE_TIMES)


def test_parse_example_sequence():
    ds = parse_event_log(example_log(), CATALOG)
    assert ds.n_subjects == 1
    seq = ds.sequences[0]
    assert seq.n_events == 14
    assert seq.records[-1].event_type == CATALOG.terminating
    # censoring defaults to the terminating time
    assert seq.censor_time == 67.0


def test_zero_event_sequence_with_censor_directive():
    ds = parse_event_log("#censor,s9,10", CATALOG)
    seq = ds.sequences[0]
    assert seq.n_events == 0
    assert seq.censor_time == 10.0


def test_equal_times_rejected():
    with pytest.raises(NonIncreasingTimes):
        parse_event_log("s1,W1,5\ns1,Back,5", CATALOG)


def test_unsorted_lines_rejected():
    with pytest.raises(NonIncreasingTimes):
        parse_event_log("s1,W1,5\ns1,Back,3", CATALOG)


def test_unknown_label():
    with pytest.raises(UnknownEventLabel):
        parse_event_log("s1,XX,5", CATALOG)


def test_empty_input():
    with pytest.raises(EmptyInput):
        parse_event_log("# just a comment", CATALOG)


def test_event_after_censoring():
    with pytest.raises(EventAfterCensoring):
        parse_event_log("#censor,s1,4\ns1,W1,5", CATALOG)


def test_non_terminated_defaults_to_infinite_censor():
    ds = parse_event_log("s1,W1,5", CATALOG)
    assert math.isinf(ds.sequences[0].censor_time)


def test_round_trip_bit_exact():
    text = example_log() + "\n#censor,s2,12.25\ns2,W1,3.0000001\n"
    ds = parse_event_log(text, CATALOG)
    out = serialize_event_log(ds)
    ds2 = parse_event_log(out, CATALOG)
    for a, b in zip(ds.sequences, ds2.sequences):
        assert a.subject_id == b.subject_id
        assert a.censor_time == b.censor_time
        assert [(r.event_type, r.time) for r in a.records] == [
            (r.event_type, r.time) for r in b.records
        ]
    assert serialize_event_log(ds2) == out


def test_validate_clean_dataset():
    ds = parse_event_log(example_log(), CATALOG)
    assert validate_dataset(ds) == []


def test_validate_terminating_not_last():
    seq = EventSequence(
        "s1",
        (EventRecord("s1", 6, 1.0), EventRecord("s1", 0, 2.0)),
        censor_time=2.0,
    )
    ds = Dataset(CATALOG, (seq,))
    rules = {v.rule for v in validate_dataset(ds)}
    assert "TerminatingNotLast" in rules


def test_validate_event_after_censor_reported():
    seq = EventSequence("s1", (EventRecord("s1", 0, 5.0),), censor_time=10.0)
    object.__setattr__(seq, "censor_time", 3.0)  # corrupt post-hoc
    ds = Dataset(CATALOG, (seq,))
    rules = {v.rule for v in validate_dataset(ds)}
    assert "EventAfterCensoring" in rules


def test_sequence_invariants_at_construction():
    with pytest.raises(NonIncreasingTimes):
        EventSequence("s", (EventRecord("s", 0, 2.0), EventRecord("s", 0, 1.0)))
    with pytest.raises(EventAfterCensoring):
        EventSequence("s", (EventRecord("s", 0, 2.0),), censor_time=1.0)


def test_duplicate_subjects_rejected():
    a = EventSequence("s", (EventRecord("s", 0, 1.0),), censor_time=2.0)
    with pytest.raises(Exception):
        Dataset(CATALOG, (a, a))


def test_catalog_file_round_trip():
    text = write_catalog(CATALOG)
    cat = read_catalog(text)
    assert cat.names == CATALOG.names
    assert cat.terminating == CATALOG.terminating


def test_catalog_uniqueness():
    with pytest.raises(Exception):
        EventCatalog(("a", "a"))
