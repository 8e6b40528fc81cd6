import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eventfactor.covariates import (
    CovariateSpec,
    HistoryState,
    OutOfDomain,
    PiecewiseConstantPath,
    build_panel,
    const,
    last,
    lasttwo,
    parse_covariate_spec,
    path_value,
    refine_breakpoints,
    since,
    write_covariate_spec,
)
from eventfactor.events import EventCatalog, EventRecord, EventSequence, parse_event_log

CATALOG = EventCatalog(
    ("W1", "W1_M", "W2", "W3", "R_Open", "R_3", "Next", "Back", "Next_OK"),
    terminating=8,
)

# the worked covariate example: W2@15, Back@25, W1@28, W1_M@34, Back@36,
# Back@38, W3@42, R_Open@45, R_3@50, Next@52, Next_OK@53
EXAMPLE = [
    ("W2", 15), ("Back", 25), ("W1", 28), ("W1_M", 34), ("Back", 36),
    ("Back", 38), ("W3", 42), ("R_Open", 45), ("R_3", 50), ("Next", 52),
    ("Next_OK", 53),
]


def example_sequence() -> EventSequence:
    recs = tuple(
        EventRecord("s", CATALOG.index(label), float(t)) for label, t in EXAMPLE
    )
    return EventSequence("s", recs, 53.0)


def shared_spec(rules) -> CovariateSpec:
    return CovariateSpec.make_shared(rules, CATALOG.n_types)


def test_last_event_indicator_matches_worked_example():
    # the last-event-is-W2 indicator is 1 exactly on (15, 25]
    spec = shared_spec([last(CATALOG.index("W2"))])
    panel = build_panel(example_sequence(), spec, CATALOG)
    path = panel.x_paths[0]
    assert path_value(path, 15.0)[0] == 0.0
    assert path_value(path, 15.0001)[0] == 1.0
    assert path_value(path, 25.0)[0] == 1.0
    assert path_value(path, 25.0001)[0] == 0.0


def test_last_event_back_two_intervals():
    # last-event-is-Back holds on (25, 28] and (36, 42]
    spec = shared_spec([last(CATALOG.index("Back"))])
    panel = build_panel(example_sequence(), spec, CATALOG)
    path = panel.x_paths[0]
    for t, expect in [(25.0, 0.0), (26.0, 1.0), (28.0, 1.0), (29.0, 0.0),
                      (36.5, 1.0), (38.0, 1.0), (40.0, 1.0), (42.0, 1.0), (42.5, 0.0)]:
        assert path_value(path, t)[0] == expect, t


def test_lasttwo_pattern_matches_worked_example():
    # second-last W2 then Back holds exactly on (25, 28]
    spec = shared_spec([lasttwo(CATALOG.index("W2"), CATALOG.index("Back"))])
    panel = build_panel(example_sequence(), spec, CATALOG)
    path = panel.x_paths[0]
    for t, expect in [(25.0, 0.0), (25.5, 1.0), (28.0, 1.0), (28.5, 0.0), (37.0, 0.0)]:
        assert path_value(path, t)[0] == expect, t


def test_empty_history_all_indicators_zero():
    spec = shared_spec([last(0), lasttwo(0, 1)])
    seq = EventSequence("s", (), censor_time=10.0)
    panel = build_panel(seq, spec, CATALOG)
    assert np.all(panel.x_paths[0].values == 0.0)
    assert panel.x_paths[0].end == 10.0


def test_const_rule_is_one_from_start():
    spec = shared_spec([const()])
    seq = EventSequence("s", (), censor_time=5.0)
    panel = build_panel(seq, spec, CATALOG)
    assert path_value(panel.x_paths[0], 0.0)[0] == 1.0


def test_path_value_domain_and_left_continuity():
    path = PiecewiseConstantPath(np.array([15.0, 25.0]), np.array([[0.0], [1.0], [0.0]]), 30.0)
    assert path_value(path, 0.0)[0] == 0.0
    assert path_value(path, 15.0)[0] == 0.0
    assert path_value(path, 15.0001)[0] == 1.0
    assert path_value(path, 25.0)[0] == 1.0
    with pytest.raises(OutOfDomain):
        path_value(path, 31.0)
    with pytest.raises(OutOfDomain):
        path_value(path, -1.0)


def test_canonical_merge():
    path = PiecewiseConstantPath(
        np.array([1.0, 2.0]), np.array([[1.0], [1.0], [0.0]]), 3.0
    )
    assert path.breaks.tolist() == [2.0]
    assert path.values.tolist() == [[1.0], [0.0]]


def test_refine_breakpoints_union():
    spec = shared_spec([last(CATALOG.index("W2")), lasttwo(CATALOG.index("W2"), CATALOG.index("Back"))])
    seq = EventSequence(
        "s",
        (
            EventRecord("s", CATALOG.index("W2"), 15.0),
            EventRecord("s", CATALOG.index("Back"), 25.0),
            EventRecord("s", CATALOG.index("W1"), 28.0),
        ),
        censor_time=53.0,
    )
    panel = build_panel(seq, spec, CATALOG)
    grid = refine_breakpoints(panel)
    assert grid.tolist() == [0.0, 15.0, 25.0, 28.0, 53.0]


def test_refinement_invariant_to_redundant_breakpoint():
    # brute-force oracle: union of breakpoints, then merge equal-value runs
    a = PiecewiseConstantPath(np.array([2.0]), np.array([[0.0], [1.0]]), 5.0)
    b = PiecewiseConstantPath(np.array([2.0, 3.0]), np.array([[0.0], [1.0], [1.0]]), 5.0)
    assert a == b  # canonicalization removed the redundant break
    assert np.array_equal(a.breaks, b.breaks)


def test_history_measurability():
    # rebuilding from the sequence truncated at time t reproduces values on [0, t]
    spec = shared_spec([last(j) for j in range(8)])
    seq = example_sequence()
    panel = build_panel(seq, spec, CATALOG)
    t_cut = 40.0
    recs = tuple(r for r in seq.records if r.time <= t_cut)
    truncated = EventSequence("s", recs, censor_time=t_cut)
    panel_cut = build_panel(truncated, spec, CATALOG)
    for t in np.linspace(0.0, t_cut, 37):
        np.testing.assert_array_equal(
            path_value(panel.x_paths[0], t), path_value(panel_cut.x_paths[0], t)
        )


def test_at_risk_zero_after_termination_when_censor_later():
    spec = shared_spec([const()])
    recs = (EventRecord("s", CATALOG.terminating, 4.0),)
    seq = EventSequence("s", recs, censor_time=10.0)
    panel = build_panel(seq, spec, CATALOG)
    risk = panel.at_risk[0]
    assert path_value(risk, 4.0)[0] == 1.0
    assert path_value(risk, 4.5)[0] == 0.0


def test_risk_rule_gates_at_risk():
    rules = [const()]
    risk = [None] * CATALOG.n_types
    risk[CATALOG.index("R_3")] = last(CATALOG.index("R_Open"))
    spec = CovariateSpec.make_shared(rules, CATALOG.n_types, tuple(risk))
    panel = build_panel(example_sequence(), spec, CATALOG)
    r3 = panel.at_risk[CATALOG.index("R_3")]
    assert path_value(r3, 44.0)[0] == 0.0
    assert path_value(r3, 46.0)[0] == 1.0  # right after R_Open@45
    assert path_value(r3, 50.0)[0] == 1.0
    assert path_value(r3, 51.0)[0] == 0.0  # R_3 closed it


def test_since_rule_state():
    menu = since(CATALOG.index("R_Open"), [CATALOG.index("R_3")])
    state = HistoryState.initial([menu])
    assert menu.evaluate(state) == 0.0
    state = state.advance(CATALOG.index("W1"))
    assert menu.evaluate(state) == 0.0
    state = state.advance(CATALOG.index("R_Open"))
    assert menu.evaluate(state) == 1.0
    state = state.advance(CATALOG.index("W2"))
    assert menu.evaluate(state) == 1.0  # stays open
    state = state.advance(CATALOG.index("R_3"))
    assert menu.evaluate(state) == 0.0


def test_since_initially():
    main = since(CATALOG.index("Back"), [CATALOG.index("W1")], initially=True)
    state = HistoryState.initial([main])
    assert main.evaluate(state) == 1.0
    state = state.advance(CATALOG.index("W1"))
    assert main.evaluate(state) == 0.0
    state = state.advance(CATALOG.index("Back"))
    assert main.evaluate(state) == 1.0


def test_spec_file_round_trip():
    rules = [last(0), lasttwo(2, 7), const(), since(4, [5, 7])]
    risk = [None] * CATALOG.n_types
    risk[5] = since(4, [5], initially=False)
    risk[8] = last(6)
    spec = CovariateSpec.make_shared(rules, CATALOG.n_types, tuple(risk))
    text = write_covariate_spec(spec, CATALOG)
    spec2 = parse_covariate_spec(text, CATALOG)
    assert spec2 == spec


def test_spec_per_type_sections():
    text = """
fixed W1:
last(W2)
const
random W1:
last(Back)
risk Next_OK: last(Next)
"""
    spec = parse_covariate_spec(text, CATALOG)
    assert len(spec.rules_fixed[0]) == 2
    assert len(spec.rules_random[0]) == 1
    assert spec.risk_rule(CATALOG.index("Next_OK")) == last(CATALOG.index("Next"))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(range(8)), min_size=0, max_size=12))
def test_left_continuity_everywhere(types):
    # at every breakpoint the path takes the value of the interval ending there
    recs = tuple(
        EventRecord("s", t, float(i + 1)) for i, t in enumerate(types)
    )
    seq = EventSequence("s", recs, censor_time=len(types) + 1.0)
    spec = shared_spec([last(j) for j in range(8)])
    panel = build_panel(seq, spec, CATALOG)
    path = panel.x_paths[0]
    for k, b in enumerate(path.breaks):
        np.testing.assert_array_equal(path_value(path, float(b)), path.values[k])
