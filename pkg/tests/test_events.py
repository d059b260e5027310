import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evfuse.events import (Event, EventFileError, EventStream, parse_event_file,
                           serialize_event_stream, slice_window)


@st.composite
def streams(draw, max_events=40):
    w = draw(st.integers(1, 50))
    h = draw(st.integers(1, 50))
    n = draw(st.integers(0, max_events))
    ts = sorted(draw(st.lists(st.integers(0, 10 ** 9), min_size=n, max_size=n)))
    evs = [Event(t, draw(st.integers(0, w - 1)), draw(st.integers(0, h - 1)),
                 draw(st.sampled_from([1, -1]))) for t in ts]
    return EventStream.from_events((w, h), evs)


def test_parse_examples():
    s = parse_event_file(b"4 3\n10,0,0,1\n20,3,2,-1")
    assert s.resolution == (4, 3)
    assert s.events == [Event(10, 0, 0, 1), Event(20, 3, 2, -1)]
    empty = parse_event_file(b"4 3\n")
    assert empty.resolution == (4, 3) and len(empty) == 0


def test_parse_comments():
    s = parse_event_file(b"# a comment\n4 3\n# mid\n10,0,0,1\n")
    assert len(s) == 1


@pytest.mark.parametrize("text,lineno,fragment", [
    (b"4 3\n10,9,0,1", 2, "x=9 out of range for width 4"),
    (b"4 3\n10,0,3,1", 2, "y=3"),
    (b"4 3\n10,0,0,0", 2, "polarity"),
    (b"4 3\n10,0,0,2", 2, "polarity"),
    (b"4 3\n10,0,0,1\n5,0,0,1", 3, "decreases"),
    (b"4 3\n10,0,0", 2, "malformed"),
    (b"4 3\n10, 0,0,1", 2, "malformed"),
    (b"4 3\nabc", 2, "malformed"),
    (b"4,3\n", 1, "header"),
    (b"# c\n0 3\n", 2, "positive"),
])
def test_parse_errors(text, lineno, fragment):
    with pytest.raises(EventFileError) as exc:
        parse_event_file(text)
    assert exc.value.lineno == lineno
    assert fragment in str(exc.value)


def test_parse_missing_header():
    with pytest.raises(EventFileError):
        parse_event_file(b"# only comments\n")


def test_serialize_examples():
    assert serialize_event_stream(EventStream.empty((4, 3))) == b"4 3\n"
    one = EventStream.from_events((4, 3), [(10, 0, 0, 1)])
    assert serialize_event_stream(one) == b"4 3\n10,0,0,1\n"


def test_equal_timestamps_keep_file_order():
    s = parse_event_file(b"5 5\n7,4,0,1\n7,0,0,-1\n7,2,2,1\n")
    assert [e.x for e in s.events] == [4, 0, 2]


def test_stream_invariants_enforced():
    with pytest.raises(ValueError):
        EventStream.from_events((4, 3), [(10, 0, 0, 1), (5, 0, 0, 1)])
    with pytest.raises(ValueError):
        EventStream.from_events((4, 3), [(10, 4, 0, 1)])
    with pytest.raises(ValueError):
        EventStream.from_events((4, 3), [(10, 0, 0, 3)])


def test_stream_is_immutable():
    s = EventStream.from_events((4, 3), [(10, 0, 0, 1)])
    with pytest.raises(ValueError):
        s.t[0] = 3


@settings(max_examples=100, deadline=None)
@given(streams())
def test_round_trip(s):
    data = serialize_event_stream(s)
    assert parse_event_file(data) == s
    assert serialize_event_stream(parse_event_file(data)) == data


def test_slice_examples():
    s = EventStream.from_events((2, 2), [(10, 0, 0, 1), (20, 1, 0, 1), (30, 0, 1, -1)])
    assert [e.t for e in slice_window(s, 10, 30)] == [10, 20]
    assert len(slice_window(s, 0, 0)) == 0
    assert slice_window(s, 0, 31) == s
    with pytest.raises(ValueError):
        slice_window(s, 5, 4)


@settings(max_examples=100, deadline=None)
@given(streams(), st.lists(st.integers(0, 10 ** 9), min_size=3, max_size=3))
def test_slice_additivity(s, cuts):
    a, b, c = sorted(cuts)
    left, right, whole = slice_window(s, a, b), slice_window(s, b, c), slice_window(s, a, c)
    assert sorted(left.events + right.events) == sorted(whole.events)
    assert left.events + right.events == whole.events
