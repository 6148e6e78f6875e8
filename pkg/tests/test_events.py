import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app_tpp.events import (
    ActionEvent,
    ActionSequence,
    DataError,
    Dataset,
    load_dataset,
    parse_dataset,
    split_dataset,
    write_dataset,
)


def test_parse_basic():
    d = parse_dataset("K=3\n0:1.5 2:0.25\n")
    assert d.num_categories == 3
    assert len(d) == 1
    assert d[0].events == (ActionEvent(0, 1.5), ActionEvent(2, 0.25))


def test_parse_accepts_stream_comments_and_blank_lines():
    d = parse_dataset(io.StringIO("# made by hand\n\nK=2\n# first\n0:1 1:2\n\n1:0\n"))
    assert len(d) == 2
    assert d.num_events == 3


def test_parse_empty_body():
    with pytest.raises(DataError, match="no sequences"):
        parse_dataset("K=3\n")


def test_parse_category_out_of_range_names_category():
    with pytest.raises(DataError, match="category 5") as exc:
        parse_dataset("K=3\n5:1.0\n")
    assert "line 2" in str(exc.value)


@pytest.mark.parametrize(
    "body, fragment",
    [
        ("K=2\n0:-1.0\n", "negative"),
        ("K=2\n0-1.0\n", "line 2"),
        ("K=2\n0:abc\n", "line 2"),
        ("K=2\n0:nan\n", "non-finite"),
        ("0:1.0\n", "header"),
        ("K=0\n0:1\n", "positive"),
        ("", "header"),
    ],
)
def test_parse_errors(body, fragment):
    with pytest.raises(DataError, match=fragment):
        parse_dataset(body)


def test_time_scale():
    d = parse_dataset("K=1\n0:2 0:4\n", time_scale=0.5)
    assert d[0].inter_arrivals.tolist() == [1.0, 2.0]


def test_event_validation():
    with pytest.raises(ValueError):
        ActionEvent(-1, 1.0)
    with pytest.raises(ValueError):
        ActionEvent(0, float("inf"))
    with pytest.raises(ValueError):
        Dataset((ActionSequence((ActionEvent(3, 1.0),)),), 3)


def test_write_single_event_and_header():
    d = Dataset((ActionSequence((ActionEvent(47, 0.5),)),), 48)
    text = write_dataset(d)
    assert text.splitlines() == ["K=48", "47:0.5"]


events = st.builds(ActionEvent, st.integers(0, 5), st.floats(0, 1e6, allow_nan=False, allow_infinity=False))
sequences = st.lists(events, min_size=1, max_size=8).map(lambda e: ActionSequence(tuple(e)))


@settings(max_examples=100, deadline=None)
@given(st.lists(sequences, min_size=1, max_size=6))
def test_round_trip(seqs):
    d = Dataset(tuple(seqs), 6)
    assert parse_dataset(write_dataset(d)) == d


def test_load_dataset(tmp_path):
    p = tmp_path / "d.evt"
    p.write_text("K=2\n1:0.5\n")
    d = load_dataset(p)
    assert d.name == str(p)
    assert d[0].categories.tolist() == [1]


def _toy(n):
    return Dataset(tuple(ActionSequence((ActionEvent(0, float(i)),)) for i in range(n)), 1)


def test_split_sizes():
    tr, va = split_dataset(_toy(10), 0.7, seed=1)
    assert (len(tr), len(va)) == (7, 3)
    tr, va = split_dataset(_toy(1712), 0.7, seed=1)
    assert (len(tr), len(va)) == (1199, 513)


def test_split_deterministic_and_disjoint():
    d = _toy(25)
    a = split_dataset(d, 0.6, seed=3)
    b = split_dataset(d, 0.6, seed=3)
    assert a == b
    times = lambda ds: {s[0].inter_arrival for s in ds}
    assert times(a[0]).isdisjoint(times(a[1]))
    assert times(a[0]) | times(a[1]) == set(map(float, range(25)))


def test_split_too_small():
    with pytest.raises(DataError):
        split_dataset(_toy(1), 0.5, seed=0)
    tr, va = split_dataset(_toy(2), 0.99, seed=0)
    assert (len(tr), len(va)) == (1, 1)
