import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvheat.events import (
    Event,
    EventBoundsError,
    EventOrderError,
    EventParseError,
    EventSlice,
    EventTensor,
    as_events,
    empty_events,
    encode_frame,
    encode_voxel,
    events_from_records,
    format_events,
    parse_events,
    slice_stream,
)


def test_parse_single_line():
    ev = parse_events("3,2,1000,1\n", width=8, height=8)
    assert as_events(ev) == [Event(3, 2, 1000, 1)]


def test_parse_empty_stream():
    assert len(parse_events("", 8, 8)) == 0


def test_parse_accepts_binary_stream():
    ev = parse_events(io.BytesIO(b"1,1,5,-1\n2,0,6,1\n"), 4, 4)
    assert as_events(ev) == [Event(1, 1, 5, -1), Event(2, 0, 6, 1)]


def test_parse_zero_polarity_rejected():
    with pytest.raises(EventParseError, match="polarity"):
        parse_events("3,2,1000,0", 8, 8)


def test_parse_reports_line_number():
    with pytest.raises(EventParseError) as err:
        parse_events("1,1,1,1\n1,1,x,1\n", 8, 8)
    assert err.value.lineno == 2


@pytest.mark.parametrize("line", ["8,0,0,1", "0,8,0,1"])
def test_parse_bounds(line):
    with pytest.raises(EventBoundsError):
        parse_events(line, 8, 8)


def test_format_roundtrip():
    ev = events_from_records([(0, 1, 2, 1), (3, 4, 5, -1)])
    assert np.array_equal(parse_events(format_events(ev), 8, 8), ev)


def _times(ts):
    return events_from_records([(0, 0, t, 1) for t in ts])


def test_slice_one_window():
    slices = slice_stream(_times([0, 5000, 9999]), 10_000)
    assert len(slices) == 1 and len(slices[0]) == 3


def test_slice_boundary_opens_next_window():
    slices = slice_stream(_times([0, 10_000]), 10_000)
    assert [len(s) for s in slices] == [1, 1]
    assert (slices[1].t_start, slices[1].t_end) == (10_000, 20_000)


def test_slice_empty():
    assert slice_stream(empty_events(), 10_000) == []


def test_slice_unsorted():
    with pytest.raises(EventOrderError):
        slice_stream(_times([5, 3]), 10)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 100_000), max_size=60), st.integers(1, 30_000))
def test_slice_partition(ts, interval):
    ev = _times(sorted(ts))
    slices = slice_stream(ev, interval)
    joined = np.concatenate([s.events for s in slices]) if slices else empty_events()
    assert np.array_equal(joined, ev)
    for s in slices:
        assert s.t_end - s.t_start == interval
        assert np.all((s.events["t"] >= s.t_start) & (s.events["t"] < s.t_end))


def _slice(records, t0=0, t1=10_000):
    return EventSlice(events_from_records(records), t0, t1)


def test_frame_accumulates_counts():
    fr = encode_frame(_slice([(3, 2, 0, 1), (3, 2, 5, 1)]), 4, 5)
    expected = np.zeros((2, 4, 5))
    expected[0, 2, 3] = 2
    assert np.array_equal(fr.data, expected)


def test_frame_empty_slice():
    fr = encode_frame(EventSlice(empty_events(), 0, 10), 3, 3)
    assert fr.data.shape == (2, 3, 3) and not fr.data.any()


def test_frame_polarity_channels():
    fr = encode_frame(_slice([(1, 1, 0, 1), (1, 1, 1, -1)]), 3, 3)
    assert fr.data[0, 1, 1] == 1 and fr.data[1, 1, 1] == 1 and fr.data.sum() == 2


def test_voxel_single_bin_matches_frame():
    sl = _slice([(0, 0, 10, 1), (2, 1, 9000, -1), (2, 1, 5000, -1)])
    assert np.array_equal(encode_voxel(sl, 3, 3, 1).data, encode_frame(sl, 3, 3).data)


def test_voxel_left_closed_bins():
    vx = encode_voxel(_slice([(0, 0, 0, 1)]), 2, 2, bins=4)
    assert vx.data[0, 0, 0] == 1


def test_voxel_uniform_events_split_evenly():
    # events at 0, 2500, 5000, 7500 in a 10 ms slice; bin edge at 5000
    sl = _slice([(0, 0, t, 1) for t in (0, 2500, 5000, 7500)])
    vx = encode_voxel(sl, 1, 1, bins=2)
    assert vx.data[:2].reshape(2).tolist() == [2.0, 2.0]


def test_voxel_rejects_zero_bins():
    with pytest.raises(ValueError):
        encode_voxel(_slice([]), 2, 2, 0)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 5), st.integers(0, 4), st.integers(0, 999), st.sampled_from([-1, 1])), max_size=40),
    st.integers(1, 5),
)
def test_count_conservation_and_polarity_mass(records, bins):
    records = sorted(records, key=lambda r: r[2])
    sl = EventSlice(events_from_records(records) if records else empty_events(), 0, 1000)
    pos = sum(1 for r in records if r[3] == 1)
    for enc in (encode_frame(sl, 5, 6), encode_voxel(sl, 5, 6, bins)):
        c = enc.data.shape[0] // 2
        assert enc.data.min() >= 0
        assert enc.data.sum() == len(records)
        assert enc.data[:c].sum() == pos
        assert enc.data[c:].sum() == len(records) - pos


def test_tensor_binary_roundtrip():
    data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    buf = EventTensor(data, "voxel").to_bytes()
    assert buf[:16] == np.array([2, 3, 4, 1], dtype="<i4").tobytes()
    back = EventTensor.from_bytes(buf)
    assert back.encoding == "voxel" and np.array_equal(back.data, data)
