"""Stream round-trips, malformed input handling, and the pairing oracle."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnrtiming import TagBlock, TimeTag, pair_edges, read_stream, read_tag_block, write_stream
from pnrtiming.errors import StreamFormatError, StreamOrderError
from pnrtiming.timetags import RECORD_SIZE, UNITS_PER_PS, _HEADER_FIXED


# ---------------------------------------------------------------- oracle

def pair_oracle(trig, rise, fall, window):
    """O(n*m) reference matcher: scan every trigger against every detector tag.

    Greedy in trigger order, each tag consumed at most once, first rise in
    [t, t+w] then first fall strictly after that rise and still inside the
    window.  A rise is consumed once selected even when no fall follows.
    """
    used_r = np.zeros(len(rise), dtype=bool)
    used_f = np.zeros(len(fall), dtype=bool)
    out = []
    for t in trig:
        r_idx = None
        for i, r in enumerate(rise):
            if not used_r[i] and t <= r <= t + window:
                r_idx = i
                break
        if r_idx is None:
            out.append(None)
            continue
        used_r[r_idx] = True
        f_idx = None
        for j, f in enumerate(fall):
            if not used_f[j] and rise[r_idx] < f <= t + window:
                f_idx = j
                break
        if f_idx is None:
            out.append(None)
            continue
        used_f[f_idx] = True
        out.append((rise[r_idx], fall[f_idx]))
    return out


def random_stream(rng, n_trig, n_rise, n_fall, span):
    trig = np.sort(rng.integers(0, span, n_trig))
    rise = np.sort(rng.integers(0, span, n_rise))
    fall = np.sort(rng.integers(0, span, n_fall))
    ch = np.concatenate(
        [np.zeros(n_trig, int), np.ones(n_rise, int), np.full(n_fall, 2)]
    )
    ts = np.concatenate([trig, rise, fall])
    order = np.lexsort((ch, ts))
    return TagBlock(ch[order], ts[order]), trig, rise, fall


@pytest.mark.parametrize("seed", range(8))
def test_pairing_matches_brute_force_on_dense_streams(seed):
    rng = np.random.default_rng(seed)
    span = 400_000  # 40 ns at 0.1 ps units; windows overlap heavily
    block, trig, rise, fall = random_stream(rng, 60, 80, 80, span)
    window_ps = 1500.0
    events = pair_edges(block, window_ps=window_ps, detector="A")
    expect = pair_oracle(trig, rise, fall, int(window_ps * UNITS_PER_PS))

    assert len(events) == trig.size
    for i, exp in enumerate(expect):
        if exp is None:
            assert not events.has_detection[i]
        else:
            r, f = exp
            assert events.has_detection[i]
            assert events.rise_delay[i] == pytest.approx((r - trig[i]) / UNITS_PER_PS)
            assert events.fall_delay[i] == pytest.approx((f - trig[i]) / UNITS_PER_PS)


def test_pairing_matches_brute_force_on_sparse_stream():
    # disjoint windows take the vectorized path; same answer required
    rng = np.random.default_rng(42)
    trig = np.arange(50, dtype=np.int64) * 100_000
    rise = np.sort(rng.choice(trig, 30, replace=False) + rng.integers(0, 3000, 30))
    fall = rise + rng.integers(1, 5000, 30)
    ch = np.concatenate([np.zeros(50, int), np.ones(30, int), np.full(30, 2)])
    ts = np.concatenate([trig, rise, fall])
    order = np.lexsort((ch, ts))
    block = TagBlock(ch[order], ts[order])

    events = pair_edges(block, window_ps=900.0, detector="A")
    expect = pair_oracle(trig, np.sort(rise), np.sort(fall), 9000)
    got = [
        (events.rise_delay[i], events.fall_delay[i]) if events.has_detection[i] else None
        for i in range(len(events))
    ]
    want = [
        ((r - t) / UNITS_PER_PS, (f - t) / UNITS_PER_PS) if pair else None
        for t, pair in zip(trig, expect)
        for r, f in [pair if pair else (0, 0)]
    ]
    assert got == want


def test_pairing_invariants_on_random_streams():
    rng = np.random.default_rng(3)
    for _ in range(5):
        block, trig, rise, fall = random_stream(rng, 200, 260, 260, 2_000_000)
        events = pair_edges(block, window_ps=2000.0, detector="A")
        assert len(events) == trig.size
        r, f = events.detected()
        assert np.all(r >= 0)
        assert np.all(f > r)
        assert np.all(f <= 2000.0)
        consumed = 2 * events.n_detections
        assert events.orphan_edges == rise.size + fall.size - consumed


# ---------------------------------------------------------------- pairing basics

def test_single_event_example():
    tags = [TimeTag(0, 0), TimeTag(1, 500), TimeTag(2, 3000)]
    events = pair_edges(tags, window_ps=1000.0, detector="A")
    assert len(events) == 1
    ev = events[0]
    assert ev.has_detection
    assert ev.rise_delay == 50.0
    assert ev.fall_delay == 300.0


def test_trigger_without_detector_tags_is_zero_candidate():
    events = pair_edges([TimeTag(0, 1000)], window_ps=1000.0, detector="A")
    assert len(events) == 1
    assert not events.has_detection[0]
    assert np.isnan(events.rise_delay[0])
    assert events.diagnostics() == {
        "triggers": 1,
        "detections": 0,
        "zero_events": 1,
        "orphan_edges": 0,
    }


def test_rise_never_consumed_twice():
    # two triggers share one pulse; only the first trigger may claim it
    tags = [
        TimeTag(0, 0),
        TimeTag(0, 100),
        TimeTag(1, 200),
        TimeTag(2, 800),
    ]
    events = pair_edges(tags, window_ps=1000.0, detector="A")
    assert list(events.has_detection) == [True, False]


def test_fall_without_rise_is_orphan_not_crash():
    tags = [TimeTag(0, 0), TimeTag(2, 500)]
    events = pair_edges(tags, window_ps=1000.0, detector="A")
    assert not events.has_detection[0]
    assert events.orphan_edges == 1


def test_detector_b_uses_channels_3_and_4():
    tags = [TimeTag(0, 0), TimeTag(3, 400), TimeTag(4, 900)]
    events = pair_edges(tags, window_ps=1000.0, detector="B")
    assert events.has_detection[0]
    assert events.rise_delay[0] == 40.0
    assert pair_edges(tags, window_ps=1000.0, detector="A").n_detections == 0


def test_pair_edges_rejects_bad_arguments():
    with pytest.raises(ValueError):
        pair_edges([TimeTag(0, 0)], window_ps=1000.0, detector="C")
    with pytest.raises(ValueError):
        pair_edges([TimeTag(0, 0)], window_ps=0.0)
    with pytest.raises(StreamOrderError):
        pair_edges([TimeTag(0, 100), TimeTag(1, 0)], window_ps=1000.0)


# ---------------------------------------------------------------- stream I/O

def roundtrip(tags, **kw):
    buf = io.BytesIO()
    write_stream(tags, buf, **kw)
    buf.seek(0)
    return read_tag_block(buf)


def test_empty_stream_round_trip():
    buf = io.BytesIO()
    n = write_stream([], buf)
    assert n == _HEADER_FIXED.size
    buf.seek(0)
    assert list(read_stream(buf)) == []


def test_single_tag_encoding():
    buf = io.BytesIO()
    write_stream([TimeTag(0, 0)], buf)
    raw = buf.getvalue()
    assert raw[:8] == b"PNRTAG01"
    assert len(raw) == _HEADER_FIXED.size + RECORD_SIZE
    record = raw[_HEADER_FIXED.size:]
    assert record[0] == 0  # channel byte
    assert record[8:] == b"\x00" * 8  # zero timestamp


def test_round_trip_preserves_tags():
    rng = np.random.default_rng(5)
    ts = np.sort(rng.integers(-(10**14), 10**14, 5000))
    ch = rng.integers(0, 5, 5000)
    block = TagBlock(ch, ts).sorted()
    back = roundtrip(block, epoch_note="run 7, cooldown 3")
    np.testing.assert_array_equal(back.channels, block.channels)
    np.testing.assert_array_equal(back.timestamps, block.timestamps)


def test_write_then_read_then_write_is_byte_identical():
    rng = np.random.default_rng(11)
    block = TagBlock(rng.integers(0, 5, 1000), np.sort(rng.integers(0, 10**12, 1000))).sorted()
    buf1 = io.BytesIO()
    write_stream(block, buf1)
    buf1.seek(0)
    buf2 = io.BytesIO()
    write_stream(read_tag_block(buf1), buf2)
    assert buf1.getvalue() == buf2.getvalue()


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 4), st.integers(-(2**62), 2**62)),
        max_size=200,
    )
)
def test_round_trip_property(pairs):
    pairs.sort(key=lambda p: (p[1], p[0]))
    tags = [TimeTag(c, t) for c, t in pairs]
    back = roundtrip(tags)
    assert [tuple(t) for t in back] == pairs


def test_write_rejects_unsorted_tags():
    with pytest.raises(StreamOrderError, match="record 1"):
        write_stream([TimeTag(0, 100), TimeTag(0, 50)], io.BytesIO())
    # equal timestamps must come in channel order
    with pytest.raises(StreamOrderError):
        write_stream([TimeTag(2, 100), TimeTag(1, 100)], io.BytesIO())


def test_bad_magic_reports_offset_zero():
    buf = io.BytesIO(b"NOTMAGIC" + b"\x00" * 8)
    with pytest.raises(StreamFormatError) as err:
        read_tag_block(buf)
    assert err.value.byte_offset == 0


def test_short_header_rejected():
    with pytest.raises(StreamFormatError):
        read_tag_block(io.BytesIO(b"PNRT"))


def test_unsupported_version_rejected():
    buf = io.BytesIO()
    write_stream([TimeTag(0, 0)], buf)
    raw = bytearray(buf.getvalue())
    raw[8] = 99  # version u16 little-endian low byte
    with pytest.raises(StreamFormatError, match="version"):
        read_tag_block(io.BytesIO(bytes(raw)))


def test_truncated_record_reports_byte_offset():
    buf = io.BytesIO()
    write_stream([TimeTag(0, 0), TimeTag(1, 10)], buf)
    raw = buf.getvalue()[:-7]  # chop the final record mid-way
    with pytest.raises(StreamFormatError) as err:
        read_tag_block(io.BytesIO(raw))
    assert err.value.byte_offset == _HEADER_FIXED.size + RECORD_SIZE


def test_truncated_record_raises_during_streaming_too():
    buf = io.BytesIO()
    write_stream([TimeTag(0, 0), TimeTag(1, 10)], buf)
    stream = read_stream(io.BytesIO(buf.getvalue()[:-7]))
    with pytest.raises(StreamFormatError):
        list(stream)


def test_out_of_range_channel_in_payload():
    buf = io.BytesIO()
    write_stream([TimeTag(0, 0)], buf)
    raw = bytearray(buf.getvalue())
    raw[_HEADER_FIXED.size] = 7  # channel byte of the first record
    with pytest.raises(StreamFormatError, match="channel 7"):
        read_tag_block(io.BytesIO(bytes(raw)))


def test_tag_block_validates_shapes_and_channels():
    with pytest.raises(ValueError):
        TagBlock(np.zeros(3, np.uint8), np.zeros(2, np.int64))
    with pytest.raises(ValueError):
        TagBlock(np.array([9], np.uint8), np.array([0], np.int64))
