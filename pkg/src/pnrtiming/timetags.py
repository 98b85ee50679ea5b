"""Time-tag data model, binary stream I/O, and trigger/edge pairing.

The on-disk format (``.pnrtag``) is little-endian: an ASCII magic header
followed by fixed 16-byte records.  Timestamps are signed 64-bit integers
in units of 0.1 ps, an order of magnitude below the per-channel tagger
jitter, and wide enough for multi-day streams.

Channel map: 0 = trigger photodiode, 1/2 = detector A rising/falling,
3/4 = detector B rising/falling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, NamedTuple

import numpy as np

from .errors import StreamFormatError, StreamOrderError

MAGIC = b"PNRTAG01"
FORMAT_VERSION = 1
RESOLUTION_CODE = 1  # code 1 = 0.1 ps per timestamp unit
CHANNEL_COUNT = 5
UNITS_PER_PS = 10

CH_TRIGGER = 0
DETECTOR_CHANNELS = {"A": (1, 2), "B": (3, 4)}

_HEADER_FIXED = struct.Struct("<8sHHHH")  # magic, version, resolution, channels, note length
_RECORD_DTYPE = np.dtype(
    [
        ("channel", "u1"),
        ("flags", "u1"),
        ("reserved16", "<u2"),
        ("reserved32", "<u4"),
        ("timestamp", "<i8"),
    ]
)
RECORD_SIZE = _RECORD_DTYPE.itemsize  # 16 bytes
_READ_CHUNK = 1 << 16


class TimeTag(NamedTuple):
    channel: int
    timestamp: int  # 0.1 ps units


class EdgeEvent(NamedTuple):
    trigger_time: int  # 0.1 ps units
    rise_delay: float | None  # ps relative to the trigger tag
    fall_delay: float | None
    channel_id: str
    has_detection: bool


@dataclass(eq=False)
class TagBlock:
    """Column-oriented tag storage: one uint8 channel and one int64 timestamp per tag."""

    channels: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.uint8)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.channels.shape != self.timestamps.shape or self.channels.ndim != 1:
            raise ValueError("channels and timestamps must be 1-D arrays of equal length")
        if self.channels.size and int(self.channels.max()) >= CHANNEL_COUNT:
            raise ValueError(
                f"channel out of range: {int(self.channels.max())} >= {CHANNEL_COUNT}"
            )

    @classmethod
    def from_tags(cls, tags: Iterable[TimeTag]) -> "TagBlock":
        ch, ts = [], []
        for tag in tags:
            ch.append(tag[0])
            ts.append(tag[1])
        return cls(np.array(ch, dtype=np.uint8), np.array(ts, dtype=np.int64))

    def sorted(self) -> "TagBlock":
        """Return a copy sorted by timestamp, ties broken by channel ascending."""
        order = np.lexsort((self.channels, self.timestamps))
        return TagBlock(self.channels[order], self.timestamps[order])

    def is_sorted(self) -> bool:
        ts, ch = self.timestamps, self.channels.astype(np.int16)
        if ts.size < 2:
            return True
        dts = np.diff(ts)
        return bool(np.all((dts > 0) | ((dts == 0) & (np.diff(ch) >= 0))))

    def __len__(self) -> int:
        return self.channels.size

    def __getitem__(self, i) -> TimeTag:
        return TimeTag(int(self.channels[i]), int(self.timestamps[i]))

    def __iter__(self) -> Iterator[TimeTag]:
        for c, t in zip(self.channels, self.timestamps):
            yield TimeTag(int(c), int(t))


def as_tag_block(tags) -> TagBlock:
    if isinstance(tags, TagBlock):
        return tags
    return TagBlock.from_tags(tags)


def _open_sink(sink):
    if hasattr(sink, "write"):
        return sink, False
    return open(Path(sink), "wb"), True


def _open_source(source):
    if hasattr(source, "read"):
        return source, False
    return open(Path(source), "rb"), True


def write_stream(tags, sink, *, epoch_note: str = "") -> int:
    """Serialize tags to a byte sink; returns the number of bytes written.

    Tags must already be sorted by (timestamp, channel); violations raise
    StreamOrderError rather than silently reordering.
    """
    block = as_tag_block(tags)
    if not block.is_sorted():
        ts, ch = block.timestamps, block.channels.astype(np.int16)
        dts = np.diff(ts)
        bad = np.nonzero((dts < 0) | ((dts == 0) & (np.diff(ch) < 0)))[0]
        raise StreamOrderError(f"tags out of order at record {int(bad[0]) + 1}")
    note = epoch_note.encode("utf-8")
    if len(note) > 0xFFFF:
        raise ValueError("epoch note longer than 65535 bytes")
    header = _HEADER_FIXED.pack(MAGIC, FORMAT_VERSION, RESOLUTION_CODE, CHANNEL_COUNT, len(note))
    records = np.zeros(len(block), dtype=_RECORD_DTYPE)
    records["channel"] = block.channels
    records["timestamp"] = block.timestamps
    payload = records.tobytes()

    f, should_close = _open_sink(sink)
    try:
        f.write(header)
        f.write(note)
        f.write(payload)
    finally:
        if should_close:
            f.close()
    return len(header) + len(note) + len(payload)


class _Header(NamedTuple):
    version: int
    resolution_code: int
    channel_count: int
    epoch_note: str
    size_bytes: int


def _read_header(f) -> _Header:
    raw = f.read(_HEADER_FIXED.size)
    if len(raw) < _HEADER_FIXED.size:
        raise StreamFormatError("stream shorter than the fixed header", byte_offset=len(raw))
    magic, version, resolution, channels, note_len = _HEADER_FIXED.unpack(raw)
    if magic != MAGIC:
        raise StreamFormatError(f"bad magic {magic!r}", byte_offset=0)
    if version != FORMAT_VERSION:
        raise StreamFormatError(f"unsupported format version {version}")
    if resolution != RESOLUTION_CODE:
        raise StreamFormatError(f"unsupported resolution code {resolution}")
    note = f.read(note_len)
    if len(note) < note_len:
        raise StreamFormatError("truncated epoch note", byte_offset=_HEADER_FIXED.size + len(note))
    return _Header(version, resolution, channels, note.decode("utf-8"), _HEADER_FIXED.size + note_len)


def _check_channels(channels: np.ndarray, header: _Header, offset: int):
    limit = min(header.channel_count, CHANNEL_COUNT)
    bad = np.nonzero(channels >= limit)[0]
    if bad.size:
        raise StreamFormatError(
            f"channel {int(channels[bad[0]])} out of range",
            byte_offset=offset + int(bad[0]) * RECORD_SIZE,
        )


def read_stream(source) -> Iterator[TimeTag]:
    """Stream tags from a byte source one at a time with bounded memory.

    Header errors raise immediately; record errors raise during iteration
    with the byte offset of the offending record.
    """
    f, should_close = _open_source(source)
    header = _read_header(f)

    def _gen():
        try:
            offset = header.size_bytes
            carry = b""
            while True:
                chunk = f.read(_READ_CHUNK)
                if not chunk:
                    break
                buf = carry + chunk
                n_rec = len(buf) // RECORD_SIZE
                usable = n_rec * RECORD_SIZE
                if n_rec:
                    records = np.frombuffer(buf[:usable], dtype=_RECORD_DTYPE)
                    _check_channels(records["channel"], header, offset)
                    for c, t in zip(records["channel"], records["timestamp"]):
                        yield TimeTag(int(c), int(t))
                carry = buf[usable:]
                offset += usable
            if carry:
                raise StreamFormatError(
                    f"truncated record: {len(carry)} trailing bytes", byte_offset=offset
                )
        finally:
            if should_close:
                f.close()

    return _gen()


def read_tag_block(source) -> TagBlock:
    """Load a whole stream into arrays (fast path; see read_stream for bounded memory)."""
    f, should_close = _open_source(source)
    try:
        header = _read_header(f)
        offset = header.size_bytes
        parts = []
        carry = b""
        while True:
            chunk = f.read(1 << 22)
            if not chunk:
                break
            buf = carry + chunk
            usable = (len(buf) // RECORD_SIZE) * RECORD_SIZE
            if usable:
                records = np.frombuffer(buf[:usable], dtype=_RECORD_DTYPE).copy()
                _check_channels(records["channel"], header, offset)
                parts.append(records)
            carry = buf[usable:]
            offset += usable
        if carry:
            raise StreamFormatError(
                f"truncated record: {len(carry)} trailing bytes", byte_offset=offset
            )
    finally:
        if should_close:
            f.close()
    if not parts:
        return TagBlock(np.empty(0, np.uint8), np.empty(0, np.int64))
    records = np.concatenate(parts)
    return TagBlock(records["channel"].astype(np.uint8), records["timestamp"].astype(np.int64))


@dataclass(eq=False)
class EdgeEventSet:
    """Per-trigger pairing result; one entry per channel-0 tag, in trigger order."""

    detector: str
    window_ps: float
    trigger_index: np.ndarray  # int64
    trigger_time: np.ndarray  # int64, 0.1 ps units
    rise_delay: np.ndarray  # float64 ps, NaN where has_detection is False
    fall_delay: np.ndarray
    has_detection: np.ndarray  # bool
    orphan_edges: int = 0

    def __len__(self) -> int:
        return self.trigger_index.size

    def __getitem__(self, i) -> EdgeEvent:
        det = bool(self.has_detection[i])
        return EdgeEvent(
            int(self.trigger_time[i]),
            float(self.rise_delay[i]) if det else None,
            float(self.fall_delay[i]) if det else None,
            self.detector,
            det,
        )

    def detected(self) -> tuple[np.ndarray, np.ndarray]:
        """(rise, fall) delay arrays of the detected events only."""
        m = self.has_detection
        return self.rise_delay[m], self.fall_delay[m]

    @property
    def n_detections(self) -> int:
        return int(np.count_nonzero(self.has_detection))

    def diagnostics(self) -> dict:
        n_det = self.n_detections
        return {
            "triggers": len(self),
            "detections": n_det,
            "zero_events": len(self) - n_det,
            "orphan_edges": int(self.orphan_edges),
        }


def _pair_vectorized(trig, rise, fall, w):
    ri = np.searchsorted(rise, trig, side="left")
    safe_r = np.minimum(ri, max(rise.size - 1, 0))
    rv = rise[safe_r] if rise.size else np.zeros_like(trig)
    ok_r = (ri < rise.size) & (rv <= trig + w)

    fi = np.searchsorted(fall, rv, side="right")
    safe_f = np.minimum(fi, max(fall.size - 1, 0))
    fv = fall[safe_f] if fall.size else np.zeros_like(trig)
    ok = ok_r & (fi < fall.size) & (fv <= trig + w)
    return ok, np.where(ok, rv, 0), np.where(ok, fv, 0)


def _pair_loop(trig, rise, fall, w):
    n = trig.size
    ok = np.zeros(n, dtype=bool)
    rv = np.zeros(n, dtype=np.int64)
    fv = np.zeros(n, dtype=np.int64)
    r_front = 0
    f_front = 0
    for i in range(n):
        t = int(trig[i])
        j = max(r_front, int(np.searchsorted(rise, t, side="left")))
        if j >= rise.size or int(rise[j]) > t + w:
            continue
        r = int(rise[j])
        r_front = j + 1  # rise consumed even if no fall follows
        m = max(f_front, int(np.searchsorted(fall, r, side="right")))
        if m >= fall.size or int(fall[m]) > t + w:
            continue
        f_front = m + 1
        ok[i] = True
        rv[i] = r
        fv[i] = int(fall[m])
    return ok, rv, fv


def pair_edges(tags, window_ps: float, detector: str = "A") -> EdgeEventSet:
    """Pair each trigger with the first rising and subsequent falling edge in its window.

    Greedy first-match in trigger order; every detector tag is consumed at
    most once.  A rising edge without a falling partner inside the window,
    and any detector tag never consumed into a detection, is counted under
    ``orphan_edges`` and excluded.
    """
    if detector not in DETECTOR_CHANNELS:
        raise ValueError(f"unknown detector {detector!r}")
    if not window_ps > 0:
        raise ValueError("window must be positive")
    block = as_tag_block(tags)
    if not block.is_sorted():
        raise StreamOrderError("tags must be sorted by (timestamp, channel) before pairing")

    ch_rise, ch_fall = DETECTOR_CHANNELS[detector]
    trig = block.timestamps[block.channels == CH_TRIGGER]
    rise = block.timestamps[block.channels == ch_rise]
    fall = block.timestamps[block.channels == ch_fall]
    w = int(round(window_ps * UNITS_PER_PS))

    disjoint = trig.size < 2 or bool(np.all(trig[1:] > trig[:-1] + w))
    if disjoint:
        ok, rv, fv = _pair_vectorized(trig, rise, fall, w)
    else:
        ok, rv, fv = _pair_loop(trig, rise, fall, w)

    rise_delay = np.full(trig.size, np.nan)
    fall_delay = np.full(trig.size, np.nan)
    rise_delay[ok] = (rv[ok] - trig[ok]) / UNITS_PER_PS
    fall_delay[ok] = (fv[ok] - trig[ok]) / UNITS_PER_PS
    n_det = int(np.count_nonzero(ok))
    orphans = int(rise.size + fall.size - 2 * n_det)
    return EdgeEventSet(
        detector=detector,
        window_ps=float(window_ps),
        trigger_index=np.arange(trig.size, dtype=np.int64),
        trigger_time=trig.copy(),
        rise_delay=rise_delay,
        fall_delay=fall_delay,
        has_detection=ok,
        orphan_edges=orphans,
    )
