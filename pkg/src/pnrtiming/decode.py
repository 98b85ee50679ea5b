"""Per-event photon-number decoding against a calibration model.

Each detected event is projected onto the calibrated axis and bucketed by
the decision boundaries; bucket index j means j + 1 photons.  Triggers
without a paired detection decode to zero photons.  A coordinate exactly
on a boundary goes to the lower photon number.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .calibrate import CalibrationModel, classify
from .errors import AlignmentError, CompatibilityError, DataError, StreamFormatError

_REC_MAGIC = b"PNRREC01"
_REC_VERSION = 1
_REC_HEADER = struct.Struct("<8sHBBId")
_REC_DTYPE = np.dtype(
    [
        ("trigger_index", "<u4"),
        ("n", "u1"),
        ("flags", "u1"),
        ("reserved", "<u2"),
        ("trigger_time", "<i8"),
    ]
)


class PhotonRecord(NamedTuple):
    trigger_index: int
    trigger_time: int
    detector: str
    n: int


@dataclass(eq=False)
class PhotonRecordSet:
    """Decoded photon numbers for one detector, one record per trigger."""

    detector: str
    window_ps: float
    trigger_index: np.ndarray
    trigger_time: np.ndarray
    n: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.trigger_index = np.asarray(self.trigger_index, dtype=np.int64)
        self.trigger_time = np.asarray(self.trigger_time, dtype=np.int64)
        self.n = np.asarray(self.n, dtype=np.int16)
        if not (self.trigger_index.shape == self.trigger_time.shape == self.n.shape):
            raise ValueError("record arrays must share one shape")
        if np.any(self.n < 0):
            raise ValueError("photon numbers must be non-negative")

    def __len__(self) -> int:
        return self.n.size

    def __getitem__(self, i: int) -> PhotonRecord:
        return PhotonRecord(
            int(self.trigger_index[i]), int(self.trigger_time[i]), self.detector, int(self.n[i])
        )

    def __iter__(self) -> Iterator[PhotonRecord]:
        for i in range(len(self)):
            yield self[i]

    def class_counts(self, n_max: int | None = None) -> np.ndarray:
        """Counts of decoded photon numbers 0..n_max (auto-sized if None)."""
        length = (n_max + 1) if n_max is not None else int(self.n.max(initial=0)) + 1
        counts = np.bincount(self.n, minlength=length)
        if n_max is not None and counts.size > length:
            raise ValueError(f"records contain photon numbers above n_max={n_max}")
        return counts

    def to_csv(self, path) -> None:
        with open(Path(path), "w", encoding="utf-8") as f:
            f.write(f"# detector={self.detector} window_ps={self.window_ps:g}\n")
            f.write("trigger_index,trigger_time,n\n")
            for i in range(len(self)):
                f.write(f"{self.trigger_index[i]},{self.trigger_time[i]},{self.n[i]}\n")

    @classmethod
    def from_csv(cls, path) -> "PhotonRecordSet":
        detector, window = "A", 0.0
        with open(Path(path), "r", encoding="utf-8") as f:
            first = f.readline().strip()
            if first.startswith("#"):
                for tok in first[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "detector":
                        detector = val
                    elif key == "window_ps":
                        window = float(val)
        data = np.loadtxt(path, delimiter=",", skiprows=2, dtype=np.int64, ndmin=2)
        if data.size == 0:
            data = data.reshape(0, 3)
        return cls(detector, window, data[:, 0], data[:, 1], data[:, 2].astype(np.int16))

    def to_binary(self, path) -> None:
        arr = np.empty(len(self), dtype=_REC_DTYPE)
        arr["trigger_index"] = self.trigger_index
        arr["n"] = self.n
        arr["flags"] = 0
        arr["reserved"] = 0
        arr["trigger_time"] = self.trigger_time
        header = _REC_HEADER.pack(
            _REC_MAGIC, _REC_VERSION, ord(self.detector[0]), 0, len(self), float(self.window_ps)
        )
        with open(Path(path), "wb") as f:
            f.write(header)
            f.write(arr.tobytes())

    @classmethod
    def from_binary(cls, path) -> "PhotonRecordSet":
        raw = Path(path).read_bytes()
        if len(raw) < _REC_HEADER.size:
            raise StreamFormatError("record file shorter than header", byte_offset=0)
        magic, version, det_byte, _, count, window = _REC_HEADER.unpack_from(raw)
        if magic != _REC_MAGIC:
            raise StreamFormatError(f"bad record magic {magic!r}", byte_offset=0)
        if version != _REC_VERSION:
            raise StreamFormatError(f"unsupported record version {version}", byte_offset=8)
        body = raw[_REC_HEADER.size :]
        if len(body) != count * _REC_DTYPE.itemsize:
            raise StreamFormatError(
                f"expected {count} records, found {len(body)} payload bytes",
                byte_offset=_REC_HEADER.size + (len(body) // _REC_DTYPE.itemsize) * _REC_DTYPE.itemsize,
            )
        arr = np.frombuffer(body, dtype=_REC_DTYPE)
        return cls(
            chr(det_byte),
            window,
            arr["trigger_index"].astype(np.int64),
            arr["trigger_time"].astype(np.int64),
            arr["n"].astype(np.int16),
        )


def decode_events(events, model: CalibrationModel) -> PhotonRecordSet:
    """Map edge events to photon numbers via the calibrated projection.

    Output order and length match the input trigger sequence exactly;
    non-detections decode to n=0.  Coordinates past the outermost cluster
    by more than 8*(sigma+gamma) still land in the outer buckets but are
    tallied in the out_of_range diagnostic.
    """
    if model.detector is not None and events.detector != model.detector:
        raise CompatibilityError(
            f"events from detector {events.detector!r} cannot be decoded with a "
            f"calibration for detector {model.detector!r}"
        )
    detected = events.has_detection
    rise = events.rise_delay
    fall = events.fall_delay
    bad = detected & ~(np.isfinite(rise) & np.isfinite(fall))
    if np.any(bad):
        raise DataError(f"non-finite edge delay at event index {int(np.argmax(bad))}")

    coords = rise[detected] * math.cos(model.angle) + fall[detected] * math.sin(model.angle)
    n = np.zeros(len(events), dtype=np.int16)
    n[detected] = classify(coords, model.boundaries).astype(np.int16) + 1

    first, last = model.components[0], model.components[-1]
    lo = first.center - 8.0 * (first.sigma + first.gamma)
    hi = last.center + 8.0 * (last.sigma + last.gamma)
    out_of_range = int(np.count_nonzero((coords < lo) | (coords > hi)))
    diagnostics = {
        "mode": model.mode,
        "angle_rad": float(model.angle),
        "class_counts": np.bincount(n, minlength=model.k + 1).tolist(),
        "out_of_range": out_of_range,
        "triggers": int(len(events)),
        "detections": int(np.count_nonzero(detected)),
    }
    return PhotonRecordSet(
        detector=events.detector,
        window_ps=events.window_ps,
        trigger_index=events.trigger_index.copy(),
        trigger_time=events.trigger_time.copy(),
        n=n,
        diagnostics=diagnostics,
    )


@dataclass(eq=False)
class ConfusionReport:
    """Empirical confusion matrix (true photon number x decoded) plus
    accuracy figures and, when a model is supplied, a cell-by-cell
    comparison of detected-event rows against the predicted crosstalk."""

    matrix: np.ndarray
    labels: np.ndarray
    per_class_accuracy: np.ndarray
    overall_accuracy: float
    n_events: int
    prediction: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "labels": self.labels.tolist(),
            "matrix": self.matrix.tolist(),
            "per_class_accuracy": [None if np.isnan(v) else float(v) for v in self.per_class_accuracy],
            "overall_accuracy": self.overall_accuracy,
            "n_events": self.n_events,
        }
        if self.prediction is not None:
            out["prediction"] = {
                k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.prediction.items()
            }
        return out


def confusion_report(records: PhotonRecordSet, truth, model: CalibrationModel | None = None) -> ConfusionReport:
    """Confusion matrix of decoded records against simulator truth.

    Truth rows are matched to records by trigger_index; any mismatch is an
    alignment error.  True photon numbers beyond the calibration's highest
    class are clamped onto that class for the prediction comparison (the
    pulse shape saturates there), but appear unclamped in the matrix.
    """
    true_n = np.asarray(
        truth.true_n_a if records.detector == "A" else truth.true_n_b, dtype=np.int64
    )
    truth_idx = np.asarray(truth.trigger_index, dtype=np.int64)
    if truth_idx.shape != records.trigger_index.shape or np.any(truth_idx != records.trigger_index):
        missing = np.setdiff1d(truth_idx, records.trigger_index)[:10]
        extra = np.setdiff1d(records.trigger_index, truth_idx)[:10]
        raise AlignmentError(
            f"truth and records disagree on trigger indices "
            f"(missing from records: {missing.tolist()}, unexpected: {extra.tolist()})"
        )

    dec_n = records.n.astype(np.int64)
    size = int(max(true_n.max(initial=0), dec_n.max(initial=0))) + 1
    matrix = np.zeros((size, size), dtype=np.int64)
    np.add.at(matrix, (true_n, dec_n), 1)

    row_sums = matrix.sum(axis=1)
    with np.errstate(invalid="ignore"):
        per_class = np.where(row_sums > 0, np.diag(matrix) / np.maximum(row_sums, 1), np.nan)
    overall = float(np.trace(matrix) / max(matrix.sum(), 1))

    prediction = None
    if model is not None:
        k = model.k
        clamped = np.minimum(true_n, k)
        observed = np.zeros((k, k), dtype=np.int64)
        detected_rows = (clamped >= 1) & (dec_n >= 1)
        np.add.at(observed, (clamped[detected_rows] - 1, np.minimum(dec_n[detected_rows], k) - 1), 1)
        row_n = observed.sum(axis=1)
        expected = row_n[:, None] * model.crosstalk
        with np.errstate(invalid="ignore", divide="ignore"):
            sigma = np.sqrt(row_n[:, None] * model.crosstalk * (1.0 - model.crosstalk))
            z = np.where(sigma > 0, (observed - expected) / sigma, 0.0)
        prediction = {
            "observed": observed,
            "expected": expected,
            "z": z,
            "max_abs_z": float(np.max(np.abs(z))) if z.size else 0.0,
        }

    return ConfusionReport(
        matrix=matrix,
        labels=np.arange(size),
        per_class_accuracy=per_class,
        overall_accuracy=overall,
        n_events=int(dec_n.size),
        prediction=prediction,
    )
