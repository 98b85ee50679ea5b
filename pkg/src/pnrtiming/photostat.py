"""Photon-number statistics from decoded records.

Covers the single-channel truncated-Poisson fit, joint photon-number
distributions across two detectors sharing a trigger stream, Klyshko-style
efficiency estimates from split pairs, and the coincidence-suppression
contrast between interfering and split-pair configurations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.stats import poisson

from .errors import (
    AlignmentError,
    InsufficientDataError,
    UnboundedFitError,
    UndefinedRatioError,
)


@dataclass(eq=False)
class NumberDistribution:
    """Counts of decoded photon numbers 0..N for one channel."""

    counts: np.ndarray
    detector: str | None = None

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
            arr = arr.astype(np.int64)
        else:
            # real-valued counts are allowed so exactly known expected
            # frequencies can be fed back through the fit
            arr = arr.astype(np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError("counts must be finite")
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("counts must be a non-empty 1-D array")
        if np.any(arr < 0):
            raise ValueError("counts must be non-negative")
        self.counts = arr

    @classmethod
    def from_records(cls, records, n_max: int | None = None) -> "NumberDistribution":
        length = (n_max + 1) if n_max is not None else int(records.n.max(initial=0)) + 1
        counts = np.bincount(records.n, minlength=length)
        if counts.size > length:
            counts[length - 1] += counts[length:].sum()
            counts = counts[:length]
        return cls(counts, detector=records.detector)

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def mean(self) -> float:
        if self.total == 0:
            return 0.0
        return float(np.arange(self.counts.size) @ self.counts / self.total)

    def probabilities(self) -> np.ndarray:
        return self.counts / max(self.total, 1)

    def folded(self, tail_from: int) -> np.ndarray:
        """Counts with every photon number >= tail_from summed into one
        final category; result has tail_from + 1 entries."""
        if tail_from < 1:
            raise ValueError("tail_from must be at least 1")
        head = self.counts[:tail_from]
        if head.size < tail_from:
            head = np.concatenate([head, np.zeros(tail_from - head.size, dtype=head.dtype)])
        tail = self.counts[tail_from:].sum()
        return np.concatenate([head, [tail]])

    def to_csv(self, path) -> None:
        probs = self.probabilities()
        with open(Path(path), "w", encoding="utf-8") as f:
            f.write("n,count,probability\n")
            for n, (c, p) in enumerate(zip(self.counts, probs)):
                f.write(f"{n},{c},{p:.9g}\n")


def _category_probs(mu: float, tail_from: int) -> np.ndarray:
    head = poisson.pmf(np.arange(tail_from), mu)
    return np.concatenate([head, [max(1.0 - head.sum(), 0.0)]])


@dataclass(eq=False)
class PoissonFit:
    """Truncated-Poisson maximum-likelihood fit over {0..tail-1, >=tail}."""

    mu: float
    stderr: float
    tail_from: int
    counts: np.ndarray
    expected: np.ndarray
    chi2_pearson: float
    chi2_neyman: float
    dof: int
    nll: float

    @property
    def labels(self) -> list:
        return [str(n) for n in range(self.tail_from)] + [f"{self.tail_from}+"]

    @property
    def chi2_ndf(self) -> float:
        return self.chi2_pearson / max(self.dof, 1)

    def confidence_interval(self, z: float = 1.96) -> tuple[float, float]:
        return (self.mu - z * self.stderr, self.mu + z * self.stderr)

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "stderr": self.stderr,
            "ci95": list(self.confidence_interval()),
            "tail_from": self.tail_from,
            "labels": self.labels,
            "counts": self.counts.tolist(),
            "expected": self.expected.tolist(),
            "chi2_pearson": self.chi2_pearson,
            "chi2_neyman": self.chi2_neyman,
            "dof": self.dof,
            "chi2_ndf": self.chi2_ndf,
        }


def fit_poisson_mu(dist: NumberDistribution, tail_from: int = 4) -> PoissonFit:
    """Maximum-likelihood mean of a Poisson distribution observed through
    truncation: categories are photon numbers 0..tail_from-1 plus one
    category collecting everything at or above tail_from.

    The likelihood is multinomial with Poisson pmf probabilities and the
    upper-tail mass for the last category.  All counts at zero photons give
    mu = 0 exactly; all counts in the tail category leave mu unbounded.
    """
    counts = dist.folded(tail_from).astype(float)
    total = counts.sum()
    if total < 100:
        raise InsufficientDataError(f"need at least 100 counts to fit, got {int(total)}")
    if counts[-1] == total:
        raise UnboundedFitError("all counts at or above the tail category; mu is unbounded")

    cats = np.arange(tail_from + 1, dtype=float)
    if counts[0] == total:
        expected = np.zeros_like(counts)
        expected[0] = total
        return PoissonFit(
            mu=0.0,
            stderr=0.0,
            tail_from=tail_from,
            counts=counts,
            expected=expected,
            chi2_pearson=0.0,
            chi2_neyman=0.0,
            dof=tail_from - 1,
            nll=0.0,
        )

    def nll(mu: float) -> float:
        probs = _category_probs(mu, tail_from)
        return -float(counts @ np.log(np.maximum(probs, 1e-300)))

    head_n = cats[:-1]
    head_counts = counts[:-1]

    def score(mu: float) -> float:
        # dNLL/dmu; d log pmf(n)/dmu = n/mu - 1 and d log sf/dmu =
        # pmf(tail_from - 1) / sf, so the NLL is convex with a single root
        head = -float(head_counts @ (head_n / mu - 1.0))
        sf = float(poisson.sf(tail_from - 1, mu))
        tail = 0.0
        if counts[-1] > 0 and sf > 0:
            tail = -counts[-1] * float(poisson.pmf(tail_from - 1, mu)) / sf
        return head + tail

    # method-of-moments seed; the tail category enters at its lowest value,
    # which only widens the bracket on the safe side
    moment = float(cats @ counts / total)
    lo = max(moment / 8.0, 1e-9)
    hi = moment * 8.0 + 2.0
    try:
        mu = float(brentq(score, lo, hi, xtol=1e-12, rtol=8.9e-16))
    except ValueError:
        # no sign change across the bracket; fall back to a bounded search
        res = minimize_scalar(nll, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
        mu = float(res.x)

    h = max(1e-5, 1e-4 * mu)
    d2 = (nll(mu + h) - 2.0 * nll(mu) + nll(mu - h)) / (h * h)
    stderr = 1.0 / math.sqrt(d2) if d2 > 0 else float("nan")

    expected = total * _category_probs(mu, tail_from)
    nonzero = expected > 0
    chi2_p = float(np.sum((counts[nonzero] - expected[nonzero]) ** 2 / expected[nonzero]))
    obs_nonzero = counts > 0
    chi2_n = float(np.sum((counts[obs_nonzero] - expected[obs_nonzero]) ** 2 / counts[obs_nonzero]))
    return PoissonFit(
        mu=mu,
        stderr=stderr,
        tail_from=tail_from,
        counts=counts,
        expected=expected,
        chi2_pearson=chi2_p,
        chi2_neyman=chi2_n,
        dof=tail_from - 1,
        nll=nll(mu),
    )


@dataclass(eq=False)
class JointDistribution:
    """Joint counts of photon numbers decoded on detectors A and B for the
    same trigger sequence; entry (i, j) counts triggers with n_a=i, n_b=j."""

    matrix: np.ndarray
    window_ps: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.int64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError("matrix must be square")
        if np.any(self.matrix < 0):
            raise ValueError("counts must be non-negative")

    @property
    def n_max(self) -> int:
        return self.matrix.shape[0] - 1

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def marginal(self, channel: str) -> NumberDistribution:
        if channel not in ("A", "B"):
            raise ValueError("channel must be 'A' or 'B'")
        axis = 1 if channel == "A" else 0
        return NumberDistribution(self.matrix.sum(axis=axis), detector=channel)

    def padded(self, n_max: int) -> "JointDistribution":
        if n_max < self.n_max:
            raise ValueError("cannot shrink a joint distribution")
        out = np.zeros((n_max + 1, n_max + 1), dtype=np.int64)
        out[: self.matrix.shape[0], : self.matrix.shape[1]] = self.matrix
        return JointDistribution(out, self.window_ps, dict(self.diagnostics))

    def to_csv(self, path) -> None:
        with open(Path(path), "w", encoding="utf-8") as f:
            f.write("n_a\\n_b," + ",".join(str(j) for j in range(self.matrix.shape[1])) + "\n")
            for i, row in enumerate(self.matrix):
                f.write(f"{i}," + ",".join(str(v) for v in row) + "\n")


def build_jpnd(records_a, records_b, window_ps: float | None = None, n_max: int | None = None) -> JointDistribution:
    """Joint photon-number distribution of two record sets decoded from one
    trigger stream; records are paired by trigger index, and any index
    present on only one side is an alignment error."""
    idx_a = np.asarray(records_a.trigger_index, dtype=np.int64)
    idx_b = np.asarray(records_b.trigger_index, dtype=np.int64)
    if idx_a.shape != idx_b.shape or np.any(idx_a != idx_b):
        only_a = np.setdiff1d(idx_a, idx_b)[:10]
        only_b = np.setdiff1d(idx_b, idx_a)[:10]
        raise AlignmentError(
            f"record sets cover different triggers (only in A: {only_a.tolist()}, "
            f"only in B: {only_b.tolist()})"
        )
    na = np.asarray(records_a.n, dtype=np.int64)
    nb = np.asarray(records_b.n, dtype=np.int64)
    size = int(max(na.max(initial=0), nb.max(initial=0))) + 1
    if n_max is not None:
        if n_max + 1 < size:
            raise ValueError(f"records contain photon numbers above n_max={n_max}")
        size = n_max + 1
    matrix = np.zeros((size, size), dtype=np.int64)
    np.add.at(matrix, (na, nb), 1)
    return JointDistribution(
        matrix,
        window_ps=window_ps,
        diagnostics={"n_triggers": int(na.size)},
    )


class EfficiencyEstimate(NamedTuple):
    eta_a: float
    eta_b: float
    coincidences: int
    singles_a: int
    singles_b: int


def estimate_efficiency(jpnd: JointDistribution) -> EfficiencyEstimate:
    """Heralded (Klyshko) efficiency per arm from split-pair data.

    With single-pair emission, every trigger sends one photon to each arm,
    so coincidences C = counts(1,1) relate to per-arm totals S as
    eta_a = C / S_b and eta_b = C / S_a.  Valid only for sources without
    multi-pair contamination.
    """
    m = jpnd.matrix
    coincidences = int(m[1, 1]) if m.shape[0] > 1 else 0
    singles_a = int(m[1:, :].sum())
    singles_b = int(m[:, 1:].sum())
    if singles_a == 0 or singles_b == 0:
        raise InsufficientDataError("a channel recorded no detections; cannot estimate efficiency")
    return EfficiencyEstimate(
        eta_a=coincidences / singles_b,
        eta_b=coincidences / singles_a,
        coincidences=coincidences,
        singles_a=singles_a,
        singles_b=singles_b,
    )


@dataclass(eq=False)
class HomContrast:
    """Two-photon outcome counts for interfering vs split configurations
    and the coincidence suppression ratio between them."""

    noon_20: int
    noon_02: int
    noon_11: int
    split_20: int
    split_02: int
    split_11: int
    ratio: float

    def to_dict(self) -> dict:
        return {
            "noon": {"(2,0)": self.noon_20, "(0,2)": self.noon_02, "(1,1)": self.noon_11},
            "split": {"(2,0)": self.split_20, "(0,2)": self.split_02, "(1,1)": self.split_11},
            "suppression_ratio": self.ratio,
        }


def hom_contrast(jpnd_noon: JointDistribution, jpnd_split: JointDistribution) -> HomContrast:
    """Suppression ratio R = counts(1,1) in the interfering configuration
    over counts(1,1) in the split configuration, with the raw two-photon
    outcome counts of both."""
    size = max(jpnd_noon.matrix.shape[0], jpnd_split.matrix.shape[0], 3)
    noon = jpnd_noon.padded(size - 1).matrix
    split = jpnd_split.padded(size - 1).matrix
    split_11 = int(split[1, 1])
    if split_11 == 0:
        raise UndefinedRatioError("split configuration has no (1,1) coincidences; ratio undefined")
    return HomContrast(
        noon_20=int(noon[2, 0]),
        noon_02=int(noon[0, 2]),
        noon_11=int(noon[1, 1]),
        split_20=int(split[2, 0]),
        split_02=int(split[0, 2]),
        split_11=split_11,
        ratio=int(noon[1, 1]) / split_11,
    )
