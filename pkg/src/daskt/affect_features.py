"""Affective factors mined from plain interaction logs.

A factor vector for a slice of one student's records is laid out as::

    [ dAcc_1..dAcc_K | dRT_1..dRT_K | dAtt_1..dAtt_K | dInterval | dParticipation ]

i.e. confidence (accuracy and response-time deltas per KC), effort (attempt
deltas per KC plus the inter-question interval delta) and interest (the
participation-rate delta). Every delta is taken against training-population
means. Times are in milliseconds, participation in answers per millisecond.
"""

from __future__ import annotations

import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np


class ZeroDurationWarning(UserWarning):
    """A slice spans no wall-clock time, so its participation rate is set to 0."""


@dataclass
class PopulationStats:
    kcs: list
    acc_mean: np.ndarray
    rt_mean: np.ndarray
    att_mean: np.ndarray
    kc_counts: np.ndarray
    pr_mean: float
    it_mean: float
    n_units: int
    seg_len: int | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        self.kc_index = {k: i for i, k in enumerate(self.kcs)}

    @property
    def n_kc(self) -> int:
        return len(self.kcs)

    @property
    def dim(self) -> int:
        return 3 * self.n_kc + 2

    @property
    def unseen(self) -> np.ndarray:
        return self.kc_counts == 0

    def to_dict(self) -> dict:
        return {
            "kcs": list(self.kcs),
            "acc_mean": self.acc_mean.tolist(),
            "rt_mean": self.rt_mean.tolist(),
            "att_mean": self.att_mean.tolist(),
            "kc_counts": self.kc_counts.tolist(),
            "pr_mean": self.pr_mean,
            "it_mean": self.it_mean,
            "n_units": self.n_units,
            "seg_len": self.seg_len,
            "scale": None if self.scale is None else self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PopulationStats":
        arr = lambda k: np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(
            kcs=list(d["kcs"]),
            acc_mean=arr("acc_mean"),
            rt_mean=arr("rt_mean"),
            att_mean=arr("att_mean"),
            kc_counts=np.asarray(d["kc_counts"], dtype=np.int64),
            pr_mean=float(d["pr_mean"]),
            it_mean=float(d["it_mean"]),
            n_units=int(d["n_units"]),
            seg_len=d.get("seg_len"),
            scale=None if d.get("scale") is None else arr("scale"),
        )


@dataclass(frozen=True)
class AffectFactorVector:
    values: np.ndarray
    n_kc: int
    normalized: bool = False

    @property
    def confidence(self) -> np.ndarray:
        return self.values[: 2 * self.n_kc]

    @property
    def effort(self) -> np.ndarray:
        return self.values[2 * self.n_kc : 3 * self.n_kc + 1]

    @property
    def interest(self) -> float:
        return float(self.values[3 * self.n_kc + 1])


def dimension_names(kcs: Sequence) -> list[str]:
    return (
        [f"acc:{k}" for k in kcs]
        + [f"rt:{k}" for k in kcs]
        + [f"att:{k}" for k in kcs]
        + ["interval", "participation"]
    )


class _Slice:
    """Column view of a list of records, with KCs mapped to dimension indices."""

    def __init__(self, records, kc_index: dict):
        self.n = len(records)
        self.kc = np.fromiter((kc_index.get(r.kc_id, -1) for r in records), np.int64, self.n)
        self.correct = np.fromiter((r.correct for r in records), float, self.n)
        self.rt = np.fromiter((r.response_time_ms for r in records), float, self.n)
        self.att = np.fromiter((r.attempt_count for r in records), float, self.n)
        self.start = np.fromiter((r.start_time for r in records), float, self.n)
        self.stop = np.fromiter(
            (r.start_time if r.end_time is None else r.end_time for r in records), float, self.n
        )
        keep = self.kc >= 0
        self.kc_known = self.kc[keep]
        self._keep = keep

    def per_kc(self, k: int):
        """(count, accuracy, mean response time, attempt sum) per KC index."""
        kc, keep = self.kc_known, self._keep
        cnt = np.bincount(kc, minlength=k).astype(float)
        safe = np.maximum(cnt, 1.0)
        acc = np.bincount(kc, self.correct[keep], minlength=k) / safe
        rt = np.bincount(kc, self.rt[keep], minlength=k) / safe
        att = np.bincount(kc, self.att[keep], minlength=k)
        return cnt, acc, rt, att

    def interval_sum(self) -> float:
        # sum over consecutive start-time gaps telescopes to last - first
        return float(self.start.max() - self.start.min()) if self.n else 0.0

    def duration(self) -> float:
        return float(self.stop.max() - self.start.min()) if self.n else 0.0


def iter_units(sequences, seg_len: int | None = None) -> Iterable[list]:
    """Whole sequences, or consecutive ``seg_len`` chunks of them."""
    for seq in sequences:
        recs = seq.records if hasattr(seq, "records") else seq
        if not recs:
            continue
        if seg_len is None:
            yield list(recs)
        else:
            for lo in range(0, len(recs), seg_len):
                yield list(recs[lo : lo + seg_len])


def population_stats(train_sequences, kcs: Sequence | None = None, seg_len: int | None = None,
                     standardize: bool = True) -> PopulationStats:
    """Training-population means the factor deltas are centred on.

    A unit is a whole training sequence, or a ``seg_len`` chunk of one when
    ``seg_len`` is given. Each mean averages over the units that observe the
    quantity; KCs never seen get mean 0 and ``kc_counts == 0``. With
    ``standardize`` the per-dimension std of the training raw deltas is stored
    as ``scale`` and applied before normalisation.
    """
    units = list(iter_units(train_sequences, seg_len))
    if not units:
        raise ValueError("population_stats needs at least one training record")
    if kcs is None:
        kcs = sorted({r.kc_id for u in units for r in u}, key=lambda x: (str(type(x)), x))
    kc_index = {k: i for i, k in enumerate(kcs)}
    K = len(kcs)
    acc_sum, rt_sum, att_sum = np.zeros(K), np.zeros(K), np.zeros(K)
    kc_units = np.zeros(K, dtype=np.int64)
    prs, its = [], []
    slices = []
    for u in units:
        s = _Slice(u, kc_index)
        slices.append(s)
        cnt, acc, rt, att = s.per_kc(K)
        seen = cnt > 0
        kc_units += seen
        acc_sum += np.where(seen, acc, 0.0)
        rt_sum += np.where(seen, rt, 0.0)
        att_sum += np.where(seen, att, 0.0)
        if s.duration() > 0:
            prs.append(s.n / s.duration())
        if s.n >= 2:
            its.append(s.interval_sum())
    denom = np.maximum(kc_units, 1)
    stats = PopulationStats(
        kcs=list(kcs),
        acc_mean=acc_sum / denom,
        rt_mean=rt_sum / denom,
        att_mean=att_sum / denom,
        kc_counts=kc_units,
        pr_mean=float(np.mean(prs)) if prs else 0.0,
        it_mean=float(np.mean(its)) if its else 0.0,
        n_units=len(units),
        seg_len=seg_len,
    )
    if standardize:
        raw = np.stack([_raw_from_slice(s, stats, warn=False) for s in slices])
        sd = raw.std(axis=0)
        stats.scale = np.where(sd > 0, sd, 1.0)
    return stats


def confidence(seq_slice, stats: PopulationStats):
    """Per-KC accuracy and mean-response-time deltas; absent KCs give 0."""
    s = _Slice(seq_slice, stats.kc_index)
    cnt, acc, rt, _ = s.per_kc(stats.n_kc)
    seen = cnt > 0
    return np.where(seen, acc - stats.acc_mean, 0.0), np.where(seen, rt - stats.rt_mean, 0.0)


def interest(seq_slice, stats: PopulationStats, warn: bool = True) -> float:
    s = _Slice(seq_slice, stats.kc_index)
    return _interest(s, stats, warn)


def _interest(s: _Slice, stats: PopulationStats, warn: bool) -> float:
    span = s.duration()
    if span <= 0:
        if warn:
            warnings.warn("slice has zero duration; participation rate set to 0", ZeroDurationWarning,
                          stacklevel=3)
        return 0.0
    return s.n / span - stats.pr_mean


def effort(seq_slice, stats: PopulationStats):
    """Per-KC attempt-sum deltas and the inter-question interval delta."""
    s = _Slice(seq_slice, stats.kc_index)
    cnt, _, _, att = s.per_kc(stats.n_kc)
    return np.where(cnt > 0, att - stats.att_mean, 0.0), s.interval_sum() - stats.it_mean


def _raw_from_slice(s: _Slice, stats: PopulationStats, warn: bool = True) -> np.ndarray:
    cnt, acc, rt, att = s.per_kc(stats.n_kc)
    seen = cnt > 0
    return np.concatenate([
        np.where(seen, acc - stats.acc_mean, 0.0),
        np.where(seen, rt - stats.rt_mean, 0.0),
        np.where(seen, att - stats.att_mean, 0.0),
        [s.interval_sum() - stats.it_mean, _interest(s, stats, warn)],
    ])


def raw_factors(seq_slice, stats: PopulationStats) -> np.ndarray:
    return _raw_from_slice(_Slice(seq_slice, stats.kc_index), stats)


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def maf(seq_slice, stats: PopulationStats, standardize: bool = True, warn: bool = True):
    """Concatenate confidence, effort and interest, then L2-normalise."""
    raw = _raw_from_slice(_Slice(seq_slice, stats.kc_index), stats, warn)
    if standardize and stats.scale is not None:
        raw = raw / stats.scale
    return AffectFactorVector(l2_normalize(raw), stats.n_kc, normalized=True)


def factor_matrix(slices, stats: PopulationStats, standardize: bool = True) -> np.ndarray:
    rows = [maf(s, stats, standardize, warn=False).values for s in slices]
    return np.stack(rows) if rows else np.zeros((0, stats.dim))
