"""Synthetic interaction logs with planted affect regimes.

Each student's history is cut into blocks of ``seg_len`` answers. Every block
draws one behavioural regime; the regime shapes response time, attempts and
the gap before the next problem. Correctness is 0.9 when the student is in
the concentration regime and has met the problem's KC before, 0.2 otherwise.
The file layout mimics the ASSIST2012 export, detector confidence columns
included, so the normal ingest path reads it unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .affect_cluster import AFFECT_NAMES
from .ingest import AFFECT_COLUMNS, COLUMN_PRESETS, InteractionRecord

# regime -> (median response s, mean extra attempts, median gap s)
REGIMES = {
    "concentration": (6.0, 0.0, 4.0),
    "frustration": (25.0, 3.0, 15.0),
    "boredom": (20.0, 0.3, 150.0),
    "confusion": (90.0, 1.0, 30.0),
}
EPOCH_MS = int(datetime(2012, 9, 1, tzinfo=timezone.utc).timestamp() * 1000)


@dataclass
class SyntheticLog:
    records: list[InteractionRecord]
    regimes: dict[str, str]  # record id -> planted regime
    p_correct: dict[str, float]  # record id -> generating probability


def generate(n_students: int = 200, min_len: int = 60, max_len: int = 100, n_kcs: int = 10,
             problems_per_kc: int = 5, seg_len: int = 20, p_concentration: float = 0.6,
             p_hit: float = 0.9, p_miss: float = 0.2, seed: int = 0) -> SyntheticLog:
    rng = np.random.default_rng(seed)
    others = [a for a in AFFECT_NAMES if a != "concentration"]
    records, regimes, probs = [], {}, {}
    rid = 0
    for s in range(n_students):
        sid = f"s{s:04d}"
        n = int(rng.integers(min_len, max_len + 1))
        t = EPOCH_MS + int(rng.integers(0, 30 * 86_400_000))
        seen: set[int] = set()
        regime = "concentration"
        for i in range(n):
            if i % seg_len == 0:
                regime = "concentration" if rng.random() < p_concentration else others[rng.integers(3)]
            kc = int(rng.integers(n_kcs))
            prob = int(rng.integers(problems_per_kc)) + kc * problems_per_kc
            rt_med, extra, gap_med = REGIMES[regime]
            rt_ms = rt_med * 1000 * float(np.exp(0.3 * rng.standard_normal()))
            attempts = 1 + int(rng.poisson(extra))
            p = p_hit if (regime == "concentration" and kc in seen) else p_miss
            correct = int(rng.random() < p)
            rid += 1
            key = str(rid)
            records.append(InteractionRecord(
                student_id=sid, problem_id=f"p{prob:03d}", kc_id=f"k{kc:02d}", correct=correct,
                start_time=t, end_time=t + int(round(rt_ms)), response_time_ms=round(rt_ms),
                attempt_count=attempts, record_id=key,
            ))
            regimes[key] = regime
            probs[key] = p
            seen.add(kc)
            t += int(round(rt_ms + gap_med * 1000 * float(np.exp(0.3 * rng.standard_normal()))))
    return SyntheticLog(records, regimes, probs)


def _stamp(ms: int) -> str:
    dt = datetime.fromtimestamp(ms / 1000, tz=timezone.utc)
    return dt.strftime("%Y-%m-%d %H:%M:%S.") + f"{ms % 1000:03d}"


def detector_confidences(log: SyntheticLog, accuracy: float = 0.8, seed: int = 1) -> dict[str, dict[str, float]]:
    """Noisy stand-in for an external affect detector: right regime with probability ``accuracy``."""
    rng = np.random.default_rng(seed)
    out = {}
    for r in log.records:
        truth = log.regimes[r.record_id]
        label = truth if rng.random() < accuracy else AFFECT_NAMES[rng.integers(4)]
        conf = {a: float(rng.uniform(0.0, 0.4)) for a in AFFECT_NAMES}
        conf[label] = float(rng.uniform(0.5, 1.0))
        out[r.record_id] = conf
    return out


def write_assist2012_csv(log: SyntheticLog, path, confidences=None) -> None:
    cols = COLUMN_PRESETS["assist2012"]
    aff_cols = AFFECT_COLUMNS["assist2012"]
    header = [cols[k] for k in ("record_id", "student_id", "problem_id", "kc_id", "correct",
                                "start_time", "end_time", "response_time", "attempt_count")]
    if confidences is not None:
        header += [aff_cols[a] for a in AFFECT_NAMES]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in log.records:
            row = [r.record_id, r.student_id, r.problem_id, r.kc_id, r.correct, _stamp(r.start_time),
                   _stamp(r.end_time), int(r.response_time_ms), r.attempt_count]
            if confidences is not None:
                row += [f"{confidences[r.record_id][a]:.6f}" for a in AFFECT_NAMES]
            w.writerow(row)
