"""Log parsing, per-student sequence building, id encoding and CV folds."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD_ID = 0
DEFAULT_RT_CAP_MS = 30 * 60 * 1000

# Source column names per known export. ``time_unit`` covers start/end stamps
# given as numbers; ``rt_unit`` scales the explicit response-time column.
COLUMN_PRESETS: dict[str, dict] = {
    "assist2012": {
        "record_id": "problem_log_id",
        "student_id": "user_id",
        "problem_id": "problem_id",
        "kc_id": "skill_id",
        "correct": "correct",
        "start_time": "start_time",
        "end_time": "end_time",
        "response_time": "ms_first_response",
        "attempt_count": "attempt_count",
        "time_unit": "datetime",
        "rt_unit": "ms",
    },
    "assistchall": {
        "record_id": "action_num",
        "student_id": "studentId",
        "problem_id": "problemId",
        "kc_id": "skill",
        "correct": "correct",
        "start_time": "startTime",
        "end_time": "endTime",
        "response_time": "timeTaken",
        "attempt_count": "attemptCount",
        "time_unit": "s",
        "rt_unit": "s",
    },
}

# external affect-detector confidence columns, keyed by our affect names
AFFECT_COLUMNS: dict[str, dict[str, str]] = {
    "assist2012": {
        "frustration": "Average_confidence(FRUSTRATED)",
        "concentration": "Average_confidence(CONCENTRATING)",
        "boredom": "Average_confidence(BORED)",
        "confusion": "Average_confidence(CONFUSED)",
    },
    "assistchall": {
        "frustration": "confidence(FRUSTRATED)",
        "concentration": "confidence(CONCENTRATING)",
        "boredom": "confidence(BORED)",
        "confusion": "confidence(CONFUSED)",
    },
}

_UNIT_MS = {"ms": 1.0, "s": 1000.0}


class IngestError(Exception):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    student_id: str
    problem_id: str
    kc_id: str
    correct: int
    start_time: int
    end_time: int | None = None
    response_time_ms: float = 0.0
    attempt_count: int = 0
    record_id: str | None = None

    def __post_init__(self):
        if self.correct not in (0, 1):
            raise ValueError(f"correct must be 0 or 1, got {self.correct!r}")
        if self.response_time_ms < 0:
            raise ValueError("response_time_ms must be non-negative")
        if self.end_time is not None and self.end_time < self.start_time:
            raise ValueError("end_time precedes start_time")
        if self.attempt_count < 0:
            raise ValueError("attempt_count must be non-negative")


@dataclass
class StudentSequence:
    student_id: str
    records: list[InteractionRecord]
    is_virtual: bool = False
    pad_len: int = 0
    part: int = 0

    @property
    def key(self) -> str:
        return f"{self.student_id}#{self.part}"

    def __len__(self) -> int:
        return len(self.records) + self.pad_len


@dataclass(frozen=True)
class DatasetSplit:
    fold_index: int
    train_students: frozenset
    val_students: frozenset
    test_students: frozenset


@dataclass
class Vocab:
    students: dict[str, int] = field(default_factory=dict)
    problems: dict[str, int] = field(default_factory=dict)
    kcs: dict[str, int] = field(default_factory=dict)

    @property
    def n_problems(self) -> int:
        return len(self.problems)

    @property
    def n_kcs(self) -> int:
        return len(self.kcs)

    def decode(self, table: str, idx: int) -> str:
        inverse = {v: k for k, v in getattr(self, table).items()}
        return inverse[idx]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(**json.loads(Path(path).read_text()))


# --- parsing -----------------------------------------------------------------


def _parse_time(value: str, unit: str) -> int:
    value = value.strip()
    if unit == "datetime":
        try:
            return int(round(float(value)))
        except ValueError:
            pass
        for fmt in ("%Y-%m-%d %H:%M:%S.%f", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S.%f",
                    "%Y-%m-%dT%H:%M:%S", "%m/%d/%Y %H:%M:%S", "%m/%d/%Y %H:%M"):
            try:
                dt = datetime.strptime(value, fmt).replace(tzinfo=timezone.utc)
            except ValueError:
                continue
            return int(round(dt.timestamp() * 1000))
        raise ValueError(f"unparseable timestamp {value!r}")
    return int(round(float(value) * _UNIT_MS[unit]))


def _first_kc(value: str, seps=("~~", ",", ";")) -> str:
    value = value.strip()
    for sep in seps:
        if sep in value:
            return value.split(sep)[0].strip()
    return value


def resolve_column_map(dataset: str, overrides: dict | None = None) -> dict:
    if dataset == "custom":
        column_map = {"time_unit": "ms", "rt_unit": "ms"}
    elif dataset in COLUMN_PRESETS:
        column_map = dict(COLUMN_PRESETS[dataset])
    else:
        raise IngestError(f"unknown dataset preset {dataset!r}")
    column_map.update(overrides or {})
    return column_map


def parse_log(path, column_map: dict, rt_cap_ms: float = DEFAULT_RT_CAP_MS, delimiter=None):
    """Read a delimited interaction log.

    Returns ``(records, dropped)`` where ``dropped`` counts skipped rows by
    reason. Records keep file order; sorting happens in :func:`sort_records`.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"cannot read log file {path}")
    time_unit = column_map.get("time_unit", "ms")
    rt_scale = _UNIT_MS[column_map.get("rt_unit", "ms")]
    required = ["student_id", "problem_id", "kc_id", "correct", "start_time"]
    records: list[InteractionRecord] = []
    dropped: Counter = Counter()
    with path.open(newline="", encoding="utf-8", errors="replace") as fh:
        if delimiter is None:
            sample = fh.readline()
            delimiter = "\t" if sample.count("\t") > sample.count(",") else ","
            fh.seek(0)
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        for key in required + [k for k in ("end_time", "response_time", "attempt_count", "record_id")
                               if k in column_map]:
            if key not in column_map:
                raise IngestError(f"column map lacks required field {key!r}")
            if column_map[key] not in header:
                raise IngestError(f"mapped column {column_map[key]!r} ({key}) missing from {path.name}")

        def cell(row, key):
            col = column_map.get(key)
            return (row.get(col) or "").strip() if col else ""

        for row in reader:
            sid, pid, kc = cell(row, "student_id"), cell(row, "problem_id"), cell(row, "kc_id")
            if not sid:
                dropped["empty_student"] += 1
                continue
            if not pid:
                dropped["empty_problem"] += 1
                continue
            kc = _first_kc(kc) if kc else ""
            if not kc or kc.lower() == "nan":
                dropped["empty_kc"] += 1
                continue
            try:
                correct = 1 if float(cell(row, "correct")) >= 1.0 else 0
            except ValueError:
                dropped["bad_correct"] += 1
                continue
            try:
                start = _parse_time(cell(row, "start_time"), time_unit)
                end_raw = cell(row, "end_time")
                end = _parse_time(end_raw, time_unit) if end_raw else None
            except ValueError:
                dropped["bad_timestamp"] += 1
                continue
            if end is not None and end < start:
                end = None
            rt_raw = cell(row, "response_time")
            if rt_raw:
                try:
                    rt = float(rt_raw) * rt_scale
                except ValueError:
                    rt = 0.0
            else:
                rt = float(end - start) if end is not None else 0.0
            rt = min(max(rt, 0.0), rt_cap_ms) if math.isfinite(rt) else 0.0
            try:
                attempts = max(int(float(cell(row, "attempt_count") or 0)), 0)
            except ValueError:
                attempts = 0
            records.append(
                InteractionRecord(
                    student_id=sid,
                    problem_id=pid,
                    kc_id=kc,
                    correct=correct,
                    start_time=start,
                    end_time=end,
                    response_time_ms=rt,
                    attempt_count=attempts,
                    record_id=cell(row, "record_id") or None,
                )
            )
    if dropped:
        log.info("parse_log %s: kept %d rows, dropped %s", path.name, len(records), dict(dropped))
    return records, dropped


def sort_records(records: list[InteractionRecord]) -> list[InteractionRecord]:
    """Stable sort on start_time only; equal stamps keep file order."""
    return sorted(records, key=lambda r: r.start_time)


# --- sequences ---------------------------------------------------------------


def build_sequences(records, target_len: int) -> list[StudentSequence]:
    if target_len < 1:
        raise ValueError("target_len must be positive")
    by_student: dict[str, list[InteractionRecord]] = defaultdict(list)
    for r in sort_records(records):
        by_student[r.student_id].append(r)
    out: list[StudentSequence] = []
    for sid in sorted(by_student):
        recs = by_student[sid]
        n_parts = math.ceil(len(recs) / target_len)
        for part in range(n_parts):
            chunk = recs[part * target_len : (part + 1) * target_len]
            out.append(
                StudentSequence(
                    student_id=sid,
                    records=chunk,
                    is_virtual=n_parts > 1,
                    pad_len=target_len - len(chunk),
                    part=part,
                )
            )
    return out


# --- folds -------------------------------------------------------------------


def make_folds(students, k: int = 5, seed: int = 0, val_frac: float = 0.2) -> list[DatasetSplit]:
    """K-fold split over original student ids.

    The result depends only on the set of ids and the seed.
    """
    ids = sorted({str(s) for s in students})
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(ids) < k:
        raise ValueError(f"need at least {k} students for {k}-fold CV, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    chunks = np.array_split(np.arange(len(ids)), k)
    folds = []
    for i, test_idx in enumerate(chunks):
        in_test = set(test_idx.tolist())
        test = [shuffled[j] for j in test_idx]
        rest = [s for j, s in enumerate(shuffled) if j not in in_test]
        n_val = int(round(val_frac * len(rest)))
        folds.append(
            DatasetSplit(
                fold_index=i,
                train_students=frozenset(rest[n_val:]),
                val_students=frozenset(rest[:n_val]),
                test_students=frozenset(test),
            )
        )
    return folds


def save_folds(folds: list[DatasetSplit], path, extra: dict | None = None) -> None:
    payload = {
        "folds": [
            {
                "fold_index": f.fold_index,
                "train": sorted(f.train_students),
                "val": sorted(f.val_students),
                "test": sorted(f.test_students),
            }
            for f in folds
        ],
        **(extra or {}),
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_folds(path) -> list[DatasetSplit]:
    payload = json.loads(Path(path).read_text())
    return [
        DatasetSplit(f["fold_index"], frozenset(f["train"]), frozenset(f["val"]), frozenset(f["test"]))
        for f in payload["folds"]
    ]


# --- encoding ----------------------------------------------------------------


def build_vocab(records) -> Vocab:
    return Vocab(
        students={s: i + 1 for i, s in enumerate(sorted({r.student_id for r in records}))},
        problems={s: i + 1 for i, s in enumerate(sorted({r.problem_id for r in records}))},
        kcs={s: i + 1 for i, s in enumerate(sorted({r.kc_id for r in records}))},
    )


def encode_ids(records, vocab: Vocab | None = None):
    """Map opaque ids to dense 1-based integers; 0 stays reserved for padding."""
    vocab = vocab or build_vocab(records)
    encoded = [
        replace(
            r,
            student_id=vocab.students[r.student_id],
            problem_id=vocab.problems[r.problem_id],
            kc_id=vocab.kcs[r.kc_id],
        )
        for r in records
    ]
    return vocab, encoded


def decode_ids(records, vocab: Vocab):
    inv = {t: {v: k for k, v in getattr(vocab, t).items()} for t in ("students", "problems", "kcs")}
    return [
        replace(
            r,
            student_id=inv["students"][r.student_id],
            problem_id=inv["problems"][r.problem_id],
            kc_id=inv["kcs"][r.kc_id],
        )
        for r in records
    ]


# --- canonical record file ---------------------------------------------------


def write_records(records, path, header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({"__header__": header}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_records(path) -> tuple[list[InteractionRecord], dict]:
    records, header = [], {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            if "__header__" in row:
                header = row["__header__"]
                continue
            records.append(InteractionRecord(**row))
    return records, header
