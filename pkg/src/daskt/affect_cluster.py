"""Interval affect computation: K-means over factor vectors, segment assignment."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .affect_features import AffectFactorVector, PopulationStats, maf

AFFECT_NAMES = ("frustration", "concentration", "boredom", "confusion")
NULL_AFFECT = -1
# index used under a positive affect lag before any segment has been assessed
UNASSESSED_AFFECT = 4
MODEL_VERSION = "1"


@dataclass
class AffectModel:
    centers: np.ndarray
    name_map: dict[int, str] = field(default_factory=dict)
    seg_len: int | None = None
    seed: int = 0
    version: str = MODEL_VERSION
    labels: np.ndarray | None = None
    sse_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def sse(self) -> float:
        return self.sse_history[-1] if self.sse_history else float("nan")

    def name(self, idx: int) -> str:
        if idx == NULL_AFFECT:
            return "pad"
        if idx == UNASSESSED_AFFECT and idx >= self.k:
            return "unassessed"
        return self.name_map.get(idx, f"affect{idx}")

    def save(self, path, config_hash: str = "") -> None:
        names = ",".join(f"{i}:{n}" for i, n in sorted(self.name_map.items()))
        header = [
            f"version={self.version}",
            f"k={self.k}",
            f"dims={self.centers.shape[1]}",
            f"seed={self.seed}",
            f"seg_len={self.seg_len}",
            f"name_map={names}",
            f"config_hash={config_hash}",
        ]
        with open(path, "w") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            np.savetxt(fh, self.centers, fmt="%.17g", delimiter="\t")

    @classmethod
    def load(cls, path) -> "AffectModel":
        meta = {}
        with open(path) as fh:
            for line in fh:
                if not line.startswith("#"):
                    break
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
        centers = np.loadtxt(path, comments="#", delimiter="\t", ndmin=2)
        name_map = {}
        if meta.get("name_map"):
            for item in meta["name_map"].split(","):
                i, _, n = item.partition(":")
                name_map[int(i)] = n
        seg = meta.get("seg_len", "None")
        return cls(
            centers=centers,
            name_map=name_map,
            seg_len=None if seg == "None" else int(seg),
            seed=int(meta.get("seed", 0)),
            version=meta.get("version", MODEL_VERSION),
        )


@dataclass
class SegmentAffect:
    student_id: str
    segment_index: int
    affect_index: int
    factor_vector: AffectFactorVector | None = None
    distance: float = 0.0


def sq_distances(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def assign(X: np.ndarray, centers: np.ndarray):
    """Nearest center by squared Euclidean distance; ties go to the lower index."""
    d2 = sq_distances(np.atleast_2d(X), centers)
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(len(labels)), labels]


def kmeans_fit(X, k: int = 4, seed: int = 0, max_iter: int = 300, tol: float = 1e-10,
               hartigan: bool = True) -> AffectModel:
    """Lloyd's algorithm started from ``k`` distinct random training points.

    An emptied cluster is re-seeded with the point farthest from its current
    center. With ``hartigan`` the converged partition is then polished by
    single-point transfers, which escapes many of Lloyd's poor fixed points.
    """
    X = np.asarray(X, dtype=float)
    distinct = np.unique(X, axis=0)
    if len(distinct) < k:
        raise ValueError(f"need at least {k} distinct vectors, got {len(distinct)}")
    rng = np.random.default_rng(seed)
    centers = distinct[rng.choice(len(distinct), size=k, replace=False)].copy()
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels, d2 = assign(X, centers)
        history.append(float(d2.sum()))
        new = centers.copy()
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = X[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(d2))
            new[j] = X[far]
            labels[far] = j
            d2[far] = 0.0
        shift = float(np.max(np.linalg.norm(new - centers, axis=1)))
        centers = new
        if shift < tol:
            break
    labels, d2 = assign(X, centers)
    history.append(float(d2.sum()))
    if hartigan and np.all(np.bincount(labels, minlength=k) > 0):
        labels, centers = _hartigan(X, labels, centers)
        labels, d2 = assign(X, centers)
        final = float(d2.sum())
        if final < history[-1]:
            history.append(final)
    return AffectModel(centers=centers, seed=seed, labels=labels, sse_history=history, n_iter=n_iter)


def _hartigan(X: np.ndarray, labels: np.ndarray, centers: np.ndarray, max_pass: int = 100):
    """Single-point transfers that strictly lower the SSE.

    Moving x from cluster a to b changes the SSE by
    n_b/(n_b+1)|x-c_b|^2 - n_a/(n_a-1)|x-c_a|^2. A partition stable under
    these moves is also a Lloyd fixed point.
    """
    labels = labels.copy()
    k = centers.shape[0]
    counts = np.bincount(labels, minlength=k).astype(float)
    sums = np.stack([X[labels == j].sum(axis=0) for j in range(k)])
    for _ in range(max_pass):
        moved = False
        for i in range(len(X)):
            a = labels[i]
            if counts[a] <= 1:
                continue
            c = sums / np.maximum(counts, 1.0)[:, None]
            d2 = ((X[i] - c) ** 2).sum(axis=1)
            gain = counts / (counts + 1) * d2
            gain[a] = counts[a] / (counts[a] - 1) * d2[a]
            b = int(np.argmin(gain))
            if b != a and gain[b] < gain[a] * (1 - 1e-12):
                labels[i] = b
                counts[a] -= 1
                counts[b] += 1
                sums[a] -= X[i]
                sums[b] += X[i]
                moved = True
        if not moved:
            break
    centers = np.stack([X[labels == j].mean(axis=0) for j in range(k)])
    return labels, centers


def center_scores(centers: np.ndarray, n_kc: int) -> dict[str, np.ndarray]:
    """Block summaries used to name clusters.

    confidence = sum of accuracy deltas minus sum of response-time deltas,
    interest = participation delta, effort = sum of attempt deltas.
    """
    K = n_kc
    conf = centers[:, :K].sum(axis=1) - centers[:, K : 2 * K].sum(axis=1)
    inter = centers[:, 3 * K + 1]
    eff = centers[:, 2 * K : 3 * K].sum(axis=1)
    return {"confidence": conf, "interest": inter, "effort": eff, "composite": conf + inter}


def name_clusters(model: AffectModel, stats: PopulationStats | int) -> AffectModel:
    """Attach affect names to the four clusters.

    Highest composite (confidence + interest) is concentration, lowest is
    boredom. Of the other two, the higher-effort one is frustration when its
    confidence is negative, otherwise the lower-confidence one is; the last is
    confusion. Ties go to the lower cluster index.
    """
    n_kc = stats if isinstance(stats, int) else stats.n_kc
    if model.k != 4:
        model.name_map = {i: f"affect{i}" for i in range(model.k)}
        return model
    s = center_scores(model.centers, n_kc)
    comp, eff, conf = s["composite"], s["effort"], s["confidence"]
    idx = range(4)
    conc = min(idx, key=lambda i: (-comp[i], i))
    bored = min((i for i in idx if i != conc), key=lambda i: (comp[i], i))
    a, b = sorted(i for i in idx if i not in (conc, bored))
    hi = min((a, b), key=lambda i: (-eff[i], i))
    if conf[hi] < 0:
        frus = hi
    else:
        frus = min((a, b), key=lambda i: (conf[i], i))
    conf_idx = b if frus == a else a
    model.name_map = {conc: "concentration", bored: "boredom", frus: "frustration", conf_idx: "confusion"}
    return model


def n_segments(n_records: int, seg_len: int) -> int:
    return math.ceil(n_records / seg_len)


def segment_and_assign(sequences, model: AffectModel, stats: PopulationStats,
                       seg_len: int | None = None, standardize: bool = True) -> list[SegmentAffect]:
    """Cut each sequence into ``seg_len`` chunks and label each with its nearest center.

    Trailing segments made only of padding get :data:`NULL_AFFECT`.
    """
    seg_len = seg_len or model.seg_len
    if not seg_len:
        raise ValueError("segment length is not set")
    out: list[SegmentAffect] = []
    for seq in sequences:
        recs = seq.records
        key = seq.key if hasattr(seq, "key") else str(seq.student_id)
        n_real = n_segments(len(recs), seg_len)
        n_total = n_segments(len(recs) + getattr(seq, "pad_len", 0), seg_len)
        for j in range(n_real):
            v = maf(recs[j * seg_len : (j + 1) * seg_len], stats, standardize, warn=False)
            lab, d2 = assign(v.values[None, :], model.centers)
            out.append(SegmentAffect(key, j, int(lab[0]), v, float(d2[0])))
        for j in range(n_real, n_total):
            out.append(SegmentAffect(key, j, NULL_AFFECT))
    return out


def step_affects(n_records: int, target_len: int, segment_labels, seg_len: int, lag: int = 0) -> np.ndarray:
    """Per-timestep affect index for one padded sequence.

    Step ``t`` takes the label of segment ``t // seg_len - lag``; steps before
    the first assessed segment get :data:`UNASSESSED_AFFECT` and pads
    :data:`NULL_AFFECT`.
    """
    out = np.full(target_len, NULL_AFFECT, dtype=np.int64)
    labels = list(segment_labels)
    for t in range(n_records):
        j = t // seg_len - lag
        out[t] = labels[j] if j >= 0 else UNASSESSED_AFFECT
    return out


def write_assignments(segments: list[SegmentAffect], path, config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["student_id", "segment_index", "affect_index"])
        for s in segments:
            w.writerow([s.student_id, s.segment_index, s.affect_index])


def read_assignments(path) -> dict[str, list[int]]:
    """Sequence key -> affect index per segment, in segment order."""
    out: dict[str, list[int]] = {}
    with open(path, newline="") as fh:
        rows = csv.reader((line for line in fh if not line.startswith("#")), delimiter="\t")
        next(rows)
        for sid, seg, aff in rows:
            lst = out.setdefault(sid, [])
            if int(seg) != len(lst):
                raise ValueError(f"assignments for {sid} out of order at segment {seg}")
            lst.append(int(aff))
    return out


# --- agreement with an external affect detector --------------------------------


def record_affects(sequences, assignments: dict[str, list[int]], model: AffectModel, seg_len: int) -> dict:
    """record_id -> our affect name, for records that carry an id."""
    out = {}
    for seq in sequences:
        labels = assignments[seq.key]
        for t, r in enumerate(seq.records):
            if r.record_id is not None:
                out[r.record_id] = model.name(labels[t // seg_len])
    return out


def read_external_affect(path, columns: dict[str, str], id_column: str) -> dict[str, str]:
    """record_id -> affect with the highest detector confidence (first on ties)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"external affect file {path} not found")
    out = {}
    with path.open(newline="", encoding="utf-8", errors="replace") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in [id_column, *columns.values()] if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"external affect file lacks columns {missing}")
        for row in reader:
            try:
                conf = [float(row[columns[a]]) for a in AFFECT_NAMES]
            except (TypeError, ValueError):
                continue
            out[row[id_column].strip()] = AFFECT_NAMES[int(np.argmax(conf))]
    return out


def affect_consistency(ours: dict[str, str], external: dict[str, str]) -> list[dict]:
    """Per-affect agreement: share of records the detector labels ``a`` that we also label ``a``."""
    common = sorted(set(ours) & set(external))
    if not common:
        raise ValueError("no record ids shared between assignments and external affect file")
    rows = []
    total_agree = 0
    for a in AFFECT_NAMES:
        ids = [r for r in common if external[r] == a]
        agree = sum(ours[r] == a for r in ids)
        total_agree += agree
        rows.append({
            "affect": a,
            "n_external": len(ids),
            "n_ours": sum(ours[r] == a for r in common),
            "n_agree": agree,
            "rate": 100.0 * agree / len(ids) if ids else float("nan"),
        })
    rows.append({
        "affect": "total",
        "n_external": len(common),
        "n_ours": len(common),
        "n_agree": total_agree,
        "rate": 100.0 * total_agree / len(common),
    })
    return rows


def random_label_control(ours: dict[str, str], n_perm: int = 10, seed: int = 0) -> list[float]:
    """Overall agreement (%) against uniformly random 4-way external labels."""
    rng = np.random.default_rng(seed)
    ids = sorted(ours)
    rates = []
    for _ in range(n_perm):
        fake = dict(zip(ids, (AFFECT_NAMES[i] for i in rng.integers(0, 4, len(ids)))))
        rates.append(affect_consistency(ours, fake)[-1]["rate"])
    return rates


def format_consistency(rows: list[dict]) -> str:
    lines = ["affect\tconsistency_rate\tn_external\tn_ours\tn_agree"]
    for r in rows:
        lines.append(f"{r['affect']}\t{r['rate']:.2f}\t{r['n_external']}\t{r['n_ours']}\t{r['n_agree']}")
    return "\n".join(lines) + "\n"
