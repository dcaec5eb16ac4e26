"""Per-fold affect preparation, batching, and the ablation grid."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .affect_cluster import (
    AffectModel,
    SegmentAffect,
    kmeans_fit,
    name_clusters,
    segment_and_assign,
    step_affects,
)
from .affect_features import PopulationStats, factor_matrix, population_stats
from .ingest import DatasetSplit, StudentSequence, Vocab, build_sequences
from .model import ABLATIONS, Batch, ModelConfig, ablate
from .train_eval import Metrics, evaluate, train


def encode_records(records, vocab: Vocab):
    """Replace problem and KC ids by their dense integers; student ids stay opaque."""
    return [replace(r, problem_id=vocab.problems[r.problem_id], kc_id=vocab.kcs[r.kc_id]) for r in records]


@dataclass
class FoldData:
    split: DatasetSplit
    target_len: int
    seg_len: int
    stats: PopulationStats
    seg_stats: PopulationStats
    model: AffectModel
    sequences: dict[str, list[StudentSequence]]
    segment_labels: dict[str, list[int]] = field(default_factory=dict)
    sequence_labels: dict[str, list[int]] = field(default_factory=dict)

    def labels_for(self, granularity: str) -> tuple[dict[str, list[int]], int]:
        if granularity == "sequence":
            return self.sequence_labels, self.target_len
        return self.segment_labels, self.seg_len

    def batch(self, split: str, cfg: ModelConfig) -> Batch:
        labels, seg_len = self.labels_for(ablate(cfg).affect_granularity)
        centers = None
        if cfg.affect_source == "centers":
            centers = np.vstack([self.model.centers, np.zeros((1, self.model.centers.shape[1]))])
        return to_batch(self.sequences[split], labels, seg_len, self.target_len, cfg.affect_lag, centers)


def split_sequences(sequences, split: DatasetSplit) -> dict[str, list[StudentSequence]]:
    out = {"train": [], "val": [], "test": []}
    for s in sequences:
        if s.student_id in split.train_students:
            out["train"].append(s)
        elif s.student_id in split.val_students:
            out["val"].append(s)
        elif s.student_id in split.test_students:
            out["test"].append(s)
    return out


def labels_by_key(segments: list[SegmentAffect]) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    for s in segments:
        out.setdefault(s.student_id, []).append(s.affect_index)
    return out


def mine_factors(train_seqs, n_kcs: int, standardize: bool = True):
    """Whole-sequence population stats and factor vectors of the training sequences."""
    stats = population_stats(train_seqs, list(range(1, n_kcs + 1)), None, standardize)
    return stats, factor_matrix([s.records for s in train_seqs], stats, standardize)


def cluster_affect(train_seqs, all_seqs, stats: PopulationStats, X: np.ndarray, seg_len: int,
                   target_len: int, k: int = 4, seed: int = 0, standardize: bool = True):
    """Fit centers on whole training sequences, then label segments and whole sequences.

    Segments are centred and scaled with statistics of training segments of
    the same length, so a segment is compared with a typical segment rather
    than with a whole history.
    """
    model = kmeans_fit(X, k=k, seed=seed)
    model.seg_len = seg_len
    name_clusters(model, stats)
    seg_stats = population_stats(train_seqs, stats.kcs, seg_len, standardize)
    segments = segment_and_assign(all_seqs, model, seg_stats, seg_len, standardize)
    whole = segment_and_assign(all_seqs, model, stats, target_len, standardize)
    return model, seg_stats, segments, whole


def prepare_fold(sequences, split: DatasetSplit, n_kcs: int, target_len: int, seg_len: int = 20,
                 k: int = 4, seed: int = 0, standardize: bool = True) -> FoldData:
    """Training-population stats, cluster centers and per-segment affect for one fold."""
    parts = split_sequences(sequences, split)
    stats, X = mine_factors(parts["train"], n_kcs, standardize)
    everything = parts["train"] + parts["val"] + parts["test"]
    model, seg_stats, segments, whole = cluster_affect(parts["train"], everything, stats, X, seg_len,
                                                       target_len, k, seed, standardize)
    return FoldData(split, target_len, seg_len, stats, seg_stats, model, parts,
                    labels_by_key(segments), labels_by_key(whole))


def to_batch(sequences, labels: dict[str, list[int]], seg_len: int, target_len: int, lag: int = 0,
             centers=None) -> Batch:
    B = len(sequences)
    shape = (B, target_len)
    problems = np.zeros(shape, np.int64)
    kcs = np.zeros(shape, np.int64)
    correct = np.zeros(shape, np.int64)
    mask = np.zeros(shape, bool)
    affects = np.full(shape, -1, np.int64)
    for i, s in enumerate(sequences):
        n = len(s.records)
        problems[i, :n] = [r.problem_id for r in s.records]
        kcs[i, :n] = [r.kc_id for r in s.records]
        correct[i, :n] = [r.correct for r in s.records]
        mask[i, :n] = True
        if labels:
            affects[i] = step_affects(n, target_len, labels[s.key], seg_len, lag)
    return Batch(problems, kcs, correct, mask, affects, [s.key for s in sequences], centers)


@dataclass
class GridRow:
    variant: str
    fold: int
    metrics: Metrics
    best_epoch: int


def run_fold(data: FoldData, cfg: ModelConfig, **train_kw):
    result = train(data.batch("train", cfg), data.batch("val", cfg), cfg, **train_kw)
    return result, evaluate(result.params, data.batch("test", cfg), cfg)


EXPECTED_ORDER = ABLATIONS


def run_ablation_grid(fold_data: list[FoldData], base_cfg: ModelConfig, variants=ABLATIONS,
                      **train_kw) -> list[GridRow]:
    rows = []
    for data in fold_data:
        for v in variants:
            cfg = replace(base_cfg, ablation=v)
            result, metrics = run_fold(data, cfg, **train_kw)
            rows.append(GridRow(v, data.split.fold_index, metrics, result.best_epoch))
    check_ordering(rows)
    return rows


def variant_means(rows: list[GridRow]) -> dict[str, dict[str, tuple[float, float]]]:
    out = {}
    for v in dict.fromkeys(r.variant for r in rows):
        ms = [r.metrics for r in rows if r.variant == v]
        out[v] = {
            key: (float(np.nanmean([getattr(m, key) for m in ms])), float(np.nanstd([getattr(m, key) for m in ms])))
            for key in ("rmse", "acc", "auc", "r2")
        }
    return out


def check_ordering(rows: list[GridRow]) -> list[str]:
    """Warn for every adjacent pair of variants whose mean AUC breaks the expected order."""
    means = variant_means(rows)
    present = [v for v in EXPECTED_ORDER if v in means]
    problems = []
    for a, b in zip(present, present[1:]):
        if means[a]["auc"][0] < means[b]["auc"][0]:
            msg = f"mean AUC of {a} ({means[a]['auc'][0]:.4f}) below {b} ({means[b]['auc'][0]:.4f})"
            warnings.warn(msg, stacklevel=2)
            problems.append(msg)
    return problems


def format_grid(rows: list[GridRow]) -> str:
    cols = ("rmse", "acc", "auc", "r2")
    lines = ["variant\tfold\t" + "\t".join(f"{c}\t{c}_std" for c in cols) + "\tn_predictions"]
    for r in rows:
        vals = "\t".join(f"{getattr(r.metrics, c):.4f}\t" for c in cols)
        lines.append(f"{r.variant}\t{r.fold}\t{vals}\t{r.metrics.n_predictions}")
    for v, stats in variant_means(rows).items():
        vals = "\t".join(f"{stats[c][0]:.4f}\t{stats[c][1]:.4f}" for c in cols)
        n = sum(r.metrics.n_predictions for r in rows if r.variant == v)
        lines.append(f"{v}\tmean\t{vals}\t{n}")
    return "\n".join(lines) + "\n"


def sequences_from_records(records, vocab: Vocab, target_len: int) -> list[StudentSequence]:
    return build_sequences(encode_records(records, vocab), target_len)
