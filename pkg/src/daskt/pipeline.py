"""Run configuration and content-addressed pipeline stages.

Every stage writes into ``<workdir>/stages/<stage>/<key>`` where ``key`` hashes
the stage's parameters together with the keys (or file hashes) of its inputs.
A stage whose directory already holds a matching ``stage.json`` and unchanged
outputs is skipped. Every artifact carries the key that produced it, and
readers refuse artifacts whose embedded key differs from the expected one.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .affect_cluster import (
    AffectModel,
    affect_consistency,
    format_consistency,
    random_label_control,
    read_assignments,
    read_external_affect,
    record_affects,
    write_assignments,
)
from .affect_features import PopulationStats, dimension_names, maf, population_stats
from .autodiff import ParamStore
from .experiment import (
    GridRow,
    check_ordering,
    cluster_affect,
    encode_records,
    format_grid,
    mine_factors,
    split_sequences,
    to_batch,
)
from .ingest import (
    AFFECT_COLUMNS,
    DatasetSplit,
    IngestError,
    Vocab,
    build_sequences,
    build_vocab,
    load_folds,
    make_folds,
    parse_log,
    read_records,
    resolve_column_map,
    save_folds,
    sort_records,
    write_records,
)
from .model import ABLATIONS, ModelConfig, ablate, forward, knowledge_state_readout
from .train_eval import Metrics, evaluate, train

log = logging.getLogger(__name__)

DEFAULT_CONFIG: dict = {
    "dataset": "assist2012",
    "input": None,
    "columns": {},
    "delimiter": None,
    "workdir": "daskt-run",
    "seed": 0,
    "jobs": 1,
    "ingest": {"target_len": 200, "rt_cap_ms": 1_800_000, "n_folds": 5, "val_frac": 0.2,
               "max_students": None},
    "affect": {"seg_len": 20, "k": 4, "standardize": True, "lag": 0},
    "model": {"dims": 256, "heads": 4, "head_merge": "mean", "graph": "auto", "affect_source": "embedding",
              "lam": 1e-5, "lr": 1e-3, "clip_norm": 5.0, "dtype": "float32", "ablation": "full"},
    "train": {"max_epochs": 30, "patience": 5, "batch_size": 32, "folds": None},
    "consistency": {"external": None, "n_perm": 10, "fold": 0},
    "export": {"student": None, "every": 1, "fold": 0},
}

# keys that change where things go or how fast, never what is computed
_NON_SEMANTIC = ("workdir", "jobs")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STALE = 10
EXIT_CODES = {
    "ingest": 3,
    "mine-affect": 4,
    "cluster": 5,
    "train": 6,
    "evaluate": 7,
    "consistency": 8,
    "export-states": 9,
    "report": 11,
}


class ConfigError(ValueError):
    pass


class StaleArtifactError(RuntimeError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, exit_code: int | None = None):
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = exit_code or EXIT_CODES.get(stage, 1)


# --- configuration -------------------------------------------------------------


def deep_merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        path = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[k], dict) and k != "columns":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[k] = deep_merge(base[k], v, path + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_path(overrides: dict, dotted: str, value) -> dict:
    node = overrides
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return overrides


def parse_assignment(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"expected key=value, got {text!r}")
    return key.strip(), yaml.safe_load(raw)


def load_config(path=None, *overrides: dict) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping")
        cfg = deep_merge(cfg, loaded)
    for o in overrides:
        cfg = deep_merge(cfg, o)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    m, a, i, t = cfg["model"], cfg["affect"], cfg["ingest"], cfg["train"]
    if m["ablation"] not in ABLATIONS:
        raise ConfigError(f"model.ablation must be one of {ABLATIONS}")
    if m["graph"] not in ("auto", "bidirectional", "causal"):
        raise ConfigError("model.graph must be auto, bidirectional or causal")
    for name, value in (("ingest.target_len", i["target_len"]), ("affect.seg_len", a["seg_len"]),
                        ("affect.k", a["k"]), ("model.dims", m["dims"]), ("model.heads", m["heads"]),
                        ("train.batch_size", t["batch_size"]), ("train.max_epochs", t["max_epochs"])):
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f"{name} must be a positive integer")
    if a["lag"] not in (0, 1):
        raise ConfigError("affect.lag must be 0 or 1")
    if i["n_folds"] < 2:
        raise ConfigError("ingest.n_folds must be at least 2")
    if m["affect_source"] == "embedding" and a["k"] != 4:
        raise ConfigError("the learned affect embedding has one row per named affect, so affect.k must be 4")


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def digest(obj) -> str:
    return hashlib.sha256(canonical(obj).encode()).hexdigest()


def config_hash(cfg: dict) -> str:
    return digest({k: v for k, v in cfg.items() if k not in _NON_SEMANTIC})


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_seed(root: int, *parts) -> int:
    """Independent 32-bit seed for one stage (and fold) derived from the root seed."""
    words = [int(root)] + [zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# --- artifact io -----------------------------------------------------------------


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def embedded_hash(path) -> str | None:
    """The config hash an artifact was written with, whatever its format."""
    path = Path(path)
    if path.suffix == ".npz":
        return ParamStore.load(path)[1].get("config_hash")
    if path.suffix == ".json":
        return json.loads(path.read_text()).get("config_hash")
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("{"):
                return json.loads(line).get("__header__", {}).get("config_hash")
            if not line.startswith("#"):
                return None
            key, _, value = line[1:].strip().partition("=")
            if key == "config_hash":
                return value
    return None


def require_hash(path, expected: str | None) -> None:
    if expected is None:
        return
    got = embedded_hash(path)
    if got != expected:
        raise StaleArtifactError(f"{path} was written by config {got}, expected {expected}; refusing to reuse it")


def read_json(path, expected: str | None = None) -> dict:
    require_hash(path, expected)
    return json.loads(Path(path).read_text())


def write_matrix(path, keys, X: np.ndarray, names, config_hash: str) -> None:
    """Tab-separated matrix: a key column then one column per named dimension."""
    with open(path, "w") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write("key\t" + "\t".join(names) + "\n")
        for k, row in zip(keys, X):
            fh.write(k + "\t" + "\t".join(f"{v:.17g}" for v in row) + "\n")


def read_matrix(path, expected: str | None = None) -> tuple[list[str], np.ndarray, list[str]]:
    require_hash(path, expected)
    keys, rows = [], []
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    names = lines[0].split("\t")[1:]
    for ln in lines[1:]:
        k, *vals = ln.split("\t")
        keys.append(k)
        rows.append([float(v) for v in vals])
    return keys, np.array(rows, dtype=float).reshape(len(rows), len(names)), names


# --- stage bodies (file in, file out) ----------------------------------------------


def ingest_stage(out: Path, key: str, *, input, dataset, columns, delimiter, target_len, rt_cap_ms,
                 n_folds, val_frac, max_students, seed) -> None:
    if input is None:
        raise IngestError("no input log configured (set `input`)")
    column_map = resolve_column_map(dataset, columns)
    records, dropped = parse_log(input, column_map, rt_cap_ms, delimiter)
    if not records:
        raise IngestError(f"{input} yielded no usable records")
    students = sorted({r.student_id for r in records})
    if max_students and len(students) > max_students:
        rng = np.random.default_rng(seed)
        keep = set(np.asarray(students, dtype=object)[np.sort(rng.choice(len(students), max_students, replace=False))])
        records = [r for r in records if r.student_id in keep]
        students = sorted(keep)
    records = sort_records(records)
    vocab = build_vocab(records)
    folds = make_folds(students, n_folds, seed, val_frac)
    sequences = build_sequences(records, target_len)
    write_records(records, out / "records.jsonl", {"config_hash": key, "dataset": dataset})
    write_json(out / "vocab.json", {"config_hash": key, "vocab": asdict(vocab)})
    save_folds(folds, out / "folds.json", {"config_hash": key, "target_len": target_len, "seed": seed})
    with open(out / "ingest_report.tsv", "w") as fh:
        fh.write(f"# config_hash={key}\nquantity\tvalue\n")
        summary = {"records": len(records), "students": len(students), "problems": vocab.n_problems,
                   "kcs": vocab.n_kcs, "sequences": len(sequences),
                   "virtual_sequences": sum(s.is_virtual for s in sequences)}
        for k, v in summary.items():
            fh.write(f"{k}\t{v}\n")
        for reason, n in sorted(dropped.items()):
            fh.write(f"dropped_{reason}\t{n}\n")


@dataclass
class IngestData:
    records: list
    vocab: Vocab
    folds: list[DatasetSplit]
    target_len: int

    def sequences(self):
        return build_sequences(encode_records(self.records, self.vocab), self.target_len)


def load_ingest(records_path, vocab_path=None, folds_path=None, expected: str | None = None) -> IngestData:
    records_path = Path(records_path)
    vocab_path = Path(vocab_path or records_path.with_name("vocab.json"))
    folds_path = Path(folds_path or records_path.with_name("folds.json"))
    for p in (records_path, vocab_path, folds_path):
        require_hash(p, expected)
    records, _ = read_records(records_path)
    vocab = Vocab(**json.loads(vocab_path.read_text())["vocab"])
    meta = json.loads(folds_path.read_text())
    return IngestData(records, vocab, load_folds(folds_path), int(meta["target_len"]))


def mine_stage(out: Path, key: str, *, records, vocab=None, folds=None, ingest_key=None, fold: int,
               standardize: bool, seg_len: int | None = None) -> None:
    data = load_ingest(records, vocab, folds, ingest_key)
    if not 0 <= fold < len(data.folds):
        raise ValueError(f"fold {fold} out of range; the manifest has {len(data.folds)} folds")
    split = data.folds[fold]
    seqs = data.sequences()
    parts = split_sequences(seqs, split)
    stats, X = mine_factors(parts["train"], data.vocab.n_kcs, standardize)
    names = dimension_names(stats.kcs)
    write_json(out / "stats.json", {"config_hash": key, "stats": stats.to_dict(), "standardize": standardize})
    write_matrix(out / "factors.tsv", [s.key for s in parts["train"]], X, names, key)
    write_records([r for s in seqs for r in s.records], out / "records.jsonl", {"config_hash": key})
    write_json(out / "split.json", {
        "config_hash": key, "fold": fold, "target_len": data.target_len,
        "n_kcs": data.vocab.n_kcs, "n_problems": data.vocab.n_problems,
        "train": sorted(split.train_students), "val": sorted(split.val_students),
        "test": sorted(split.test_students),
    })
    if seg_len:
        seg_stats = population_stats(parts["train"], stats.kcs, seg_len, standardize)
        keys, rows = [], []
        for s in seqs:
            for j in range(0, len(s.records), seg_len):
                keys.append(f"{s.key}/{j // seg_len}")
                rows.append(maf(s.records[j : j + seg_len], seg_stats, standardize, warn=False).values)
        write_matrix(out / "segment_factors.tsv", keys, np.array(rows), names, key)


def _fold_parts(factors_dir: Path, expected: str | None):
    meta = read_json(factors_dir / "split.json", expected)
    require_hash(factors_dir / "records.jsonl", expected)
    records, _ = read_records(factors_dir / "records.jsonl")
    split = DatasetSplit(meta["fold"], frozenset(meta["train"]), frozenset(meta["val"]), frozenset(meta["test"]))
    return meta, split_sequences(build_sequences(records, meta["target_len"]), split)


def cluster_stage(out: Path, key: str, *, factors: Path, factors_key=None, k: int, seed: int, seg_len: int,
                  standardize: bool) -> None:
    factors = Path(factors)
    meta, parts = _fold_parts(factors, factors_key)
    stats = PopulationStats.from_dict(read_json(factors / "stats.json", factors_key)["stats"])
    keys, X, _ = read_matrix(factors / "factors.tsv", factors_key)
    if keys != [s.key for s in parts["train"]]:
        raise ValueError("factor rows do not match the fold's training sequences")
    everything = parts["train"] + parts["val"] + parts["test"]
    model, seg_stats, segments, whole = cluster_affect(parts["train"], everything, stats, X, seg_len,
                                                       meta["target_len"], k, seed, standardize)
    model.seed = seed
    model.save(out / "affect_model.txt", key)
    write_json(out / "seg_stats.json", {"config_hash": key, "stats": seg_stats.to_dict()})
    write_assignments(segments, out / "assignments.tsv", key)
    write_assignments(whole, out / "sequence_assignments.tsv", key)
    labels = {}
    for s in segments:
        labels.setdefault(s.student_id, []).append(s.affect_index)
    names = record_affects(everything, labels, model, seg_len)
    with open(out / "record_affects.tsv", "w") as fh:
        fh.write(f"# config_hash={key}\nrecord_id\taffect\n")
        for rid, name in names.items():
            fh.write(f"{rid}\t{name}\n")
    with open(out / "cluster_summary.tsv", "w") as fh:
        fh.write(f"# config_hash={key}\ncluster\tname\tn_train_sequences\tn_segments\n")
        counts = np.bincount(model.labels, minlength=model.k) if model.labels is not None else np.zeros(model.k)
        seg_counts = np.bincount([s.affect_index for s in segments if s.affect_index >= 0], minlength=model.k)
        for c in range(model.k):
            fh.write(f"{c}\t{model.name(c)}\t{int(counts[c])}\t{int(seg_counts[c])}\n")
        fh.write(f"# sse={model.sse:.10g} iterations={model.n_iter}\n")


def read_record_affects(path, expected: str | None = None) -> dict[str, str]:
    path = Path(path)
    if path.is_dir():
        path = path / "record_affects.tsv"
    require_hash(path, expected)
    out = {}
    with open(path) as fh:
        rows = [ln.rstrip("\n").split("\t") for ln in fh if not ln.startswith("#")]
    for rid, name in rows[1:]:
        out[rid] = name
    return out


def consistency_stage(out: Path, key: str, *, assignments, assignments_key=None, external, columns: dict,
                      id_column: str, n_perm: int, seed: int) -> None:
    ours = read_record_affects(assignments, assignments_key)
    ext = read_external_affect(external, columns, id_column)
    rows = affect_consistency(ours, ext)
    identity = affect_consistency(ours, ours)[-1]["rate"]
    control = random_label_control(ours, n_perm, seed)
    with open(out / "consistency.tsv", "w") as fh:
        fh.write(f"# config_hash={key}\n")
        fh.write(format_consistency(rows))
        fh.write("\ncheck\trate\n")
        fh.write(f"identity\t{identity:.2f}\n")
        fh.write(f"random_control_mean\t{np.mean(control):.2f}\n")
        fh.write(f"random_control_std\t{np.std(control):.2f}\n")
        for i, r in enumerate(control):
            fh.write(f"random_control_{i}\t{r:.2f}\n")


def model_config(cfg: dict, n_problems: int, n_kcs: int, seed: int, center_dim: int = 0,
                 ablation: str | None = None) -> ModelConfig:
    m = cfg["model"]
    d = m["dims"]
    return ModelConfig(n_problems=n_problems, n_kcs=n_kcs, d_p=d, d_k=d, d_r=d, d_aff=d, d=d,
                       heads=m["heads"], head_merge=m["head_merge"], affect_source=m["affect_source"],
                       center_dim=center_dim, n_affects=cfg["affect"]["k"], affect_lag=cfg["affect"]["lag"],
                       graph=m["graph"], ablation=ablation or m["ablation"], seed=seed, lam=m["lam"],
                       lr=m["lr"], clip_norm=m["clip_norm"], dtype=m["dtype"])


def make_batches(data: IngestData, fold: int, cfg: ModelConfig, cluster_dir=None, cluster_key=None,
                 seg_len: int | None = None) -> dict:
    parts = split_sequences(data.sequences(), data.folds[fold])
    wiring = ablate(cfg)
    labels, L, centers = {}, seg_len or data.target_len, None
    if wiring.uses_affect:
        if cluster_dir is None:
            raise ValueError(f"variant {cfg.ablation} needs affect assignments")
        cluster_dir = Path(cluster_dir)
        if wiring.affect_granularity == "sequence":
            path, L = cluster_dir / "sequence_assignments.tsv", data.target_len
        else:
            path = cluster_dir / "assignments.tsv"
        require_hash(path, cluster_key)
        labels = read_assignments(path)
        if cfg.affect_source == "centers":
            c = AffectModel.load(cluster_dir / "affect_model.txt").centers
            centers = np.vstack([c, np.zeros((1, c.shape[1]))])
    return {name: to_batch(seqs, labels, L, data.target_len, cfg.affect_lag, centers)
            for name, seqs in parts.items()}


def train_stage(out: Path, key: str, *, ingest_dir: Path, ingest_key, cluster_dir, cluster_key, fold: int,
                run_cfg: dict, ablation: str, seed: int) -> None:
    data = load_ingest(Path(ingest_dir) / "records.jsonl", expected=ingest_key)
    center_dim = 0
    if run_cfg["model"]["affect_source"] == "centers" and cluster_dir is not None:
        center_dim = AffectModel.load(Path(cluster_dir) / "affect_model.txt").centers.shape[1]
    cfg = model_config(run_cfg, data.vocab.n_problems, data.vocab.n_kcs, seed, center_dim, ablation)
    seg_len = run_cfg["affect"]["seg_len"]
    batches = make_batches(data, fold, cfg, cluster_dir, cluster_key, seg_len)
    t = run_cfg["train"]
    result = train(batches["train"], batches["val"], cfg, max_epochs=t["max_epochs"], patience=t["patience"],
                   batch_size=t["batch_size"])
    meta = {
        "config_hash": key, "model": cfg.to_dict(), "fold": fold, "seg_len": seg_len,
        "best_epoch": result.best_epoch, "best_val_auc": result.best_val_auc,
        "ingest_dir": os.path.relpath(ingest_dir, out), "ingest_key": ingest_key,
        "cluster_dir": os.path.relpath(cluster_dir, out) if cluster_dir is not None else None,
        "cluster_key": cluster_key,
    }
    result.params.save(out / "checkpoint.npz", meta)
    with open(out / "train_log.txt", "w") as fh:
        fh.write(f"# config_hash={key}\n")
        for line in result.log_lines:
            fh.write(line + "\n")
        fh.write(f"# best_epoch={result.best_epoch}\n")


@dataclass
class CheckpointContext:
    params: ParamStore
    config: ModelConfig
    meta: dict
    data: IngestData
    cluster_dir: Path | None

    def batches(self) -> dict:
        return make_batches(self.data, self.meta["fold"], self.config, self.cluster_dir,
                            self.meta.get("cluster_key"), self.meta["seg_len"])


def load_checkpoint(path, expected: str | None = None) -> CheckpointContext:
    path = Path(path)
    params, meta = ParamStore.load(path)
    if expected is not None and meta.get("config_hash") != expected:
        raise StaleArtifactError(f"{path} was written by config {meta.get('config_hash')}, expected {expected}")
    base = path.parent
    data = load_ingest(base / meta["ingest_dir"] / "records.jsonl", expected=meta["ingest_key"])
    cluster_dir = base / meta["cluster_dir"] if meta.get("cluster_dir") else None
    return CheckpointContext(params, ModelConfig(**meta["model"]), meta, data, cluster_dir)


METRIC_HEADER = "variant\tfold\trmse\tacc\tauc\tr2\tn_predictions\n"


def evaluate_stage(out: Path, key: str, *, checkpoint: Path, train_key=None) -> None:
    ctx = load_checkpoint(checkpoint, train_key)
    m = evaluate(ctx.params, ctx.batches()["test"], ctx.config)
    with open(out / "metrics.tsv", "w") as fh:
        fh.write(f"# config_hash={key}\n" + METRIC_HEADER)
        fh.write(f"{ctx.config.ablation}\t{ctx.meta['fold']}\t{m.rmse:.6f}\t{m.acc:.6f}\t{m.auc:.6f}\t"
                 f"{m.r2:.6f}\t{m.n_predictions}\n")


def read_metrics(path, expected: str | None = None) -> tuple[str, int, Metrics]:
    require_hash(path, expected)
    with open(path) as fh:
        rows = [ln.rstrip("\n").split("\t") for ln in fh if not ln.startswith("#")]
    variant, fold, rmse, acc, auc, r2, n = rows[1]
    return variant, int(fold), Metrics(float(rmse), float(acc), float(auc), float(r2), int(n))


def export_states_stage(out: Path, key: str, *, checkpoint: Path, student: str, every: int = 1,
                        train_key=None) -> None:
    """Per-KC mastery every ``every`` steps of one student, with the step's affect name."""
    if every < 1:
        raise ValueError("every must be positive")
    ctx = load_checkpoint(checkpoint, train_key)
    seqs = [s for s in ctx.data.sequences() if s.student_id == str(student)]
    if not seqs:
        raise KeyError(f"student {student!r} is not in the ingested data")
    batches = ctx.batches()
    model = AffectModel.load(ctx.cluster_dir / "affect_model.txt") if ctx.cluster_dir else None
    kc_ids = np.arange(1, ctx.config.n_kcs + 1)
    kc_names = [ctx.data.vocab.decode("kcs", int(i)) for i in kc_ids]
    with open(out / "states.tsv", "w") as fh:
        fh.write(f"# config_hash={key}\n")
        fh.write("sequence\tstep\tproblem\tkc\tcorrect\taffect\t" + "\t".join(kc_names) + "\n")
        step = 0
        for seq in seqs:
            batch = None
            for b in batches.values():
                if seq.key in b.keys:
                    batch = b.take([b.keys.index(seq.key)]).trimmed()
            h = forward(batch, ctx.params, ctx.config)["h"].data[0]
            for t, r in enumerate(seq.records):
                if step % every == 0:
                    probs = knowledge_state_readout(h[t], kc_ids, ctx.params)[0]
                    a = int(batch.affects[0, t])
                    name = model.name(a) if (model is not None and ablate(ctx.config).uses_affect) else "none"
                    fh.write(f"{seq.key}\t{step}\t{ctx.data.vocab.decode('problems', r.problem_id)}\t"
                             f"{ctx.data.vocab.decode('kcs', r.kc_id)}\t{r.correct}\t{name}\t"
                             + "\t".join(f"{p:.6f}" for p in probs) + "\n")
                step += 1


# --- orchestration ---------------------------------------------------------------------


@dataclass
class StageRecord:
    name: str
    key: str
    dir: Path
    ran: bool
    outputs: dict[str, str] = field(default_factory=dict)


class Pipeline:
    """Runs stages in dependency order against one workdir, skipping up-to-date ones."""

    def __init__(self, cfg: dict):
        validate(cfg)
        self.cfg = cfg
        self.workdir = Path(cfg["workdir"])
        self.config_hash = config_hash(cfg)
        self.seed = int(cfg["seed"])
        self.records: dict[str, StageRecord] = {}

    # generic stage machinery
    def _stage(self, name: str, params: dict, body) -> StageRecord:
        key = digest({"stage": name, "params": params})
        if key in self.records:
            return self.records[key]
        d = self.workdir / "stages" / name / key[:16]
        marker = d / "stage.json"
        if marker.is_file():
            meta = json.loads(marker.read_text())
            intact = meta.get("key") == key and all(
                (d / f).is_file() and file_sha256(d / f) == h for f, h in meta.get("outputs", {}).items()
            )
            if intact:
                log.info("stage %s %s up to date", name, key[:12])
                rec = StageRecord(name, key, d, False, meta["outputs"])
                self.records[key] = rec
                return rec
            log.warning("stage %s %s: outputs changed since they were written; recomputing", name, key[:12])
        d.mkdir(parents=True, exist_ok=True)
        for f in d.iterdir():
            if f.is_file():
                f.unlink()
        log.info("stage %s %s running", name, key[:12])
        try:
            body(d, key)
        except StaleArtifactError as exc:
            raise StageError(name, exc, EXIT_STALE) from exc
        except Exception as exc:
            raise StageError(name, exc) from exc
        outputs = {f.name: file_sha256(f) for f in sorted(d.iterdir()) if f.is_file() and f.name != "stage.json"}
        write_json(marker, {"key": key, "stage": name, "params": json.loads(canonical(params)), "outputs": outputs})
        rec = StageRecord(name, key, d, True, outputs)
        self.records[key] = rec
        return rec

    def folds(self) -> list[int]:
        sel = self.cfg["train"]["folds"]
        n = self.cfg["ingest"]["n_folds"]
        if sel is None:
            return list(range(n))
        sel = [sel] if isinstance(sel, int) else list(sel)
        if any(not 0 <= f < n for f in sel):
            raise ConfigError(f"train.folds must lie in [0, {n})")
        return sel

    # stages
    def ingest(self) -> StageRecord:
        c, i = self.cfg, self.cfg["ingest"]
        if c["input"] is None or not Path(c["input"]).is_file():
            raise StageError("ingest", FileNotFoundError(f"input log {c['input']!r} not found"))
        params = {
            "input_sha256": file_sha256(c["input"]), "dataset": c["dataset"],
            "columns": resolve_column_map(c["dataset"], c["columns"]), "delimiter": c["delimiter"],
            **i, "seed": stage_seed(self.seed, "ingest"),
        }
        kw = {k: v for k, v in params.items() if k not in ("input_sha256", "columns")}
        return self._stage("ingest", params, lambda d, key: ingest_stage(
            d, key, input=c["input"], columns=c["columns"], **kw))

    def mine(self, fold: int) -> StageRecord:
        ing = self.ingest()
        std = self.cfg["affect"]["standardize"]
        params = {"ingest": ing.key, "fold": fold, "standardize": std}
        return self._stage("mine-affect", params, lambda d, key: mine_stage(
            d, key, records=ing.dir / "records.jsonl", ingest_key=ing.key, fold=fold, standardize=std))

    def cluster(self, fold: int) -> StageRecord:
        mined = self.mine(fold)
        a = self.cfg["affect"]
        params = {"mine": mined.key, "k": a["k"], "seg_len": a["seg_len"], "standardize": a["standardize"],
                  "seed": stage_seed(self.seed, "cluster", fold)}
        return self._stage("cluster", params, lambda d, key: cluster_stage(
            d, key, factors=mined.dir, factors_key=mined.key, k=a["k"], seed=params["seed"],
            seg_len=a["seg_len"], standardize=a["standardize"]))

    def train(self, fold: int, ablation: str | None = None) -> StageRecord:
        ablation = ablation or self.cfg["model"]["ablation"]
        ing = self.ingest()
        clu = self.cluster(fold) if ablate(ablation).uses_affect else None
        params = {
            "ingest": ing.key, "cluster": clu.key if clu else None, "fold": fold, "ablation": ablation,
            "model": {k: v for k, v in self.cfg["model"].items() if k != "ablation"},
            "train": {k: v for k, v in self.cfg["train"].items() if k != "folds"},
            "lag": self.cfg["affect"]["lag"], "k": self.cfg["affect"]["k"],
            "seg_len": self.cfg["affect"]["seg_len"], "seed": stage_seed(self.seed, "train", fold),
        }
        return self._stage("train", params, lambda d, key: train_stage(
            d, key, ingest_dir=ing.dir, ingest_key=ing.key, cluster_dir=clu.dir if clu else None,
            cluster_key=clu.key if clu else None, fold=fold, run_cfg=self.cfg, ablation=ablation,
            seed=params["seed"]))

    def evaluate(self, fold: int, ablation: str | None = None) -> StageRecord:
        tr = self.train(fold, ablation)
        return self._stage("evaluate", {"train": tr.key}, lambda d, key: evaluate_stage(
            d, key, checkpoint=tr.dir / "checkpoint.npz", train_key=tr.key))

    def consistency(self) -> StageRecord:
        c = self.cfg
        ext = c["consistency"]["external"]
        if ext is None or not Path(ext).is_file():
            raise StageError("consistency", FileNotFoundError(f"external affect file {ext!r} not found"))
        fold = c["consistency"]["fold"]
        clu = self.cluster(fold)
        columns = AFFECT_COLUMNS.get(c["dataset"], AFFECT_COLUMNS["assist2012"])
        id_column = resolve_column_map(c["dataset"], c["columns"]).get("record_id")
        params = {"cluster": clu.key, "external_sha256": file_sha256(ext), "columns": columns,
                  "id_column": id_column, "n_perm": c["consistency"]["n_perm"],
                  "seed": stage_seed(self.seed, "consistency")}
        return self._stage("consistency", params, lambda d, key: consistency_stage(
            d, key, assignments=clu.dir, assignments_key=clu.key, external=ext, columns=columns,
            id_column=id_column, n_perm=params["n_perm"], seed=params["seed"]))

    def export_states(self) -> StageRecord:
        e = self.cfg["export"]
        if e["student"] is None:
            raise StageError("export-states", ValueError("export.student is not set"))
        tr = self.train(e["fold"])
        params = {"train": tr.key, "student": str(e["student"]), "every": e["every"]}
        return self._stage("export-states", params, lambda d, key: export_states_stage(
            d, key, checkpoint=tr.dir / "checkpoint.npz", student=str(e["student"]), every=e["every"],
            train_key=tr.key))

    # multi-fold drivers
    def train_eval_folds(self, ablation: str | None = None) -> list[StageRecord]:
        ablation = ablation or self.cfg["model"]["ablation"]
        folds = self.folds()
        if self.cfg["jobs"] > 1 and len(folds) > 1:
            for f in folds:  # upstream stages stay sequential
                if ablate(ablation).uses_affect:
                    self.cluster(f)
                else:
                    self.ingest()
            with ProcessPoolExecutor(max_workers=self.cfg["jobs"]) as pool:
                results = list(pool.map(_fold_task, [(self.cfg, f, ablation) for f in folds]))
            for recs in results:
                for r in recs:
                    self.records.setdefault(r.key, r)
        return [self.evaluate(f, ablation) for f in folds]

    def grid_rows(self, variants=ABLATIONS) -> list[GridRow]:
        rows = []
        for v in variants:
            for rec in self.train_eval_folds(v):
                variant, fold, m = read_metrics(rec.dir / "metrics.tsv", rec.key)
                best = ParamStore.load(self.train(fold, v).dir / "checkpoint.npz")[1]["best_epoch"]
                rows.append(GridRow(variant, fold, m, best))
        rows.sort(key=lambda r: (r.fold, ABLATIONS.index(r.variant)))
        return rows

    def write_report(self, name: str, text: str) -> Path:
        path = self.workdir / "reports" / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(f"# config_hash={self.config_hash}\n" + text)
        return path

    def report(self) -> Path:
        rows = self.grid_rows([self.cfg["model"]["ablation"]])
        return self.write_report("report.tsv", format_grid(rows))

    def ablation_grid(self, variants=ABLATIONS) -> tuple[Path, list[str]]:
        rows = self.grid_rows(variants)
        problems = check_ordering(rows)
        text = format_grid(rows)
        for p in problems:
            text += f"# ordering: {p}\n"
        return self.write_report("ablation_grid.tsv", text), problems

    def run(self) -> dict[str, Path]:
        """Every configured stage: training and evaluation per fold, plus consistency and
        state export when their inputs are configured."""
        out = {"report": self.report()}
        uses_affect = ablate(self.cfg["model"]["ablation"]).uses_affect
        if self.cfg["consistency"]["external"] is not None and uses_affect:
            rec = self.consistency()
            out["consistency"] = self.write_report("consistency.tsv", _strip_hash(rec.dir / "consistency.tsv"))
        if self.cfg["export"]["student"] is not None:
            rec = self.export_states()
            out["states"] = self.write_report("states.tsv", _strip_hash(rec.dir / "states.tsv"))
        out["manifest"] = self.write_manifest()
        return out

    def write_manifest(self) -> Path:
        stages = [
            {"stage": r.name, "key": r.key, "dir": r.dir.relative_to(self.workdir).as_posix(), "outputs": r.outputs}
            for r in self.records.values()
        ]
        path = self.workdir / "manifest.json"
        write_json(path, {"config_hash": self.config_hash, "stages": stages})
        return path


def _strip_hash(path: Path) -> str:
    return "".join(ln for ln in Path(path).read_text().splitlines(keepends=True)
                   if not ln.startswith("# config_hash="))


def _fold_task(args) -> list[StageRecord]:
    cfg, fold, ablation = args
    p = Pipeline(cfg)
    p.evaluate(fold, ablation)
    return list(p.records.values())

