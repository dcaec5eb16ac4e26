"""Command-line entry point: ``daskt <command> [options]``.

Every command reads the layered config (defaults, then ``--config`` file, then
``--set key=value`` pairs, then the named flags) and runs the stages it needs
through the cached pipeline. The module-level commands also accept explicit
input files, in which case they run just that stage into ``--out``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline as pl
from .ingest import AFFECT_COLUMNS, resolve_column_map
from .model import ABLATIONS

log = logging.getLogger("daskt")

# flag dest -> dotted config key
FLAG_KEYS = {
    "workdir": "workdir",
    "seed": "seed",
    "jobs": "jobs",
    "input": "input",
    "dataset": "dataset",
    "delimiter": "delimiter",
    "target_len": "ingest.target_len",
    "max_students": "ingest.max_students",
    "n_folds": "ingest.n_folds",
    "seg_len": "affect.seg_len",
    "k": "affect.k",
    "affect_lag": "affect.lag",
    "ablation": "model.ablation",
    "dims": "model.dims",
    "heads": "model.heads",
    "graph": "model.graph",
    "lr": "model.lr",
    "lam": "model.lam",
    "dtype": "model.dtype",
    "epochs": "train.max_epochs",
    "patience": "train.patience",
    "batch_size": "train.batch_size",
    "fold": "train.folds",
    "external": "consistency.external",
    "n_perm": "consistency.n_perm",
    "student": "export.student",
    "every": "export.every",
}


def _common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    g = p.add_argument_group("configuration")
    g.add_argument("--config", default=S, help="YAML run configuration")
    g.add_argument("--set", dest="sets", action="append", default=S, metavar="KEY=VALUE",
                   help="override any config key, e.g. --set model.lr=5e-4 (repeatable)")
    g.add_argument("--print-config", action="store_true", default=S, help="print the effective config and exit")
    g.add_argument("-v", "--verbose", action="store_true", default=S)
    g.add_argument("--workdir", "--out", dest="workdir", default=S, help="artifact directory")
    g.add_argument("--seed", type=int, default=S, help="root seed")
    g.add_argument("--jobs", type=int, default=S, help="folds trained in parallel")
    d = p.add_argument_group("data")
    d.add_argument("--input", default=S, help="interaction log (delimited text)")
    d.add_argument("--dataset", default=S, help="column preset: assist2012, assistchall or custom")
    d.add_argument("--delimiter", default=S)
    d.add_argument("--target-len", type=int, default=S)
    d.add_argument("--max-students", type=int, default=S)
    d.add_argument("--n-folds", type=int, default=S)
    m = p.add_argument_group("affect and model")
    m.add_argument("--seg-len", type=int, default=S, help="answers per affect segment")
    m.add_argument("--k", type=int, default=S)
    m.add_argument("--affect-lag", type=int, choices=(0, 1), default=S)
    m.add_argument("--ablation", choices=ABLATIONS, default=S)
    m.add_argument("--dims", type=int, default=S)
    m.add_argument("--heads", type=int, default=S)
    m.add_argument("--graph", choices=("auto", "bidirectional", "causal"), default=S)
    m.add_argument("--lr", type=float, default=S)
    m.add_argument("--lam", type=float, default=S)
    m.add_argument("--dtype", choices=("float32", "float64"), default=S)
    t = p.add_argument_group("training")
    t.add_argument("--epochs", type=int, default=S)
    t.add_argument("--patience", type=int, default=S)
    t.add_argument("--batch-size", type=int, default=S)
    t.add_argument("--fold", type=int, nargs="+", default=S, help="fold indices to run")
    o = p.add_argument_group("reports")
    o.add_argument("--external", default=S, help="file with external affect-confidence columns")
    o.add_argument("--n-perm", type=int, default=S)
    o.add_argument("--student", default=S)
    o.add_argument("--every", type=int, default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daskt", description=__doc__.splitlines()[0])
    _common(parser)
    sub = parser.add_subparsers(dest="command", metavar="command")
    helps = {
        "run": "every stage: train and evaluate the configured variant on all folds",
        "ingest": "parse the log, encode ids, cut sequences and write the fold manifest",
        "mine-affect": "affective factor vectors for a fold's training sequences",
        "cluster": "fit affect centers and label every segment",
        "consistency": "agreement of our affect labels with an external detector",
        "train": "train the configured variant",
        "evaluate": "test-split metrics of the configured variant",
        "ablation-grid": "train and evaluate all five variants and report them side by side",
        "export-states": "per-KC mastery table for one student",
    }
    cmds = {}
    for name, text in helps.items():
        cmds[name] = sub.add_parser(name, help=text, description=text)
        _common(cmds[name])
    cmds["mine-affect"].add_argument("--records", help="records.jsonl written by ingest")
    cmds["mine-affect"].add_argument("--folds", dest="folds_file", help="folds.json written by ingest")
    cmds["cluster"].add_argument("--factors", help="directory written by mine-affect")
    cmds["consistency"].add_argument("--assignments", help="cluster directory or its record_affects.tsv")
    cmds["export-states"].add_argument("--checkpoint", help="checkpoint.npz written by train")
    cmds["ablation-grid"].add_argument("--variants", nargs="+", choices=ABLATIONS, default=list(ABLATIONS))
    return parser


def effective_config(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    for text in getattr(args, "sets", None) or []:
        key, value = pl.parse_assignment(text)
        pl.set_path(overrides, key, value)
    flags: dict = {}
    for dest, key in FLAG_KEYS.items():
        if hasattr(args, dest):
            pl.set_path(flags, key, getattr(args, dest))
    return pl.load_config(getattr(args, "config", None), overrides, flags)


def _standalone_out(cfg) -> Path:
    out = Path(cfg["workdir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _single_fold(cfg) -> int:
    folds = cfg["train"]["folds"]
    if folds is None:
        return 0
    folds = [folds] if isinstance(folds, int) else folds
    if len(folds) != 1:
        raise pl.ConfigError("this command takes a single --fold")
    return folds[0]


def dispatch(args, cfg) -> int:
    cmd = args.command or "run"
    p = pl.Pipeline(cfg)
    a = cfg["affect"]
    if cmd == "run":
        outputs = p.run()
        for name, path in outputs.items():
            print(f"{name}\t{path}")
        return pl.EXIT_OK
    if cmd == "ingest":
        rec = p.ingest()
        print((rec.dir / "ingest_report.tsv").read_text(), end="")
    elif cmd == "mine-affect":
        fold = _single_fold(cfg)
        if getattr(args, "records", None):
            out = _standalone_out(cfg)
            _guard("mine-affect", lambda: pl.mine_stage(
                out, pl.digest({"stage": "mine-affect", "records": pl.file_sha256(args.records), "fold": fold,
                                "standardize": a["standardize"], "seg_len": a["seg_len"]}),
                records=args.records, folds=args.folds_file, fold=fold, standardize=a["standardize"],
                seg_len=a["seg_len"]))
            print(out)
        else:
            print(p.mine(fold).dir)
    elif cmd == "cluster":
        fold = _single_fold(cfg)
        if getattr(args, "factors", None):
            out = _standalone_out(cfg)
            seed = cfg["seed"]
            _guard("cluster", lambda: pl.cluster_stage(
                out, pl.digest({"stage": "cluster", "factors": pl.file_sha256(Path(args.factors) / "factors.tsv"),
                                "k": a["k"], "seg_len": a["seg_len"], "seed": seed}),
                factors=Path(args.factors), k=a["k"], seed=seed, seg_len=a["seg_len"],
                standardize=a["standardize"]))
            print(out)
        else:
            rec = p.cluster(fold)
            print((rec.dir / "cluster_summary.tsv").read_text(), end="")
    elif cmd == "consistency":
        if getattr(args, "assignments", None):
            c = cfg["consistency"]
            if c["external"] is None:
                raise pl.ConfigError("consistency needs --external")
            out = _standalone_out(cfg)
            columns = AFFECT_COLUMNS.get(cfg["dataset"], AFFECT_COLUMNS["assist2012"])
            id_column = resolve_column_map(cfg["dataset"], cfg["columns"])["record_id"]
            _guard("consistency", lambda: pl.consistency_stage(
                out, pl.digest({"stage": "consistency", "external": pl.file_sha256(c["external"]),
                                "n_perm": c["n_perm"], "seed": cfg["seed"]}),
                assignments=args.assignments, external=c["external"], columns=columns,
                id_column=id_column, n_perm=c["n_perm"], seed=cfg["seed"]))
            print((out / "consistency.tsv").read_text(), end="")
        else:
            rec = p.consistency()
            print((rec.dir / "consistency.tsv").read_text(), end="")
    elif cmd == "train":
        for rec in [p.train(f) for f in p.folds()]:
            print((rec.dir / "train_log.txt").read_text(), end="")
    elif cmd == "evaluate":
        path = p.report()
        print(path.read_text(), end="")
    elif cmd == "ablation-grid":
        path, problems = p.ablation_grid(args.variants)
        print(path.read_text(), end="")
        for msg in problems:
            log.warning("ordering check: %s", msg)
    elif cmd == "export-states":
        e = cfg["export"]
        if getattr(args, "checkpoint", None):
            if e["student"] is None:
                raise pl.ConfigError("export-states needs --student")
            out = _standalone_out(cfg)
            _guard("export-states", lambda: pl.export_states_stage(
                out, pl.digest({"stage": "export-states", "checkpoint": pl.file_sha256(args.checkpoint),
                                "student": str(e["student"]), "every": e["every"]}),
                checkpoint=Path(args.checkpoint), student=str(e["student"]), every=e["every"]))
            print(out / "states.tsv")
        else:
            print(p.export_states().dir / "states.tsv")
    p.write_manifest()
    return pl.EXIT_OK


def _guard(stage: str, fn) -> None:
    try:
        fn()
    except pl.StaleArtifactError as exc:
        raise pl.StageError(stage, exc, pl.EXIT_STALE) from exc
    except Exception as exc:
        raise pl.StageError(stage, exc) from exc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = effective_config(args)
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return pl.EXIT_CONFIG
    if getattr(args, "print_config", False):
        print(yaml.safe_dump(cfg, sort_keys=False), end="")
        return pl.EXIT_OK
    try:
        return dispatch(args, cfg)
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return pl.EXIT_CONFIG
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
