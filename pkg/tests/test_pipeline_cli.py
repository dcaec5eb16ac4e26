import logging

import pytest
import yaml

from daskt import pipeline as pl
from daskt import synthetic
from daskt.cli import main


@pytest.fixture(scope="module")
def log_csv(tmp_path_factory):
    log = synthetic.generate(n_students=30, min_len=20, max_len=30, seg_len=5, seed=3)
    path = tmp_path_factory.mktemp("data") / "log.csv"
    synthetic.write_assist2012_csv(log, path, synthetic.detector_confidences(log))
    return path


def config(tmp_path, log_csv, **over):
    cfg = pl.load_config(None, {
        "input": str(log_csv), "workdir": str(tmp_path / "work"),
        "ingest": {"target_len": 30, "n_folds": 3},
        "affect": {"seg_len": 5},
        "model": {"dims": 6, "heads": 2},
        "train": {"max_epochs": 1, "folds": [0]},
    })
    for key, value in over.items():
        pl.set_path(cfg, key, value)
    return cfg


def ran(p):
    return {r.name: r.ran for r in p.records.values()}


def test_rerun_skips_every_stage(tmp_path, log_csv):
    cfg = config(tmp_path, log_csv)
    p = pl.Pipeline(cfg)
    first = p.report().read_bytes()
    assert set(ran(p)) == {"ingest", "mine-affect", "cluster", "train", "evaluate"}
    assert all(ran(p).values())
    again = pl.Pipeline(cfg)
    assert again.report().read_bytes() == first
    assert not any(ran(again).values())


def test_seg_len_invalidates_only_cluster_and_downstream(tmp_path, log_csv):
    pl.Pipeline(config(tmp_path, log_csv)).report()
    p = pl.Pipeline(config(tmp_path, log_csv, **{"affect.seg_len": 10}))
    p.report()
    assert ran(p) == {"ingest": False, "mine-affect": False, "cluster": True, "train": True, "evaluate": True}


def test_no_maf_skips_affect_stages(tmp_path, log_csv):
    p = pl.Pipeline(config(tmp_path, log_csv, **{"model.ablation": "no_maf"}))
    p.report()
    assert set(ran(p)) == {"ingest", "train", "evaluate"}


def test_modified_output_is_recomputed(tmp_path, log_csv, caplog):
    cfg = config(tmp_path, log_csv)
    p = pl.Pipeline(cfg)
    rec = p.cluster(0)
    target = rec.dir / "assignments.tsv"
    original = target.read_bytes()
    target.write_text("tampered\n")
    with caplog.at_level(logging.WARNING):
        again = pl.Pipeline(cfg).cluster(0)
    assert again.ran and target.read_bytes() == original
    assert "recomputing" in caplog.text


def test_stale_artifact_refused(tmp_path, log_csv):
    cfg = config(tmp_path, log_csv, **{"export.student": "s0001"})
    p = pl.Pipeline(cfg)
    ckpt = p.train(0).dir / "checkpoint.npz"
    assign = p.cluster(0).dir / "assignments.tsv"
    lines = assign.read_text().splitlines(keepends=True)
    assign.write_text("# config_hash=0000\n" + "".join(lines[1:]))
    code = main(["export-states", "--checkpoint", str(ckpt), "--student", "s0001", "--out", str(tmp_path / "x")])
    assert code == pl.EXIT_STALE
    with pytest.raises(pl.StaleArtifactError):
        pl.require_hash(assign, p.cluster(0).key)


def write_cfg(tmp_path, cfg):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def test_cli_run_writes_reports(tmp_path, log_csv, capsys):
    cfg = config(tmp_path, log_csv)
    code = main(["run", "--config", write_cfg(tmp_path, cfg), "--external", str(log_csv), "--student", "s0002",
                 "--every", "3"])
    assert code == 0
    reports = tmp_path / "work" / "reports"
    assert {"report.tsv", "consistency.tsv", "states.tsv"} <= {p.name for p in reports.iterdir()}
    for name in ("report.tsv", "consistency.tsv", "states.tsv"):
        assert (reports / name).read_text().startswith("# config_hash=")
    text = (reports / "consistency.tsv").read_text()
    assert "identity\t100.00" in text
    states = [ln.split("\t") for ln in (reports / "states.tsv").read_text().splitlines()[2:]]
    assert [int(r[1]) for r in states] == list(range(0, 3 * len(states), 3))
    assert all(0.0 <= float(v) <= 1.0 for r in states for v in r[6:])
    assert (tmp_path / "work" / "manifest.json").is_file()


def test_cli_module_commands(tmp_path, log_csv, capsys):
    cfg = write_cfg(tmp_path, config(tmp_path, log_csv))
    assert main(["ingest", "--config", cfg]) == 0
    assert "sequences\t30" in capsys.readouterr().out.splitlines()
    assert main(["cluster", "--config", cfg, "--fold", "0"]) == 0
    assert "concentration" in capsys.readouterr().out
    assert main(["evaluate", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[1].startswith("variant\tfold")


def test_cli_standalone_stages(tmp_path, log_csv, capsys):
    cfg = config(tmp_path, log_csv)
    p = pl.Pipeline(cfg)
    ing = p.ingest()
    mine_out, clu_out = tmp_path / "mined", tmp_path / "clustered"
    assert main(["mine-affect", "--records", str(ing.dir / "records.jsonl"), "--fold", "0", "--seg-len", "5",
                 "--out", str(mine_out)]) == 0
    header = (mine_out / "factors.tsv").read_text().splitlines()[1].split("\t")
    assert header[0] == "key" and header[-2:] == ["interval", "participation"]
    assert (mine_out / "segment_factors.tsv").is_file()
    assert main(["cluster", "--factors", str(mine_out), "--k", "4", "--seg-len", "5", "--out", str(clu_out)]) == 0
    assert (clu_out / "affect_model.txt").read_text().startswith("# version=")
    capsys.readouterr()
    assert main(["consistency", "--assignments", str(clu_out), "--external", str(log_csv),
                 "--out", str(tmp_path / "cons")]) == 0
    assert "random_control_mean" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, log_csv, capsys):
    assert main(["run", "--set", "model.nope=1"]) == pl.EXIT_CONFIG
    assert main(["run", "--set", "affect.k=0"]) == pl.EXIT_CONFIG
    assert main(["run", "--input", str(tmp_path / "missing.csv"), "--workdir", str(tmp_path / "w")]) == 3
    assert main(["consistency", "--input", str(log_csv), "--workdir", str(tmp_path / "w"),
                 "--external", str(tmp_path / "none.csv")]) == 8
    assert main(["export-states", "--checkpoint", str(tmp_path / "none.npz"), "--student", "s1",
                 "--out", str(tmp_path / "w")]) == 9


def test_print_config_layers(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text("model:\n  lr: 0.01\n  dims: 32\n")
    assert main(["--print-config", "--config", str(path), "--set", "model.dims=64", "--seg-len", "7"]) == 0
    cfg = yaml.safe_load(capsys.readouterr().out)
    assert cfg["model"]["lr"] == 0.01 and cfg["model"]["dims"] == 64 and cfg["affect"]["seg_len"] == 7
    assert cfg["train"]["batch_size"] == 32


def test_config_hash_ignores_workdir_and_jobs():
    a = pl.load_config(None, {"workdir": "a", "jobs": 1})
    b = pl.load_config(None, {"workdir": "b", "jobs": 4})
    assert pl.config_hash(a) == pl.config_hash(b)
    assert pl.config_hash(a) != pl.config_hash(pl.load_config(None, {"seed": 1}))


def test_parallel_folds_match_serial(tmp_path, log_csv):
    serial = pl.Pipeline(config(tmp_path / "s", log_csv, **{"train.folds": [0, 1]})).report().read_bytes()
    par = pl.Pipeline(config(tmp_path / "p", log_csv, **{"train.folds": [0, 1], "jobs": 2})).report().read_bytes()
    assert serial == par
