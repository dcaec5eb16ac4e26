"""
Training the tracer and reading out knowledge states
====================================================

Trains the full model and the plain-LSTM variant (no affect) on one fold
of a small synthetic log, compares test metrics, then prints per-KC
mastery for one test student every few steps.
"""

from dataclasses import replace

import numpy as np

from daskt import synthetic
from daskt.experiment import prepare_fold, sequences_from_records
from daskt.ingest import build_vocab, make_folds
from daskt.model import ModelConfig, forward, knowledge_state_readout
from daskt.train_eval import evaluate, train

log = synthetic.generate(n_students=100, min_len=60, max_len=80, seg_len=10, seed=3)
vocab = build_vocab(log.records)
seqs = sequences_from_records(log.records, vocab, target_len=80)
split = make_folds(sorted({s.student_id for s in seqs}), k=5, seed=0)[0]
fold = prepare_fold(seqs, split, vocab.n_kcs, target_len=80, seg_len=10, seed=0)

base = ModelConfig(n_problems=vocab.n_problems, n_kcs=vocab.n_kcs, d_p=32, d_k=32, d_r=32, d_aff=32, d=32,
                   heads=2, lr=3e-3, dtype="float32", seed=0)
results = {}
for variant in ("full", "no_maf"):
    cfg = replace(base, ablation=variant)
    res = train(fold.batch("train", cfg), fold.batch("val", cfg), cfg, max_epochs=8, patience=3)
    results[variant] = (cfg, res)
    m = evaluate(res.params, fold.batch("test", cfg), cfg)
    print(f"{variant:<7} auc={m.auc:.4f} acc={m.acc:.4f} rmse={m.rmse:.4f} best_epoch={res.best_epoch}")

# mastery of every KC for the first test student
cfg, res = results["full"]
batch = fold.batch("test", cfg).take([0])
h = forward(batch, res.params, cfg)["h"].data[0]
n = int(batch.mask[0].sum())
kcs = np.arange(1, vocab.n_kcs + 1)
states = knowledge_state_readout(h[:n], kcs, res.params)
print("\nstep  " + " ".join(f"kc{k:<3}" for k in kcs))
for t in range(0, n, 10):
    print(f"{t:>4}  " + " ".join(f"{v:.2f} " for v in states[t]))
