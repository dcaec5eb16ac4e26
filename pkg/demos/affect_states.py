"""
Mining affect states from a plain interaction log
=================================================

A synthetic log hides a behavioural regime behind every block of five
answers. We compute affective factors, cluster them into four states and
see how often the named clusters recover the hidden regime.
"""

import collections

import numpy as np

from daskt import synthetic
from daskt.experiment import prepare_fold, sequences_from_records
from daskt.ingest import build_vocab, make_folds

log = synthetic.generate(n_students=120, min_len=60, max_len=80, seg_len=5, seed=7)
vocab = build_vocab(log.records)
seqs = sequences_from_records(log.records, vocab, target_len=100)
split = make_folds(sorted({s.student_id for s in seqs}), k=5, seed=0)[0]

# fit on the training students, label segments of every student
fold = prepare_fold(seqs, split, vocab.n_kcs, target_len=100, seg_len=5, seed=0)
print("cluster names:", fold.model.name_map)
print("within-cluster SSE: %.3f" % fold.model.sse)

# hidden regime vs our label, segment by segment, on the test students
table = collections.Counter()
for s in fold.sequences["test"]:
    for j, lab in enumerate(fold.segment_labels[s.key]):
        recs = s.records[j * 5:(j + 1) * 5]
        if not recs:
            continue
        truth = collections.Counter(log.regimes[r.record_id] for r in recs).most_common(1)[0][0]
        table[truth, fold.model.name(lab)] += 1

names = ["concentration", "frustration", "boredom", "confusion"]
print("\nhidden regime (rows) vs assigned state (columns)")
print(" " * 14 + "".join(f"{n[:8]:>10}" for n in names))
for t in names:
    print(f"{t:<14}" + "".join(f"{table[t, n]:>10}" for n in names))
hits = sum(table[n, n] for n in names)
print("agreement: %.1f%%" % (100.0 * hits / max(sum(table.values()), 1)))

# cluster centers live on the unit sphere after normalisation
print("center norms:", np.round(np.linalg.norm(fold.model.centers, axis=1), 3))
