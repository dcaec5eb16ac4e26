"""
The staged pipeline from the command line
=========================================

Writes a synthetic ASSIST2012-style CSV (with detector confidence columns),
runs the whole pipeline through the CLI entry point, then runs it again to
show that every stage is reused.
"""

import sys
import tempfile
from pathlib import Path

from daskt import synthetic
from daskt.cli import main

root = Path(tempfile.mkdtemp(prefix="daskt-demo-"))
log = synthetic.generate(n_students=40, min_len=30, max_len=50, seg_len=10, seed=1)
csv_path = root / "log.csv"
synthetic.write_assist2012_csv(log, csv_path, synthetic.detector_confidences(log))

args = ["run", "--input", str(csv_path), "--workdir", str(root / "work"), "--target-len", "50",
        "--seg-len", "10", "--dims", "16", "--epochs", "10", "--lr", "5e-3", "--fold", "0", "1",
        "--external", str(csv_path), "--student", "s0004", "--every", "10", "-v"]

print("first run (every stage computes)")
code = main(args)
print("exit code", code)
print("\nsecond run (every stage is reused)")
code = main(args)
print("exit code", code)

for name in ("report.tsv", "consistency.tsv", "states.tsv"):
    print(f"\n== {name}")
    sys.stdout.write((root / "work" / "reports" / name).read_text())
