"""
A small run matrix, end to end
==============================

Writes a config, runs three strategies at two sparsities over two seeds,
and produces the CSV/JSONL/SVG report. The same thing is available from
the shell as ``dualticket run cfg.yaml --out DIR``.
"""

import sys
import tempfile
from pathlib import Path

from dualticket.experiment import (aggregate, emit_report, format_table, parse_config, run_matrix,
                                   total_cost_epochs)

CONFIG = """\
profile: desk
network:
  input_shape: [16]
  layers:
    - {kind: dense, out_features: 48}
    - {kind: relu}
    - {kind: dense, out_features: 48}
    - {kind: relu}
    - {kind: dense, out_features: 4}
dataset: {kind: blobs, n_per_class: 100, classes: 4, noise: 1.2, features: 16}
ratios: [0.9, 0.98]
strategies: [l1, scratch, rst]
seeds: [0, 1]
finetune: {epochs: 20, schedule: [[0, 0.01], [10, 0.001], [15, 0.0001]]}
rst: {eta: 0.002, v_eta: 2, v_s: 1000}
"""

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="dualticket-"))
out.mkdir(parents=True, exist_ok=True)
(out / "cfg.yaml").write_text(CONFIG)
cfg = parse_config(out / "cfg.yaml")

########### Budget per strategy, in epochs over the training set
for s in cfg.strategies:
    print(f"{s:<8} {total_cost_epochs(s, cfg, 320):7.1f} epochs")

outcome = run_matrix(cfg, out)
print(f"{len(outcome.results)} cells, {outcome.reused} reused from an earlier run")

emit_report(outcome.results, out)
print(format_table(aggregate(outcome.results)))
print("files:", sorted(p.name for p in out.iterdir()))
