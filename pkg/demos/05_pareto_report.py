"""
Reading an experiment's trade-off frontier
==========================================

After `smf experiment --config configs/toy.yaml`, runs/results.csv holds one
row per condition (mean and std across seeds). Pass its path to this script,
or run it bare to use a small made-up table.
"""

import sys
import tempfile
from pathlib import Path

from smf.experiment import ConditionSummary, emit_reports, frontiers, plot_data, read_results_csv

if len(sys.argv) > 1:
    summaries = read_results_csv(sys.argv[1])
else:
    # condition, seeds, task acc (mean, std), perplexity (mean, std), fact recall (mean, std)
    summaries = [
        ConditionSummary("base", 3, 0.22, 0.00, 1.29, 0.00, 1.00, 0.00),
        ConditionSummary("additive_kl", 3, 0.34, 0.03, 1.45, 0.05, 0.06, 0.02),
        ConditionSummary("additive_tfidf", 3, 0.28, 0.02, 1.30, 0.00, 0.31, 0.15),
        ConditionSummary("replacement_tfidf", 3, 0.27, 0.04, 1.36, 0.03, 0.00, 0.00),
        ConditionSummary("lora", 3, 0.68, 0.09, 52.9, 12.2, 0.00, 0.00),
        ConditionSummary("full_ft", 3, 0.97, 0.03, 162.7, 55.3, 0.00, 0.00),
    ]

base = next(s for s in summaries if s.condition == "base")
print(f"{'condition':18s} {'task gain':>10s} {'ppl drift':>10s} {'recall drop':>12s}")
for s in summaries:
    print(f"{s.condition:18s} {s.mc_mean - base.mc_mean:+10.3f} {s.ppl_mean - base.ppl_mean:+10.3f} "
          f"{base.qa_mean - s.qa_mean:+12.3f}")

# a condition is off the frontier if another is at least as good on both axes and better on one
for axis, ps in frontiers(summaries).items():
    print(f"\n{axis} frontier: {', '.join(ps.members)}")
    print(f"{axis} dominated: {', '.join(ps.dominated) or '-'}")

# plot-ready rows: circles for KL conditions, triangles for TF-IDF, squares otherwise
for row in plot_data(summaries, "wikitext")[:3]:
    print(row)

with tempfile.TemporaryDirectory() as d:
    written = emit_reports(summaries, d)
    print("\nwould write:", ", ".join(sorted(Path(p).name for p in written.values())))
