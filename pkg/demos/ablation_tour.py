"""Run the ablation suite on a short budget and print the comparison table.

Run from the repository root:  python3 demos/ablation_tour.py [output_dir]
"""
import sys
from pathlib import Path

from osslab.harness import ExperimentConfig, ablation_suite

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo_ablation")
base = ExperimentConfig.load("configs/synthetic_benchmark.yaml").with_overrides(
    total_iterations=600, eval_every=100, seeds=[0], output_dir=str(out))

# Five variants: full, no open loss, no close loss, dual-head, and the FixMatch fallback.
# Each variant gets its own run directory; the table reports mean +- std in percent.
summaries, table = ablation_suite(base, out_csv=out / "comparison.csv")
for name, summary in summaries.items():
    print(f"{name:18s} AUC {summary['final']['auc']['mean']:.4f}")
print(table)
