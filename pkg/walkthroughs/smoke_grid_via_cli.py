"""Run the smoke grid end to end through the CLI and print the headline numbers.

Run with ``python3 walkthroughs/smoke_grid_via_cli.py [results_dir]``.
"""
import json
import sys
from pathlib import Path

from vaecircuits.cli import main

root = Path(__file__).resolve().parents[1]
out = Path(sys.argv[1]) if len(sys.argv) > 1 else root / "results" / "smoke"
config = str(root / "configs" / "smoke.yaml")

for argv in (["run", "--config", config, "--out", str(out)],
             ["ablate", "--config", config, "--out", str(out), "--permutations", "3"],
             ["report", "--out", str(out)]):
    if main(argv) != 0:
        sys.exit(f"vaecircuits {argv[0]} failed")

summary = json.loads((out / "summary.json").read_text())
print("\nreport files:", sorted(p.name for p in out.glob("*.csv")))
for t in summary["pairwise_tests"]:
    print(f"{t['metric']:>12} {t['comparison']}: n {t['n']}, p_adj {t['p_adj']:.3f}, d {t['cohens_d']:.2f}")
print(f"CES vs MSE: r {summary['ces_mse']['r']:.3f}")
