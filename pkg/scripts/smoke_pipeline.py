"""Runs gen-data, train-rm, reflect and eval on a tiny corpus and prints the metrics.

Usage: poetry run python scripts/smoke_pipeline.py [output_dir]
"""
import sys
import tempfile

from prefsynth.main import main

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="prefsynth-smoke-")

SMALL = [
    "--name", "smoke",
    "--output_dir", out,
    "--corpus.n_users", "4",
    "--corpus.history_length", "10",
    "--corpus.n_categories", "4",
    "--corpus.items_per_category", "8",
    "--reflection.steps", "20",
    "--reflection.steps_per_user", "2",
    "--reflection.epochs", "1",
    "--ranker.epochs", "10",
    "--metrics.pool_size", "5",
    "--metrics.eval_negatives", "20",
    "--metrics.cutoffs", "[5, 10]",
]

for command in ("gen-data", "train-rm", "reflect", "eval"):
    print(f"--- {command}")
    code = main(["--log-level", "WARNING", command, *SMALL])
    if code != 0:
        print(f"{command} failed with exit code {code}")
        sys.exit(code)

print("Done:", out)
