"""Run the small smoke experiment end to end and print its metrics.

Usage: python demos/smoke_run.py [output_dir]

Takes well under a minute on one core. The output directory holds the
simulated sinograms, the ground-truth images, the trained checkpoint, the
reconstructed images (raw float64 plus 16-bit PNG) and the metric reports.
"""
import sys
import time
from pathlib import Path

from nbmf.cli import run_all
from nbmf.config import ExperimentConfig, preset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo_smoke")
cfg = ExperimentConfig.from_dict(preset("smoke"))
t0 = time.perf_counter()
reports = run_all(cfg, out)
print(f"finished in {time.perf_counter() - t0:.1f} s, outputs in {out}")
for rep in reports.values():
    print(rep)
    print()
