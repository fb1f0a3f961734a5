"""
Rotation error across rotation angle and overlap
================================================

Each cell synthesizes a pair with the given rotation about the vertical
axis and overlap fraction, runs the full estimation and records the
normalized Frobenius difference between estimated and true rotation.
Failed registrations are marked as such.  The depth view carries a
little Gaussian noise so that the cells differ by more than round-off.

The full 5 x 5 grid takes several minutes on one core; pass smaller lists
to try it quickly: ``python demos/sweep_table.py 20,40 0.5,1``.
"""

import sys
import warnings

from bimodal_stereo.synth import SWEEP_BETAS, SWEEP_OVERLAPS, run_sweep

warnings.simplefilter("ignore")

betas = [float(v) for v in sys.argv[1].split(",")] if len(sys.argv) > 1 else SWEEP_BETAS
overlaps = [float(v) for v in sys.argv[2].split(",")] if len(sys.argv) > 2 else SWEEP_OVERLAPS

res = run_sweep(betas=betas, overlaps=overlaps, seed=0)

print("beta \\ P_w " + "".join(f"{p:>10g}" for p in res.overlaps))
for i, b in enumerate(res.betas):
    cells = ["FAIL" if res.failed[i, j] else f"{res.errors[i, j]:.2e}" for j in range(len(res.overlaps))]
    print(f"{b:10g} " + "".join(f"{c:>10}" for c in cells))
for (b, p), msg in sorted(res.messages.items()):
    print(f"  beta={b:g} P_w={p:g}: {msg}")
