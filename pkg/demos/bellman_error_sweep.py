"""Bellman error traces for several direction counts.

Writes one trace CSV per direction count to the output directory (default
./traces): the max error on the directions used for the backup, and the mean
over 25 independent direction sets. Plotting is left to the reader.

Run: python3 demos/bellman_error_sweep.py [out_dir] [mountain-car|pomdp]
"""
import pathlib
import sys

import numpy as np

from sfsets.dp import BackupConfig, run_dp, sample_directions
from sfsets.envs import GridSpec, gridworld_pomdp, mountain_car
from sfsets.model import mdp_to_psr, pomdp_to_psr

out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "traces")
env = sys.argv[2] if len(sys.argv) > 2 else "mountain-car"
out.mkdir(parents=True, exist_ok=True)
if env == "mountain-car":
    model = mdp_to_psr(mountain_car())
else:
    model = pomdp_to_psr(gridworld_pomdp(GridSpec(4, 4, noise=0.05)))

for n in (50, 100, 175):
    D = sample_directions(0, n, model.d, model.k)
    fresh = [sample_directions(10_000 + i, n, model.d, model.k) for i in range(25)]
    _, trace = run_dp(model, BackupConfig(max_iters=300), D, fresh=fresh, fresh_every=10)
    path = out / f"{env}_{n}.csv"
    path.write_text(trace.to_csv())
    e = np.array(trace.max_error_optimized)
    print(f"{n:4d} directions: {len(e)} backups, converged={trace.converged}, "
          f"last error {e[-1]:.2e}, fresh {trace.max_error_fresh[-1]:.3f} -> {path}")
