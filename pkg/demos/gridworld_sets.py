"""Successor feature sets on the 3x3 gridworld.

Features are the (x, y) coordinates of the current cell in [-1, 1]. We build
the set of achievable discounted feature vectors from every cell, then read
off plans for a few rewards without solving anything new.

Run: python3 demos/gridworld_sets.py
"""
import numpy as np

from sfsets.dp import BackupConfig, project_set, run_dp, sample_directions
from sfsets.envs import GridSpec, gridworld_mdp
from sfsets.model import mdp_to_psr
from sfsets.oracle import convex_hull_2d, value_iteration
from sfsets.planner import optimal_action, optimal_value

ACTIONS = ["up", "down", "left", "right"]

spec = gridworld_mdp(GridSpec(3, 3))
model = mdp_to_psr(spec)
directions = sample_directions(0, 175, model.d, model.k)
sfset, trace = run_dp(model, BackupConfig(), directions)
print(f"converged={trace.converged} after {len(trace.iterations)} backups, "
      f"final support change {trace.max_error_optimized[-1]:.2e}")

# The set seen from a cell is a polygon in feature space. Sample its boundary
# with many feature directions and keep the hull.
th = np.linspace(0, 2 * np.pi, 180, endpoint=False)
G = np.stack([np.cos(th), np.sin(th)], axis=1)
for cell in (0, 4, 8):
    proj = project_set(sfset, model, np.eye(9)[cell])
    pts = np.array([proj.lmo(g)[2] for g in G])
    hull = convex_hull_2d(pts)
    print(f"cell {cell}: {len(hull)} hull vertices, x range "
          f"[{hull[:, 0].min():.2f}, {hull[:, 0].max():.2f}], y range "
          f"[{hull[:, 1].min():.2f}, {hull[:, 1].max():.2f}]")

# Any linear reward is now a lookup. Compare with value iteration.
for r in ([-1.0, -1.0], [1.0, 0.0], [0.3, -0.8]):
    V = value_iteration(spec, r)
    ours = [optimal_value(sfset, model, r, q) for q in np.eye(9)]
    acts = [ACTIONS[optimal_action(sfset, model, r, q)] for q in np.eye(9)]
    print(f"r={r}: max |V - V_vi| = {np.abs(np.array(ours) - V).max():.1e}")
    print("   ", " ".join(f"{a:>5}" for a in acts))
