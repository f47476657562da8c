"""Point-based value iteration as a special case.

With one reward fixed in advance and rank-one directions r q^T at sampled
beliefs, the set backup keeps exactly the value information PBVI keeps. We
check this on a noisy 4x4 POMDP gridworld.

Run: python3 demos/pbvi_special_case.py
"""
import numpy as np

from sfsets.dp import BackupConfig, run_dp
from sfsets.envs import GridSpec, gridworld_pomdp
from sfsets.model import pomdp_to_psr, sample_reachable_states
from sfsets.oracle import alpha_values, pbvi_reference
from sfsets.planner import optimal_values, pbvi_directions

model = pomdp_to_psr(gridworld_pomdp(GridSpec(4, 4, noise=0.05)))
beliefs = np.array(sample_reachable_states(model, 20, seed=1))
r = np.array([0.5, 1.0])

# 29 backups of the horizon-1 base case give horizon-30 values
sfset, _ = run_dp(model, BackupConfig(scope="shared", max_iters=29, convergence_tol=0.0),
                  pbvi_directions(r, beliefs))
ours = optimal_values(sfset, model, r, beliefs)
ref = alpha_values(pbvi_reference(model, r, beliefs, 30), beliefs)
for b, v, w in zip(beliefs[:5], ours, ref):
    print(f"belief peak {b.max():.2f} at cell {b.argmax():2d}: set {v:.6f}  pbvi {w:.6f}")
print(f"max difference over {len(beliefs)} beliefs: {np.abs(ours - ref).max():.1e}")
