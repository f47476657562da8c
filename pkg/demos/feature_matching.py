"""Imitating a policy from its discounted feature expectations alone.

We pick a random depth-6 policy tree, compute the feature vector it achieves
from the start cell, and hand only that vector to the matcher. The matcher
writes the target as a mixture of boundary points of the achievable set,
samples one, acts, and carries the remaining target to the next step.

Run: python3 demos/feature_matching.py
"""
import numpy as np

from sfsets.dp import BackupConfig, run_dp, sample_directions
from sfsets.envs import GridSpec, gridworld_mdp
from sfsets.errors import InfeasibleTarget
from sfsets.imitation import decompose_target, rollout_match
from sfsets.model import mdp_to_psr
from sfsets.policy import constant_action_matrix, random_tree, successor_matrix

model = mdp_to_psr(gridworld_mdp(GridSpec(3, 3)))
sfset, _ = run_dp(model, BackupConfig(convergence_tol=1e-10),
                  sample_directions(0, 175, model.d, model.k))

rng = np.random.default_rng(5)
tree = random_tree(model.num_actions, model.num_observations, 6, rng)
target = successor_matrix(model, tree, constant_action_matrix(model, 1)) @ model.q1
print("target discounted features:", np.round(target, 4))

dec = decompose_target(sfset, model, model.q1, target)
print(f"first step mixes {len(dec.entries)} boundary points:")
for e in dec.entries:
    print(f"  action {e.action}  weight {e.weight:.3f}  point {np.round(e.vertex, 3)}")

res = rollout_match(sfset, model, target, num_rollouts=5000, seed=0)
print("rollout mean:", np.round(res.mean, 4), "+/-", np.round(res.standard_error, 4))
print(f"largest per-step drift {res.max_drift:.1e} over {res.horizon} steps")

# a target outside the set is refused, with the nearest achievable point
try:
    rollout_match(sfset, model, [15.0, 15.0], num_rollouts=10)
except InfeasibleTarget as err:
    print(f"(15, 15) is {err.distance:.2f} away; nearest is {np.round(err.nearest, 3)}")
