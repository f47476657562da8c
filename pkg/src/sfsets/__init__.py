"""Successor feature sets for MDPs, POMDPs and PSRs.

The package computes the convex set of achievable successor feature matrices
by point-based dynamic programming and uses it for planning under any linear
reward and for feature matching (imitation).
"""
from .errors import (DegenerateMixture, DimensionMismatch, DimensionUnsupported, EmptySet,
                     EnumerationTooLarge, InfeasibleTarget, SFSetError, SingularCoreTests,
                     ZeroProbabilityObservation)
from .model import (MdpSpec, PomdpSpec, PsrModel, SimpleTest, load_model, mdp_to_psr,
                    observation_probs, pomdp_to_psr, psr_update, save_model, test_value,
                    transform_via_core_tests)
from .policy import (PolicyMixture, PolicyTree, constant_action_matrix, enumerate_trees,
                     successor_matrix)
from .dp import (BackupConfig, DirectionSet, SFSet, Trace, bellman_error, load_sfset,
                 point_based_backup, project_set, run_dp, sample_directions, save_sfset)
from .planner import RewardSpec, optimal_action, optimal_value, plan
from .imitation import check_feasible, decompose_target, rollout_match, step_match
from .oracle import exact_sfset, exact_state_polygons, support_gap, value_iteration

__version__ = "0.1.0"
