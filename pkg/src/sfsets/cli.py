"""Command-line entry point: ``python -m sfsets <subcommand> ...``.

Subcommands: build-env, run-dp, bellman-error, plan, imitate, oracle-compare.
Exit codes: 0 ok, 1 usage error, 2 numerical failure, 3 resource cap.
``SFSET_THREADS`` caps the number of backup worker threads.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dp, envs, imitation, oracle, planner
from .errors import EnumerationTooLarge, InfeasibleTarget, SFSetError
from .model import load_model, mdp_to_psr, pomdp_to_psr, save_model
from .policy import PolicyTree, constant_action_matrix, successor_matrix

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_CAP = 0, 1, 2, 3
FRESH_SEED_OFFSET = 10_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _workers():
    try:
        return max(1, int(os.environ.get("SFSET_THREADS", "1")))
    except ValueError:
        return 1


def _emit(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _vector(text):
    return np.asarray(json.loads(text), dtype=float)


def _state(model, text):
    """A state: ``None`` -> q1, an integer -> basis state, else a JSON vector."""
    if text is None:
        return np.array(model.q1)
    value = json.loads(text)
    if isinstance(value, int):
        q = np.zeros(model.k)
        q[value] = 1.0
        return q
    return np.asarray(value, dtype=float)


def _fresh_sets(model, seed, count, n):
    return [dp.sample_directions(FRESH_SEED_OFFSET + seed * 1000 + i, n, model.d, model.k)
            for i in range(count)]


# ---------------------------------------------------------------- subcommands

def cmd_build_env(args):
    if args.size is not None and args.size < 1:
        raise UsageError("--size must be at least 1")
    if args.env == "mountain-car":
        mesh = (args.size or 12, args.size or 12)
        spec = envs.mountain_car(envs.MountainCarSpec(mesh=mesh, gamma=args.gamma,
                                                      substeps=args.substeps))
        model = mdp_to_psr(spec)
    else:
        size = args.size or 3
        kwargs = dict(gamma=args.gamma, noise=args.noise if args.env == "gridworld-pomdp" else 0.0,
                      feature_mode=args.features, stop_action=args.stop_action)
        if args.random_walls:
            grid = envs.random_maze(size, size, args.seed, density=args.density, **kwargs)
        else:
            grid = envs.GridSpec(size, size, seed=args.seed, **kwargs)
        if args.env == "gridworld":
            model = mdp_to_psr(envs.gridworld_mdp(grid))
        else:
            model = pomdp_to_psr(envs.gridworld_pomdp(grid))
    save_model(model, args.out)
    _emit({"out": args.out, "k": model.k, "d": model.d, "A": model.num_actions,
           "O": model.num_observations, "fingerprint": model.fingerprint})
    return EXIT_OK


def cmd_run_dp(args):
    model = load_model(args.model)
    if args.gamma is not None:
        model = type(model)(q1=model.q1, u=model.u, F=model.F, rows=model.rows,
                            blocks=model.blocks, gamma=args.gamma, meta=model.meta)
    directions = dp.sample_directions(args.seed, args.directions, model.d, model.k)
    config = dp.BackupConfig(monotone=args.monotone, max_iters=args.max_iters,
                             convergence_tol=args.tol, scope=args.scope, workers=_workers())
    fresh = _fresh_sets(model, args.seed, args.fresh_seeds, args.directions)
    sfset, trace = dp.run_dp(model, config, directions, fresh=fresh,
                             fresh_every=args.fresh_every)
    dp.save_sfset(sfset, args.out)
    if args.trace:
        with open(args.trace, "w") as fh:
            fh.write(trace.to_csv(timing=args.timing))
    _emit({"out": args.out, "trace": args.trace, "iterations": len(trace.iterations),
           "converged": trace.converged,
           "final_error_optimized": trace.max_error_optimized[-1],
           "final_error_fresh": trace.max_error_fresh[-1]})
    if args.strict and not trace.converged:
        return EXIT_NUMERICAL
    return EXIT_OK


def _load_pair(args):
    model = load_model(args.model)
    sfset = dp.load_sfset(args.set)
    if sfset.fingerprint != model.fingerprint:
        raise UsageError("the SFSet artifact was built for a different model")
    return model, sfset


def cmd_bellman_error(args):
    model, sfset = _load_pair(args)
    opt = dp.bellman_error(model, sfset, sfset.directions)
    n = args.directions or len(sfset.directions)
    fresh = [dp.bellman_error(model, sfset, fs).max
             for fs in _fresh_sets(model, args.seed, args.fresh_seeds, n)]
    _emit({"max_error_optimized": opt.max, "max_error_fresh_per_seed": fresh,
           "max_error_fresh_mean": float(np.mean(fresh)) if fresh else None})
    return EXIT_OK


def cmd_plan(args):
    model, sfset = _load_pair(args)
    r = _vector(args.reward)
    if r.shape != (model.d,):
        raise UsageError(f"--reward needs {model.d} coefficients")
    alphas = planner.alpha_vectors(sfset, model, r)
    states = args.state or [None]
    out = []
    for text in states:
        q = _state(model, text)
        value, action = planner.plan(sfset, model, r, q)
        out.append({"state": q.tolist(), "value": value, "action": int(action),
                    "alpha_count": int(len(alphas))})
    _emit(out[0] if len(out) == 1 else out)
    return EXIT_OK


def cmd_imitate(args):
    model, sfset = _load_pair(args)
    if args.target.startswith("from-policy"):
        parts = args.target.split(None, 1)
        if len(parts) != 2:
            raise UsageError("use --target 'from-policy <tree.json>'")
        with open(parts[1]) as fh:
            tree = PolicyTree.from_json(fh.read())
        tail = None if args.tail_action is None else constant_action_matrix(model, args.tail_action)
        target = successor_matrix(model, tree, tail) @ model.q1
    else:
        target = _vector(args.target)
    res = imitation.rollout_match(sfset, model, target, horizon=args.horizon,
                                  num_rollouts=args.rollouts, seed=args.seed)
    if args.csv:
        header = "# sfsets rollouts v1\n" + ",".join(f"f{i}" for i in range(model.d))
        np.savetxt(args.csv, res.features, delimiter=",", header=header, comments="",
                   fmt="%.17g")
    _emit({"target": target.tolist(), "mean": res.mean.tolist(),
           "standard_error": res.standard_error.tolist(), "rollouts": args.rollouts,
           "horizon": res.horizon, "truncation_bound": res.truncation_bound,
           "max_drift": res.max_drift, "max_post_projection": res.max_post_projection},
          args.summary)
    return EXIT_OK


def cmd_oracle_compare(args):
    model, sfset = _load_pair(args)
    H = sfset.iteration + 1 if args.horizon is None else args.horizon
    H = None if H == "inf" else int(H)
    if oracle.mdp_from_psr(model) is not None:
        exact = oracle.MdpExactSupport(model, H)
    else:
        if H is None:
            raise UsageError("infinite-horizon comparison needs an MDP model")
        exact = oracle.exact_sfset(model, H, cap=args.cap)
    fresh = dp.sample_directions(FRESH_SEED_OFFSET + args.seed, args.probes, model.d, model.k)
    states = np.eye(model.k) if oracle.mdp_from_psr(model) is not None else [model.q1]
    opt = oracle.support_gap(exact, sfset, model, sfset.directions, states)
    new = oracle.support_gap(exact, sfset, model, fresh, states)
    # the exact set at horizon H is within gamma^H max|F| / (1 - gamma) of the limit
    fnorm = float(max(np.linalg.norm(F) for F in model.F))
    tail = 0.0 if H is None else model.gamma**H * fnorm / (1.0 - model.gamma)
    threshold = 1e-6 + tail
    _emit({"horizon": H if H is not None else "inf", "set_iteration": sfset.iteration,
           "optimized": opt.to_dict(), "fresh": new.to_dict(), "threshold": threshold,
           "within_threshold": bool(opt.max <= threshold)})
    return EXIT_OK


def build_parser():
    p = _Parser(prog="python -m sfsets", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    b = sub.add_parser("build-env", help="write a benchmark model as JSON")
    b.add_argument("--env", choices=["gridworld", "gridworld-pomdp", "mountain-car"],
                   required=True)
    b.add_argument("--size", type=int, default=None)
    b.add_argument("--noise", type=float, default=0.05)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--gamma", type=float, default=0.9)
    b.add_argument("--random-walls", action="store_true")
    b.add_argument("--density", type=float, default=0.2)
    b.add_argument("--features", choices=["coordinates", "rgb"], default="coordinates")
    b.add_argument("--stop-action", action="store_true")
    b.add_argument("--substeps", type=_positive, default=5)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_env)

    r = sub.add_parser("run-dp", help="point-based DP; writes an SFSet and a trace CSV")
    r.add_argument("--model", required=True)
    r.add_argument("--directions", type=_positive, default=50)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--max-iters", type=_positive, default=1000)
    r.add_argument("--tol", type=float, default=None)
    r.add_argument("--gamma", type=float, default=None)
    r.add_argument("--monotone", action="store_true")
    r.add_argument("--scope", choices=list(dp.SCOPES), default="per_pair")
    r.add_argument("--fresh-seeds", type=int, default=25)
    r.add_argument("--fresh-every", type=_positive, default=1)
    r.add_argument("--out", required=True)
    r.add_argument("--trace", default=None)
    r.add_argument("--strict", action="store_true")
    r.add_argument("--timing", action="store_true", help="add a wall_time column")
    r.set_defaults(func=cmd_run_dp)

    e = sub.add_parser("bellman-error", help="Bellman error of a stored set")
    e.add_argument("--model", required=True)
    e.add_argument("--set", required=True)
    e.add_argument("--directions", type=_positive, default=None)
    e.add_argument("--fresh-seeds", type=int, default=25)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_bellman_error)

    pl = sub.add_parser("plan", help="optimal value and action for a linear reward")
    pl.add_argument("--model", required=True)
    pl.add_argument("--set", required=True)
    pl.add_argument("--reward", required=True, help="JSON list of d coefficients")
    pl.add_argument("--state", action="append", default=None,
                    help="basis index or JSON vector (repeatable; default q1)")
    pl.set_defaults(func=cmd_plan)

    im = sub.add_parser("imitate", help="feature-matching rollouts")
    im.add_argument("--model", required=True)
    im.add_argument("--set", required=True)
    im.add_argument("--target", required=True,
                    help="JSON vector or 'from-policy <tree.json>'")
    im.add_argument("--tail-action", type=int, default=None)
    im.add_argument("--rollouts", type=_positive, default=1000)
    im.add_argument("--horizon", type=_positive, default=None)
    im.add_argument("--seed", type=int, default=0)
    im.add_argument("--csv", default=None)
    im.add_argument("--summary", default=None)
    im.set_defaults(func=cmd_imitate)

    oc = sub.add_parser("oracle-compare", help="support gap against the exact set")
    oc.add_argument("--model", required=True)
    oc.add_argument("--set", required=True)
    oc.add_argument("--horizon", default=None, help="integer or 'inf' (MDPs)")
    oc.add_argument("--probes", type=_positive, default=200)
    oc.add_argument("--seed", type=int, default=0)
    oc.add_argument("--cap", type=_positive, default=10**6)
    oc.set_defaults(func=cmd_oracle_compare)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        _emit({"error": "usage", "message": str(exc)})
        return EXIT_USAGE
    except EnumerationTooLarge as exc:
        _emit({"error": "EnumerationTooLarge", "message": str(exc)})
        return EXIT_CAP
    except InfeasibleTarget as exc:
        _emit({"error": "InfeasibleTarget", "message": str(exc), "distance": exc.distance,
               "nearest": None if exc.nearest is None else np.asarray(exc.nearest).tolist()})
        return EXIT_NUMERICAL
    except (SFSetError, FloatingPointError, np.linalg.LinAlgError) as exc:
        _emit({"error": type(exc).__name__, "message": str(exc)})
        return EXIT_NUMERICAL
    except (OSError, ValueError) as exc:
        _emit({"error": "usage", "message": str(exc)})
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
