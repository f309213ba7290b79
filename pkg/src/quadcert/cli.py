"""Command-line entry point: certify, train, Lipschitz tools, evaluation and plots.

Exit codes: 0 success, 1 usage or input error, 2 infeasible or uncertified,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import nn
from .config import ConfigError, dump_config, load_config
from .dynamics import Quadcopter, SimulationError, read_trajectory_csv, zero_policy
from .evaluation import (UncertifiedControllerError, check_certified, compute_metrics, net_policy,
                         run_position, run_trajectory)
from .lmi import (Certificate, InitialInfeasibleError, SearchTrace, SolverError, SyntheticGate,
                  config_hash, maximize_L_S, quad_problem)
from .plotting import EmptyInputError, plot_learning_curve, plot_position, plot_trajectory
from .rl import EnvConfig, NonFiniteLossError, read_curve, train
from .sector import GROUP_NAMES, DomainBox, SectorBoundError
from .trajectory import S_CURVE, min_snap, read_waypoints_csv

log = logging.getLogger("quadcert")

EXIT_OK, EXIT_USAGE, EXIT_UNCERTIFIED, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out(args, name):
    if name is None:
        return None
    if os.path.isabs(name) or args.out_dir is None:
        return name
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _quad(cfg) -> Quadcopter:
    return Quadcopter(cfg.quad, cfg.gains)


def _config_text(cfg) -> str:
    return dump_config(cfg)


# --- subcommands -------------------------------------------------------------------

def cmd_certify(args, cfg):
    c = cfg.certify
    if c.system == "gate":
        problem = SyntheticGate(c.gate_a)
        S0 = DomainBox(np.array([-c.S0[0]]), np.array([c.S0[0]]))
    else:
        problem = quad_problem(_quad(cfg), cfg.alpha, c.grid())
        S0 = DomainBox.symmetric(c.S0)
    trace = SearchTrace()
    try:
        L, S, cert = maximize_L_S(problem, c.L0, S0, c.schedule(), trace,
                                  config_hash(_config_text(cfg)))
    except InitialInfeasibleError as exc:
        print(f"certify: {exc}", file=sys.stderr)
        return EXIT_UNCERTIFIED
    path = _out(args, args.out)
    cert.save(path)
    print(f"L* = {L:.6g}")
    names = GROUP_NAMES if len(S.groups) == len(GROUP_NAMES) else [f"group{g}" for g in range(len(S.groups))]
    for name, r in zip(names, S.group_radii()):
        print(f"S* {name}: (-{r:.6g}, {r:.6g})")
    print(f"margin = {cert.margin:.6g}")
    print(f"checks = {len(trace.L)}; certificate written to {path}")
    return EXIT_OK


def cmd_train(args, cfg):
    ppo = cfg.ppo
    if args.iterations is not None:
        ppo = dataclasses.replace(ppo, iterations=args.iterations)
    env = EnvConfig(quad=_quad(cfg), alpha=cfg.alpha, dt=cfg.eval.dt)
    _, rows = train(ppo, env, _out(args, args.out), _out(args, args.curve))
    if rows:
        print(f"iterations = {len(rows)}; final mean reward = {rows[-1][1]:.5g}")
    return EXIT_OK


def cmd_lipschitz(args, cfg):
    net = nn.load(args.actor)
    est = nn.ESTIMATORS[args.method](net)
    flag = " (conservative fallback)" if est.conservative else ""
    print(f"{est.method}: {est.value:.9g}{flag}")
    return EXIT_OK


def cmd_enforce(args, cfg):
    net = nn.load(args.actor)
    if args.target is not None:
        target = args.target
    elif args.cert is not None:
        target = Certificate.load(args.cert).L_star
    else:
        raise UsageError("enforce-lipschitz needs --cert or --target")
    scaled, est, c = nn.scale_final_layer(net, target)
    nn.save(scaled, _out(args, args.out))
    print(f"c = {c:.6g}; estimate after scaling = {float(est):.6g} < target {target:.6g}")
    return EXIT_OK


def _policy(args, cfg):
    if args.mode == "nominal":
        return zero_policy, None
    if args.actor is None:
        raise UsageError("--mode combined needs --actor")
    net = nn.load(args.actor)
    cert = Certificate.load(args.cert) if args.cert else None
    est = check_certified(net, cert, args.uncertified)
    return net_policy(net), est


def _report(args, traj, extra):
    csv_path = _out(args, args.out)
    traj.to_csv(csv_path)
    m = compute_metrics(read_trajectory_csv(csv_path), args.safety_box)
    report = {"csv": csv_path, "seed": args.seed, **extra, **m.as_dict()}
    for k, v in report.items():
        print(f"{k} = {v}")
    if args.summary:
        with open(_out(args, args.summary), "w") as fh:
            json.dump(report, fh, indent=1, allow_nan=True)
            fh.write("\n")
    if m.left_safety_box:
        print("warning: run left the safety box", file=sys.stderr)


def cmd_eval_position(args, cfg):
    policy, est = _policy(args, cfg)
    T = cfg.eval.duration if args.duration is None else args.duration
    traj = run_position(policy, cfg.eval.target, cfg.eval.psi_target, T, cfg.eval.dt,
                        args.seed, _quad(cfg), cfg.alpha)
    args.safety_box = cfg.eval.safety_box
    _report(args, traj, {"mode": args.mode, "lipschitz_estimate": est})
    return EXIT_OK


def cmd_eval_trajectory(args, cfg):
    policy, est = _policy(args, cfg)
    wps = read_waypoints_csv(args.waypoints) if args.waypoints else list(S_CURVE)
    plan = min_snap(wps)
    traj = run_trajectory(policy, plan, args.duration, cfg.eval.dt, args.seed, _quad(cfg), cfg.alpha)
    args.safety_box = cfg.eval.safety_box
    _report(args, traj, {"mode": args.mode, "lipschitz_estimate": est})
    return EXIT_OK


def cmd_plot(args, cfg):
    prefix = _out(args, args.out)
    if args.kind == "position":
        png, data, n = plot_position(args.csv, prefix)
    elif args.kind == "trajectory":
        if len(args.csv) != 1:
            raise UsageError("trajectory plot takes one CSV")
        png, data, n = plot_trajectory(args.csv[0], prefix)
    else:
        png, data, n = plot_learning_curve(read_curve(args.csv[0]), prefix)
    print(f"{n} panels -> {png}, {data}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quadcert", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI experiment configuration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", help="directory for relative output paths")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("certify", help="maximal (L, S) search and certificate")
    s.add_argument("--out", default="cert.json")
    s.set_defaults(func=cmd_certify)

    s = sub.add_parser("train", help="PPO training of the learned controller")
    s.add_argument("--out", default="actor.net")
    s.add_argument("--curve", default="curve.csv")
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("lipschitz", help="Lipschitz estimate of a network")
    s.add_argument("--model", "--actor", dest="actor", required=True)
    s.add_argument("--method", choices=sorted(nn.ESTIMATORS), default="sdp")
    s.set_defaults(func=cmd_lipschitz)

    s = sub.add_parser("enforce-lipschitz", help="rescale the final layer below L*")
    s.add_argument("--model", "--actor", dest="actor", required=True)
    s.add_argument("--cert")
    s.add_argument("--target", type=float)
    s.add_argument("--out", default="actor_scaled.net")
    s.set_defaults(func=cmd_enforce)

    for name, fn in (("eval-position", cmd_eval_position), ("eval-trajectory", cmd_eval_trajectory)):
        s = sub.add_parser(name)
        s.add_argument("--mode", choices=("nominal", "combined"), default="nominal")
        s.add_argument("--actor")
        s.add_argument("--cert")
        s.add_argument("--uncertified", action="store_true",
                       help="allow a combined run without a covering certificate")
        s.add_argument("--duration", type=float)
        s.add_argument("--out", default=f"{name}.csv")
        s.add_argument("--summary")
        if name == "eval-trajectory":
            s.add_argument("--waypoints", help="CSV with columns x,y,z,t")
        s.set_defaults(func=fn)

    s = sub.add_parser("plot", help="figures and plot data from run CSVs")
    s.add_argument("--kind", choices=("position", "trajectory", "curve"), default="position")
    s.add_argument("--out", default="figure")
    s.add_argument("csv", nargs="+")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.cmd == "train":
            cfg = dataclasses.replace(cfg, ppo=dataclasses.replace(cfg.ppo, seed=args.seed))
        return args.func(args, cfg)
    except (UsageError, ConfigError, EmptyInputError, FileNotFoundError, nn.MalformedModelError) as exc:
        print(f"quadcert {args.cmd}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UncertifiedControllerError as exc:
        print(f"quadcert {args.cmd}: {exc}", file=sys.stderr)
        return EXIT_UNCERTIFIED
    except (SolverError, SectorBoundError, SimulationError, NonFiniteLossError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"quadcert {args.cmd}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"quadcert {args.cmd}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
