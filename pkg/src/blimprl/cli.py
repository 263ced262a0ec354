"""Command-line entry point: ``blimprl {train,eval,ablate,rollout}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as C
from . import policy as pol
from .env import BlimpEnv, YawEnv, episode_log_header, write_episode_log
from .evaluation import (
    emit_table,
    pid_only,
    run_ablation,
    run_episode,
    run_grid,
    train_with_eval,
    trajectory,
)
from .sim import write_trajectory_csv

log = logging.getLogger("blimprl")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", action="append", default=[], metavar="FILE",
                   help="TOML file merged over the defaults (repeatable)")
    p.add_argument("--preset", action="append", default=[], choices=C.PRESETS,
                   help="built-in preset applied before --config files (repeatable)")
    p.add_argument("--seed", type=int, help="seed for training, evaluation and rollouts")
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--workers", type=int, help="environment streams per rollout batch")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                   help="dotted overrides, e.g. ppo.gamma=0.999")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blimprl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a residual agent")
    p.add_argument("--task", choices=("yaw", "blimp"))
    _common(p)

    p = sub.add_parser("eval", help="evaluate DRRL and PID over the wind/buoyancy grid")
    p.add_argument("--checkpoint", help="policy checkpoint for the drrl rows")
    p.add_argument("--dump-trajectories", action="store_true",
                   help="also write a state CSV for every run")
    _common(p)

    p = sub.add_parser("ablate", help="yaw-task ablation over LSTM, mixer and PID quality")
    _common(p)

    p = sub.add_parser("rollout", help="one deterministic episode with a full per-step log")
    p.add_argument("--checkpoint", help="policy checkpoint or 'pid-only'")
    p.add_argument("--task", choices=("yaw", "blimp"))
    p.add_argument("--trajectory", help="random, square, square40, coil or coil90 (blimp task)")
    _common(p)
    return parser


def resolve_args(args) -> dict:
    tree = C.resolve(args.config, args.overrides, args.preset)
    run = {k: getattr(args, k) for k in ("task", "checkpoint", "trajectory")
           if getattr(args, k, None) is not None}
    extra = {"run": run}
    if args.seed is not None:
        run["seed"] = args.seed
        extra["ppo"] = {"seed": args.seed}
        extra["eval"] = {"seed": args.seed}
    if args.workers is not None:
        if args.workers < 1:
            raise C.ConfigError("--workers must be at least 1")
        extra.setdefault("ppo", {}).update(workers=args.workers,
                                           batch_size=args.workers * tree["ppo"]["horizon"])
    tree = C.merge(tree, extra)
    C.build_all(tree)
    return tree


def _load_checkpoint(path: str, obs_dim: int):
    if not path:
        raise C.ConfigError("a checkpoint is required (--checkpoint or run.checkpoint)")
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    net = pol.load(path)
    if net.obs_dim != obs_dim:
        raise ValueError(f"checkpoint expects {net.obs_dim} observations, task provides {obs_dim}")
    return net


def cmd_train(tree: dict, out: Path) -> int:
    task = tree["run"]["task"]
    env_cfg = C.env_config(tree)
    ppo_cfg = C.ppo_config(tree)
    ev = tree["eval"]

    def progress(row):
        print(f"iter {row['iteration']:4d}  steps {row['timesteps']:8d}  "
              f"return {row['mean_return']:9.4f}  eval {row['eval_return']:9.4f}  "
              f"kl {row['approx_kl']:.5f}", flush=True)

    result, initial, _ = train_with_eval(task, env_cfg, C.policy_config(tree), ppo_cfg,
                                         ev["train_eval_every"], ev["train_eval_episodes"],
                                         out_dir=out, progress=progress)
    if initial is not None:
        print(f"initial eval return {initial:.4f}")
    print(f"wrote {out / 'curve.csv'} and {out / 'policy.bin'}")
    return 0


def cmd_eval(tree: dict, out: Path, dump: bool = False) -> int:
    ecfg = C.eval_config(tree)
    env_cfg = C.blimp_env_config(tree)
    net = None
    if "drrl" in ecfg.controllers:
        net = _load_checkpoint(tree["run"]["checkpoint"], BlimpEnv.obs_dim)
    dump_dir = None
    if dump:
        dump_dir = out / "trajectories"
        dump_dir.mkdir(exist_ok=True)
    note = ""
    if ecfg.desk:
        note = f"desk preset: runs={ecfg.runs} duration={ecfg.duration:g}s"
    rows = run_grid(net, ecfg, env_cfg, dump_dir=dump_dir,
                    progress=lambda r: print(f"{r.trajectory:7s} wind {r.wind_speed:<4g} "
                                             f"buoyancy {r.buoyancy:<5g} {r.controller:5s} r {r.r:.4f}",
                                             flush=True))
    text = emit_table(rows, out / "report.csv", note)
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_ablate(tree: dict, out: Path) -> int:
    ab = tree["ablation"]
    ev = tree["eval"]
    axes = {"lstm": tuple(ab["lstm"]), "mixer": tuple(ab["mixers"]), "pid": tuple(ab["pids"])}

    def progress(lstm, mixer, pid, seed, res):
        print(f"lstm={int(lstm)} mixer={mixer} pid={pid} seed={seed} "
              f"final eval {res.curve[-1]['eval_return']:.4f}", flush=True)

    base = C.yaw_env_config(tree)
    run_ablation(axes, tuple(ab["seeds"]), C.ppo_config(tree), C.policy_config(tree), base,
                 out / "ablation.csv", ev["train_eval_every"], ev["train_eval_episodes"], progress)
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_rollout(tree: dict, out: Path) -> int:
    run = tree["run"]
    task = run["task"]
    env_cfg = C.env_config(tree)
    ckpt = run["checkpoint"]
    if ckpt == "pid-only":
        env_cfg, net = pid_only(env_cfg), None
    else:
        net = _load_checkpoint(ckpt, BlimpEnv.obs_dim if task == "blimp" else YawEnv.obs_dim)
    if task == "blimp" and run["trajectory"] != "random":
        env = BlimpEnv(env_cfg, path=trajectory(run["trajectory"], tree["eval"]["square_edge"]).build(),
                       loop=True)
    elif task == "blimp":
        env = BlimpEnv(env_cfg)
    else:
        env = YawEnv(env_cfg)
    res = run_episode(env, net, run["seed"], deterministic=True, record=True)
    write_episode_log(out / "rollout.csv", episode_log_header(env), res.rows)
    write_trajectory_csv(out / "trajectory.csv", res.states)
    print(f"return {res.total:.6f} over {res.steps} steps; wrote {out / 'rollout.csv'}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        tree = resolve_args(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        C.dump(tree, out / "resolved_config.toml")
        if args.command == "train":
            return cmd_train(tree, out)
        if args.command == "eval":
            return cmd_eval(tree, out, args.dump_trajectories)
        if args.command == "ablate":
            return cmd_ablate(tree, out)
        return cmd_rollout(tree, out)
    except (C.ConfigError, ValueError, FileNotFoundError, RuntimeError, KeyError) as exc:
        print(f"blimprl {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
