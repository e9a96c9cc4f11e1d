"""Command line entry point: ``firebreak <command> --config FILE --seed N --out DIR``.

Exit status is 0 on success, 2 on configuration errors and 3 on runtime
failures.
"""
from __future__ import annotations

import argparse
import logging
import sys

import torch

from . import harness
from .env import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("firebreak")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="flat key = value configuration file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration entry (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="firebreak", description="Firebreak placement with deep Q-learning.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="untreated burn-probability map")
    s.add_argument("--sims", type=int, help="number of fires (overrides n_sims)")

    s = sub.add_parser("demo-gen", parents=[common], help="generate DPV demonstrations")
    s.add_argument("--episodes", type=int, help="overrides demo_episodes")

    s = sub.add_parser("pretrain", parents=[common], help="pre-train on demonstrations")
    s.add_argument("--demos", help="demonstration file (default OUT/demos.jsonl)")

    s = sub.add_parser("train", parents=[common], help="pre-train and train an agent")
    s.add_argument("--algo", choices=sorted(harness.agentmod.ALGO_ALIASES))
    s.add_argument("--no-demos", action="store_true", help="skip demonstrations and pre-training")
    s.add_argument("--demos", help="demonstration file (default OUT/demos.jsonl)")
    s.add_argument("--resume", help="trainer state to continue from (e.g. OUT/checkpoints/last.pt)")

    s = sub.add_parser("evaluate", parents=[common], help="burned percentage of a policy")
    s.add_argument("--policy", choices=harness.POLICIES, required=True)
    s.add_argument("--checkpoint", help="model .npz for --policy trained")

    s = sub.add_parser("gradcam", parents=[common], help="attention maps along a greedy rollout")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--episode-seed", type=int, default=0)

    s = sub.add_parser("shrink", parents=[common], help="nearest-neighbour downsampling")
    s.add_argument("--rows", type=int, required=True)
    s.add_argument("--cols", type=int, required=True)
    return p


def _spec(args) -> harness.ExperimentSpec:
    values = harness.load_config(args.config)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (x.strip() for x in item.split("=", 1))
        values[key] = value
    if getattr(args, "algo", None):
        values["algo"] = args.algo
    return harness.build_spec(values, args.seed, args.out)


def run(args) -> None:
    spec = _spec(args)
    cmd = args.command
    if cmd == "simulate":
        if args.sims is not None:
            spec.n_sims = args.sims
        res = harness.cmd_simulate(spec)
        print(f"mean burned {res['mean_burned']:.3f} cells ({res['mean_burned_pct']:.2f}%)")
    elif cmd == "demo-gen":
        print(harness.cmd_demo_gen(spec, args.episodes))
    elif cmd == "pretrain":
        t = harness.cmd_pretrain(spec, args.demos)
        print(f"pre-trained {len(t.pretrain_losses)} steps, final loss {t.pretrain_losses[-1]:.4f}"
              if t.pretrain_losses else "no pre-training steps")
    elif cmd == "train":
        t = harness.cmd_train(spec, args.no_demos, args.demos, args.resume)
        print(f"trained {t.episode} episodes, smoothed return {harness.smoothed_return(t.curve):.4f}")
    elif cmd == "evaluate":
        r = harness.cmd_evaluate(spec, args.policy, args.checkpoint)
        print(f"{r.policy}: {r.mean_pct:.3f}% burned (placed {list(r.placed)})")
    elif cmd == "gradcam":
        maps = harness.cmd_gradcam(spec, args.checkpoint, args.episode_seed)
        print(f"wrote {len(maps)} attention maps")
    elif cmd == "shrink":
        print(harness.cmd_shrink(spec, args.rows, args.cols))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)   # keeps results independent of the machine's core count
    try:
        run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
