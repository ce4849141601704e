"""Command-line front end.

Subcommands: collect-expert, collect-novice, train, evaluate, reconstruct,
probe, sweep-lambda, plot.  Exit codes: 0 success, 2 usage error, 3 config
validation failure.  A global --seed overrides the configured seed(s), and
the DACSSM_OUT environment variable re-roots all relative output paths.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness, plots
from .data import load_dataset, read_episode
from .envworld import EnvSpec, generate_dataset, shift_preset
from .harness import ConfigError
from .planner import CEMConfig
from .trainer import load_checkpoint, make_train_state, training_loop

USAGE_EXIT = 2
CONFIG_EXIT = 3


def resolve_out(path) -> Path:
    """Relative outputs land under $DACSSM_OUT when it is set."""
    path = Path(path)
    root = os.environ.get("DACSSM_OUT")
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _parse_dot_overrides(extra: list[str]) -> list[str]:
    """Turn leftover '--section.key value' (or =value) flags into overrides."""
    overrides = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not (tok.startswith("--") and "." in tok):
            raise argparse.ArgumentTypeError(f"unknown argument: {tok}")
        body = tok[2:]
        if "=" in body:
            overrides.append(body)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise argparse.ArgumentTypeError(f"missing value for {tok}")
            overrides.append(f"{body}={extra[i + 1]}")
            i += 2
    return overrides


def _env_from_args(args) -> EnvSpec:
    return EnvSpec(task=args.task, image_hw=args.image_hw,
                   horizon=args.horizon, action_repeat=args.action_repeat)


def _add_env_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=("point-catch", "spinner"), default="point-catch")
    p.add_argument("--image-hw", type=int, default=32)
    p.add_argument("--horizon", type=int, default=250)
    p.add_argument("--action-repeat", type=int, default=2)
    p.add_argument("--shift", default="expert",
                   help="appearance preset (expert/palette/palette_tilt/distractor)")


def cmd_collect(args, overrides, policy: str) -> int:
    spec = _env_from_args(args)
    out = resolve_out(args.out)
    manifest = generate_dataset(spec, shift_preset(args.shift), policy,
                                args.episodes, out, seed=args.seed or 0)
    print(f"wrote {manifest['count']} {policy} episodes to {out}")
    return 0


def cmd_train(args, overrides) -> int:
    cfg = harness.load_run_config(args.config, overrides)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
        cfg.seeds = [args.seed]
    out = resolve_out(args.out or cfg.out_dir)
    state = make_train_state(cfg.ssm, cfg.train)
    buffers = harness.load_buffers(cfg)
    ckpt = training_loop(state, harness.make_env(cfg), buffers, cfg.cem, out)
    print(f"final checkpoint: {ckpt}")
    return 0


def cmd_evaluate(args, overrides) -> int:
    state = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = harness.load_run_config(args.config, overrides)
        env = harness.make_env(cfg)
        cem = cfg.cem
    else:
        env_spec = _env_from_args(args)
        env = harness.make_env(harness.RunConfig(
            env=env_spec, shift=args.shift, ssm=state.ssm_cfg,
            train=state.cfg, cem=CEMConfig()))
        cem = CEMConfig()
    if args.reward_mode:
        cem = replace(cem, reward_mode=args.reward_mode)
    seeds = args.seeds or [args.seed if args.seed is not None else 0]
    report = harness.evaluate(state, env, cem, n_episodes=args.episodes, seeds=seeds)
    out = resolve_out(args.out)
    harness.write_report(report, out)
    plots.plot_returns(report.to_dict(), out / "returns.svg")
    print(f"mean={report.mean:.2f} std={report.std:.2f} "
          f"p5={report.p5:.2f} p95={report.p95:.2f} -> {out / 'report.json'}")
    return 0


def cmd_reconstruct(args, overrides) -> int:
    state = load_checkpoint(args.checkpoint)
    episode = read_episode(args.episode)
    probe = None
    if args.probe_data:
        probe_eps = list(load_dataset(args.probe_data))
        probe = harness.train_probe_decoder(state.model, probe_eps,
                                            seed=args.seed or 0)
    rows = harness.label_swap_reconstruction(state.model, episode,
                                             context_steps=args.context_steps,
                                             probe=probe)
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plots.plot_reconstruction_grid(rows, out / "reconstruction.svg")
    if args.frames:
        import matplotlib.pyplot as plt
        frames_dir = out / "frames"
        frames_dir.mkdir(exist_ok=True)
        for name, row in rows.items():
            for t, frame in enumerate(row):
                plt.imsave(frames_dir / f"{name}_{t:04d}.png",
                           np.clip(frame, 0, 1))
    print(f"reconstruction grid: {out / 'reconstruction.svg'}")
    return 0


def cmd_probe(args, overrides) -> int:
    state = load_checkpoint(args.checkpoint)
    episodes = []
    for d in args.data:
        episodes.extend(load_dataset(d))
    try:
        acc = harness.probe_domain(state.model, episodes, seed=args.seed or 0)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.json").write_text(json.dumps(
        {"accuracy": acc, "n_episodes": len(episodes)}, indent=2))
    print(f"domain probe accuracy: {acc:.3f}")
    return 0


def cmd_sweep(args, overrides) -> int:
    cfg = harness.load_run_config(args.config, overrides)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out:
        cfg.out_dir = str(resolve_out(args.out))
    else:
        cfg.out_dir = str(resolve_out(cfg.out_dir))
    lambdas = [float(x) for x in args.lambdas.split(",")] if args.lambdas \
        else list(harness.LAMBDA_SWEEP_DEFAULT)
    summary = harness.sweep_lambda(cfg, lambdas, n_eval_episodes=args.episodes)
    plots.plot_lambda_sweep(summary, Path(cfg.out_dir) / "sweep.svg")
    print(f"sweep summary: {Path(cfg.out_dir) / 'sweep.json'}")
    return 0


def cmd_plot(args, overrides) -> int:
    out = resolve_out(args.out)
    if args.kind == "returns":
        data = json.loads(Path(args.data).read_text())
        plots.plot_returns(data, out)
    elif args.kind == "sweep":
        data = json.loads(Path(args.data).read_text())
        plots.plot_lambda_sweep(data, out)
    elif args.kind == "traces":
        data = json.loads(Path(args.data).read_text())
        plots.plot_reward_traces(data, out)
    else:
        plots.plot_metrics(args.data, out)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dacssm")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the configured seed")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(name, **kw):
        p = sub.add_parser(name, **kw)
        # the global --seed is also accepted after the subcommand
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        return p

    for name in ("collect-expert", "collect-novice"):
        p = add_parser(name, help=f"record scripted {name.split('-')[1]} episodes")
        _add_env_flags(p)
        p.add_argument("--episodes", type=int, default=100)
        p.add_argument("--out", required=True)

    p = add_parser("train", help="run the training loop from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)

    p = add_parser("evaluate", help="closed-loop evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    _add_env_flags(p)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seeds", type=int, nargs="*", default=None)
    p.add_argument("--reward-mode", choices=("task", "imitation", "dual"),
                   default=None)
    p.add_argument("--out", default="eval")

    p = add_parser("reconstruct", help="label-swap reconstruction grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episode", required=True, help="a .dace episode file")
    p.add_argument("--context-steps", type=int, default=5)
    p.add_argument("--probe-data", default=None,
                   help="dataset dir for training the label-free probe decoder")
    p.add_argument("--frames", action="store_true", help="also dump PNG frames")
    p.add_argument("--out", default="recon")

    p = add_parser("probe", help="linear domain probe on frozen contexts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True, help="dataset dirs")
    p.add_argument("--out", default="probe")

    p = add_parser("sweep-lambda", help="train+evaluate per confusion coefficient")
    p.add_argument("--config", required=True)
    p.add_argument("--lambdas", default=None, help="comma-separated, e.g. 0,0.3,1")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--out", default=None)

    p = add_parser("plot", help="re-render a figure from its raw data")
    p.add_argument("--kind", choices=("returns", "sweep", "traces", "metrics"),
                   required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    return parser


_DISPATCH = {
    "collect-expert": lambda a, o: cmd_collect(a, o, "expert"),
    "collect-novice": lambda a, o: cmd_collect(a, o, "novice"),
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "reconstruct": cmd_reconstruct,
    "probe": cmd_probe,
    "sweep-lambda": cmd_sweep,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        overrides = _parse_dot_overrides(extra)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else USAGE_EXIT
    except argparse.ArgumentTypeError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    try:
        return _DISPATCH[args.command](args, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return CONFIG_EXIT


if __name__ == "__main__":
    sys.exit(main())
