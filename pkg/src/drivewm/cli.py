"""Command-line entry points.

Subcommands::

    gen      generate scenario JSON files from a template
    train    run the training schedule on a scenario directory
    eval     evaluate a checkpoint and write a metrics report
    rollout  replay one scenario greedily, dumping a JSON-lines trace
    inspect  summarize a checkpoint or scenario file

Exit codes: 0 success, 2 configuration/validation error, 3 I/O error,
4 numeric failure. The DRIVEWM_CONFIG environment variable supplies the
default --config path for ``train``.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint
from .errors import DriveWMError, TrainingError, ValidationError
from .scenarios import TEMPLATES, TemplateParams, generate
from .tracks import Scenario
from .trainer import (
    PolicyDriver,
    TrainConfig,
    evaluate,
    load_train_config,
    observe_frame,
    train_loop,
)

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _load_scenario_dir(path: Path) -> list[Scenario]:
    files = sorted(path.glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no scenario .json files under {path}")
    return [Scenario.load(f) for f in files]


def cmd_gen(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        params = TemplateParams(
            template=args.template,
            traffic_density=args.density,
            speed_range=(args.speed_min, args.speed_max),
            seed=args.seed + i,
            tightness=args.tightness,
        )
        scenario = generate(params)
        path = out_dir / f"{scenario.scenario_id}.json"
        scenario.save(path)
        print(path)
    return 0


def cmd_train(args) -> int:
    if args.config:
        config = load_train_config(args.config)
    else:
        config = TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.steps is not None:
        config.steps = args.steps
    scenarios = _load_scenario_dir(Path(args.scenarios))
    result = train_loop(config, scenarios, args.out_dir)
    print(f"steps={result.steps} updates={result.updates} episodes={result.episodes}")
    if result.final_report is not None:
        print(result.final_report.to_text(), end="")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    scenarios = _load_scenario_dir(Path(args.scenarios))
    report, outcomes = evaluate(
        bundle["world_model"], bundle["actor"], scenarios, args.repeats
    )
    print(report.to_text(), end="")
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".json":
            path.write_text(report.to_json())
        else:
            path.write_text(report.to_csv())
        print(f"report: {path}")
    return 0


def cmd_rollout(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    wm, actor = bundle["world_model"], bundle["actor"]
    scenario = Scenario.load(args.scenario)
    from .env import DrivingEnv

    env = DrivingEnv(eval_mode=not args.train_mode)
    driver = PolicyDriver(wm, actor, latent_mode="mode")
    result = env.reset(scenario, args.start_offset_ms)
    trace_path = Path(args.trace)
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    predict = wm.config.decoder_mode == "predict"
    with open(trace_path, "w") as fh, torch.no_grad():
        t = 0
        while not result.done:
            frame = result.observation_raw
            obs = observe_frame(env, frame, wm.config.n_vdi, wm.config.n_vpi)
            state = driver.observe(obs)
            record = {
                "t": t,
                "t_ms": frame.t_ms,
                "ego": list(frame.ego),
                "ego_v": frame.ego_v,
                "vehicles": {
                    env.vehicle_name(vid): list(pose)
                    for vid, pose in sorted(frame.vehicles.items())
                },
            }
            if predict:
                decoded = wm.decode(state)
                record["pred_ego"] = np.round(decoded["ego"][0].numpy(), 4).tolist()
                record["pred_vdi"] = {
                    env.vehicle_name(int(vid)): np.round(decoded["vdi"][0, slot].numpy(), 4).tolist()
                    for slot, vid in enumerate(obs.vdi_ids)
                    if vid >= 0
                }
            action = driver.act("greedy")
            result = env.step(action)
            record.update(
                action=action,
                reward=result.reward,
                done=result.done,
                completion=result.info["completion_ratio"],
                collision=result.info["collision"],
            )
            fh.write(json.dumps(record) + "\n")
            t += 1
    print(f"trace: {trace_path} ({t} steps)")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.suffix == ".json":
        scenario = Scenario.load(path)
        from .metrics import density_level

        ego = scenario.ego_track
        print(f"scenario_id     {scenario.scenario_id}")
        print(f"background      {len(scenario.background)}")
        print(f"time budget     {scenario.time_budget_ms / 1000.0:.1f} s")
        print(f"ego frames      {len(ego.points)}")
        print(f"density level   {density_level(scenario)}")
        return 0
    bundle = load_checkpoint(path)
    wm = bundle["world_model"]
    print(f"format version  1  (package {__version__})")
    print(f"trained steps   {bundle['step']}")
    print(f"return scale    {bundle['return_scale']}")
    print("world model config:")
    for key, value in sorted(vars(wm.config).items()):
        print(f"  {key} = {value}")
    for name, module in (("world_model", wm), ("actor", bundle["actor"]), ("critic", bundle["critic"])):
        count = sum(p.numel() for p in module.parameters())
        print(f"{name:<12} {count:>10,d} parameters")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drivewm",
        description="Individual-level world model driving benchmark: scenario "
        "generation, training, evaluation, and trace inspection.",
    )
    parser.add_argument("--version", action="version", version=f"drivewm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate scenario files")
    p.add_argument("--template", choices=TEMPLATES, default="follow")
    p.add_argument("--n", type=int, default=1, help="number of scenarios (default 1)")
    p.add_argument("--out-dir", default="scenarios", help="output directory (default scenarios)")
    p.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    p.add_argument("--density", type=int, default=2, help="background vehicle count (default 2)")
    p.add_argument("--speed-min", type=float, default=4.5, help="speed range low, m/s (default 4.5)")
    p.add_argument("--speed-max", type=float, default=7.5, help="speed range high, m/s (default 7.5)")
    p.add_argument("--tightness", type=float, default=1.0, help="conflict window scale (default 1.0)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run the training schedule")
    p.add_argument("--config", default=os.environ.get("DRIVEWM_CONFIG"),
                   help="JSON config path (default $DRIVEWM_CONFIG)")
    p.add_argument("--scenarios", required=True, help="directory of scenario .json files")
    p.add_argument("--out-dir", default="runs/run0", help="artifact directory (default runs/run0)")
    p.add_argument("--seed", type=int, default=None, help="override config seed (default None)")
    p.add_argument("--steps", type=int, default=None, help="override config steps (default None)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenarios", required=True, help="directory of scenario .json files")
    p.add_argument("--repeats", type=int, default=5, help="episodes per scenario (default 5)")
    p.add_argument("--report", default=None, help="write CSV (or .json) report here (default None)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="greedy rollout writing a JSON-lines trace")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", required=True, help="scenario .json file")
    p.add_argument("--trace", default="rollout.jsonl", help="trace path (default rollout.jsonl)")
    p.add_argument("--start-offset-ms", type=int, default=0, help="spawn offset (default 0)")
    p.add_argument("--train-mode", action="store_true",
                   help="use training termination (collisions do not end the episode)")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("inspect", help="summarize a checkpoint (.pt) or scenario (.json)")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, DriveWMError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
