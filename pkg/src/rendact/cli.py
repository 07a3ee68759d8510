"""Command-line entry points.

Exit codes: 0 success, 2 usage (bad arguments, missing inputs), 3 data
(malformed or inconsistent files), 4 numerical failure (divergence,
degenerate geometry, lost visibility).  Every command is deterministic
for a fixed --seed; the RD_THREADS environment variable caps evaluation
worker fan-out.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .diffusion import make_schedule
from .errors import (
    BranchAmbiguityError,
    DataFormatError,
    DegenerateGeometryError,
    InfeasibleDemoError,
    NoVisibilityError,
    TrainingDivergedError,
)
from .policy import MlpDenoiser, chunk_meshes, gradient_check, render_chunk, train
from .render import overlay, write_ppm
from .se3 import Twist, expmap
from . import toyenv

DEMO_RETRY_CAP = 20
# Fixed scene used by render-debug so its output can be pinned.
DEBUG_OBJECT = (0.08, -0.04, 0.6)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rendact",
        description="Behaviour cloning with rendered, diffusion-refined actions",
    )
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("demo", help="generate scripted demonstrations")
    d.add_argument("--task", choices=["reach", "push"])
    d.add_argument("--num", type=int, default=20)
    d.add_argument("--sampling", choices=["random", "fps"], default="fps")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.set_defaults(func=cmd_demo)

    t = sub.add_parser("train", help="train a denoiser on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="closed-loop evaluation")
    g = e.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--oracle", action="store_true")
    e.add_argument("--task", choices=["reach", "push"])
    e.add_argument("--episodes", type=int, default=50)
    e.add_argument("--variant", choices=["A", "I", "AI"])
    e.add_argument("--mode", choices=["grid", "random"], default="grid")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report")
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render-debug", help="write one overlay frame as PPM")
    r.add_argument("--pose", default="0,0,0", help="gripper x,y,yaw")
    r.add_argument("--action", default="0,0,0,0,0,0", help="twist, 6 floats")
    r.add_argument("--camera", choices=["external", "wrist"], default="external")
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.set_defaults(func=cmd_render_debug)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--config")
    # Test hook: bias the analytic gradient to prove the audit can fail.
    gc.add_argument("--perturb", type=float, default=0.0,
                    help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def _load_cfg(args):
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "task", None):
        cfg.env.task = args.task
    return cfg


def cmd_demo(args) -> int:
    cfg = _load_cfg(args)
    rng = np.random.default_rng(args.seed)
    task = cfg.env.task
    episodes = []
    if args.sampling == "fps":
        poses = toyenv.sample_demo_poses(cfg, args.num, "fps")
    else:
        poses = toyenv.sample_demo_poses(cfg, args.num, "random", rng)
    for i in range(args.num):
        goal = None
        if task == "push":
            half = cfg.env.workspace / 2.0 - cfg.env.block_size
            goal = (
                float(rng.uniform(-half, half)),
                float(rng.uniform(-half, half)),
            )
        for attempt in range(DEMO_RETRY_CAP + 1):
            try:
                ep = toyenv.scripted_demo(cfg, poses[i], seed=args.seed,
                                          task=task, goal_planar=goal)
                break
            except InfeasibleDemoError as e:
                if args.sampling == "fps" or attempt == DEMO_RETRY_CAP:
                    raise
                print(f"episode {i}: infeasible ({e}), resampling",
                      file=sys.stderr)
                poses[i] = toyenv.sample_demo_poses(cfg, 1, "random", rng)[0]
                if task == "push":
                    goal = (
                        float(rng.uniform(-half, half)),
                        float(rng.uniform(-half, half)),
                    )
        episodes.append(ep)
        obj = ", ".join(f"{v:.3f}" for v in poses[i])
        print(f"episode {i}: {len(ep)} frames, object ({obj})")
    toyenv.write_dataset(args.out, episodes, cfg)
    print(f"wrote {len(episodes)} episodes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.steps is not None:
        cfg.training.steps = args.steps
    if args.seed is not None:
        cfg.training.seed = args.seed
    ds = toyenv.load_dataset(args.data)
    cam = ds.rig[0].base
    if (cam.width, cam.height) != (cfg.camera.width, cfg.camera.height):
        raise DataFormatError(
            f"dataset images are {cam.width}x{cam.height}, config expects "
            f"{cfg.camera.width}x{cfg.camera.height}"
        )
    if len(ds.rig) != (2 if cfg.camera.use_wrist else 1):
        raise DataFormatError("dataset camera count does not match config")
    if ds.chunk_len != cfg.env.chunk_len or ds.obs_history != cfg.env.obs_history:
        raise DataFormatError("dataset chunk/history lengths do not match config")
    samples = toyenv.training_samples(ds)
    rng = np.random.default_rng(cfg.training.seed)

    def log(step, parts):
        print(
            f"step {step}: loss {parts['loss']:.5f} "
            f"(flow {parts['flow']:.5f} eps {parts['eps']:.5f} "
            f"grip {parts['grip']:.5f})"
        )

    model, history = train(cfg, samples, rng, log_fn=log)
    model.save(args.out)
    log_path = Path(str(args.out) + ".log")
    with open(log_path, "w") as f:
        for h in history:
            f.write(
                f"{h['step']}\t{h['loss']:.9g}\t{h['flow']:.9g}"
                f"\t{h['eps']:.9g}\t{h['grip']:.9g}\n"
            )
    print(f"wrote model to {args.out}, log to {log_path}")
    return 0


def _grid_dims(n: int):
    for nyaw in (3, 2, 1):
        if n % nyaw:
            continue
        side = math.isqrt(n // nyaw)
        if side * side * nyaw == n:
            return side, side, nyaw
    raise DataFormatError(
        f"--episodes {n} does not form an s x s x yaw grid"
        " (try 25, 50, 75, ...)"
    )


def cmd_eval(args) -> int:
    if args.model:
        model = MlpDenoiser.load(args.model)
        cfg = model.cfg
        if args.task:
            cfg.env.task = args.task
    else:
        cfg = _load_cfg(args)
        model = None
    if args.variant:
        cfg.inference.variant = args.variant
    schedule = make_schedule(cfg.schedule.kind, cfg.schedule.steps,
                             cfg.schedule.offset)
    if args.mode == "grid":
        nx, ny, nyaw = _grid_dims(args.episodes)
        poses = toyenv.grid_poses(cfg, nx, ny, nyaw)
    else:
        rng = np.random.default_rng(args.seed)
        poses = toyenv.sample_demo_poses(cfg, args.episodes, "random", rng)
    factory = (
        toyenv.oracle_policy(schedule)
        if model is None
        else toyenv.mlp_policy(model, schedule)
    )
    workers = max(1, int(os.environ.get("RD_THREADS", "1")))
    report = toyenv.evaluate(factory, cfg, poses, seed=args.seed,
                             workers=workers)
    report.update(
        task=cfg.env.task,
        variant=cfg.inference.variant,
        seed=args.seed,
        mode=args.mode,
    )
    successes = sum(r["success"] for r in report["episodes"])
    print(
        f"success rate {report['success_rate']:.3f} "
        f"({successes}/{len(report['episodes'])}), variant {report['variant']}"
    )
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, indent=1, sort_keys=True)
            f.write("\n")
        print(f"wrote report to {args.report}")
    return 0


def _parse_floats(text, n, what):
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError as e:
        raise DataFormatError(f"cannot parse {what}: {text!r}") from e
    if len(vals) != n:
        raise DataFormatError(f"{what} needs {n} comma-separated floats")
    return vals


def cmd_render_debug(args) -> int:
    cfg = _load_cfg(args)
    x, y, yaw = _parse_floats(args.pose, 3, "--pose")
    twist = Twist.from_vector(_parse_floats(args.action, 6, "--action"))
    env = toyenv.ToyEnv(cfg, DEBUG_OBJECT, start_planar=(x, y, yaw))
    cam_index = {"external": 0, "wrist": 1}[args.camera]
    if cam_index >= len(env.rig):
        raise DataFormatError("config has no wrist camera")
    frame = env.observe()[cam_index]
    cam = env.cameras()[cam_index]
    mesh = chunk_meshes(cfg)[cam_index]
    renders = render_chunk(
        twist.as_vector().reshape(1, 6), env.gripper_pose(), [cam], [mesh]
    )
    out = overlay(frame, renders[0][0])
    write_ppm(args.out, out)
    print(f"wrote {args.out} ({out.width}x{out.height})")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_cfg(args)
    rng = np.random.default_rng(args.seed)
    result = gradient_check(cfg, rng, perturb=args.perturb)
    print(
        f"max relative gradient error {result['max_rel_err']:.3e} "
        f"over {result['checked']} coordinates"
    )
    if result["max_rel_err"] >= 1e-4:
        print("gradient audit FAILED", file=sys.stderr)
        return 4
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataFormatError, InfeasibleDemoError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (
        TrainingDivergedError,
        DegenerateGeometryError,
        BranchAmbiguityError,
        NoVisibilityError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
