"""Desk-scale environment: planar gripper over a table, two cameras.

The gripper moves in x, y and yaw at a fixed hover height; every pose and
action is nonetheless a full rigid transform, so rendering, registration
and twist algebra all run real 3D math.  Tasks: ``reach`` (bring the
grasp point over a flat target tile) and ``push`` (drag a block to a goal
marker via kinematic attachment — no dynamics).

Observations are rendered with the same rasterizer used for action
renders, one external camera plus an optional wrist camera rigidly
mounted to the gripper.  Demonstrations are scripted straight-line
movers; datasets round-trip byte-exactly through a manifest + one binary
file per episode.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import PinholeCamera
from .config import RunConfig
from .diffusion import TWIST_DIM, ActionChunk, ActionNormalizer
from .errors import DataFormatError, InfeasibleDemoError
from .policy import OracleDenoiser, TrainSample, chunk_meshes, infer
from .render import (
    Image,
    TriangleMesh,
    make_box,
    make_gripper_mesh,
    merge_meshes,
    render_gripper,
)
from .se3 import RigidTransform, Twist, compose, expmap, inverse, logmap

GRIPPER_Z = 0.02  # grasp-point hover height above the table
TARGET_THICKNESS = 0.008  # reach targets are flat tiles, not obstacles
YAW_STEP_CAP = 0.25  # rad per demo step
FPS_YAW_WEIGHT = 0.1  # metres of distance per radian of yaw difference
FPS_GRID = (21, 21, 9)  # candidate lattice for greedy coverage sampling

# Finger footprint half-extents in the gripper frame (x, y); used for the
# push contact test.
FINGER_HALF_X = 0.008
FINGER_HALF_Y = 0.036

TARGET_COLORS = {
    "+x": (0.10, 0.85, 0.55),
    "-x": (0.05, 0.60, 0.40),
    "+y": (0.15, 0.95, 0.75),
    "-y": (0.02, 0.45, 0.35),
    "+z": (0.20, 1.00, 0.85),
    "-z": (0.05, 0.30, 0.20),
}
BLOCK_COLORS = {
    "+x": (0.10, 0.75, 0.80),
    "-x": (0.05, 0.55, 0.60),
    "+y": (0.15, 0.85, 0.95),
    "-y": (0.02, 0.40, 0.45),
    "+z": (0.20, 0.95, 1.00),
    "-z": (0.05, 0.25, 0.30),
}
GOAL_COLORS = (0.85, 0.15, 0.75)

DATASET_FORMAT = 1
EPISODE_MAGIC = b"RNDE"
EPISODE_VERSION = 1


def planar_to_pose(x, y, yaw, z=GRIPPER_Z) -> RigidTransform:
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidTransform(rot, np.array([x, y, z]))


def pose_to_planar(t: RigidTransform):
    return (
        float(t.translation[0]),
        float(t.translation[1]),
        float(np.arctan2(t.rotation[1, 0], t.rotation[0, 0])),
    )


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera pose with +z toward ``target`` and +y pointing downhill."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    return RigidTransform(np.column_stack([right, down, fwd]), eye)


@dataclass(frozen=True)
class RigCamera:
    """A camera that is either fixed in the world or mounted on the gripper."""

    name: str
    base: PinholeCamera
    mount: RigidTransform | None = None  # gripper-frame offset for wrist cams

    def at(self, gripper_pose: RigidTransform) -> PinholeCamera:
        if self.mount is None:
            return self.base
        return dataclasses.replace(
            self.base, extrinsics=compose(gripper_pose, self.mount)
        )


def make_rig(cfg: RunConfig, center=(0.0, 0.0)):
    """External camera looking across the workspace, plus a wrist camera
    offset sideways so the palm does not block its own fingers."""
    cam = cfg.camera
    cx, cy = float(center[0]), float(center[1])
    external = PinholeCamera(
        fx=cam.focal, fy=cam.focal,
        cx=cam.width / 2.0, cy=cam.height / 2.0,
        width=cam.width, height=cam.height,
        extrinsics=look_at((cx, cy - 0.38, 0.5), (cx, cy, 0.0)),
    )
    rig = [RigCamera("external", external)]
    if cam.use_wrist:
        mount = look_at((0.09, 0.0, 0.18), (0.0, 0.0, 0.0))
        wrist = PinholeCamera(
            fx=cam.focal, fy=cam.focal,
            cx=cam.width / 2.0, cy=cam.height / 2.0,
            width=cam.width, height=cam.height,
            extrinsics=RigidTransform.identity(),
        )
        rig.append(RigCamera("wrist", wrist, mount))
    return tuple(rig)


@dataclass(frozen=True)
class Scene:
    """Snapshot of the world state plus its fixed context."""

    gripper_pose: RigidTransform
    target_pose: RigidTransform  # reach tile or push block
    kind: str  # "reach_target" | "push_block"
    x_range: tuple
    y_range: tuple
    yaw_range: tuple
    cameras: tuple  # of PinholeCamera at this instant


def _rotated_aabb_half(half_x, half_y, yaw):
    c, s = abs(np.cos(yaw)), abs(np.sin(yaw))
    return half_x * c + half_y * s, half_x * s + half_y * c


class ToyEnv:
    """Mutable world the policies act in.  All motion is kinematic."""

    def __init__(self, cfg: RunConfig, object_planar, task=None,
                 goal_planar=None, start_planar=None, center=(0.0, 0.0)):
        self.cfg = cfg
        self.task = task or cfg.env.task
        self.center = (float(center[0]), float(center[1]))
        half = cfg.env.workspace / 2.0
        self.x_range = (self.center[0] - half, self.center[0] + half)
        self.y_range = (self.center[1] - half, self.center[1] + half)
        self.yaw_range = (-cfg.env.max_yaw, cfg.env.max_yaw)
        self.gripper = tuple(
            map(float, start_planar or (self.center[0], self.center[1], 0.0))
        )
        self.object = tuple(map(float, object_planar))
        if self.task == "push":
            if goal_planar is None:
                raise ValueError("push task needs a goal")
            self.goal = tuple(map(float, goal_planar))
        else:
            self.goal = None
        self.flag = False
        self.rig = make_rig(cfg, center)

    # -- views

    def gripper_pose(self) -> RigidTransform:
        return planar_to_pose(*self.gripper)

    def object_pose(self) -> RigidTransform:
        z = (
            TARGET_THICKNESS / 2.0
            if self.task == "reach"
            else self.cfg.env.block_size / 2.0
        )
        return planar_to_pose(*self.object, z=z)

    def cameras(self):
        pose = self.gripper_pose()
        return tuple(rc.at(pose) for rc in self.rig)

    def scene(self) -> Scene:
        return Scene(
            gripper_pose=self.gripper_pose(),
            target_pose=self.object_pose(),
            kind="reach_target" if self.task == "reach" else "push_block",
            x_range=self.x_range,
            y_range=self.y_range,
            yaw_range=self.yaw_range,
            cameras=self.cameras(),
        )

    def scene_mesh(self) -> TriangleMesh:
        size = self.cfg.env.block_size
        if self.task == "reach":
            obj = make_box((0, 0, 0), (size, size, TARGET_THICKNESS),
                           face_colors=TARGET_COLORS)
        else:
            obj = make_box((0, 0, 0), (size, size, size),
                           face_colors=BLOCK_COLORS)
        parts = [obj.transformed(self.object_pose())]
        if self.goal is not None:
            marker = make_box((0, 0, 0), (size, size, TARGET_THICKNESS),
                              face_colors=GOAL_COLORS)
            parts.append(
                marker.transformed(
                    planar_to_pose(*self.goal, 0.0, z=TARGET_THICKNESS / 2.0)
                )
            )
        parts.append(make_gripper_mesh("full").transformed(self.gripper_pose()))
        return merge_meshes(parts)

    def observe(self):
        mesh = self.scene_mesh()
        frames = []
        for cam in self.cameras():
            ra = render_gripper(mesh, inverse(cam.extrinsics), cam)
            frames.append(ra.render)
        return tuple(frames)

    # -- dynamics

    def _clamp(self, x, y, yaw):
        return (
            float(np.clip(x, *self.x_range)),
            float(np.clip(y, *self.y_range)),
            float(np.clip(yaw, *self.yaw_range)),
        )

    def _contact(self, gx, gy, gyaw):
        if self.task != "push":
            return False
        ghx, ghy = _rotated_aabb_half(FINGER_HALF_X, FINGER_HALF_Y, gyaw)
        bh = self.cfg.env.block_size / 2.0
        bhx, bhy = _rotated_aabb_half(bh, bh, self.object[2])
        return (
            abs(gx - self.object[0]) <= ghx + bhx
            and abs(gy - self.object[1]) <= ghy + bhy
        )

    def goto(self, target: RigidTransform, flag: bool) -> None:
        """Move toward an SE(3) target: planar projection, workspace clamp,
        and (for push) dragging the block while the fingers overlap it.

        Contact is tested where the step starts: the block is carried only by
        motion that happens while the fingers already overlap it.  Testing at
        the end pose instead would let an approach step that lands in overlap
        yank the block by the whole approach distance.
        """
        x, y, yaw = self._clamp(*pose_to_planar(target))
        dx, dy = x - self.gripper[0], y - self.gripper[1]
        dragging = self._contact(*self.gripper)
        self.gripper = (x, y, yaw)
        self.flag = bool(flag)
        if dragging:
            bx = float(np.clip(self.object[0] + dx, *self.x_range))
            by = float(np.clip(self.object[1] + dy, *self.y_range))
            self.object = (bx, by, self.object[2])

    def execute(self, chunk: ActionChunk, m: int, on_step=None) -> None:
        """Run the first m chunk actions.  Chunk twists are all relative to
        the pose at call time, so each target composes from that anchor."""
        if not 1 <= m <= chunk.horizon:
            raise ValueError("need 1 <= m <= chunk horizon")
        anchor = self.gripper_pose()
        for j in range(m):
            target = compose(anchor, expmap(Twist.from_vector(chunk.twists[j])))
            self.goto(target, chunk.flags[j])
            if on_step is not None:
                on_step(self)

    # -- task status

    def _task_target(self):
        return self.goal if self.task == "push" else self.object[:2]

    def _task_subject(self):
        return self.object[:2] if self.task == "push" else self.gripper[:2]

    def distance(self) -> float:
        tx, ty = self._task_target()
        sx, sy = self._task_subject()
        return float(np.hypot(sx - tx, sy - ty))

    def success(self) -> bool:
        return self.distance() < self.cfg.env.success_dist


# ---------------------------------------------------------------------------
# scripted demonstrations


@dataclass
class Frame:
    images: tuple  # per camera
    pose: RigidTransform
    flag: bool
    chunk: ActionChunk  # label: next T relative motions + flags


@dataclass
class Episode:
    frames: list
    task: str
    seed: int
    object_planar: tuple
    goal_planar: tuple | None = None

    def __len__(self):
        return len(self.frames)


def _wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def plan_path(start, target, cfg: RunConfig):
    """Evenly spaced planar waypoints from start to target.

    Steps move at up to the translation cap (exactly at it until the
    remainder) and the yaw cap, whichever needs more steps.
    """
    sx, sy, syaw = start
    tx, ty, tyaw = target
    dist = float(np.hypot(tx - sx, ty - sy))
    dyaw = _wrap_angle(tyaw - syaw)
    n = max(
        int(np.ceil(dist / cfg.env.step_limit - 1e-12)),
        int(np.ceil(abs(dyaw) / YAW_STEP_CAP - 1e-12)),
        0,
    )
    if n == 0:
        return [tuple(map(float, start))]
    fracs = np.arange(n + 1) / n
    return [
        (sx + f * (tx - sx), sy + f * (ty - sy), syaw + f * dyaw) for f in fracs
    ]


def labels_from_poses(poses, flags, chunk_len):
    """Chunk labels: twist j at frame t carries pose t to pose t+j+1
    (clamped at the final frame), in the frame-t body frame."""
    last = len(poses) - 1
    chunks = []
    for t in range(len(poses)):
        inv = inverse(poses[t])
        tw, fl = [], []
        for j in range(chunk_len):
            idx = min(t + j + 1, last)
            tw.append(logmap(compose(inv, poses[idx])).as_vector())
            fl.append(flags[idx])
        chunks.append(ActionChunk(np.array(tw), np.array(fl, dtype=bool)))
    return chunks


def scripted_demo(cfg: RunConfig, object_planar, seed=0, task=None,
                  goal_planar=None) -> Episode:
    """Straight-line scripted demonstration, recorded through the env so
    labels always replay exactly (push contact included)."""
    task = task or cfg.env.task
    env = ToyEnv(cfg, object_planar, task=task, goal_planar=goal_planar)
    if task == "reach":
        waypoints = plan_path(env.gripper, env.object, cfg)
        if len(waypoints) > cfg.env.episode_len:
            raise InfeasibleDemoError(
                f"demo needs {len(waypoints)} frames, budget {cfg.env.episode_len}"
            )
        flag_from = len(waypoints) - 1  # close on arrival
        poses, flags = [env.gripper_pose()], [flag_from == 0]
        for i, wp in enumerate(waypoints[1:], start=1):
            env.goto(planar_to_pose(*wp), i >= flag_from)
            poses.append(env.gripper_pose())
            flags.append(env.flag)
    else:
        poses, flags = _scripted_push(cfg, env)
    chunks = labels_from_poses(poses, flags, cfg.env.chunk_len)

    # Re-render observations along the recorded trajectory.
    replay = ToyEnv(cfg, object_planar, task=task, goal_planar=goal_planar)
    frames = []
    for pose, flag, chunk in zip(poses, flags, chunks):
        replay.goto(pose, flag)
        frames.append(Frame(replay.observe(), pose, flag, chunk))
    return Episode(frames, task, seed, tuple(object_planar),
                   tuple(goal_planar) if goal_planar else None)


def _scripted_push(cfg: RunConfig, env: ToyEnv):
    """Greedy closed-loop pusher: approach behind the block, then drive
    toward the goal, re-aiming as the block drags.

    The approach yaw puts the gripper x axis along the push direction, so the
    standoff is sized from the finger extent on that axis: close enough that
    the contact test fires at the standoff point (5 mm overlap), which keeps
    the loop from parking just out of reach.
    """
    standoff = cfg.env.block_size / 2.0 + FINGER_HALF_X - 0.005
    poses, flags = [env.gripper_pose()], [False]
    for _ in range(cfg.env.episode_len - 1):
        bx, by, _ = env.object
        gx_goal, gy_goal = env.goal
        to_goal = np.array([gx_goal - bx, gy_goal - by])
        if np.linalg.norm(to_goal) < cfg.env.success_dist * 0.5:
            env.goto(env.gripper_pose(), True)
        else:
            direction = to_goal / np.linalg.norm(to_goal)
            contact = env._contact(*env.gripper)
            if contact:
                tx, ty = gx_goal - standoff * direction[0], gy_goal - standoff * direction[1]
            else:
                tx, ty = bx - standoff * direction[0], by - standoff * direction[1]
            yaw = float(np.clip(np.arctan2(direction[1], direction[0]),
                                *env.yaw_range))
            path = plan_path(env.gripper, (tx, ty, yaw), cfg)
            step = path[1] if len(path) > 1 else path[0]
            env.goto(planar_to_pose(*step), contact)
        poses.append(env.gripper_pose())
        flags.append(env.flag)
        if env.success():
            break
    else:
        raise InfeasibleDemoError("push demo did not converge within budget")
    return poses, flags


# ---------------------------------------------------------------------------
# demonstration pose sampling


def _pose_metric(a, b):
    return np.sqrt(
        (a[0] - b[0]) ** 2
        + (a[1] - b[1]) ** 2
        + (FPS_YAW_WEIGHT * _wrap_angle(a[2] - b[2])) ** 2
    )


def fps_candidates(cfg: RunConfig, center=(0.0, 0.0)):
    half = cfg.env.workspace / 2.0
    xs = np.linspace(center[0] - half, center[0] + half, FPS_GRID[0])
    ys = np.linspace(center[1] - half, center[1] + half, FPS_GRID[1])
    yaws = np.linspace(-cfg.env.max_yaw, cfg.env.max_yaw, FPS_GRID[2])
    return [(x, y, yaw) for x in xs for y in ys for yaw in yaws]


def sample_demo_poses(cfg: RunConfig, n: int, mode="fps",
                      rng: np.random.Generator | None = None,
                      center=(0.0, 0.0)):
    """Object poses for demonstrations.

    ``random`` draws uniformly over the workspace; ``fps`` starts at the
    workspace centre and then greedily maximizes the minimum distance in
    the (x, y, weighted-yaw) metric over a fixed candidate lattice, so
    the picks are deterministic and spread.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    if mode == "random":
        if rng is None:
            raise ValueError("random mode needs an rng")
        half = cfg.env.workspace / 2.0
        return [
            (
                float(center[0] + rng.uniform(-half, half)),
                float(center[1] + rng.uniform(-half, half)),
                float(rng.uniform(-cfg.env.max_yaw, cfg.env.max_yaw)),
            )
            for _ in range(n)
        ]
    if mode != "fps":
        raise ValueError(f"unknown sampling mode {mode!r}")
    chosen = [(float(center[0]), float(center[1]), 0.0)]
    candidates = fps_candidates(cfg, center)
    dists = np.array([_pose_metric(c, chosen[0]) for c in candidates])
    while len(chosen) < n:
        best = int(np.argmax(dists))
        chosen.append(tuple(map(float, candidates[best])))
        dists = np.minimum(
            dists, [_pose_metric(c, chosen[-1]) for c in candidates]
        )
    return chosen


# ---------------------------------------------------------------------------
# dataset persistence


def _pose_to_list(t: RigidTransform):
    return [*t.rotation.reshape(-1).tolist(), *t.translation.tolist()]


def _pose_from_list(vals):
    vals = np.asarray(vals, dtype=float)
    if vals.shape != (12,):
        raise DataFormatError("pose must be 12 numbers")
    return RigidTransform(vals[:9].reshape(3, 3), vals[9:])


def _camera_to_json(rc: RigCamera):
    return {
        "name": rc.name,
        "fx": rc.base.fx, "fy": rc.base.fy,
        "cx": rc.base.cx, "cy": rc.base.cy,
        "width": rc.base.width, "height": rc.base.height,
        "extrinsics": None if rc.mount else _pose_to_list(rc.base.extrinsics),
        "mount": _pose_to_list(rc.mount) if rc.mount else None,
    }


def _camera_from_json(d) -> RigCamera:
    mount = _pose_from_list(d["mount"]) if d.get("mount") else None
    ext = (
        _pose_from_list(d["extrinsics"])
        if d.get("extrinsics")
        else RigidTransform.identity()
    )
    base = PinholeCamera(
        fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
        width=d["width"], height=d["height"], extrinsics=ext,
    )
    return RigCamera(d["name"], base, mount)


def write_episode(path, episode: Episode) -> None:
    with open(path, "wb") as f:
        f.write(EPISODE_MAGIC)
        f.write(struct.pack("<II", EPISODE_VERSION, len(episode.frames)))
        for fr in episode.frames:
            for img in fr.images:
                f.write(img.pixels.tobytes())
            f.write(np.asarray(_pose_to_list(fr.pose), dtype="<f8").tobytes())
            f.write(bytes([1 if fr.flag else 0]))
            f.write(fr.chunk.twists.astype("<f8").tobytes())
            f.write(bytes(1 if b else 0 for b in fr.chunk.flags))


def read_episode(path, rig, chunk_len: int, meta: dict) -> Episode:
    data = Path(path).read_bytes()
    if data[:4] != EPISODE_MAGIC:
        raise DataFormatError(f"{path}: not an episode file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != EPISODE_VERSION:
        raise DataFormatError(f"{path}: unsupported episode version {version}")
    frame_size = (
        sum(rc.base.height * rc.base.width * 3 for rc in rig)
        + 96 + 1 + 49 * chunk_len
    )
    if len(data) != 12 + count * frame_size:
        raise DataFormatError(f"{path}: wrong size for {count} frames")
    off = 12
    frames = []
    for _ in range(count):
        images = []
        for rc in rig:
            size = rc.base.height * rc.base.width * 3
            px = np.frombuffer(data, dtype=np.uint8, count=size, offset=off)
            images.append(Image(px.reshape(rc.base.height, rc.base.width, 3).copy()))
            off += size
        pose_vals = np.frombuffer(data, dtype="<f8", count=12, offset=off)
        pose = _pose_from_list(pose_vals)
        off += 96
        flag = data[off] != 0
        off += 1
        tw = np.frombuffer(data, dtype="<f8", count=6 * chunk_len, offset=off)
        off += 48 * chunk_len
        fl = np.frombuffer(data, dtype=np.uint8, count=chunk_len, offset=off) != 0
        off += chunk_len
        frames.append(
            Frame(tuple(images), pose, flag,
                  ActionChunk(tw.reshape(chunk_len, TWIST_DIM), fl))
        )
    return Episode(frames, meta["task"], meta.get("seed", 0),
                   tuple(meta["object"]),
                   tuple(meta["goal"]) if meta.get("goal") else None)


@dataclass
class DemoDataset:
    task: str
    rig: tuple  # of RigCamera
    chunk_len: int
    obs_history: int
    normalizer: ActionNormalizer
    episodes: list


def write_dataset(directory, episodes, cfg: RunConfig, rig=None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rig = rig or make_rig(cfg)
    all_twists = np.vstack(
        [fr.chunk.twists for ep in episodes for fr in ep.frames]
    )
    normalizer = ActionNormalizer.from_twists(all_twists)
    entries = []
    for i, ep in enumerate(episodes):
        name = f"ep_{i:03d}.rnde"
        write_episode(directory / name, ep)
        entries.append(
            {
                "file": name,
                "frames": len(ep.frames),
                "seed": ep.seed,
                "object": list(ep.object_planar),
                "goal": list(ep.goal_planar) if ep.goal_planar else None,
            }
        )
    manifest = {
        "format": DATASET_FORMAT,
        "task": episodes[0].task if episodes else cfg.env.task,
        "chunk_len": cfg.env.chunk_len,
        "obs_history": cfg.env.obs_history,
        "cameras": [_camera_to_json(rc) for rc in rig],
        "normalizer": normalizer.state(),
        "episodes": entries,
    }
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_dataset(directory) -> DemoDataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except ValueError as e:
        raise DataFormatError(f"{manifest_path}: bad JSON") from e
    if manifest.get("format") != DATASET_FORMAT:
        raise DataFormatError(f"{manifest_path}: unsupported format")
    rig = tuple(_camera_from_json(d) for d in manifest["cameras"])
    chunk_len = manifest["chunk_len"]
    episodes = [
        read_episode(directory / e["file"], rig, chunk_len,
                     {**e, "task": manifest["task"]})
        for e in manifest["episodes"]
    ]
    return DemoDataset(
        task=manifest["task"],
        rig=rig,
        chunk_len=chunk_len,
        obs_history=manifest["obs_history"],
        normalizer=ActionNormalizer.from_state(manifest["normalizer"]),
        episodes=episodes,
    )


def history_indices(t: int, horizon: int):
    return [max(0, t - j) for j in range(horizon - 1, -1, -1)]


def training_samples(ds: DemoDataset):
    """Flatten a dataset into supervised examples (history clamped at the
    episode start; wrist extrinsics resolved per frame)."""
    samples = []
    for ep in ds.episodes:
        for t, fr in enumerate(ep.frames):
            obs = tuple(
                tuple(ep.frames[i].images[c] for i in history_indices(t, ds.obs_history))
                for c in range(len(ds.rig))
            )
            cams = tuple(rc.at(fr.pose) for rc in ds.rig)
            samples.append(
                TrainSample(obs, float(fr.flag), fr.pose, cams, fr.chunk)
            )
    return samples


# ---------------------------------------------------------------------------
# evaluation


def grid_poses(cfg: RunConfig, nx: int, ny: int, nyaw: int, center=(0.0, 0.0)):
    """Row-major (x, y, yaw) lattice over the workspace interior."""
    half = cfg.env.workspace / 2.0 - cfg.env.block_size
    xs = np.linspace(center[0] - half, center[0] + half, nx)
    ys = np.linspace(center[1] - half, center[1] + half, ny)
    if nyaw == 1:
        yaws = np.array([0.0])
    else:
        yaws = np.linspace(-cfg.env.max_yaw * 0.8, cfg.env.max_yaw * 0.8, nyaw)
    return [
        (float(x), float(y), float(yaw)) for x in xs for y in ys for yaw in yaws
    ]


def run_episode(policy, cfg: RunConfig, object_planar, rng,
                center=(0.0, 0.0), goal_planar=None):
    """Closed-loop rollout: plan a chunk, execute a prefix, repeat."""
    env = ToyEnv(cfg, object_planar, goal_planar=goal_planar, center=center)
    obs_log = [env.observe()]
    steps = 0
    while steps < cfg.env.episode_len and not env.success():
        hist = history_indices(len(obs_log) - 1, cfg.env.obs_history)
        observations = tuple(
            tuple(obs_log[i][c] for i in hist) for c in range(len(env.rig))
        )
        chunk = policy(env, observations, rng)
        m = min(cfg.inference.replan, cfg.env.episode_len - steps)
        env.execute(chunk, m, on_step=lambda e: obs_log.append(e.observe()))
        steps += m
    return {
        "success": bool(env.success()),
        "steps": steps,
        "final_distance": env.distance(),
        "object": list(object_planar),
    }


def evaluate(policy_factory, cfg: RunConfig, poses, seed=0, workers=1):
    """Roll out one episode per object pose; merge records in pose order."""
    from concurrent.futures import ThreadPoolExecutor

    def job(args):
        idx, pose = args
        rng = np.random.default_rng((seed, idx))
        policy = policy_factory(cfg)
        return run_episode(policy, cfg, pose, rng)

    items = list(enumerate(poses))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(job, items))
    else:
        records = [job(it) for it in items]
    rate = float(np.mean([r["success"] for r in records])) if records else 0.0
    return {
        "success_rate": rate,
        "episodes": records,
        "poses": [list(p) for p in poses],
    }


def mlp_policy(model, schedule):
    """Policy closure around a trained denoiser."""
    def factory(cfg: RunConfig):
        meshes = chunk_meshes(cfg)

        def plan(env: ToyEnv, observations, rng):
            return infer(
                model, observations, float(env.flag), env.gripper_pose(),
                env.cameras(), meshes, schedule, cfg.inference, rng,
            )

        return plan

    return factory


ORACLE_NORMALIZER = ActionNormalizer(
    np.zeros(6), np.array([0.1, 0.1, 0.1, 0.3, 0.3, 0.3])
)


def oracle_policy(schedule, normalizer=None):
    """Policy that plans with an exact denoiser built from the live scene —
    the end-to-end control check with learning taken out of the loop."""
    normalizer = normalizer or ORACLE_NORMALIZER

    def factory(cfg: RunConfig):
        meshes = chunk_meshes(cfg)

        def plan(env: ToyEnv, observations, rng):
            target = (*env._task_target(), env.object[2])
            waypoints = plan_path(env.gripper, target, cfg)
            poses = [planar_to_pose(*wp) for wp in waypoints]
            flags = [i == len(poses) - 1 for i in range(len(poses))]
            chunk = labels_from_poses(poses, flags, cfg.env.chunk_len)[0]
            oracle = OracleDenoiser(chunk, normalizer, schedule)
            return infer(
                oracle, observations, float(env.flag), env.gripper_pose(),
                env.cameras(), meshes, schedule, cfg.inference, rng,
                normalizer=normalizer,
            )

        return plan

    return factory
