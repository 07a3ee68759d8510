"""Point flow targets, rigid registration, and the action update they induce.

The supervision signal for the image-space route is a per-point flow that
carries the rendered (noisy) gripper cloud onto where the clean action
would have rendered it.  Because the cloud is rigid, any predicted flow
can be collapsed back into a rigid step by least-squares registration and
folded into the twist.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError
from .se3 import RigidTransform, Twist, apply, compose, expmap, inverse, logmap

# Relative drop in the second singular value below which a point cloud is
# treated as collinear (rotation about the line is unobservable).
_COLLINEAR_RTOL = 1e-9


@dataclass(frozen=True)
class FlowField:
    """Per-point displacements; ``points + flow`` is the target cloud."""

    points: np.ndarray  # (N, 3)
    flow: np.ndarray  # (N, 3)

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        f = np.asarray(self.flow, dtype=float).reshape(-1, 3)
        if p.shape != f.shape:
            raise ValueError("points and flow shapes differ")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "flow", f)

    def __len__(self):
        return len(self.points)

    def targets(self) -> np.ndarray:
        return self.points + self.flow


def gt_flow(
    points_cam: np.ndarray,
    noisy_action: Twist,
    clean_action: Twist,
    gripper_pose: RigidTransform,
    camera_pose: RigidTransform,
) -> np.ndarray:
    """Flow carrying a rendered noisy-action cloud onto the clean one.

    ``points_cam`` are camera-frame points lifted from the render of
    ``gripper_pose * exp(noisy_action)``.  The returned flow is also in
    the camera frame, and equals ``T @ p - p`` for the camera-frame rigid
    step T between the two action poses, so it is exact for every point
    rigidly attached to the gripper — not just surface samples.
    """
    t_w_c_inv = inverse(camera_pose)
    t_c_clean = compose(compose(t_w_c_inv, gripper_pose), expmap(clean_action))
    t_c_noisy = compose(compose(t_w_c_inv, gripper_pose), expmap(noisy_action))
    step = compose(t_c_clean, inverse(t_c_noisy))
    pts = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    return apply(step, pts) - pts


def svd_align(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform with ``T @ src ~= dst`` (Kabsch/Arun).

    The reflection case is repaired by flipping the smallest singular
    direction, so the result is always a proper rotation.  Raises
    DegenerateGeometryError for under-constraining clouds (< 3 points, or
    collinear within ~1e-9 relative tolerance).
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("source and destination clouds differ in shape")
    if len(src) < 3:
        raise DegenerateGeometryError(f"{len(src)} correspondences, need >= 3")
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    src_c = src - c_src
    dst_c = dst - c_dst
    sv = np.linalg.svd(src_c, compute_uv=False)
    if sv[1] <= _COLLINEAR_RTOL * sv[0]:
        raise DegenerateGeometryError("cloud is collinear; rotation unobservable")
    u, _, vt = np.linalg.svd(src_c.T @ dst_c)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, c_dst - rot @ c_src)


def fuse_views(flow_fields, camera_poses) -> FlowField:
    """Merge per-camera flow fields into one world-frame field.

    Points map through each camera pose; flows, being displacement
    vectors, only rotate.  Order follows the camera order, so fusion is
    deterministic.
    """
    fields = list(flow_fields)
    poses = list(camera_poses)
    if len(fields) != len(poses):
        raise ValueError("one camera pose per flow field required")
    pts, flows = [], []
    for field, pose in zip(fields, poses):
        pts.append(apply(pose, field.points))
        flows.append(field.flow @ pose.rotation.T)
    if not pts:
        return FlowField(np.zeros((0, 3)), np.zeros((0, 3)))
    return FlowField(np.vstack(pts), np.vstack(flows))


def update_action(
    action: Twist, step_world: RigidTransform, gripper_pose: RigidTransform
) -> Twist:
    """Fold a world-frame rigid step into the action twist.

    The pose rendered for twist a is ``gripper_pose * exp(a)``; if
    registration says the rendered cloud should move by ``step_world``,
    the twist whose render lands there is
    ``log(gripper_pose^-1 * step_world * gripper_pose * exp(a))``.
    """
    target = compose(
        compose(compose(inverse(gripper_pose), step_world), gripper_pose),
        expmap(action),
    )
    return logmap(target)
