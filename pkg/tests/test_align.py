"""Flow labels and rigid registration: the geometric core of the refiner."""

import numpy as np
import pytest

from rendact.align import FlowField, fuse_views, gt_flow, svd_align, update_action
from rendact.camera import PinholeCamera
from rendact.errors import DegenerateGeometryError
from rendact.render import make_gripper_mesh, render_gripper
from rendact.se3 import (
    RigidTransform,
    Twist,
    apply,
    compose,
    expmap,
    inverse,
    logmap,
)


def make_cam(pose=None):
    return PinholeCamera(fx=110.0, fy=110.0, cx=64.0, cy=64.0, width=128,
                         height=128,
                         extrinsics=pose or RigidTransform.identity())


def random_small_twist(rng, t=0.05, r=0.25):
    return Twist.from_vector(
        np.r_[t * rng.normal(size=3), r * rng.normal(size=3)]
    )


def rendered_cloud(noisy, gripper_pose, cam, mesh):
    pose_cam = compose(compose(inverse(cam.extrinsics), gripper_pose), expmap(noisy))
    return render_gripper(mesh, pose_cam, cam), pose_cam


# ---------------------------------------------------------------------------
# ground-truth flow


def test_flow_defining_property():
    # P + F must equal the same physical points rendered under the clean
    # action instead of the noisy one.
    rng = np.random.default_rng(0)
    mesh = make_gripper_mesh("full")
    for trial in range(20):
        gripper_pose = expmap(random_small_twist(rng))
        cam = make_cam(expmap(Twist(np.array([0.0, 0.0, -0.5]), np.zeros(3))))
        noisy = random_small_twist(rng)
        clean = random_small_twist(rng)
        ra, pose_cam = rendered_cloud(noisy, gripper_pose, cam, mesh)
        assert len(ra.points) > 10
        flow = gt_flow(ra.points, noisy, clean, gripper_pose, cam.extrinsics)
        local = apply(inverse(pose_cam), ra.points)
        clean_cam = compose(
            compose(inverse(cam.extrinsics), gripper_pose), expmap(clean)
        )
        target = apply(clean_cam, local)
        assert np.abs(ra.points + flow - target).max() < 1e-9


def test_flow_zero_when_actions_agree():
    rng = np.random.default_rng(1)
    mesh = make_gripper_mesh("fingers_only")
    a = random_small_twist(rng)
    pose = expmap(random_small_twist(rng))
    cam = make_cam(expmap(Twist(np.array([0.0, 0.0, -0.4]), np.zeros(3))))
    ra, _ = rendered_cloud(a, pose, cam, mesh)
    flow = gt_flow(ra.points, a, a, pose, cam.extrinsics)
    assert np.abs(flow).max() < 1e-12


def test_flow_is_rigid_displacement():
    # All flow targets come from one rigid map: pairwise distances between
    # targets equal pairwise distances between source points.
    rng = np.random.default_rng(2)
    mesh = make_gripper_mesh("full")
    pose = expmap(random_small_twist(rng))
    cam = make_cam(expmap(Twist(np.array([0.0, 0.0, -0.5]), np.zeros(3))))
    ra, _ = rendered_cloud(random_small_twist(rng), pose, cam, mesh)
    flow = gt_flow(ra.points, random_small_twist(rng), random_small_twist(rng),
                   pose, cam.extrinsics)
    tgt = ra.points + flow
    idx = rng.integers(0, len(ra.points), size=(30, 2))
    d_src = np.linalg.norm(ra.points[idx[:, 0]] - ra.points[idx[:, 1]], axis=1)
    d_tgt = np.linalg.norm(tgt[idx[:, 0]] - tgt[idx[:, 1]], axis=1)
    assert np.abs(d_src - d_tgt).max() < 1e-10


# ---------------------------------------------------------------------------
# rigid registration


def test_svd_align_construct_and_check():
    rng = np.random.default_rng(3)
    for _ in range(200):
        src = rng.normal(size=(50, 3))
        truth = expmap(Twist(rng.normal(size=3), rng.normal(size=3)))
        dst = apply(truth, src)
        est = svd_align(src, dst)
        rot_err = logmap(compose(inverse(est), truth))
        assert np.linalg.norm(rot_err.w) < 1e-9
        assert np.linalg.norm(est.translation - truth.translation) < 1e-9
        assert abs(np.linalg.det(est.rotation) - 1.0) < 1e-12


def test_svd_align_noisy_average():
    # With zero-mean noise the estimate stays close to the true map.
    rng = np.random.default_rng(4)
    src = rng.normal(size=(500, 3))
    truth = expmap(Twist(np.array([0.1, -0.2, 0.05]), np.array([0.2, 0.1, -0.3])))
    dst = apply(truth, src) + 1e-3 * rng.normal(size=(500, 3))
    est = svd_align(src, dst)
    assert np.linalg.norm(est.translation - truth.translation) < 1e-3
    assert np.linalg.norm(logmap(compose(inverse(est), truth)).w) < 1e-3


def test_svd_align_reflection_guard():
    # A mirrored correspondence set must still produce det +1 (the fit is
    # then the best proper rotation, not the reflection).
    src = np.array(
        [[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [-1.0, 0, 0], [0, -1.0, 0],
         [0, 0, -1.0], [0.5, 0.5, 0], [0, 0.5, 0.5]]
    )
    dst = src.copy()
    dst[:, 2] *= -1.0  # reflection across z
    est = svd_align(src, dst)
    assert abs(np.linalg.det(est.rotation) - 1.0) < 1e-12


def test_svd_align_degenerate_inputs():
    with pytest.raises(DegenerateGeometryError):
        svd_align(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.linspace(0, 1, 30), np.array([1.0, 2.0, 3.0]))
    with pytest.raises(DegenerateGeometryError):
        svd_align(line, line + 0.1)


def test_svd_align_shape_mismatch():
    with pytest.raises(ValueError):
        svd_align(np.zeros((5, 3)), np.zeros((6, 3)))


# ---------------------------------------------------------------------------
# multi-view fusion and the action update


def test_fuse_views_moves_to_world_frame():
    rng = np.random.default_rng(5)
    pts_a = rng.normal(size=(10, 3))
    flow_a = 0.1 * rng.normal(size=(10, 3))
    pose_a = expmap(Twist(rng.normal(size=3), rng.normal(size=3) * 0.5))
    pts_b = rng.normal(size=(7, 3))
    flow_b = 0.1 * rng.normal(size=(7, 3))
    pose_b = expmap(Twist(rng.normal(size=3), rng.normal(size=3) * 0.5))
    fused = fuse_views(
        [FlowField(pts_a, flow_a), FlowField(pts_b, flow_b)], [pose_a, pose_b]
    )
    assert len(fused) == 17
    assert np.abs(fused.points[:10] - apply(pose_a, pts_a)).max() < 1e-12
    assert np.abs(fused.points[10:] - apply(pose_b, pts_b)).max() < 1e-12
    # flows are directions: rotation only, no translation
    assert np.abs(fused.flow[:10] - flow_a @ pose_a.rotation.T).max() < 1e-12


def test_fuse_views_consistent_targets():
    # Fusing camera-frame flows from one rigid motion gives world targets
    # on the same rigid motion: svd_align then recovers it exactly.
    rng = np.random.default_rng(6)
    mesh = make_gripper_mesh("full")
    gripper_pose = expmap(random_small_twist(rng))
    cams = [
        make_cam(expmap(Twist(np.array([0.0, 0.0, -0.5]), np.zeros(3)))),
        make_cam(expmap(Twist(np.array([0.1, -0.35, -0.35]),
                              np.array([0.7, 0.0, 0.0])))),
    ]
    noisy = random_small_twist(rng)
    clean = random_small_twist(rng)
    fields = []
    for cam in cams:
        ra, _ = rendered_cloud(noisy, gripper_pose, cam, mesh)
        flow = gt_flow(ra.points, noisy, clean, gripper_pose, cam.extrinsics)
        fields.append(FlowField(ra.points, flow))
    fused = fuse_views(fields, [c.extrinsics for c in cams])
    step = svd_align(fused.points, fused.targets())
    # the step in the world frame carries noisy-posed gripper to clean pose
    noisy_world = compose(gripper_pose, expmap(noisy))
    clean_world = compose(gripper_pose, expmap(clean))
    err = compose(inverse(compose(step, noisy_world)), clean_world)
    assert np.linalg.norm(logmap(err).as_vector()) < 1e-9


def test_update_action_recovers_clean_twist():
    rng = np.random.default_rng(7)
    for _ in range(20):
        g = expmap(random_small_twist(rng))
        a_noisy = random_small_twist(rng)
        a_clean = random_small_twist(rng)
        noisy_world = compose(g, expmap(a_noisy))
        clean_world = compose(g, expmap(a_clean))
        step = compose(clean_world, inverse(noisy_world))
        a_new = update_action(a_noisy, step, g)
        assert np.abs(a_new.as_vector() - a_clean.as_vector()).max() < 1e-9


def test_update_action_identity_step():
    rng = np.random.default_rng(8)
    a = random_small_twist(rng)
    g = expmap(random_small_twist(rng))
    a_new = update_action(a, RigidTransform.identity(), g)
    assert np.abs(a_new.as_vector() - a.as_vector()).max() < 1e-12


def test_flow_field_validation():
    with pytest.raises(ValueError):
        FlowField(np.zeros((5, 3)), np.zeros((4, 3)))
