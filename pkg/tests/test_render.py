"""Rasterizer and mesh tools: depth against analytic geometry, coverage,
point-cloud identities, file formats."""

import collections
import os

import numpy as np
import pytest

from rendact.camera import PinholeCamera, back_project
from rendact.render import (
    Image,
    TriangleMesh,
    gripper_boxes,
    load_obj,
    make_box,
    make_gripper_mesh,
    merge_meshes,
    overlay,
    read_ppm,
    render_gripper,
    write_ppm,
)
from rendact.se3 import RigidTransform, Twist, expmap


def make_cam(w=128, h=128, f=110.0):
    return PinholeCamera(fx=f, fy=f, cx=w / 2.0, cy=h / 2.0, width=w, height=h,
                         extrinsics=RigidTransform.identity())


def quad_mesh(z=2.0, half=1.0, color=(0.8, 0.15, 0.15)):
    """Two triangles forming a square at constant depth z."""
    verts = np.array(
        [[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]]
    )
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    return TriangleMesh(verts, tris, np.tile(np.asarray(color, float), (4, 1)))


# ---------------------------------------------------------------------------
# meshes


def test_box_counts_and_watertightness():
    box = make_box((0, 0, 0), (0.1, 0.2, 0.3))
    # Flat shading duplicates vertices per face; watertightness is checked
    # on coordinates, not indices: every undirected edge borders 2 triangles.
    edges = collections.Counter()
    v = box.vertices
    for a, b, c in box.triangles:
        for i, j in ((a, b), (b, c), (c, a)):
            key = tuple(sorted([tuple(np.round(v[i], 12)), tuple(np.round(v[j], 12))]))
            edges[key] += 1
    assert all(n == 2 for n in edges.values())


def test_box_extents():
    box = make_box((0.5, -0.2, 0.1), (0.2, 0.4, 0.6))
    lo = box.vertices.min(axis=0)
    hi = box.vertices.max(axis=0)
    assert np.allclose(lo, [0.4, -0.4, -0.2])
    assert np.allclose(hi, [0.6, 0.0, 0.4])


def test_gripper_mesh_counts():
    full = make_gripper_mesh("full")
    fingers = make_gripper_mesh("fingers_only")
    assert full.vertices.shape == (118, 3) and full.triangles.shape == (88, 3)
    assert fingers.vertices.shape == (64, 3) and fingers.triangles.shape == (40, 3)


def test_gripper_finger_colors_disjoint():
    # Left and right fingers must be tellable apart in the rendered image.
    from rendact.render import LEFT_FINGER_COLORS, RIGHT_FINGER_COLORS

    left = set(LEFT_FINGER_COLORS.values())
    right = set(RIGHT_FINGER_COLORS.values())
    assert left and right and not (left & right)
    boxes = gripper_boxes("full")
    assert len(boxes) == 3 and len(gripper_boxes("fingers_only")) == 2
    # two finger boxes mirrored across y
    (c0, _, _, col0), (c1, _, _, col1) = boxes[0], boxes[1]
    assert c0[1] == -c1[1] and col0 is LEFT_FINGER_COLORS and col1 is RIGHT_FINGER_COLORS


def test_merge_meshes_preserves_geometry():
    a = make_box((0, 0, 0), (0.1, 0.1, 0.1))
    b = make_box((1, 0, 0), (0.1, 0.1, 0.1))
    m = merge_meshes([a, b])
    assert len(m.vertices) == len(a.vertices) + len(b.vertices)
    assert len(m.triangles) == len(a.triangles) + len(b.triangles)
    # index offset applied to the second part
    assert m.triangles[len(a.triangles):].min() >= len(a.vertices)


def test_transformed_moves_vertices():
    box = make_box((0, 0, 0), (0.2, 0.2, 0.2))
    t = expmap(Twist(np.array([0.3, 0.0, 0.0]), np.array([0.0, 0.0, 0.4])))
    moved = box.transformed(t)
    ref = box.vertices @ t.rotation.T + t.translation
    assert np.abs(moved.vertices - ref).max() < 1e-12
    assert np.array_equal(moved.triangles, box.triangles)


def test_mesh_validation():
    v = np.zeros((3, 3))
    with pytest.raises(ValueError):
        TriangleMesh(v, np.array([[0, 1, 5]]), np.zeros((3, 3), dtype=np.uint8))
    with pytest.raises(ValueError):
        TriangleMesh(v, np.array([[0, 1, 2]]), np.zeros((2, 3), dtype=np.uint8))


# ---------------------------------------------------------------------------
# rasterization


def test_flat_quad_depth_exact():
    # Constant-depth geometry: interpolation cannot introduce any error,
    # and the screen extent is known analytically (u = f*x/z + cx).
    cam = make_cam()
    z, half = 2.0, 1.0
    ra = render_gripper(quad_mesh(z, half), RigidTransform.identity(), cam)
    assert ra.mask.any()
    assert np.abs(ra.depth[ra.mask] - z).max() == 0.0
    lo = int(np.ceil(cam.fx * -half / z + cam.cx - 0.5))
    hi = int(np.floor(cam.fx * half / z + cam.cx - 0.5))
    cols = np.where(ra.mask.any(axis=0))[0]
    assert cols.min() == lo and cols.max() == hi


def test_sloped_quad_depth_matches_plane_equation():
    # Plane z = 2 + 0.5x: the depth at each covered pixel centre must
    # solve the ray-plane intersection analytically.
    cam = make_cam()
    verts = np.array(
        [[-1.0, -1.0, 1.5], [1.0, -1.0, 2.5], [1.0, 1.0, 2.5], [-1.0, 1.0, 1.5]]
    )
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    mesh = TriangleMesh(verts, tris, np.full((4, 3), 120, dtype=np.uint8))
    ra = render_gripper(mesh, RigidTransform.identity(), cam)
    vs, us = np.nonzero(ra.mask)
    # ray through pixel (u,v): x = (u + .5 - cx) z / f; plane: z = 2 + 0.5 x
    xdir = (us + 0.5 - cam.cx) / cam.fx
    z_ref = 2.0 / (1.0 - 0.5 * xdir)
    assert np.abs(ra.depth[vs, us] - z_ref).max() < 1e-10


def test_zbuffer_orders_surfaces():
    near = quad_mesh(z=1.0, half=0.2, color=(0.0, 0.8, 0.0))
    far = quad_mesh(z=3.0, half=1.2, color=(0.8, 0.0, 0.0))
    cam = make_cam()
    ra = render_gripper(merge_meshes([far, near]), RigidTransform.identity(), cam)
    green = tuple(np.rint(np.array([0.0, 0.8, 0.0]) * 255).astype(int))
    red = tuple(np.rint(np.array([0.8, 0.0, 0.0]) * 255).astype(int))
    assert tuple(ra.render.pixels[64, 64]) == green
    assert ra.depth[64, 64] == 1.0
    row = np.where(ra.mask[64])[0]
    # far quad visible outside the near quad's footprint
    assert tuple(ra.render.pixels[64, row.min()]) == red
    assert ra.depth[64, row.min()] == 3.0


def test_points_are_backprojected_pixel_centers():
    cam = make_cam()
    mesh = make_gripper_mesh("full").transformed(
        RigidTransform(np.eye(3), np.array([0.0, 0.0, 0.45]))
    )
    ra = render_gripper(mesh, RigidTransform.identity(), cam)
    assert len(ra.points) == int(ra.mask.sum()) > 0
    vs, us = np.nonzero(ra.mask)  # row-major order matches points
    for i in (0, len(ra.points) // 2, len(ra.points) - 1):
        ref = back_project(cam, us[i] + 0.5, vs[i] + 0.5, ra.depth[vs[i], us[i]])
        assert np.abs(ra.points[i] - ref).max() == 0.0


def test_point_count_scales_with_distance():
    cam = make_cam()
    mesh = make_gripper_mesh("full")
    n_near = len(render_gripper(
        mesh.transformed(RigidTransform(np.eye(3), np.array([0, 0, 0.35]))),
        RigidTransform.identity(), cam).points)
    n_far = len(render_gripper(
        mesh.transformed(RigidTransform(np.eye(3), np.array([0, 0, 0.7]))),
        RigidTransform.identity(), cam).points)
    assert n_near > n_far > 0


def test_behind_camera_mesh_renders_empty():
    cam = make_cam()
    mesh = quad_mesh(z=-1.0)
    ra = render_gripper(mesh, RigidTransform.identity(), cam)
    assert not ra.mask.any() and len(ra.points) == 0
    assert (ra.depth == 0.0).all()  # depth is 0 outside coverage
    assert (ra.render.pixels == 0).all()


def test_offscreen_mesh_renders_empty():
    cam = make_cam()
    far_left = make_box((-50.0, 0.0, 2.0), (0.1, 0.1, 0.1))
    ra = render_gripper(far_left, RigidTransform.identity(), cam)
    assert not ra.mask.any() and len(ra.points) == 0


def test_render_deterministic():
    cam = make_cam()
    pose = expmap(Twist(np.array([0.02, -0.01, 0.4]), np.array([0.1, 0.2, 0.3])))
    mesh = make_gripper_mesh("full")
    a = render_gripper(mesh, pose, cam)
    b = render_gripper(mesh, pose, cam)
    assert np.array_equal(a.render.pixels, b.render.pixels)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.points, b.points)


def test_batched_and_looped_paths_agree(monkeypatch):
    import rendact.render as R

    cam = make_cam()
    pose = expmap(Twist(np.array([0.03, 0.01, 0.45]), np.array([0.2, -0.1, 0.5])))
    mesh = make_gripper_mesh("full")
    fast = render_gripper(mesh, pose, cam)
    monkeypatch.setattr(R, "_BATCH_LIMIT", 0)  # force the per-triangle loop
    slow = render_gripper(mesh, pose, cam)
    assert np.array_equal(fast.render.pixels, slow.render.pixels)
    assert np.array_equal(fast.depth, slow.depth)
    assert np.array_equal(fast.mask, slow.mask)


def test_adjacent_triangles_leave_no_seam():
    # The shared diagonal of a quad must not produce holes or double hits
    # under the top-left fill rule.
    cam = make_cam()
    ra = render_gripper(quad_mesh(z=1.5, half=0.5), RigidTransform.identity(), cam)
    vs, us = np.nonzero(ra.mask)
    # covered region is a solid rectangle: every row between min/max filled
    for r in range(vs.min(), vs.max() + 1):
        row = np.where(ra.mask[r])[0]
        assert len(row) == row.max() - row.min() + 1


def test_overlay():
    base = Image.filled(8, 8, (0, 0, 0))
    cam = PinholeCamera(fx=8.0, fy=8.0, cx=4.0, cy=4.0, width=8, height=8,
                        extrinsics=RigidTransform.identity())
    ra = render_gripper(quad_mesh(z=1.0, half=0.2, color=(0.98, 0.98, 0.98)),
                        RigidTransform.identity(), cam)
    out = overlay(base, ra, tint=(1.0, 0.5, 0.25))
    assert out.pixels.shape == (8, 8, 3)
    on = ra.mask
    assert (out.pixels[~on] == 0).all()
    lit = out.pixels[on]
    assert (lit[:, 0] > lit[:, 1]).all() and (lit[:, 1] > lit[:, 2]).all()
    small = Image.filled(4, 4, (0, 0, 0))
    with pytest.raises(ValueError):
        overlay(small, ra)


# ---------------------------------------------------------------------------
# file formats


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = Image(rng.integers(0, 256, size=(33, 17, 3), dtype=np.uint8))
    p = os.path.join(tmp_path, "x.ppm")
    write_ppm(p, img)
    back = read_ppm(p)
    assert np.array_equal(back.pixels, img.pixels)
    raw = open(p, "rb").read()
    assert raw.startswith(b"P6\n17 33\n255\n")
    assert len(raw) == len(b"P6\n17 33\n255\n") + 33 * 17 * 3


def test_obj_round_trip(tmp_path):
    mesh = make_box((0.1, 0.2, 0.3), (0.2, 0.3, 0.4))
    p = os.path.join(tmp_path, "box.obj")
    lines = []
    for v, c in zip(mesh.vertices, mesh.vertex_colors):
        lines.append("v %.9f %.9f %.9f %.6f %.6f %.6f" % (*v, *c))
    for t in mesh.triangles:
        lines.append("f %d %d %d" % (t[0] + 1, t[1] + 1, t[2] + 1))
    with open(p, "w") as f:
        f.write("\n".join(lines) + "\n")
    back = load_obj(p)
    assert np.abs(back.vertices - mesh.vertices).max() < 1e-8
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.abs(back.vertex_colors - mesh.vertex_colors).max() < 1e-5


def test_obj_face_with_slashes(tmp_path):
    p = os.path.join(tmp_path, "slash.obj")
    with open(p, "w") as f:
        f.write("v 0 0 1\nv 1 0 1\nv 0 1 1\nf 1/1 2/2/2 3//3\n")
    mesh = load_obj(p)
    assert np.array_equal(mesh.triangles, [[0, 1, 2]])
