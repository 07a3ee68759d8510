"""Software triangle rasterizer for rendered gripper actions.

Renders a coloured gripper mesh into an RGB frame with a z-buffer, and
back-projects the covered pixels into a camera-frame point cloud whose
pixel correspondence is known by construction.  Flat shading, no lighting:
the colours exist to make the 6D pose readable, not for realism.

Rasterization rules: pixel centres at integer + 0.5, top-left fill rule on
edge ties, nearest fragment wins with ties going to the lowest triangle
index.  Output is bit-deterministic for identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import NEAR_PLANE, PinholeCamera, back_project_many
from .se3 import RigidTransform, apply

# Above this many triangle x pixel pairs the rasterizer switches from one
# batched evaluation to a per-triangle loop to bound memory.
_BATCH_LIMIT = 1_000_000


@dataclass(frozen=True)
class TriangleMesh:
    """Triangle soup with per-vertex colours.

    Faces meant to be flat-coloured duplicate their vertices so that each
    copy can carry the face colour; watertightness is a property of vertex
    positions, not indices.
    """

    vertices: np.ndarray  # (V, 3) float, metres
    triangles: np.ndarray  # (T, 3) int
    vertex_colors: np.ndarray  # (V, 3) float in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        c = np.asarray(self.vertex_colors, dtype=float).reshape(-1, 3)
        if len(c) != len(v):
            raise ValueError("vertex_colors length must match vertices")
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        for a in (v, t, c):
            a.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "vertex_colors", c)

    def transformed(self, t: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(apply(t, self.vertices), self.triangles, self.vertex_colors)


def merge_meshes(meshes) -> TriangleMesh:
    verts, tris, cols = [], [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        cols.append(m.vertex_colors)
        offset += len(m.vertices)
    return TriangleMesh(np.vstack(verts), np.vstack(tris), np.vstack(cols))


@dataclass(frozen=True)
class Image:
    """8-bit RGB frame, row-major."""

    pixels: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        p = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError("pixels must have shape (H, W, 3)")
        p.flags.writeable = False
        object.__setattr__(self, "pixels", p)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def filled(cls, width, height, rgb=(0, 0, 0)) -> "Image":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[:] = rgb
        return cls(px)

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(
            self.pixels, other.pixels
        )


@dataclass(frozen=True)
class RenderedAction:
    """Per-camera render of a gripper pose plus its partial point cloud.

    ``points[i]`` is the back-projection of pixel centre
    ``(pixel_index[i] + 0.5)`` at ``depth`` of that pixel, in the camera
    frame; points are listed in row-major pixel order.
    """

    render: Image
    mask: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W) float, valid where mask; 0 elsewhere
    points: np.ndarray  # (N, 3) camera frame
    pixel_index: np.ndarray  # (N, 2) int, (u, v) per point

    def __post_init__(self):
        n_masked = int(np.count_nonzero(self.mask))
        if len(self.points) != n_masked:
            raise ValueError(
                f"{len(self.points)} points for {n_masked} masked pixels"
            )

    @property
    def num_points(self) -> int:
        return len(self.points)


def _empty_rendered_action(cam: PinholeCamera) -> RenderedAction:
    h, w = cam.height, cam.width
    return RenderedAction(
        render=Image.filled(w, h),
        mask=np.zeros((h, w), dtype=bool),
        depth=np.zeros((h, w)),
        points=np.zeros((0, 3)),
        pixel_index=np.zeros((0, 2), dtype=np.int64),
    )


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _is_top_left(ax, ay, bx, by):
    """With positive screen-space winding, top and left edges are the ones
    whose ties count as covered (the top-left fill rule)."""
    return (by < ay) | ((by == ay) & (bx > ax))


def render_gripper(
    mesh: TriangleMesh, pose_cam: RigidTransform, cam: PinholeCamera
) -> RenderedAction:
    """Rasterize the mesh posed in the camera frame.

    Triangles with any vertex at or behind the near plane are dropped; a
    mesh entirely behind the camera yields an empty RenderedAction rather
    than an error.
    """
    if len(mesh.triangles) == 0:
        raise ValueError("mesh is empty")
    verts = apply(pose_cam, mesh.vertices)
    tri = mesh.triangles
    z = verts[:, 2]
    keep = np.all(z[tri] > NEAR_PLANE, axis=1)
    tri = tri[keep]
    if len(tri) == 0:
        return _empty_rendered_action(cam)

    u = cam.fx * verts[:, 0] / z + cam.cx
    v = cam.fy * verts[:, 1] / z + cam.cy
    tu, tv, tz = u[tri], v[tri], z[tri]  # (T, 3)

    # Consistent positive orientation in screen space (no backface culling).
    area2 = _edge(tu[:, 0], tv[:, 0], tu[:, 1], tv[:, 1], tu[:, 2], tv[:, 2])
    flip = area2 < 0
    for arr in (tu, tv, tz):
        arr[flip] = arr[flip][:, [0, 2, 1]]
    area2 = np.abs(area2)
    ok = area2 > 0
    tu, tv, tz, area2 = tu[ok], tv[ok], tz[ok], area2[ok]
    tri_color = mesh.vertex_colors[mesh.triangles[keep][ok]].mean(axis=1)
    if len(tu) == 0:
        return _empty_rendered_action(cam)

    x0 = max(0, int(np.ceil(tu.min() - 0.5)))
    x1 = min(cam.width - 1, int(np.floor(tu.max() - 0.5)))
    y0 = max(0, int(np.ceil(tv.min() - 0.5)))
    y1 = min(cam.height - 1, int(np.floor(tv.max() - 0.5)))
    if x1 < x0 or y1 < y0:
        return _empty_rendered_action(cam)

    n_tri = len(tu)
    n_pix = (x1 - x0 + 1) * (y1 - y0 + 1)
    if n_tri * n_pix <= _BATCH_LIMIT:
        depth_roi, color_roi = _raster_batched(tu, tv, tz, area2, tri_color, x0, x1, y0, y1)
    else:
        depth_roi, color_roi = _raster_per_triangle(
            tu, tv, tz, area2, tri_color, x0, x1, y0, y1
        )

    h, w = cam.height, cam.width
    mask = np.zeros((h, w), dtype=bool)
    depth = np.zeros((h, w))
    pix = np.zeros((h, w, 3), dtype=np.uint8)
    roi_mask = np.isfinite(depth_roi)
    mask[y0 : y1 + 1, x0 : x1 + 1] = roi_mask
    depth[y0 : y1 + 1, x0 : x1 + 1] = np.where(roi_mask, depth_roi, 0.0)
    rgb = np.clip(np.rint(color_roi * 255.0), 0, 255).astype(np.uint8)
    pix[y0 : y1 + 1, x0 : x1 + 1][roi_mask] = rgb[roi_mask]

    vv, uu = np.nonzero(mask)  # row-major point order
    centers = np.column_stack([uu + 0.5, vv + 0.5])
    points = back_project_many(cam, centers, depth[vv, uu])
    return RenderedAction(
        render=Image(pix),
        mask=mask,
        depth=depth,
        points=points,
        pixel_index=np.column_stack([uu, vv]).astype(np.int64),
    )


def _pixel_grid(x0, x1, y0, y1):
    xs = np.arange(x0, x1 + 1) + 0.5
    ys = np.arange(y0, y1 + 1) + 0.5
    px, py = np.meshgrid(xs, ys)
    return px.ravel(), py.ravel()


def _coverage_and_invz(tu, tv, tz, area2, px, py):
    """Coverage mask and interpolated 1/z (perspective-correct) per pixel.

    Each edge function doubles as the coverage test and the screen-space
    barycentric weight of the opposite vertex, so it is evaluated once.
    Returns 1/z with -inf outside coverage: the z-buffer resolves on the
    largest 1/z and only the winners get a reciprocal.
    """
    e0 = _edge(tu[..., 1], tv[..., 1], tu[..., 2], tv[..., 2], px, py)
    e1 = _edge(tu[..., 2], tv[..., 2], tu[..., 0], tv[..., 0], px, py)
    e2 = _edge(tu[..., 0], tv[..., 0], tu[..., 1], tv[..., 1], px, py)
    inside = (
        (e0 > 0) | ((e0 == 0) & _is_top_left(tu[..., 1], tv[..., 1], tu[..., 2], tv[..., 2]))
    ) & (
        (e1 > 0) | ((e1 == 0) & _is_top_left(tu[..., 2], tv[..., 2], tu[..., 0], tv[..., 0]))
    ) & (
        (e2 > 0) | ((e2 == 0) & _is_top_left(tu[..., 0], tv[..., 0], tu[..., 1], tv[..., 1]))
    )
    rz = 1.0 / tz
    inv_z = (e0 * rz[..., 0] + e1 * rz[..., 1] + e2 * rz[..., 2]) * (1.0 / area2)
    return np.where(inside, inv_z, -np.inf)


def _raster_batched(tu, tv, tz, area2, tri_color, x0, x1, y0, y1):
    px, py = _pixel_grid(x0, x1, y0, y1)
    shape = (y1 - y0 + 1, x1 - x0 + 1)
    inv_z = _coverage_and_invz(
        tu[:, None, :], tv[:, None, :], tz[:, None, :],
        area2[:, None], px[None, :], py[None, :],
    )
    best = np.argmax(inv_z, axis=0)
    cols = np.arange(inv_z.shape[1])
    best_inv = inv_z[best, cols]
    hit = best_inv > 0
    depth = np.where(hit, 1.0 / np.where(hit, best_inv, 1.0), np.inf)
    color = np.where(hit[:, None], tri_color[best], 0.0)
    return depth.reshape(shape), color.reshape(shape + (3,))


def _raster_per_triangle(tu, tv, tz, area2, tri_color, x0, x1, y0, y1):
    shape = (y1 - y0 + 1, x1 - x0 + 1)
    zbuf = np.full(shape, -np.inf)  # stores 1/z
    color = np.zeros(shape + (3,))
    for i in range(len(tu)):
        bx0 = max(x0, int(np.ceil(tu[i].min() - 0.5)))
        bx1 = min(x1, int(np.floor(tu[i].max() - 0.5)))
        by0 = max(y0, int(np.ceil(tv[i].min() - 0.5)))
        by1 = min(y1, int(np.floor(tv[i].max() - 0.5)))
        if bx1 < bx0 or by1 < by0:
            continue
        px, py = _pixel_grid(bx0, bx1, by0, by1)
        inv_z = _coverage_and_invz(tu[i], tv[i], tz[i], area2[i], px, py)
        inv_z = inv_z.reshape(by1 - by0 + 1, bx1 - bx0 + 1)
        sub = (slice(by0 - y0, by1 - y0 + 1), slice(bx0 - x0, bx1 - x0 + 1))
        closer = inv_z > zbuf[sub]
        if not closer.any():
            continue
        zbuf[sub] = np.where(closer, inv_z, zbuf[sub])
        color[sub][closer] = tri_color[i]
    hit = zbuf > 0
    depth = np.where(hit, 1.0 / np.where(hit, zbuf, 1.0), np.inf)
    return depth, color


def overlay(observation: Image, ra: RenderedAction, tint=(1.0, 1.0, 1.0)) -> Image:
    """Draw the rendered gripper over an observation frame.

    Masked pixels take the render colour modulated by the tint; everything
    else is untouched.  The render is always drawn on top (no scene depth
    exists to resolve against).
    """
    if (observation.height, observation.width) != ra.mask.shape:
        raise ValueError("observation and render dimensions differ")
    out = observation.pixels.copy()
    tinted = np.clip(
        np.rint(ra.render.pixels.astype(float) * np.asarray(tint, dtype=float)),
        0,
        255,
    ).astype(np.uint8)
    out[ra.mask] = tinted[ra.mask]
    return Image(out)


# ---------------------------------------------------------------------------
# procedural gripper


def make_box(center, size, segments=(1, 1, 1), face_colors=None) -> TriangleMesh:
    """Axis-aligned box with subdivided, flat-coloured faces.

    ``face_colors`` maps face keys '+x', '-x', '+y', '-y', '+z', '-z' to
    RGB; a plain RGB triple colours all faces.  Vertices are duplicated per
    face so each face holds a uniform colour; positions still meet edge to
    edge, so the box is geometrically watertight.
    """
    center = np.asarray(center, dtype=float)
    size = np.asarray(size, dtype=float)
    if face_colors is None:
        face_colors = (0.7, 0.7, 0.7)
    if not isinstance(face_colors, dict):
        face_colors = {k: face_colors for k in ("+x", "-x", "+y", "-y", "+z", "-z")}

    verts, tris, cols = [], [], []
    # (face key, normal axis, sign, in-plane axes)
    faces = [
        ("+x", 0, +1, 1, 2),
        ("-x", 0, -1, 1, 2),
        ("+y", 1, +1, 0, 2),
        ("-y", 1, -1, 0, 2),
        ("+z", 2, +1, 0, 1),
        ("-z", 2, -1, 0, 1),
    ]
    for key, axis, sign, a, b in faces:
        sa, sb = segments[a], segments[b]
        ga = np.linspace(-0.5, 0.5, sa + 1) * size[a] + center[a]
        gb = np.linspace(-0.5, 0.5, sb + 1) * size[b] + center[b]
        base = len(verts)
        for j in range(sb + 1):
            for i in range(sa + 1):
                p = np.empty(3)
                p[axis] = center[axis] + sign * 0.5 * size[axis]
                p[a] = ga[i]
                p[b] = gb[j]
                verts.append(p)
                cols.append(face_colors[key])
        for j in range(sb):
            for i in range(sa):
                q = base + j * (sa + 1) + i
                quad = (q, q + 1, q + sa + 2, q + sa + 1)
                if sign > 0:
                    tris.append((quad[0], quad[1], quad[2]))
                    tris.append((quad[0], quad[2], quad[3]))
                else:
                    tris.append((quad[0], quad[2], quad[1]))
                    tris.append((quad[0], quad[3], quad[2]))
    return TriangleMesh(np.array(verts), np.array(tris), np.array(cols))


# Gripper layout, local frame: origin at the grasp point between the
# fingertips, fingers extend up to FINGER_LEN along +z, palm above them.
FINGER_LEN = 0.06
FINGER_SIZE = (0.016, 0.012, FINGER_LEN)
FINGER_GAP = 0.048  # between inner faces
PALM_SIZE = (0.05, 0.09, 0.04)
PALM_OVERLAP = 0.005  # fingers embed into the palm; avoids coincident faces

LEFT_FINGER_COLORS = {
    "+x": (0.85, 0.20, 0.20),
    "-x": (0.85, 0.20, 0.20),
    "+y": (0.85, 0.20, 0.20),
    "-y": (0.70, 0.10, 0.10),
    "+z": (0.85, 0.20, 0.20),
    "-z": (0.95, 0.35, 0.35),
}
RIGHT_FINGER_COLORS = {
    "+x": (0.20, 0.35, 0.90),
    "-x": (0.20, 0.35, 0.90),
    "+y": (0.10, 0.20, 0.70),
    "-y": (0.20, 0.35, 0.90),
    "+z": (0.20, 0.35, 0.90),
    "-z": (0.40, 0.55, 0.95),
}
PALM_COLORS = {
    "+x": (0.95, 0.75, 0.20),
    "-x": (0.20, 0.80, 0.30),
    "+y": (0.90, 0.50, 0.15),
    "-y": (0.55, 0.25, 0.75),
    "+z": (0.80, 0.80, 0.80),
    "-z": (0.40, 0.40, 0.45),
}

# Documented mesh constants (asserted in tests; update together with the
# geometry above).
FULL_VERTEX_COUNT = 118
FULL_TRIANGLE_COUNT = 88
FINGERS_ONLY_VERTEX_COUNT = 64
FINGERS_ONLY_TRIANGLE_COUNT = 40


def gripper_boxes(style="full"):
    """(center, size, segments, colors) specs for each box of the gripper."""
    half_gap = 0.5 * (FINGER_GAP + FINGER_SIZE[1])
    finger_z = 0.5 * FINGER_LEN
    boxes = [
        ((0.0, -half_gap, finger_z), FINGER_SIZE, (1, 1, 2), LEFT_FINGER_COLORS),
        ((0.0, +half_gap, finger_z), FINGER_SIZE, (1, 1, 2), RIGHT_FINGER_COLORS),
    ]
    if style == "full":
        palm_z = FINGER_LEN - PALM_OVERLAP + 0.5 * PALM_SIZE[2]
        boxes.append(((0.0, 0.0, palm_z), PALM_SIZE, (2, 2, 2), PALM_COLORS))
    elif style != "fingers_only":
        raise ValueError(f"unknown gripper style {style!r}")
    return boxes


def make_gripper_mesh(style="full") -> TriangleMesh:
    """Two-finger gripper: palm box plus finger boxes, symmetry-breaking colours.

    ``fingers_only`` omits the palm (used for wrist-mounted cameras).
    """
    return merge_meshes(
        make_box(c, s, seg, col) for c, s, seg, col in gripper_boxes(style)
    )


# ---------------------------------------------------------------------------
# file formats


def write_ppm(path, image: Image) -> None:
    """Binary PPM (P6, maxval 255)."""
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (image.width, image.height))
        f.write(image.pixels.tobytes())


def read_ppm(path) -> Image:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError("not a P6 maxval-255 PPM")
    w, h = (int(x) for x in parts[1].split())
    px = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return Image(px.copy())


def load_obj(path) -> TriangleMesh:
    """Minimal OBJ subset: 'v x y z [r g b]' and triangular 'f a b c' lines.

    Face indices are 1-based; 'f' entries of the form a/b/c use only the
    vertex index.  All other line types are ignored.  Vertices without
    colours default to mid grey.
    """
    verts, cols, tris = [], [], []
    with open(path) as f:
        for line in f:
            fields = line.split()
            if not fields:
                continue
            if fields[0] == "v":
                verts.append([float(x) for x in fields[1:4]])
                if len(fields) >= 7:
                    cols.append([float(x) for x in fields[4:7]])
                else:
                    cols.append([0.6, 0.6, 0.6])
            elif fields[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in fields[1:]]
                if len(idx) != 3:
                    raise ValueError("only triangular faces are supported")
                tris.append([i - 1 for i in idx])
    return TriangleMesh(np.array(verts), np.array(tris, dtype=np.int64), np.array(cols))
