"""Twists and rigid transforms: exp/log maps, composition, frame changes.

Conventions: a twist is (v, w) with v in metres per step and w in radians
per step; rotations are stored as 3x3 matrices throughout. Angles are kept
on the principal branch, |w| < pi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BranchAmbiguityError

# Below this angle the closed forms are replaced by 2nd-order series.
SMALL_ANGLE = 1e-8

# Compose chains longer than this are re-orthonormalized to bound drift.
REORTHO_EVERY = 64


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


@dataclass(frozen=True)
class Twist:
    """Element of se(3): linear part v (m/step) and angular part w (rad/step)."""

    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float).reshape(3).copy()
        w = np.asarray(self.w, dtype=float).reshape(3).copy()
        if not (np.isfinite(v).all() and np.isfinite(w).all()):
            raise ValueError("twist components must be finite")
        v.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "w", w)

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, a) -> "Twist":
        a = np.asarray(a, dtype=float).reshape(6)
        return cls(a[:3], a[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.w])

    def __eq__(self, other):
        if not isinstance(other, Twist):
            return NotImplemented
        return np.array_equal(self.v, other.v) and np.array_equal(self.w, other.w)


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: orthonormal rotation (det +1) plus translation in metres."""

    rotation: np.ndarray
    translation: np.ndarray
    # Number of compositions since construction from validated inputs; used to
    # decide when to re-orthonormalize.  Not part of the value.
    _ops: int = field(default=0, compare=False, repr=False)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3).copy()
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("transform entries must be finite")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation not orthonormal (max error {err:.3e})")
        det = np.linalg.det(r)
        if abs(det - 1.0) > 1e-9:
            raise ValueError(f"rotation determinant {det} != +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def _trusted(cls, rotation, translation, ops=0) -> "RigidTransform":
        # Internal fast path for products of already-validated transforms
        # (compose / inverse / expmap); skips the orthonormality audit,
        # which dominates runtime when poses are built per rendered frame.
        obj = object.__new__(cls)
        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(obj, "rotation", rotation)
        object.__setattr__(obj, "translation", translation)
        object.__setattr__(obj, "_ops", ops)
        return obj

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    # Polar decomposition via SVD; nearest rotation in Frobenius norm.
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        out = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return out


def expmap(a: Twist) -> RigidTransform:
    """SE(3) exponential: Rodrigues rotation plus left-Jacobian translation."""
    w = a.w
    theta = float(np.linalg.norm(w))
    wx = _skew(w)
    wx2 = wx @ wx
    if theta < SMALL_ANGLE:
        r = np.eye(3) + wx + 0.5 * wx2
        vmat = np.eye(3) + 0.5 * wx + wx2 / 6.0
    else:
        s = np.sin(theta)
        # 2 sin^2(t/2) / t^2 == (1 - cos t) / t^2 without the cancellation
        # that wrecks precision for angles just above the series cutoff.
        half_s = np.sin(0.5 * theta)
        bcoef = 2.0 * half_s * half_s / theta**2
        r = np.eye(3) + (s / theta) * wx + bcoef * wx2
        vmat = np.eye(3) + bcoef * wx + ((theta - s) / theta**3) * wx2
    return RigidTransform._trusted(r, vmat @ a.v)


def logmap(t: RigidTransform) -> Twist:
    """Inverse of expmap on the principal branch.

    Raises BranchAmbiguityError when the rotation angle is within 1e-6 of pi,
    where the axis sign is not recoverable.
    """
    r = t.rotation
    cos_theta = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta >= np.pi - 1e-6:
        raise BranchAmbiguityError(f"rotation angle {theta} too close to pi")
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < SMALL_ANGLE:
        w = vee
        wx = _skew(w)
        vinv = np.eye(3) - 0.5 * wx + (wx @ wx) / 12.0
    else:
        w = (theta / np.sin(theta)) * vee
        wx = _skew(w)
        coef = (1.0 / theta**2) - (1.0 + np.cos(theta)) / (
            2.0 * theta * np.sin(theta)
        )
        vinv = np.eye(3) - 0.5 * wx + coef * (wx @ wx)
    return Twist(vinv @ t.translation, w)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Group product a * b, re-orthonormalizing on long chains."""
    r = a.rotation @ b.rotation
    ops = a._ops + b._ops + 1
    if ops > REORTHO_EVERY:
        r = _reorthonormalize(r)
        ops = 0
    return RigidTransform._trusted(
        r, a.rotation @ b.translation + a.translation, ops
    )


def inverse(t: RigidTransform) -> RigidTransform:
    rt = np.ascontiguousarray(t.rotation.T)
    return RigidTransform._trusted(rt, -(rt @ t.translation), t._ops)


def apply(t: RigidTransform, p) -> np.ndarray:
    """Map a point (or an (N, 3) array of points) through the transform."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return t.rotation @ p + t.translation
    return p @ t.rotation.T + t.translation


def left_jacobian(w: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3); V in exp((v, w)) = (exp(w_hat), V v)."""
    w = np.asarray(w, dtype=float).reshape(3)
    theta = float(np.linalg.norm(w))
    wx = _skew(w)
    wx2 = wx @ wx
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * wx + wx2 / 6.0
    s = np.sin(theta)
    half_s = np.sin(0.5 * theta)
    bcoef = 2.0 * half_s * half_s / theta**2
    return np.eye(3) + bcoef * wx + ((theta - s) / theta**3) * wx2
