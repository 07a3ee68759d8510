"""Action chunks, noise schedules and deterministic denoising updates.

An action chunk is a short horizon of rigid-motion increments (twists)
plus a binary gripper flag per step.  Diffusion operates on the twist
part only — flags are predicted directly and never noised.

Two denoising update rules are provided: one in twist space driven by a
noise estimate, and one in point space driven by a per-point flow field.
Both are the deterministic (eta = 0) variant, so refinement can run on a
strict subsequence of the training schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWIST_DIM = 6


@dataclass(frozen=True)
class ActionChunk:
    """A horizon of twists (T, 6) and gripper flags (T,)."""

    twists: np.ndarray
    flags: np.ndarray

    def __post_init__(self):
        tw = np.asarray(self.twists, dtype=float).reshape(-1, TWIST_DIM)
        fl = np.asarray(self.flags, dtype=bool).reshape(-1)
        if len(fl) != len(tw):
            raise ValueError("one gripper flag per chunk step required")
        if not np.all(np.isfinite(tw)):
            raise ValueError("twists must be finite")
        tw.flags.writeable = False
        fl.flags.writeable = False
        object.__setattr__(self, "twists", tw)
        object.__setattr__(self, "flags", fl)

    @property
    def horizon(self) -> int:
        return len(self.twists)

    def flat(self) -> np.ndarray:
        """Twists as one (6T,) vector, chunk-step major."""
        return self.twists.reshape(-1).copy()

    def with_twists(self, twists) -> "ActionChunk":
        return ActionChunk(np.asarray(twists).reshape(-1, TWIST_DIM), self.flags)


class ActionNormalizer:
    """Per-dimension affine map of twists to roughly unit scale.

    Statistics are taken over every chunk step of the training set; a std
    floor keeps dimensions the data never exercises (e.g. z for a planar
    task) from blowing up.
    """

    STD_FLOOR = 1e-4

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=float).reshape(TWIST_DIM)
        self.std = np.asarray(std, dtype=float).reshape(TWIST_DIM)
        if np.any(self.std < self.STD_FLOOR):
            raise ValueError("std below floor; build via from_twists")

    @classmethod
    def from_twists(cls, twists) -> "ActionNormalizer":
        t = np.asarray(twists, dtype=float).reshape(-1, TWIST_DIM)
        return cls(t.mean(axis=0), np.maximum(t.std(axis=0), cls.STD_FLOOR))

    @classmethod
    def identity(cls) -> "ActionNormalizer":
        return cls(np.zeros(TWIST_DIM), np.ones(TWIST_DIM))

    def normalize(self, twists) -> np.ndarray:
        return (np.asarray(twists, dtype=float) - self.mean) / self.std

    def denormalize(self, normed) -> np.ndarray:
        return np.asarray(normed, dtype=float) * self.std + self.mean

    def state(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_state(cls, d) -> "ActionNormalizer":
        return cls(d["mean"], d["std"])


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients for K noising steps.

    ``alpha_bar`` has K+1 entries indexed by step, with ``alpha_bar[0]``
    exactly 1 (step 0 is the clean sample) and strictly decreasing after.
    """

    kind: str
    steps: int
    betas: np.ndarray  # (K,)
    alpha_bar: np.ndarray  # (K + 1,)

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=float)
        ab = np.asarray(self.alpha_bar, dtype=float)
        if len(ab) != self.steps + 1 or len(b) != self.steps:
            raise ValueError("schedule length mismatch")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if np.any(np.diff(ab) >= 0) or ab[-1] <= 0:
            raise ValueError("alpha_bar must stay in (0, 1] and strictly decrease")
        b.flags.writeable = False
        ab.flags.writeable = False
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alpha_bar", ab)


def make_schedule(kind: str, steps: int, offset: float = 0.008) -> NoiseSchedule:
    """Build a cosine or linear schedule with K = ``steps``.

    The cosine form follows the squared-cosine cumulative profile with a
    small offset, converted to per-step betas clipped at 0.999 and then
    re-accumulated so alpha_bar is an exact cumulative product of the
    stored betas.  The linear form spaces betas evenly over [1e-4, 0.02].
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if kind == "cosine":
        k = np.arange(steps + 1, dtype=float)
        f = np.cos((k / steps + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, 0.999)
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02, steps)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(kind, steps, betas, alpha_bar)


def add_noise(x0, eps, schedule: NoiseSchedule, k: int):
    """Forward-noise a clean sample to step k: sqrt(ab)*x0 + sqrt(1-ab)*eps."""
    ab = schedule.alpha_bar[k]
    return np.sqrt(ab) * np.asarray(x0, dtype=float) + np.sqrt(1.0 - ab) * np.asarray(
        eps, dtype=float
    )


def subsample_steps(train_steps: int, infer_steps: int) -> np.ndarray:
    """Strictly decreasing step sequence from K to 0 of length S + 1."""
    if not 1 <= infer_steps <= train_steps:
        raise ValueError("need 1 <= inference steps <= training steps")
    return np.floor(np.linspace(train_steps, 0, infer_steps + 1)).astype(int)


def ddim_step_actions(
    x_k, eps_hat, schedule: NoiseSchedule, k: int, k_prev: int, x0_clip: float = 0.0
):
    """Deterministic denoising update in (normalized) twist space.

    Reconstructs the clean estimate implied by the noise prediction, then
    re-noises it to the earlier step; at ``k_prev == 0`` the result is the
    clean estimate itself.

    ``x0_clip`` > 0 bounds the clean estimate to that many normalized
    units before re-noising.  Near the terminal step the reconstruction
    divides by sqrt(alpha_bar) ~ 1e-3, so a noise prediction that is even
    slightly off launches the estimate far outside the data range; the
    clip keeps such steps recoverable.  When clipping engages, the noise
    term is recomputed so the update stays consistent with ``x_k``.
    """
    if not 0 <= k_prev < k <= schedule.steps:
        raise ValueError("need 0 <= k_prev < k <= K")
    x_k = np.asarray(x_k, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    ab_k = schedule.alpha_bar[k]
    ab_prev = schedule.alpha_bar[k_prev]
    x0_hat = (x_k - np.sqrt(1.0 - ab_k) * eps_hat) / np.sqrt(ab_k)
    if x0_clip > 0.0:
        clipped = np.clip(x0_hat, -x0_clip, x0_clip)
        if not np.array_equal(clipped, x0_hat):
            x0_hat = clipped
            eps_hat = (x_k - np.sqrt(ab_k) * x0_hat) / np.sqrt(1.0 - ab_k)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def ddim_step_points(
    points_k, flow, schedule: NoiseSchedule, k: int, k_prev: int, scale: float
):
    """Deterministic denoising update on a rendered point cloud.

    ``points_k + flow`` is the clean-cloud estimate.  The blend happens in
    a normalized frame — centred on the current cloud's centroid, divided
    by ``scale`` (a workspace radius) — because the schedule's unit-noise
    assumption is meaningless for raw metric coordinates.  The centroid
    and scale cancel out of the k_prev == 0 case, which returns exactly
    ``points_k + flow``.
    """
    if not 0 <= k_prev < k <= schedule.steps:
        raise ValueError("need 0 <= k_prev < k <= K")
    if scale <= 0:
        raise ValueError("scale must be positive")
    points_k = np.asarray(points_k, dtype=float)
    flow = np.asarray(flow, dtype=float)
    if points_k.shape != flow.shape:
        raise ValueError("flow shape must match points")
    if k_prev == 0:
        return points_k + flow
    ab_k = schedule.alpha_bar[k]
    ab_prev = schedule.alpha_bar[k_prev]
    center = points_k.mean(axis=0)
    p_k = (points_k - center) / scale
    p0_hat = (points_k + flow - center) / scale
    blended = np.sqrt(ab_prev) * p0_hat + np.sqrt(
        (1.0 - ab_prev) / (1.0 - ab_k)
    ) * (p_k - np.sqrt(ab_k) * p0_hat)
    return blended * scale + center
