"""Denoisers over rendered action chunks, their training, and inference.

A denoiser maps (observation history, per-step gripper renders, diffusion
step k) to three predictions: twist-space noise, per-point flow for each
render, and gripper-flag logits.  Two implementations are provided:

* ``OracleDenoiser`` — answers from a known clean chunk by exact
  inversion.  It has no parameters and exists to exercise the refinement
  loop end to end, separating loop bugs from learning problems.
* ``MlpDenoiser`` — a small fully-connected network on average-pooled
  image features, trained with analytic gradients (no autodiff
  dependency) so the arithmetic stays auditable.

Inference refines a noise sample with a deterministic denoising loop and
supports three routes: twist-space only ("A"), image-space only ("I",
flow -> fuse -> rigid fit -> twist update), and the blend "AI" that takes
the image route per chunk step when enough points are visible and always
finishes with a twist-space step.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .align import FlowField, fuse_views, gt_flow, svd_align, update_action
from .camera import PinholeCamera
from .config import RunConfig, config_from_dict
from .diffusion import (
    TWIST_DIM,
    ActionChunk,
    ActionNormalizer,
    NoiseSchedule,
    add_noise,
    ddim_step_actions,
    ddim_step_points,
    make_schedule,
    subsample_steps,
)
from .errors import DataFormatError, NoVisibilityError, TrainingDivergedError
from .render import Image, make_gripper_mesh, render_gripper
from .se3 import RigidTransform, Twist, compose, expmap, inverse, left_jacobian

MODEL_MAGIC = b"RNDD"
MODEL_VERSION = 1

ORACLE_LOGIT = 10.0


@dataclass(frozen=True)
class DenoiserInput:
    """Everything a denoiser may condition on at one diffusion step.

    ``observations[c][h]`` is the h-th history frame (oldest first) of
    camera c; ``renders[c][t]`` the render of chunk step t in camera c.
    The noisy chunk itself plus the scene geometry ride along so that
    denoisers needing exact targets (the oracle) or camera context can
    get at them.
    """

    observations: tuple  # [camera][history] of Image
    renders: tuple  # [camera][chunk step] of RenderedAction
    gripper_state: float
    k: int
    noisy_twists_norm: np.ndarray  # (T, 6), normalized
    gripper_pose: RigidTransform
    cameras: tuple  # of PinholeCamera


@dataclass(frozen=True)
class DenoiserOutput:
    eps: np.ndarray  # (T, 6) noise estimate, normalized twist space
    flows: tuple  # [camera][chunk step] of (N, 3) camera-frame flow
    grip_logits: np.ndarray  # (T,)


def render_chunk(twists_raw, gripper_pose, cameras, meshes):
    """Render each chunk step's pose into each camera.

    Chunk twists are relative to the current gripper pose, so step t
    renders at ``gripper_pose * exp(a_t)``.
    """
    out = []
    for cam, mesh in zip(cameras, meshes):
        t_c_w = inverse(cam.extrinsics)
        row = []
        for a in np.asarray(twists_raw, dtype=float).reshape(-1, TWIST_DIM):
            pose_cam = compose(compose(t_c_w, gripper_pose), expmap(Twist.from_vector(a)))
            row.append(render_gripper(mesh, pose_cam, cam))
        out.append(tuple(row))
    return tuple(out)


class OracleDenoiser:
    """Exact denoiser for a known clean chunk.

    The noise estimate is the algebraic inversion of the forward-noising
    identity at step k (zero at k = 0), and flows are the exact rigid
    displacement between the rendered noisy pose and the clean pose, so
    the twist route reproduces the clean chunk to machine precision and
    the image route feeds an exactly-consistent cloud to the rigid fit.
    """

    def __init__(self, clean: ActionChunk, normalizer: ActionNormalizer,
                 schedule: NoiseSchedule):
        self.clean = clean
        self.normalizer = normalizer
        self.schedule = schedule

    @property
    def horizon(self) -> int:
        return self.clean.horizon

    def denoise(self, inp: DenoiserInput) -> DenoiserOutput:
        x0n = self.normalizer.normalize(self.clean.twists)
        ab = self.schedule.alpha_bar[inp.k]
        if inp.k > 0:
            eps = (inp.noisy_twists_norm - np.sqrt(ab) * x0n) / np.sqrt(1.0 - ab)
        else:
            eps = np.zeros_like(x0n)
        raw = self.normalizer.denormalize(inp.noisy_twists_norm)
        flows = []
        for cam, cam_renders in zip(inp.cameras, inp.renders):
            row = []
            for t, ra in enumerate(cam_renders):
                row.append(
                    gt_flow(
                        ra.points,
                        Twist.from_vector(raw[t]),
                        Twist.from_vector(self.clean.twists[t]),
                        inp.gripper_pose,
                        cam.extrinsics,
                    )
                )
            flows.append(tuple(row))
        logits = np.where(self.clean.flags, ORACLE_LOGIT, -ORACLE_LOGIT)
        return DenoiserOutput(eps, tuple(flows), logits)


# ---------------------------------------------------------------------------
# feature extraction


def _pool2d(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by pool factor {factor}")
    return img.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def _gray01(pixels: np.ndarray) -> np.ndarray:
    return pixels.mean(axis=2) / 255.0


def obs_features(observations, pool: int) -> np.ndarray:
    """Pooled grayscale of every history frame, camera-major."""
    parts = [
        _pool2d(_gray01(frame.pixels), pool).ravel()
        for cam_frames in observations
        for frame in cam_frames
    ]
    return np.concatenate(parts)


def render_features(renders, pool: int) -> np.ndarray:
    """Pooled coverage mask and grayscale per render, camera-major."""
    parts = []
    for cam_renders in renders:
        for ra in cam_renders:
            parts.append(_pool2d(ra.mask.astype(float), pool).ravel())
            parts.append(_pool2d(_gray01(ra.render.pixels), pool).ravel())
    return np.concatenate(parts)


def step_embedding(k: int, total: int, freqs: int) -> np.ndarray:
    ang = np.pi * (2.0 ** np.arange(freqs)) * (k / total)
    return np.concatenate([np.sin(ang), np.cos(ang)])


# ---------------------------------------------------------------------------
# MLP denoiser


def _skew(v):
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


class MlpDenoiser:
    """Fully-connected denoiser on pooled image features.

    The flow head is low-dimensional on purpose: in ``rigid`` mode it
    emits one 6-vector (rotation, translation) per camera and chunk step,
    decoded to per-point flow through the exponential map — the cloud is
    rigid, so a per-pixel field would only add parameters.  ``dense``
    mode emits one flow vector per pooled cell instead, for comparison.
    """

    def __init__(self, cfg: RunConfig, rng: np.random.Generator,
                 normalizer: ActionNormalizer | None = None):
        self.cfg = cfg
        self.normalizer = normalizer or ActionNormalizer.identity()
        net, env, cam = cfg.network, cfg.env, cfg.camera
        self.n_cams = 2 if cam.use_wrist else 1
        self.horizon = env.chunk_len
        self.cells = (cam.height // net.pool) * (cam.width // net.pool)
        if (cam.height % net.pool) or (cam.width % net.pool):
            raise DataFormatError("camera size must be divisible by network.pool")
        self.in_dim = (
            self.n_cams * env.obs_history * self.cells
            + self.n_cams * self.horizon * 2 * self.cells
            + 1
            + 2 * net.k_freqs
        )
        if net.flow_head == "rigid":
            self.flow_dim = self.n_cams * self.horizon * 6
        else:
            self.flow_dim = self.n_cams * self.horizon * self.cells * 3
        self.params = {}
        dims = [self.in_dim] + [net.hidden] * net.layers
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.params[f"w{i}"] = rng.standard_normal((a, b)) / np.sqrt(a)
            self.params[f"b{i}"] = np.zeros(b)
        heads = {
            "eps": self.horizon * TWIST_DIM,
            "grip": self.horizon,
            "flow": self.flow_dim,
        }
        for name, out in heads.items():
            self.params[f"w_{name}"] = rng.standard_normal(
                (net.hidden, out)
            ) / np.sqrt(net.hidden)
            self.params[f"b_{name}"] = np.zeros(out)
        self._param_order = sorted(self.params)

    # -- parameter plumbing

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self._param_order])

    def set_flat_params(self, flat: np.ndarray) -> None:
        i = 0
        for n in self._param_order:
            p = self.params[n]
            self.params[n] = flat[i : i + p.size].reshape(p.shape).copy()
            i += p.size
        if i != len(flat):
            raise ValueError("flat parameter vector has wrong length")

    def quantize(self) -> None:
        """Round parameters through float32 so a saved copy infers identically."""
        for n in self._param_order:
            self.params[n] = self.params[n].astype(np.float32).astype(np.float64)

    # -- forward / decode

    def features(self, inp: DenoiserInput) -> np.ndarray:
        pool = self.cfg.network.pool
        return self.assemble_features(
            obs_features(inp.observations, pool),
            render_features(inp.renders, pool),
            inp.gripper_state,
            inp.k,
        )

    def assemble_features(self, obs_feat, rend_feat, gripper_state, k) -> np.ndarray:
        emb = step_embedding(k, self.cfg.schedule.steps, self.cfg.network.k_freqs)
        f = np.concatenate([obs_feat, rend_feat, [gripper_state], emb])
        if len(f) != self.in_dim:
            raise ValueError(f"feature dim {len(f)} != expected {self.in_dim}")
        return f

    def forward(self, feat: np.ndarray):
        """Heads and the activation cache needed for the backward pass."""
        hs = [feat]
        h = feat
        for i in range(self.cfg.network.layers):
            h = np.tanh(h @ self.params[f"w{i}"] + self.params[f"b{i}"])
            hs.append(h)
        eps = (h @ self.params["w_eps"] + self.params["b_eps"]).reshape(
            self.horizon, TWIST_DIM
        )
        grip = h @ self.params["w_grip"] + self.params["b_grip"]
        flow_p = h @ self.params["w_flow"] + self.params["b_flow"]
        return eps, grip, flow_p, hs

    def decode_flows(self, flow_p: np.ndarray, renders):
        """Turn head outputs into per-point flows for the given renders.

        Returns (flows, cache) where the cache carries what the backward
        pass needs per render.
        """
        flows, cache = [], []
        if self.cfg.network.flow_head == "rigid":
            per = flow_p.reshape(self.n_cams, self.horizon, 6)
            for c, cam_renders in enumerate(renders):
                row, crow = [], []
                for t, ra in enumerate(cam_renders):
                    w, tv = per[c, t, :3], per[c, t, 3:]
                    rot = expmap(Twist(np.zeros(3), w)).rotation
                    pts = ra.points
                    row.append(pts @ rot.T + tv - pts)
                    crow.append((w, rot, pts))
                flows.append(tuple(row))
                cache.append(crow)
        else:
            pool = self.cfg.network.pool
            wcells = self.cfg.camera.width // pool
            per = flow_p.reshape(self.n_cams, self.horizon, self.cells, 3)
            for c, cam_renders in enumerate(renders):
                row, crow = [], []
                for t, ra in enumerate(cam_renders):
                    u, v = ra.pixel_index[:, 0], ra.pixel_index[:, 1]
                    cell = (v // pool) * wcells + (u // pool)
                    row.append(per[c, t, cell, :])
                    crow.append(cell)
                flows.append(tuple(row))
                cache.append(crow)
        return tuple(flows), cache

    def flow_param_grad(self, flow_grads, cache) -> np.ndarray:
        """Backpropagate per-point flow gradients into the flow head."""
        if self.cfg.network.flow_head == "rigid":
            g = np.zeros((self.n_cams, self.horizon, 6))
            for c in range(self.n_cams):
                for t in range(self.horizon):
                    gf = flow_grads[c][t]
                    if len(gf) == 0:
                        continue
                    w, rot, pts = cache[c][t]
                    g[c, t, 3:] = gf.sum(axis=0)
                    # d(R p)/dw = -R [p]x Jr(w); transpose gives
                    # Jl(w) sum_i p_i x (R^T g_i).
                    q = gf @ rot
                    g[c, t, :3] = left_jacobian(w) @ np.cross(pts, q).sum(axis=0)
            return g.ravel()
        g = np.zeros((self.n_cams, self.horizon, self.cells, 3))
        for c in range(self.n_cams):
            for t in range(self.horizon):
                gf = flow_grads[c][t]
                if len(gf) == 0:
                    continue
                np.add.at(g[c, t], cache[c][t], gf)
        return g.ravel()

    def denoise(self, inp: DenoiserInput) -> DenoiserOutput:
        eps, grip, flow_p, _ = self.forward(self.features(inp))
        flows, _ = self.decode_flows(flow_p, inp.renders)
        return DenoiserOutput(eps, flows, grip)

    def backward(self, hs, d_eps, d_grip, d_flow_p) -> dict:
        """Gradients for every parameter given head-output gradients."""
        grads = {}
        h_last = hs[-1]
        dh = (
            d_eps.reshape(-1) @ self.params["w_eps"].T
            + d_grip @ self.params["w_grip"].T
            + d_flow_p @ self.params["w_flow"].T
        )
        grads["w_eps"] = np.outer(h_last, d_eps.reshape(-1))
        grads["b_eps"] = d_eps.reshape(-1).copy()
        grads["w_grip"] = np.outer(h_last, d_grip)
        grads["b_grip"] = d_grip.copy()
        grads["w_flow"] = np.outer(h_last, d_flow_p)
        grads["b_flow"] = d_flow_p.copy()
        for i in range(self.cfg.network.layers - 1, -1, -1):
            dz = dh * (1.0 - hs[i + 1] ** 2)
            grads[f"w{i}"] = np.outer(hs[i], dz)
            grads[f"b{i}"] = dz
            dh = dz @ self.params[f"w{i}"].T
        return grads

    # -- persistence

    def save(self, path) -> None:
        meta = {
            "config": self.cfg.as_dict(),
            "normalizer": self.normalizer.state(),
            "params": [
                [n, list(self.params[n].shape)] for n in self._param_order
            ],
        }
        blob = json.dumps(meta, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(MODEL_MAGIC)
            f.write(struct.pack("<II", MODEL_VERSION, len(blob)))
            f.write(blob)
            for n in self._param_order:
                f.write(self.params[n].astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "MlpDenoiser":
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != MODEL_MAGIC:
            raise DataFormatError(f"{path}: not a model file")
        version, jlen = struct.unpack_from("<II", data, 4)
        if version != MODEL_VERSION:
            raise DataFormatError(f"{path}: unsupported model version {version}")
        try:
            meta = json.loads(data[12 : 12 + jlen].decode())
        except ValueError as e:
            raise DataFormatError(f"{path}: bad model metadata") from e
        cfg = config_from_dict(meta["config"])
        model = cls(cfg, np.random.default_rng(0),
                    ActionNormalizer.from_state(meta["normalizer"]))
        off = 12 + jlen
        for name, shape in meta["params"]:
            if name not in model.params or list(model.params[name].shape) != shape:
                raise DataFormatError(f"{path}: unexpected parameter {name} {shape}")
            size = int(np.prod(shape)) * 4
            if off + size > len(data):
                raise DataFormatError(f"{path}: truncated parameter data")
            arr = np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)),
                                offset=off)
            model.params[name] = arr.astype(np.float64).reshape(shape)
            off += size
        if off != len(data):
            raise DataFormatError(f"{path}: trailing bytes after parameters")
        return model


# ---------------------------------------------------------------------------
# loss


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def denoiser_loss(eps_hat, grip_logits, flows_hat, eps_t, flags_t, flows_t,
                  kind="l1", weights=(1.0, 1.0, 1.0)):
    """Loss value, per-term breakdown, and gradients wrt the predictions.

    The flow term averages over every visible point of every render;
    renders with no coverage simply contribute nothing.  ``weights`` scales
    the (eps, flow, grip) terms in the total and in the gradients; the
    reported per-term values stay unweighted.
    """
    w_eps, w_flow, w_grip = weights
    d_eps = eps_hat - eps_t
    n_eps = d_eps.size
    if kind == "l1":
        l_eps = np.abs(d_eps).mean()
        g_eps = np.sign(d_eps) * (w_eps / n_eps)
    else:
        l_eps = (d_eps**2).mean()
        g_eps = d_eps * (2.0 * w_eps / n_eps)

    y = flags_t.astype(float)
    l_grip = (_softplus(grip_logits) - y * grip_logits).mean()
    g_grip = (1.0 / (1.0 + np.exp(-grip_logits)) - y) * (w_grip / len(grip_logits))

    n_pts = sum(len(f) for row in flows_t for f in row)
    g_flow = []
    l_flow = 0.0
    for row_hat, row_t in zip(flows_hat, flows_t):
        g_row = []
        for fh, ft in zip(row_hat, row_t):
            d = fh - ft
            if n_pts == 0 or len(d) == 0:
                g_row.append(np.zeros_like(d))
                continue
            if kind == "l1":
                l_flow += np.abs(d).sum() / (3 * n_pts)
                g_row.append(np.sign(d) * (w_flow / (3 * n_pts)))
            else:
                l_flow += (d**2).sum() / (3 * n_pts)
                g_row.append(d * (2.0 * w_flow / (3 * n_pts)))
        g_flow.append(g_row)

    total = w_eps * l_eps + w_grip * l_grip + w_flow * l_flow
    parts = {"loss": total, "eps": l_eps, "grip": l_grip, "flow": l_flow}
    return parts, g_eps, g_grip, g_flow


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainSample:
    """One supervised example: context images plus the clean chunk label."""

    observations: tuple  # [camera][history] of Image
    gripper_state: float
    gripper_pose: RigidTransform
    cameras: tuple  # of PinholeCamera (wrist extrinsics already resolved)
    chunk: ActionChunk


class Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros(s) for n, s in shapes.items()}
        self.v = {n: np.zeros(s) for n, s in shapes.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for n, g in grads.items():
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[n] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def sample_losses_and_grads(model, sample, meshes, schedule, k, eps, kind,
                            weights=(1.0, 1.0, 1.0)):
    """Forward/backward for one training example at diffusion step k."""
    x0n = model.normalizer.normalize(sample.chunk.twists)
    x_k = add_noise(x0n, eps, schedule, k)
    raw = model.normalizer.denormalize(x_k)
    renders = render_chunk(raw, sample.gripper_pose, sample.cameras, meshes)
    flows_t = []
    for cam, cam_renders in zip(sample.cameras, renders):
        row = []
        for t, ra in enumerate(cam_renders):
            row.append(
                gt_flow(
                    ra.points,
                    Twist.from_vector(raw[t]),
                    Twist.from_vector(sample.chunk.twists[t]),
                    sample.gripper_pose,
                    cam.extrinsics,
                )
            )
        flows_t.append(tuple(row))

    pool = model.cfg.network.pool
    feat = model.assemble_features(
        obs_features(sample.observations, pool),
        render_features(renders, pool),
        sample.gripper_state,
        k,
    )
    eps_hat, grip, flow_p, hs = model.forward(feat)
    flows_hat, cache = model.decode_flows(flow_p, renders)
    parts, g_eps, g_grip, g_flow = denoiser_loss(
        eps_hat, grip, flows_hat, eps, sample.chunk.flags, flows_t, kind,
        weights,
    )
    d_flow_p = model.flow_param_grad(g_flow, cache)
    grads = model.backward(hs, g_eps, g_grip, d_flow_p)
    return parts, grads


def train(cfg: RunConfig, samples, rng: np.random.Generator, log_fn=None):
    """Train an MLP denoiser on chunk-labelled samples.

    Per step: draw a batch, noise each clean chunk to a uniformly random
    step in [1, K], render the noisy chunk, and regress exact noise /
    flow / flag targets.  Returns the model (parameters rounded through
    float32 so saving does not change behaviour) and the loss history.
    """
    if not samples:
        raise ValueError("no training samples")
    tcfg = cfg.training
    normalizer = ActionNormalizer.from_twists(
        np.vstack([s.chunk.twists for s in samples])
    )
    model = MlpDenoiser(cfg, rng, normalizer)
    meshes = chunk_meshes(cfg)
    schedule = make_schedule(cfg.schedule.kind, cfg.schedule.steps,
                             cfg.schedule.offset)
    opt = Adam({n: p.shape for n, p in model.params.items()}, tcfg.lr)
    history = []
    horizon = cfg.env.chunk_len
    weights = (tcfg.eps_weight, tcfg.flow_weight, tcfg.grip_weight)
    for step in range(1, tcfg.steps + 1):
        idx = rng.integers(0, len(samples), size=tcfg.batch)
        acc = None
        mean_parts = {}
        for i in idx:
            k = int(rng.integers(1, schedule.steps + 1))
            eps = rng.standard_normal((horizon, TWIST_DIM))
            parts, grads = sample_losses_and_grads(
                model, samples[i], meshes, schedule, k, eps, tcfg.loss,
                weights,
            )
            if acc is None:
                acc = grads
                mean_parts = dict(parts)
            else:
                for n in acc:
                    acc[n] += grads[n]
                for n in mean_parts:
                    mean_parts[n] += parts[n]
        for n in acc:
            acc[n] /= tcfg.batch
        for n in mean_parts:
            mean_parts[n] /= tcfg.batch
        if not np.isfinite(mean_parts["loss"]):
            raise TrainingDivergedError(step)
        opt.step(model.params, acc)
        if log_fn and (step % tcfg.log_every == 0 or step == tcfg.steps):
            log_fn(step, mean_parts)
        history.append({"step": step, **mean_parts})
    model.quantize()
    return model, history


def chunk_meshes(cfg: RunConfig):
    """One render mesh per camera: full gripper for the external view,
    fingers only for the wrist view (the palm would fill the frame)."""
    meshes = [make_gripper_mesh("full")]
    if cfg.camera.use_wrist:
        meshes.append(make_gripper_mesh("fingers_only"))
    return tuple(meshes)


# ---------------------------------------------------------------------------
# inference


def infer(
    denoiser,
    observations,
    gripper_state: float,
    gripper_pose: RigidTransform,
    cameras,
    meshes,
    schedule: NoiseSchedule,
    inf_cfg,
    rng: np.random.Generator,
    normalizer: ActionNormalizer | None = None,
) -> ActionChunk:
    """Refine a noise sample into an action chunk.

    Route selection per ``inf_cfg.variant``:

    * ``A``: every step updates the twists from the noise head.
    * ``I``: every step renders, predicts flow, fuses views, blends the
      cloud toward its clean estimate, fits a rigid step and folds it
      into the twist.  Too few visible points is a hard error.
    * ``AI``: the image route per chunk step when at least
      ``min_visible`` fused points exist, the twist route otherwise, and
      the twist route always takes the final step (the rigid fit cannot
      land exactly on the clean manifold; the noise head can).

    Gripper flags come from the final step's logits.
    """
    normalizer = normalizer or getattr(denoiser, "normalizer", None)
    if normalizer is None:
        raise ValueError("no action normalizer available")
    horizon = denoiser.horizon
    variant = inf_cfg.variant
    seq = subsample_steps(schedule.steps, inf_cfg.steps)
    x = rng.standard_normal((horizon, TWIST_DIM))
    flags = np.zeros(horizon, dtype=bool)
    for k, k_prev in zip(seq[:-1], seq[1:]):
        raw = normalizer.denormalize(x)
        renders = render_chunk(raw, gripper_pose, cameras, meshes)
        out = denoiser.denoise(
            DenoiserInput(
                observations=tuple(map(tuple, observations)),
                renders=renders,
                gripper_state=gripper_state,
                k=int(k),
                noisy_twists_norm=x.copy(),
                gripper_pose=gripper_pose,
                cameras=tuple(cameras),
            )
        )
        final = k_prev == 0
        if final:
            flags = out.grip_logits > 0
        new_x = x.copy()
        for t in range(horizon):
            use_image = False
            fused = None
            if variant in ("I", "AI"):
                fused = fuse_views(
                    [
                        FlowField(renders[c][t].points, out.flows[c][t])
                        for c in range(len(cameras))
                    ],
                    [cam.extrinsics for cam in cameras],
                )
                if variant == "I":
                    if len(fused) < inf_cfg.min_visible:
                        raise NoVisibilityError(
                            f"{len(fused)} fused points at chunk step {t},"
                            f" need {inf_cfg.min_visible}"
                        )
                    use_image = True
                else:
                    use_image = (not final) and len(fused) >= inf_cfg.min_visible
            if use_image:
                blended = ddim_step_points(
                    fused.points, fused.flow, schedule, int(k), int(k_prev),
                    inf_cfg.point_scale,
                )
                step_world = svd_align(fused.points, blended)
                updated = update_action(
                    Twist.from_vector(raw[t]), step_world, gripper_pose
                )
                new_x[t] = normalizer.normalize(updated.as_vector())
            else:
                new_x[t] = ddim_step_actions(
                    x[t], out.eps[t], schedule, int(k), int(k_prev),
                    inf_cfg.x0_clip,
                )
        x = new_x
    return ActionChunk(normalizer.denormalize(x), flags)


# ---------------------------------------------------------------------------
# gradient audit


def _topdown_camera(cfg: RunConfig, height: float, shift: float) -> PinholeCamera:
    rot = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    return PinholeCamera(
        fx=cfg.camera.focal,
        fy=cfg.camera.focal,
        cx=cfg.camera.width / 2.0,
        cy=cfg.camera.height / 2.0,
        width=cfg.camera.width,
        height=cfg.camera.height,
        extrinsics=RigidTransform(rot, np.array([shift, 0.0, height])),
    )


def synthetic_example(cfg: RunConfig, rng: np.random.Generator):
    """A random but render-consistent training example for audits.

    Observations are noise images, poses and chunks are small random
    motions around a gripper the cameras can actually see, so every head
    (including the flow decode) receives points and gradients.
    """
    n_cams = 2 if cfg.camera.use_wrist else 1
    cameras = tuple(
        _topdown_camera(cfg, 0.45 + 0.05 * c, 0.04 * c) for c in range(n_cams)
    )
    meshes = chunk_meshes(cfg)[:n_cams]
    gripper_pose = RigidTransform.identity()
    horizon = cfg.env.chunk_len
    obs = tuple(
        tuple(
            Image(
                rng.integers(
                    0, 256, size=(cfg.camera.height, cfg.camera.width, 3)
                ).astype(np.uint8)
            )
            for _ in range(cfg.env.obs_history)
        )
        for _ in range(n_cams)
    )
    chunk = ActionChunk(
        0.03 * rng.standard_normal((horizon, TWIST_DIM)),
        rng.integers(0, 2, size=horizon).astype(bool),
    )
    sample = TrainSample(obs, float(rng.random()), gripper_pose, cameras, chunk)
    return sample, meshes


def gradient_check(cfg: RunConfig, rng: np.random.Generator, n_coords: int = 60,
                   step: float = 1e-6, perturb: float = 0.0) -> dict:
    """Compare analytic gradients against central finite differences.

    Builds one synthetic example for the given config, samples
    coordinates spread across every parameter tensor, and reports the
    worst relative error.  ``perturb`` injects a bias into the analytic
    gradient — a self-test that the audit is able to fail.
    """
    sample, meshes = synthetic_example(cfg, rng)
    schedule = make_schedule(cfg.schedule.kind, cfg.schedule.steps,
                             cfg.schedule.offset)
    model = MlpDenoiser(cfg, rng)
    k = int(rng.integers(1, schedule.steps + 1))
    # Identity normalizer here, so keep the noise metric-small: the noised
    # chunk must still render on-screen or the flow head sees no points.
    eps = 0.1 * rng.standard_normal((cfg.env.chunk_len, TWIST_DIM))
    kind = cfg.training.loss

    # Renders, targets and features do not depend on the parameters, so
    # compute them once and probe only the network.
    x_k = add_noise(model.normalizer.normalize(sample.chunk.twists), eps,
                    schedule, k)
    raw = model.normalizer.denormalize(x_k)
    renders = render_chunk(raw, sample.gripper_pose, sample.cameras, meshes)
    flows_t = []
    for cam, cam_renders in zip(sample.cameras, renders):
        row = []
        for t, ra in enumerate(cam_renders):
            row.append(
                gt_flow(ra.points, Twist.from_vector(raw[t]),
                        Twist.from_vector(sample.chunk.twists[t]),
                        sample.gripper_pose, cam.extrinsics)
            )
        flows_t.append(tuple(row))
    pool = cfg.network.pool
    feat = model.assemble_features(
        obs_features(sample.observations, pool),
        render_features(renders, pool),
        sample.gripper_state, k,
    )

    tcfg = cfg.training
    weights = (tcfg.eps_weight, tcfg.flow_weight, tcfg.grip_weight)
    eps_hat, grip, flow_p, hs = model.forward(feat)
    flows_hat, cache = model.decode_flows(flow_p, renders)
    _, g_eps, g_grip, g_flow = denoiser_loss(
        eps_hat, grip, flows_hat, eps, sample.chunk.flags, flows_t, kind,
        weights,
    )
    grads = model.backward(hs, g_eps, g_grip, model.flow_param_grad(g_flow, cache))
    flat_grad = np.concatenate([grads[n].ravel() for n in model._param_order])
    if perturb:
        flat_grad = flat_grad + perturb * (np.abs(flat_grad) + 1e-3)

    base = model.flat_params()

    def loss_at(p):
        model.set_flat_params(p)
        e_h, g_h, f_p, _ = model.forward(feat)
        f_h, _ = model.decode_flows(f_p, renders)
        parts, *_ = denoiser_loss(
            e_h, g_h, f_h, eps, sample.chunk.flags, flows_t, kind, weights
        )
        return parts["loss"]

    # Deterministic spread: some coordinates from every tensor plus a
    # random sprinkle over the whole vector.
    picks = []
    offset = 0
    for n in model._param_order:
        size = model.params[n].size
        picks.extend(offset + rng.integers(0, size, size=3))
        offset += size
    extra = rng.integers(0, len(base), size=max(0, n_coords - len(picks)))
    picks = np.unique(np.concatenate([picks, extra]).astype(int))

    max_err, worst = 0.0, None
    for i in picks:
        probe = base.copy()
        probe[i] = base[i] + step
        up = loss_at(probe)
        probe[i] = base[i] - step
        down = loss_at(probe)
        fd = (up - down) / (2.0 * step)
        err = abs(flat_grad[i] - fd) / max(abs(flat_grad[i]), abs(fd), 1e-8)
        if err > max_err:
            max_err, worst = err, (int(i), float(flat_grad[i]), float(fd))
    model.set_flat_params(base)
    return {"max_rel_err": float(max_err), "checked": len(picks), "worst": worst}
