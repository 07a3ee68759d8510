"""Run configuration: typed sections with defaults, loadable from TOML.

Only flat scalar keys inside known sections are accepted; anything else
is rejected loudly so typos cannot silently fall back to defaults.  The
fully resolved configuration (defaults included) is echoed into model
files, making a trained model self-describing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from .errors import DataFormatError


@dataclass
class ScheduleConfig:
    kind: str = "cosine"
    steps: int = 50
    offset: float = 0.008


@dataclass
class NetworkConfig:
    hidden: int = 256
    layers: int = 2
    pool: int = 8  # average-pooling factor for image features
    k_freqs: int = 4  # sinusoidal step-embedding frequencies (2 dims each)
    flow_head: str = "rigid"  # "rigid": 6 params per view; "dense": per-cell


@dataclass
class TrainingConfig:
    steps: int = 3000
    batch: int = 8
    lr: float = 1e-4
    seed: int = 0
    loss: str = "l1"  # or "mse" for the eps / flow terms
    log_every: int = 100
    # Term weights in the total loss.  The flow term lives in camera metres
    # and is tiny next to the unit-scale noise term, so upweighting it is
    # often the difference between a live and a starved flow head.
    eps_weight: float = 1.0
    flow_weight: float = 1.0
    grip_weight: float = 1.0


@dataclass
class EnvConfig:
    task: str = "reach"
    workspace: float = 0.4  # side length of the square workspace, metres
    max_yaw: float = 1.5707963267948966  # +/- range of target yaw
    step_limit: float = 0.05  # per-step translation cap
    chunk_len: int = 8
    obs_history: int = 2
    episode_len: int = 40
    success_dist: float = 0.05
    block_size: float = 0.05


@dataclass
class CameraConfig:
    width: int = 128
    height: int = 128
    focal: float = 110.0  # pixels; shared by fx and fy
    use_wrist: bool = True


@dataclass
class InferenceConfig:
    steps: int = 4
    variant: str = "AI"  # "A", "I" or "AI"
    min_visible: int = 16  # fused points needed to take the image route
    replan: int = 4  # chunk steps executed before re-planning
    point_scale: float = 0.3  # workspace radius used by the point-space blend
    # Bound on the clean estimate inside action-space denoising steps, in
    # normalized units; 0 disables it.  Learned noise heads benefit from a
    # bound of ~2 (the late-chunk data range), exact oracles do not need one.
    x0_clip: float = 0.0


_SECTIONS = {
    "schedule": ScheduleConfig,
    "network": NetworkConfig,
    "training": TrainingConfig,
    "env": EnvConfig,
    "camera": CameraConfig,
    "inference": InferenceConfig,
}


@dataclass
class RunConfig:
    schedule: ScheduleConfig = dataclasses.field(default_factory=ScheduleConfig)
    network: NetworkConfig = dataclasses.field(default_factory=NetworkConfig)
    training: TrainingConfig = dataclasses.field(default_factory=TrainingConfig)
    env: EnvConfig = dataclasses.field(default_factory=EnvConfig)
    camera: CameraConfig = dataclasses.field(default_factory=CameraConfig)
    inference: InferenceConfig = dataclasses.field(default_factory=InferenceConfig)

    def as_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}


_SCALAR_TYPES = {"str": str, "int": int, "float": float, "bool": bool}


def _coerce(section: str, field: dataclasses.Field, value):
    want = _SCALAR_TYPES[field.type] if isinstance(field.type, str) else field.type
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, want) or (want is not bool and isinstance(value, bool)):
        raise DataFormatError(
            f"[{section}] {field.name}: expected {want.__name__},"
            f" got {type(value).__name__}"
        )
    return value


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for section, body in data.items():
        cls = _SECTIONS.get(section)
        if cls is None:
            raise DataFormatError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise DataFormatError(f"[{section}] must be a table of keys")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        target = getattr(cfg, section)
        for key, value in body.items():
            if key not in fields:
                raise DataFormatError(f"unknown config key [{section}] {key}")
            if isinstance(value, (dict, list)):
                raise DataFormatError(f"[{section}] {key} must be a scalar")
            setattr(target, key, _coerce(section, fields[key], value))
    _validate(cfg)
    return cfg


def load_config(path=None) -> RunConfig:
    """Load TOML config; with no path, return pure defaults."""
    if path is None:
        return config_from_dict({})
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise DataFormatError(f"bad TOML in {path}: {e}") from e
    return config_from_dict(data)


def _validate(cfg: RunConfig) -> None:
    checks = [
        (cfg.schedule.kind in ("cosine", "linear"), "schedule.kind"),
        (cfg.schedule.steps >= 1, "schedule.steps"),
        (cfg.network.flow_head in ("rigid", "dense"), "network.flow_head"),
        (cfg.network.layers >= 1, "network.layers"),
        (cfg.network.pool >= 1, "network.pool"),
        (cfg.training.batch >= 1, "training.batch"),
        (cfg.training.loss in ("l1", "mse"), "training.loss"),
        (cfg.env.task in ("reach", "push"), "env.task"),
        (cfg.env.chunk_len >= 1, "env.chunk_len"),
        (cfg.env.obs_history >= 1, "env.obs_history"),
        (cfg.camera.width >= 8 and cfg.camera.height >= 8, "camera size"),
        (cfg.camera.focal > 0, "camera.focal"),
        (cfg.inference.variant in ("A", "I", "AI"), "inference.variant"),
        (1 <= cfg.inference.steps <= cfg.schedule.steps, "inference.steps"),
        (1 <= cfg.inference.replan <= cfg.env.chunk_len, "inference.replan"),
        (cfg.inference.point_scale > 0, "inference.point_scale"),
        (cfg.inference.x0_clip >= 0, "inference.x0_clip"),
    ]
    for ok, name in checks:
        if not ok:
            raise DataFormatError(f"invalid config value for {name}")
