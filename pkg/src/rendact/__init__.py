"""rendact: behaviour cloning with rendered, diffusion-refined actions.

Actions are communicated to the policy as images: each candidate motion
is rendered as a virtual gripper into the camera views, and a denoiser
iteratively refines the motion either in twist space or by predicting
where the rendered points should flow.
"""

from .align import FlowField, fuse_views, gt_flow, svd_align, update_action
from .camera import PinholeCamera, back_project, back_project_many, project
from .config import RunConfig, config_from_dict, load_config
from .diffusion import (
    ActionChunk,
    ActionNormalizer,
    NoiseSchedule,
    add_noise,
    ddim_step_actions,
    ddim_step_points,
    make_schedule,
    subsample_steps,
)
from .errors import (
    BehindCameraError,
    BranchAmbiguityError,
    DataFormatError,
    DegenerateGeometryError,
    InfeasibleDemoError,
    NoVisibilityError,
    RendactError,
    TrainingDivergedError,
)
from .policy import (
    DenoiserInput,
    DenoiserOutput,
    MlpDenoiser,
    OracleDenoiser,
    gradient_check,
    infer,
    render_chunk,
    train,
)
from .render import (
    Image,
    RenderedAction,
    TriangleMesh,
    load_obj,
    make_box,
    make_gripper_mesh,
    overlay,
    read_ppm,
    render_gripper,
    write_ppm,
)
from .se3 import RigidTransform, Twist, apply, compose, expmap, inverse, logmap

__version__ = "0.1.0"
