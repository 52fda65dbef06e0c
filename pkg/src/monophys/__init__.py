"""Desk-scale differentiable inverse physics.

Recover the global scale, geometry, and material parameters of a deformable
object from a single-camera video by differentiating through an MLS-MPM
simulator coupled to a Gaussian-splat renderer.
"""

__version__ = "0.1.0"

from .scene_model import (Camera, Gaussians, MaterialModel, MaterialParams,
                          OptimizableParams, SceneConfig, decode_params,
                          encode_params, to_world, world_to_cam)
from .mpm_sim import SimulationAbort, Trajectory, simulate
from .splat_render import composite, pixel_grid, project_gaussians
from .synth_data import (GenerationSpec, SceneBundle, derive_scene,
                         estimate_volumes, generate_scene, perturb_init,
                         validate_bundle)
from .optimizer import (FitResult, GroupedAdam, OptimSchedule, Stage1Result,
                        run_fit, stage1, stage2)
from .eval import (chamfer, emd, future_prediction, param_mae, psnr,
                   scale_error, ssim, summary_table, write_metrics_csv)
from .checks import run_level
from .diff_engine import deterministic, seeded_generator, set_deterministic

__all__ = [
    "__version__",
    # scene model
    "Camera", "Gaussians", "MaterialModel", "MaterialParams",
    "OptimizableParams", "SceneConfig", "decode_params", "encode_params",
    "to_world", "world_to_cam",
    # simulation
    "SimulationAbort", "Trajectory", "simulate",
    # rendering
    "composite", "pixel_grid", "project_gaussians",
    # data generation
    "GenerationSpec", "SceneBundle", "derive_scene", "estimate_volumes",
    "generate_scene", "perturb_init", "validate_bundle",
    # fitting
    "FitResult", "GroupedAdam", "OptimSchedule", "Stage1Result",
    "run_fit", "stage1", "stage2",
    # evaluation
    "chamfer", "emd", "future_prediction", "param_mae", "psnr",
    "scale_error", "ssim", "summary_table", "write_metrics_csv",
    # numerics checks
    "run_level",
    # determinism
    "deterministic", "seeded_generator", "set_deterministic",
]
