"""Two-stage fitting loop: physics + geometry + scale, then appearance.

Stage 1 jointly optimizes the physical parameters (material, initial
velocity), the Gaussian geometry (positions, opacity, covariance scale),
and the global scale against rendered-alpha, silhouette, flow, and
distribution losses, backpropagating through the MPM simulation.  The
frame window grows linearly from 4 frames to the full observed sequence,
reaching it 50 iterations before the end.  After each simulation step the
loop takes a fixed number of cheap alpha-only "inner" steps that update
appearance-shape parameters (opacity, covariance scale) without
re-simulating, and every few iterations the least important Gaussians are
relocated onto the most important ones.

Stage 2 freezes physics and positions and refines color, opacity, and
covariance scale against the observed frames with a color + alpha
objective.

``run_fit`` orchestrates both stages and writes a run directory:

    config.json        resolved configuration for the run
    run.log            events (the only timestamp lives in the header line)
    losses.csv         stage-1 loss breakdown, one row per iteration
    params_trace.csv   decoded physical parameters per stage-1 iteration
    stage2_losses.csv  stage-2 objective and PSNR trace
    final_params.json  decoded and raw parameters after fitting
    renders/%04d.png   final renders over the full sequence
    trajectory/%04d.ply  final simulated particle positions + velocities
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import torch

from . import io_formats
from .diff_engine import seeded_generator
from .geometry_refine import (RELOCATE_FRACTION, compute_importance,
                              estimate_volumes, relocate)
from .losses import FrameLossInputs, alpha_loss, color_loss, total_stage1_loss
from .mpm_sim import SimulationAbort, Trajectory, simulate
from .scene_model import (Camera, DEFAULT_DTYPE, Gaussians, MaterialModel,
                          OptimizableParams, SceneConfig, decode_params,
                          to_world, world_to_cam)
from .splat_render import composite, project_gaussians
from .synth_data import SceneBundle, derive_scene, perturb_init

# Learning rates per parameter group.
DEFAULT_LR = {
    "scale": 0.02,        # global scale (log-space)
    "velocity": 0.02,     # initial velocity v0
    "E": 0.1,             # Young's modulus (log10-space)
    "nu": 0.01,           # Poisson's ratio (raw logistic space)
    "sigma_y": 0.05,      # yield stress (log10-space)
    "position": 2e-4,     # Gaussian positions (camera space)
    "gauss_scale": 2e-4,  # Gaussian covariance scale (log-space)
    "color": 0.01,
    "opacity": 0.01,      # raw (pre-sigmoid) opacity
}

PHYSICS_GRAD_CLIP = 10.0   # global-norm clip over the physics groups
# Silhouette-loss cost knobs used inside the fitting loop.  The loss
# module's defaults give the reference value; these trade a <0.1% gradient
# direction change for a ~2500x speedup (see the loss module docstring).
FIT_SIL_MAX_POINTS = 320
FIT_SIL_MAX_ITERS = 40


@dataclass
class OptimSchedule:
    """Iteration and learning-rate schedule for both stages.

    ``ramp_end`` defaults to ``total_iters - 50``: the frame window reaches
    its maximum there, and the remaining iterations refine on the full
    sequence with relocation disabled.
    """

    total_iters: int = 250
    frames_start: int = 4
    frames_max: int = 16
    ramp_end: Optional[int] = None
    inner_appearance_steps: int = 100
    relocate_every: int = 10
    stage2_iters: int = 5000
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))

    def __post_init__(self) -> None:
        if self.ramp_end is None:
            self.ramp_end = max(1, self.total_iters - 50)
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")
        if not 1 <= self.frames_start <= self.frames_max:
            raise ValueError("need 1 <= frames_start <= frames_max")
        if not 1 <= self.ramp_end <= self.total_iters:
            raise ValueError("need 1 <= ramp_end <= total_iters")
        missing = set(DEFAULT_LR) - set(self.lr)
        if missing:
            raise ValueError(f"missing learning rates for groups {sorted(missing)}")

    @staticmethod
    def for_model(model: MaterialModel) -> "OptimSchedule":
        """Default schedule: 250 iterations, 200 for the elastic-only model."""
        total = 200 if model == MaterialModel.NeoHookean else 250
        return OptimSchedule(total_iters=total)

    def to_json(self) -> dict:
        return {
            "total_iters": self.total_iters,
            "frames_start": self.frames_start,
            "frames_max": self.frames_max,
            "ramp_end": self.ramp_end,
            "inner_appearance_steps": self.inner_appearance_steps,
            "relocate_every": self.relocate_every,
            "stage2_iters": self.stage2_iters,
            "lr": dict(self.lr),
        }


def frames_at(iteration: int, sched: OptimSchedule) -> int:
    """Frame-window size at an iteration: linear ramp from ``frames_start``
    to ``frames_max`` over ``[0, ramp_end]``, constant afterwards."""
    if not 0 <= iteration < sched.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {sched.total_iters})")
    frac = min(iteration / sched.ramp_end, 1.0)
    return int(round(sched.frames_start
                     + (sched.frames_max - sched.frames_start) * frac))


class GroupedAdam:
    """Adam over named single-tensor parameter groups, each with its own
    learning rate.

    beta = (0.9, 0.999), eps = 1e-8.  A group whose gradient contains a
    non-finite value is skipped for that step (with a warning) without
    advancing its step count.  Moment rows of per-particle groups can be
    reset when particles are relocated.
    """

    def __init__(self, groups: Mapping[str, tuple[torch.Tensor, float]],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.betas = betas
        self.eps = eps
        self.groups: dict[str, dict] = {}
        for name, (p, lr) in groups.items():
            if not p.is_leaf:
                raise ValueError(f"group '{name}' parameter is not a leaf tensor")
            self.groups[name] = {
                "param": p, "lr": float(lr), "t": 0,
                "m": torch.zeros_like(p), "v": torch.zeros_like(p),
            }

    def zero_grad(self) -> None:
        for gr in self.groups.values():
            gr["param"].grad = None

    @torch.no_grad()
    def step(self, names: Optional[Sequence[str]] = None) -> list[str]:
        """Apply one update to the named groups (all when None).

        Groups without a gradient are left untouched.  Returns the names of
        groups skipped because of non-finite gradients.
        """
        skipped = []
        b1, b2 = self.betas
        for name in (tuple(self.groups) if names is None else names):
            gr = self.groups[name]
            p = gr["param"]
            if p.grad is None:
                continue
            grad = p.grad
            if not torch.isfinite(grad).all():
                warnings.warn(f"non-finite gradient in group '{name}'; step skipped")
                skipped.append(name)
                continue
            gr["t"] += 1
            t = gr["t"]
            gr["m"].mul_(b1).add_(grad, alpha=1.0 - b1)
            gr["v"].mul_(b2).addcmul_(grad, grad, value=1.0 - b2)
            m_hat = gr["m"] / (1.0 - b1 ** t)
            v_hat = gr["v"] / (1.0 - b2 ** t)
            p.add_(m_hat / (v_hat.sqrt() + self.eps), alpha=-gr["lr"])
        return skipped

    @torch.no_grad()
    def reset_rows(self, name: str, rows: torch.Tensor) -> None:
        """Zero the moment rows of a per-particle group (after relocation)."""
        gr = self.groups.get(name)
        if gr is None:
            return
        gr["m"][rows] = 0.0
        gr["v"][rows] = 0.0


# --------------------------------------------------------------------------
# render plumbing
# --------------------------------------------------------------------------

def _means2d(x_c: torch.Tensor, cam: Camera) -> torch.Tensor:
    """Full-length pixel projections of camera-space points (no culling);
    used as flow references."""
    z = x_c[:, 2]
    return torch.stack([cam.fx * x_c[:, 0] / z + cam.cx,
                        cam.fy * x_c[:, 1] / z + cam.cy], dim=-1)


@dataclass
class _Targets:
    """Supervision tensors preloaded from a bundle (absolute frame index)."""

    masks: list
    flow0: list
    flowp: list
    sigma: list


def _load_targets(bundle: SceneBundle, n_obs: int) -> _Targets:
    masks, flow0, flowp, sigma = [], [None], [None], [None]
    for t in range(n_obs):
        masks.append(torch.as_tensor(bundle.mask(t), dtype=DEFAULT_DTYPE))
        if t >= 1:
            flow0.append(torch.as_tensor(bundle.flow0(t), dtype=DEFAULT_DTYPE))
            flowp.append(torch.as_tensor(bundle.flowp(t), dtype=DEFAULT_DTYPE))
            sigma.append(torch.as_tensor(bundle.sigma(t), dtype=DEFAULT_DTYPE))
    return _Targets(masks=masks, flow0=flow0, flowp=flowp, sigma=sigma)


def _render_window(g: Gaussians, s, cam: Camera, traj: Trajectory,
                   targets: _Targets, t_lo: int, t_hi: int) -> list[FrameLossInputs]:
    """Render alpha/posmap/flow for frames [t_lo, t_hi) and pair them with
    their supervision.  Frame 0 renders from the camera-space positions
    directly (the scale-invariant path); later frames from the simulated
    world positions.  Flow references are differentiable."""
    ref0 = _means2d(s * g.x_cam, cam)
    frames = []
    for t in range(t_lo, t_hi):
        if t == 0:
            splats = project_gaussians(g, s, cam)
            maps = composite(splats, cam, want=("alpha", "posmap"))
            frames.append(FrameLossInputs(
                rendered_alpha=maps.alpha, posmap=maps.posmap,
                target_mask=targets.masks[t]))
            continue
        x_w = traj.positions(t)
        splats = project_gaussians(g, s, cam, x_world=x_w, flow_ref2d=ref0)
        maps = composite(splats, cam, want=("alpha", "posmap", "flow"))
        if t == 1:
            ref_p = ref0
        else:
            ref_p = _means2d(world_to_cam(traj.positions(t - 1), cam), cam)
        splats_p = project_gaussians(g, s, cam, x_world=x_w, flow_ref2d=ref_p)
        flowp_hat = composite(splats_p, cam, want=("flow",)).flow
        frames.append(FrameLossInputs(
            rendered_alpha=maps.alpha, posmap=maps.posmap,
            target_mask=targets.masks[t],
            flow0_hat=maps.flow, flowp_hat=flowp_hat,
            flow0=targets.flow0[t], flowp=targets.flowp[t],
            sigma0=targets.sigma[t], sigmap=targets.sigma[t]))
    return frames


# --------------------------------------------------------------------------
# stage 1
# --------------------------------------------------------------------------

@dataclass
class Stage1Result:
    rows: list            # per-iteration loss/parameter records
    scene: SceneConfig    # fit grid template after any dt halving
    dt_halved: bool


def _physics_group_names(model: MaterialModel, fix_scale: bool) -> list[str]:
    names = ["velocity", "E", "nu"]
    if model == MaterialModel.Plasticine:
        names.append("sigma_y")
    if not fix_scale:
        names.insert(0, "scale")
    return names


def stage1(bundle: SceneBundle, g: Gaussians, params: OptimizableParams, *,
           sched: Optional[OptimSchedule] = None,
           n_obs: Optional[int] = None,
           use_sil: bool = True, use_flow: bool = True, use_distr: bool = True,
           sil_max_points: int = FIT_SIL_MAX_POINTS,
           sil_max_iters: int = FIT_SIL_MAX_ITERS,
           fix_scale: bool = False, window_anywhere: bool = False,
           relocate_fraction: float = RELOCATE_FRACTION,
           seed: int = 0,
           log: Optional[Callable[[str], None]] = None) -> Stage1Result:
    """Jointly fit physics, geometry, and scale.  Mutates ``g`` and
    ``params`` in place and returns the per-iteration history.

    Colors are frozen.  On a simulation abort the timestep is halved once
    (rest of the run included); a second abort propagates.
    """
    sched = sched or OptimSchedule.for_model(params.model)
    cam = bundle.camera
    n_obs = min(sched.frames_max, bundle.n_frames) if n_obs is None \
        else min(n_obs, bundle.n_frames)
    targets = _load_targets(bundle, n_obs)
    emit = log or (lambda line: None)
    rng = seeded_generator(seed, "frame-window")

    for p in (g.x_cam, g.log_scale, g.opacity_raw):
        p.requires_grad_(True)
    for name, p in params.tensors().items():
        p.requires_grad_(True)

    groups = {
        "scale": (params.log_s, sched.lr["scale"]),
        "velocity": (params.v0, sched.lr["velocity"]),
        "E": (params.log10_E, sched.lr["E"]),
        "nu": (params.nu_raw, sched.lr["nu"]),
        "sigma_y": (params.log10_sigma_y, sched.lr["sigma_y"]),
        "position": (g.x_cam, sched.lr["position"]),
        "gauss_scale": (g.log_scale, sched.lr["gauss_scale"]),
        "opacity": (g.opacity_raw, sched.lr["opacity"]),
    }
    adam = GroupedAdam(groups)
    outer_names = _physics_group_names(params.model, fix_scale) \
        + ["position", "gauss_scale", "opacity"]
    inner_names = ["gauss_scale", "opacity"]
    physics_tensors = [params.v0, params.log10_E, params.nu_raw,
                       params.log10_sigma_y, params.log_s]

    scene = bundle.scene
    dt_halved = False
    rows = []
    for it in range(sched.total_iters):
        w = min(frames_at(it, sched), n_obs)
        if window_anywhere and w < n_obs:
            t_lo = int(rng.integers(0, n_obs - w + 1))
        else:
            t_lo = 0
        t_hi = t_lo + w

        while True:
            try:
                mat, v0, s = decode_params(params)
                world0 = to_world(g.x_cam, s, cam)
                fit_scene = derive_scene(world0.detach(), scene)
                g.V = estimate_volumes(world0.detach(), fit_scene.dx,
                                       origin=fit_scene.origin,
                                       grid_res=fit_scene.grid_res)
                traj = simulate(g, mat, v0, s, cam, fit_scene, n_frames=t_hi)
                frames = _render_window(g, s, cam, traj, targets, t_lo, t_hi)
                loss = total_stage1_loss(
                    frames, world0, fit_scene.dx,
                    use_sil=use_sil, use_flow=use_flow, use_distr=use_distr,
                    sil_max_points=sil_max_points, sil_max_iters=sil_max_iters,
                    seed=seed * 7919 + it)
                adam.zero_grad()
                loss.total.backward()
                break
            except SimulationAbort as exc:
                if dt_halved:
                    emit(f"iter {it}: simulation aborted again ({exc}); giving up")
                    raise
                dt_halved = True
                scene = replace(scene, dt=scene.dt / 2.0,
                                substeps_per_frame=scene.substeps_per_frame * 2)
                emit(f"iter {it}: simulation aborted ({exc}); halving dt to "
                     f"{scene.dt:.3e} and retrying")

        torch.nn.utils.clip_grad_norm_(physics_tensors, PHYSICS_GRAD_CLIP)
        skipped = adam.step(outer_names)
        for name in skipped:
            emit(f"iter {it}: skipped group '{name}' (non-finite gradient)")

        # Inner appearance steps: alpha loss only, no re-simulation, frames
        # cycled through the current window with positions held fixed.
        frame_pos = {t: (None if t == 0 else traj.positions(t).detach())
                     for t in range(t_lo, t_hi)}
        for j in range(sched.inner_appearance_steps):
            t = t_lo + (j % w)
            with torch.no_grad():
                _, _, s_in = decode_params(params)
            x_cam_in = g.x_cam.detach()
            g_in = Gaussians(x_cam=x_cam_in, log_scale=g.log_scale, rot=g.rot,
                             color=g.color, opacity_raw=g.opacity_raw,
                             V=g.V, v=g.v, F=g.F)
            splats = project_gaussians(g_in, s_in, cam, x_world=frame_pos[t])
            a = composite(splats, cam, want=("alpha",)).alpha
            l_in = alpha_loss(a, targets.masks[t])
            adam.zero_grad()
            l_in.backward()
            adam.step(inner_names)

        with torch.no_grad():
            mat_d, v0_d, s_d = decode_params(params)
            row = {
                "iter": it, "t_lo": t_lo, "t_hi": t_hi,
                "total": float(loss.total.detach()),
                "alpha": loss.alpha, "silhouette": loss.silhouette,
                "flow": loss.flow, "distribution": loss.distribution,
                "E": float(mat_d.E), "nu": float(mat_d.nu),
                "sigma_y": float(mat_d.sigma_y),
                "v0x": float(v0_d[0]), "v0y": float(v0_d[1]),
                "v0z": float(v0_d[2]), "s": float(s_d),
            }
        rows.append(row)

        if ((it + 1) % sched.relocate_every == 0
                and it + 1 < sched.ramp_end
                and g.n >= 2):
            with torch.no_grad():
                imp = compute_importance(g)
                moved, event = relocate(g.detach(), imp,
                                        fraction=relocate_fraction)
                for name in ("x_cam", "log_scale", "opacity_raw", "color"):
                    getattr(g, name).data.copy_(getattr(moved, name))
                g.rot.data.copy_(moved.rot)
                g.V = moved.V
                g.v = moved.v
                g.F = moved.F
            touched = torch.unique(torch.cat([event.removed, event.split_source]))
            for name in ("position", "gauss_scale", "opacity", "color"):
                adam.reset_rows(name, touched)
            emit(f"iter {it}: relocated {event.removed.tolist()} "
                 f"<- splits of {event.split_source.tolist()}")

    return Stage1Result(rows=rows, scene=scene, dt_halved=dt_halved)


# --------------------------------------------------------------------------
# stage 2
# --------------------------------------------------------------------------

def stage2(bundle: SceneBundle, g: Gaussians, traj: Trajectory, *,
           s: float = 1.0,
           sched: Optional[OptimSchedule] = None,
           n_obs: Optional[int] = None,
           log: Optional[Callable[[str], None]] = None) -> list[dict]:
    """Refine appearance (color, opacity, covariance scale) against the
    observed frames; positions, physics, and the global scale ``s`` stay
    untouched.

    ``traj`` supplies the fixed per-frame positions (from the final stage-1
    simulation).  Frames are visited round-robin, one per iteration."""
    sched = sched or OptimSchedule.for_model(MaterialModel.NeoHookean)
    cam = bundle.camera
    n_obs = min(sched.frames_max, bundle.n_frames) if n_obs is None \
        else min(n_obs, bundle.n_frames)
    n_obs = min(n_obs, traj.n_frames)
    emit = log or (lambda line: None)

    frames_rgb = [torch.as_tensor(bundle.frame(t), dtype=DEFAULT_DTYPE)
                  for t in range(n_obs)]
    masks = [torch.as_tensor(bundle.mask(t), dtype=DEFAULT_DTYPE)
             for t in range(n_obs)]
    positions = [None] + [traj.positions(t).detach() for t in range(1, n_obs)]
    background = tuple(bundle.spec.background)

    for p in (g.color, g.opacity_raw, g.log_scale):
        p.requires_grad_(True)
    g.x_cam.requires_grad_(False)
    adam = GroupedAdam({
        "color": (g.color, sched.lr["color"]),
        "opacity": (g.opacity_raw, sched.lr["opacity"]),
        "gauss_scale": (g.log_scale, sched.lr["gauss_scale"]),
    })

    x_cam_fixed = g.x_cam.detach()
    s_fixed = float(s)
    rows = []
    for it in range(sched.stage2_iters):
        t = it % n_obs
        g_in = Gaussians(x_cam=x_cam_fixed, log_scale=g.log_scale, rot=g.rot,
                         color=g.color, opacity_raw=g.opacity_raw,
                         V=g.V, v=g.v, F=g.F)
        splats = project_gaussians(g_in, s_fixed, cam, x_world=positions[t]) \
            if t > 0 else project_gaussians(g_in, s_fixed, cam)
        maps = composite(splats, cam, background=background,
                         want=("color", "alpha"))
        l_color = color_loss(maps.color, frames_rgb[t])
        l_alpha = alpha_loss(maps.alpha, masks[t])
        loss = l_color + l_alpha
        adam.zero_grad()
        loss.backward()
        skipped = adam.step()
        for name in skipped:
            emit(f"stage2 iter {it}: skipped group '{name}' (non-finite gradient)")
        with torch.no_grad():
            mse = float(((maps.color - frames_rgb[t]) ** 2).mean())
            psnr = 99.0 if mse <= 1e-12 else min(99.0, -10.0 * math.log10(mse))
        rows.append({"iter": it, "frame": t, "total": float(loss.detach()),
                     "color": float(l_color.detach()),
                     "alpha": float(l_alpha.detach()), "psnr": psnr})
    return rows


# --------------------------------------------------------------------------
# orchestration
# --------------------------------------------------------------------------

@dataclass
class FitResult:
    gaussians: Gaussians
    params: OptimizableParams
    trajectory: Trajectory
    scene: SceneConfig
    stage1_rows: list
    stage2_rows: list


def _csv_write(path: Path, rows: list[dict], columns: Sequence[str]) -> None:
    with open(path, "w") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(_csv_cell(row[c]) for c in columns) + "\n")


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


STAGE1_COLUMNS = ("iter", "t_lo", "t_hi", "total", "alpha", "silhouette",
                  "flow", "distribution")
TRACE_COLUMNS = ("iter", "E", "nu", "sigma_y", "v0x", "v0y", "v0z", "s")
STAGE2_COLUMNS = ("iter", "frame", "total", "color", "alpha", "psnr")


def final_params_json(params: OptimizableParams, n_particles: int) -> dict:
    mat, v0, s = decode_params(params)
    out = {
        "model": params.model.value,
        "E": float(mat.E), "nu": float(mat.nu),
        "v0": [float(v) for v in v0],
        "s": float(s),
        "n_particles": int(n_particles),
        "raw": {k: (t.detach().tolist() if t.ndim else float(t.detach()))
                for k, t in params.tensors().items()},
    }
    if params.model == MaterialModel.Plasticine:
        out["sigma_y"] = float(mat.sigma_y)
    return out


def run_fit(bundle: SceneBundle, out_dir=None, *,
            scale_init: float = 1.0, dropout_back_fraction: float = 0.0,
            jitter_sigma: float = 0.0,
            sched: Optional[OptimSchedule] = None,
            n_obs: Optional[int] = None,
            use_sil: bool = True, use_flow: bool = True, use_distr: bool = True,
            sil_max_points: int = FIT_SIL_MAX_POINTS,
            sil_max_iters: int = FIT_SIL_MAX_ITERS,
            fix_scale: bool = False, window_anywhere: bool = False,
            run_stage2: bool = True,
            seed: int = 0,
            init: Optional[tuple[Gaussians, OptimizableParams]] = None) -> FitResult:
    """Fit a scene bundle end to end and (optionally) write a run directory.

    The initialization defaults to ``perturb_init`` of the bundle with the
    given scale/dropout/jitter; pass ``init`` to supply one directly.
    """
    sched = sched or OptimSchedule.for_model(bundle.material.model)
    if init is None:
        g, params = perturb_init(bundle, scale_factor=scale_init,
                                 dropout_back_fraction=dropout_back_fraction,
                                 jitter_sigma=jitter_sigma)
    else:
        g, params = init

    out = None
    log_lines: list[str] = []

    def emit(line: str) -> None:
        log_lines.append(line)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "renders").mkdir(exist_ok=True)
        (out / "trajectory").mkdir(exist_ok=True)
        config = {
            "bundle": str(bundle.root),
            "seed": seed,
            "scale_init": scale_init,
            "dropout_back_fraction": dropout_back_fraction,
            "jitter_sigma": jitter_sigma,
            "n_obs": (min(sched.frames_max, bundle.n_frames)
                      if n_obs is None else n_obs),
            "use_sil": use_sil, "use_flow": use_flow, "use_distr": use_distr,
            "sil_max_points": sil_max_points, "sil_max_iters": sil_max_iters,
            "fix_scale": fix_scale, "window_anywhere": window_anywhere,
            "run_stage2": run_stage2,
            "schedule": sched.to_json(),
            "model": params.model.value,
            "n_particles": g.n,
        }
        with open(out / "config.json", "w") as f:
            json.dump(config, f, indent=2, sort_keys=True)

    emit(f"fit: {g.n} particles, model {params.model.value}, "
         f"{sched.total_iters} iterations")
    s1 = stage1(bundle, g, params,
                sched=sched, n_obs=n_obs,
                use_sil=use_sil, use_flow=use_flow, use_distr=use_distr,
                sil_max_points=sil_max_points, sil_max_iters=sil_max_iters,
                fix_scale=fix_scale, window_anywhere=window_anywhere,
                seed=seed, log=emit)
    emit("stage 1 done")

    # Final full-sequence simulation with the fitted parameters.
    with torch.no_grad():
        mat, v0, s = decode_params(params)
        world0 = to_world(g.x_cam, s, bundle.camera)
        fit_scene = derive_scene(world0, s1.scene)
        g.V = estimate_volumes(world0, fit_scene.dx, origin=fit_scene.origin,
                               grid_res=fit_scene.grid_res)
        traj = simulate(g, mat, v0, s, bundle.camera, fit_scene,
                        n_frames=bundle.n_frames, checkpoint_frames=False)

    s2_rows: list[dict] = []
    if run_stage2:
        s2_rows = stage2(bundle, g, traj, s=float(s), sched=sched, n_obs=n_obs,
                         log=emit)
        emit("stage 2 done")

    result = FitResult(gaussians=g, params=params, trajectory=traj,
                       scene=fit_scene, stage1_rows=s1.rows,
                       stage2_rows=s2_rows)
    if out is not None:
        _write_run_dir(out, bundle, result, log_lines)
    return result


def _write_run_dir(out: Path, bundle: SceneBundle, result: FitResult,
                   log_lines: list[str]) -> None:
    g, params, traj = result.gaussians, result.params, result.trajectory
    cam = bundle.camera
    _csv_write(out / "losses.csv", result.stage1_rows, STAGE1_COLUMNS)
    _csv_write(out / "params_trace.csv", result.stage1_rows, TRACE_COLUMNS)
    if result.stage2_rows:
        _csv_write(out / "stage2_losses.csv", result.stage2_rows, STAGE2_COLUMNS)
    with open(out / "final_params.json", "w") as f:
        json.dump(final_params_json(params, g.n), f, indent=2, sort_keys=True)

    background = tuple(bundle.spec.background)
    with torch.no_grad():
        _, _, s = decode_params(params)
        g_r = g.detach()
        for t in range(traj.n_frames):
            if t == 0:
                splats = project_gaussians(g_r, s, cam)
            else:
                splats = project_gaussians(g_r, s, cam,
                                           x_world=traj.positions(t))
            maps = composite(splats, cam, background=background,
                             want=("color",))
            io_formats.write_png(out / "renders" / f"{t:04d}.png", maps.color)
            io_formats.write_ply(out / "trajectory" / f"{t:04d}.ply",
                                 traj.frames[t].x, traj.frames[t].v)

    header = (f"# fit run written {time.strftime('%Y-%m-%d %H:%M:%S')} "
              "(timestamps appear only on this line)")
    with open(out / "run.log", "w") as f:
        f.write(header + "\n")
        for line in log_lines:
            f.write(line + "\n")
