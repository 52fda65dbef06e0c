"""Synthetic ground-truth scenes and perturbed initializations.

A scene bundle is a directory holding everything a fit consumes and
everything evaluation compares against: rendered frames, masks, optical
flow with per-pixel scale maps, per-frame ground-truth point clouds, and
the exact generating parameters.  Bundles are produced by simulating a
procedurally sampled deformable object falling onto the ground plane and
rendering it with the package's own splatting renderer, so a fit
initialized at the truth reproduces the supervision exactly (an
inverse-crime closure used heavily by the tests).

``perturb_init`` manufactures the starting point a real pipeline would
get from an image-to-3D model: the true frame-0 geometry scaled along
camera rays (which leaves its 2D projection unchanged — the monocular
scale ambiguity), thinned where the camera cannot see, and jittered.

Layout of a bundle directory::

    scene.json        resolved generation spec, scene config, camera, seed
    gt_params.json    material, v0, scale, and the frame-0 particle state
    frames/%04d.png   rendered RGB frames
    masks/%04d.png    grayscale alpha mattes (binary-thresholdable)
    flow0/%04d.flo    optical flow, frame 0 -> t   (t >= 1)
    flowp/%04d.flo    optical flow, frame t-1 -> t (t >= 1)
    sigma/%04d.raw    per-pixel flow scale, float32 (t >= 1)
    gt_pc/%04d.ply    world-space particle positions + velocities
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import io_formats
from .diff_engine import seeded_generator
from .geometry_refine import estimate_volumes
from .mpm_sim import Trajectory, simulate
from .scene_model import (Camera, DEFAULT_DTYPE, Gaussians, MaterialModel,
                          MaterialParams, SceneConfig, to_world, world_to_cam)
from .splat_render import composite, project_gaussians

SHAPES = ("sphere", "box", "torus", "blob")

MASK_THRESHOLD = 0.5
MIN_PARTICLES = 100
GT_OPACITY_RAW = math.log(0.8 / 0.2)  # opacity 0.8
GT_SPLAT_SIGMA_CELLS = 0.28           # splat sigma as a fraction of dx

_E_RANGE = (1e3, 1e6)        # Pa, log-uniform
_NU_RANGE = (0.1, 0.4)       # uniform
_SIGMA_Y_RANGE = (1e2, 1e4)  # Pa, log-uniform (plasticine only)
_RHO = 1000.0                # kg/m^3, fixed


# ---------------------------------------------------------------------------
# Generation spec
# ---------------------------------------------------------------------------

@dataclass
class GenerationSpec:
    """Resolved description of one synthetic scene.

    Required fields: ``shape`` and ``material_model``.  Everything else
    has desk-scale defaults.  Material values and the initial velocity
    are sampled per seed unless pinned here.
    """

    shape: str
    material_model: MaterialModel
    size: float = 0.1                 # characteristic object size [m]
    grid_res: int = 32
    dx: float = 0.022
    n_frames: int = 24
    fps: float = 20.0
    substeps_per_frame: int = 128
    width: int = 128
    height: int = 128
    focal_factor: float = 1.5         # fx = fy = focal_factor * width
    cam_distance_factor: float = 4.0  # camera distance = factor * size
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    flow_noise: float = 0.0           # optional Gaussian flow noise (px)
    E: Optional[float] = None         # pin instead of sampling
    nu: Optional[float] = None
    sigma_y: Optional[float] = None
    v0: Optional[tuple[float, float, float]] = None
    drop_gap: Optional[float] = None  # ground clearance at frame 0 [m]

    def __post_init__(self) -> None:
        if isinstance(self.material_model, str):
            try:
                self.material_model = MaterialModel(self.material_model)
            except ValueError:
                raise ValueError(
                    f"invalid field material_model: {self.material_model!r} "
                    f"(expected one of {[m.value for m in MaterialModel]})"
                ) from None

    def validate(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.size <= 0 or self.dx <= 0:
            raise ValueError("size and dx must be positive")
        if self.n_frames < 2:
            raise ValueError("need at least two frames")
        if self.width < 8 or self.height < 8:
            raise ValueError("image too small")

    REQUIRED = ("shape", "material_model")

    def to_json(self) -> dict:
        d = {
            "shape": self.shape,
            "material_model": self.material_model.value,
            "size": self.size,
            "grid_res": self.grid_res,
            "dx": self.dx,
            "n_frames": self.n_frames,
            "fps": self.fps,
            "substeps_per_frame": self.substeps_per_frame,
            "width": self.width,
            "height": self.height,
            "focal_factor": self.focal_factor,
            "cam_distance_factor": self.cam_distance_factor,
            "background": list(self.background),
            "flow_noise": self.flow_noise,
        }
        for k in ("E", "nu", "sigma_y", "drop_gap"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        if self.v0 is not None:
            d["v0"] = list(self.v0)
        return d

    @staticmethod
    def from_json(d: dict) -> "GenerationSpec":
        for k in GenerationSpec.REQUIRED:
            if k not in d:
                raise ValueError(f"missing required field: {k}")
        try:
            model = MaterialModel(d["material_model"])
        except ValueError:
            raise ValueError(
                f"invalid field material_model: {d['material_model']!r} "
                f"(expected one of {[m.value for m in MaterialModel]})") from None
        spec = GenerationSpec(
            shape=d["shape"],
            material_model=model,
            size=d.get("size", 0.1),
            grid_res=d.get("grid_res", 32),
            dx=d.get("dx", 0.022),
            n_frames=d.get("n_frames", 24),
            fps=d.get("fps", 20.0),
            substeps_per_frame=d.get("substeps_per_frame", 128),
            width=d.get("width", 128),
            height=d.get("height", 128),
            focal_factor=d.get("focal_factor", 1.5),
            cam_distance_factor=d.get("cam_distance_factor", 4.0),
            background=tuple(d.get("background", (0.0, 0.0, 0.0))),
            flow_noise=d.get("flow_noise", 0.0),
            E=d.get("E"),
            nu=d.get("nu"),
            sigma_y=d.get("sigma_y"),
            v0=tuple(d["v0"]) if "v0" in d else None,
            drop_gap=d.get("drop_gap"),
        )
        spec.validate()
        return spec


# ---------------------------------------------------------------------------
# Procedural shapes
# ---------------------------------------------------------------------------

def _shape_predicate(shape: str, size: float) -> tuple[Callable, np.ndarray, np.ndarray]:
    """Inside-test plus bounding box (local coordinates, object centered)."""
    s = size
    if shape == "sphere":
        r = 0.5 * s
        return (lambda p: (p ** 2).sum(-1) < r * r,
                np.full(3, -r), np.full(3, r))
    if shape == "box":
        half = np.array([0.5 * s, 0.4 * s, 0.3 * s])
        return (lambda p: (np.abs(p) < half).all(-1), -half, half)
    if shape == "torus":
        R, r = 0.35 * s, 0.15 * s
        def inside(p):
            ring = np.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2) - R
            return ring ** 2 + p[..., 2] ** 2 < r * r
        ext = np.array([R + r, R + r, r])
        return inside, -ext, ext
    if shape == "blob":
        r1, r2 = 0.45 * s, 0.30 * s
        c1 = np.array([-0.22 * s, 0.0, 0.0])
        c2 = np.array([0.30 * s, 0.05 * s, 0.0])
        def inside(p):
            return (((p - c1) ** 2).sum(-1) < r1 * r1) | (((p - c2) ** 2).sum(-1) < r2 * r2)
        lo = np.minimum(c1 - r1, c2 - r2)
        hi = np.maximum(c1 + r1, c2 + r2)
        return inside, lo, hi
    raise ValueError(f"unknown shape {shape!r}")


def sample_shape_points(shape: str, size: float, dx: float, rng,
                        max_attempts: int = 200_000) -> np.ndarray:
    """Uniform rejection sampling inside the shape with minimum spacing 0.5*dx.

    Random sequential addition with a cell hash at the spacing radius:
    candidates are drawn uniformly in the bounding box, kept when inside
    the shape and at least ``0.5*dx`` from every earlier keep.
    """
    inside, lo, hi = _shape_predicate(shape, size)
    spacing = 0.5 * dx
    cell = spacing
    accepted: list[np.ndarray] = []
    buckets: dict[tuple[int, int, int], list[int]] = {}
    span = hi - lo
    cands = rng.uniform(0.0, 1.0, size=(max_attempts, 3)) * span + lo
    ok = inside(cands)
    for p in cands[ok]:
        key = tuple((p // cell).astype(np.int64))
        clash = False
        for kx in range(key[0] - 1, key[0] + 2):
            for ky in range(key[1] - 1, key[1] + 2):
                for kz in range(key[2] - 1, key[2] + 2):
                    for j in buckets.get((kx, ky, kz), ()):
                        d = p - accepted[j]
                        if d @ d < spacing * spacing:
                            clash = True
                            break
                    if clash:
                        break
                if clash:
                    break
            if clash:
                break
        if not clash:
            buckets.setdefault(key, []).append(len(accepted))
            accepted.append(p)
    return np.asarray(accepted)


def _random_rotation(rng) -> np.ndarray:
    """Uniform random rotation matrix (via a normalized random quaternion)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def look_at(eye, target) -> tuple[np.ndarray, np.ndarray]:
    """Camera-to-world rotation (and echoed eye) looking from ``eye`` to
    ``target``: +x right, +y down, +z forward; world up is +z."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ValueError("camera looking straight up/down is degenerate")
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return R, eye


def _procedural_colors(local_pts: np.ndarray, size: float, rng) -> np.ndarray:
    """Two-tone banded coloring in local coordinates (texture for the
    color/flow channels), plus mild per-particle variation."""
    base = rng.uniform(0.15, 0.85, size=3)
    alt = rng.uniform(0.15, 0.85, size=3)
    u = 0.5 + 0.5 * np.sin(2.0 * np.pi * (local_pts[:, 0] + 0.35 * local_pts[:, 2]) / (0.35 * size))
    col = base[None, :] * u[:, None] + alt[None, :] * (1.0 - u[:, None])
    col += rng.normal(0.0, 0.02, size=col.shape)
    return np.clip(col, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Bundle generation
# ---------------------------------------------------------------------------

def generate_scene(spec: GenerationSpec, seed: int, out_dir) -> "SceneBundle":
    """Generate a ground-truth scene bundle on disk.

    Deterministic per (spec, seed): all sampling flows through generators
    keyed off ``seed``, simulation runs in float64 with deterministic
    reductions, and every writer is byte-stable.

    Raises:
        ValueError: if the shape (plus its drop trajectory) cannot fit in
            the simulation grid with the required interior margins.
    """
    spec.validate()
    out = Path(out_dir)

    # --- sample the object ------------------------------------------------
    local = sample_shape_points(spec.shape, spec.size, spec.dx,
                                seeded_generator(seed, "shape-points"))
    if local.shape[0] < MIN_PARTICLES:
        raise ValueError(
            f"shape sampled only {local.shape[0]} particles (< {MIN_PARTICLES}); "
            f"increase size relative to dx")
    R_shape = _random_rotation(seeded_generator(seed, "shape-orientation"))
    pts = local @ R_shape.T

    # --- material, initial velocity, drop height --------------------------
    rng_mat = seeded_generator(seed, "material")
    E = spec.E if spec.E is not None else float(
        np.exp(rng_mat.uniform(np.log(_E_RANGE[0]), np.log(_E_RANGE[1]))))
    nu = spec.nu if spec.nu is not None else float(rng_mat.uniform(*_NU_RANGE))
    sigma_y = None
    if spec.material_model == MaterialModel.Plasticine:
        sigma_y = spec.sigma_y if spec.sigma_y is not None else float(
            np.exp(rng_mat.uniform(np.log(_SIGMA_Y_RANGE[0]), np.log(_SIGMA_Y_RANGE[1]))))
    material = MaterialParams(model=spec.material_model, E=E, nu=nu,
                              sigma_y=sigma_y, rho=_RHO)
    material.validate()

    rng_drop = seeded_generator(seed, "drop")
    if spec.v0 is not None:
        v0 = np.asarray(spec.v0, dtype=np.float64)
    else:
        v0 = np.array([rng_drop.uniform(-0.25, 0.25),
                       rng_drop.uniform(-0.25, 0.25),
                       rng_drop.uniform(-0.6, -0.1)])
    if spec.drop_gap is not None:
        gap = float(spec.drop_gap)
    else:
        # choose the contact time, then the clearance that produces it;
        # contact must land within the first third of the sequence
        t_contact = rng_drop.uniform(0.06, min(0.18, spec.n_frames / (3.0 * spec.fps)))
        g_mag = 9.81
        gap = float(-v0[2] * t_contact + 0.5 * g_mag * t_contact ** 2)

    pts[:, :2] -= pts[:, :2].mean(axis=0)
    pts[:, 2] += gap - pts[:, 2].min()

    # --- grid placement and fit check ------------------------------------
    half = 0.5 * spec.grid_res * spec.dx
    origin = (-half, -half, -3.0 * spec.dx)
    scene = SceneConfig.with_substeps(
        grid_res=spec.grid_res, dx=spec.dx,
        substeps_per_frame=spec.substeps_per_frame,
        n_frames=spec.n_frames, fps=spec.fps, origin=origin)
    t_total = spec.n_frames / spec.fps
    margin = 4.0 * spec.dx
    reach_xy = np.abs(pts[:, :2]).max() + abs(float(np.abs(v0[:2]).max())) * t_total
    top = pts[:, 2].max() + max(0.0, float(v0[2])) * t_total
    if reach_xy > half - margin or top > origin[2] + spec.grid_res * spec.dx - margin:
        raise ValueError(
            f"shape too large for grid: needs xy reach {reach_xy:.3f} m / "
            f"top {top:.3f} m inside a {spec.grid_res}x{spec.dx:.3f} grid")

    # --- camera ------------------------------------------------------------
    rng_cam = seeded_generator(seed, "camera")
    az = rng_cam.uniform(0.0, 2.0 * np.pi)
    el = rng_cam.uniform(np.deg2rad(10.0), np.deg2rad(25.0))
    d = spec.cam_distance_factor * spec.size
    target = np.array([0.0, 0.0, max(0.5 * (pts[:, 2].min() + pts[:, 2].max()),
                                     0.35 * pts[:, 2].max())])
    eye = target + d * np.array([np.cos(az) * np.cos(el),
                                 np.sin(az) * np.cos(el),
                                 np.sin(el)])
    R_cam, eye = look_at(eye, target)
    cam = Camera(fx=spec.focal_factor * spec.width,
                 fy=spec.focal_factor * spec.width,
                 cx=spec.width / 2.0, cy=spec.height / 2.0,
                 R=torch.from_numpy(R_cam), t=torch.from_numpy(eye),
                 width=spec.width, height=spec.height)

    # --- frame-0 particle state -------------------------------------------
    colors = _procedural_colors(local, spec.size, seeded_generator(seed, "colors"))
    world0 = torch.from_numpy(pts).to(DEFAULT_DTYPE)
    x_cam = world_to_cam(world0, cam)
    n = x_cam.shape[0]
    init = Gaussians.create(
        x_cam=x_cam,
        log_scale=torch.full((n, 3), math.log(GT_SPLAT_SIGMA_CELLS * spec.dx),
                             dtype=DEFAULT_DTYPE),
        color=torch.from_numpy(colors).to(DEFAULT_DTYPE),
        opacity_raw=torch.full((n,), GT_OPACITY_RAW, dtype=DEFAULT_DTYPE),
        v=torch.from_numpy(np.tile(v0, (n, 1))).to(DEFAULT_DTYPE),
    )
    init.V = estimate_volumes(to_world(init.x_cam, 1.0, cam), spec.dx,
                              origin=scene.origin, grid_res=scene.grid_res)

    # --- simulate and render ----------------------------------------------
    v0_t = torch.from_numpy(v0).to(DEFAULT_DTYPE)
    with torch.no_grad():
        traj = simulate(init, material, v0_t, 1.0, cam, scene,
                        checkpoint_frames=False)
        _write_bundle(out, spec, seed, scene, cam, material, v0, init, traj)
    return SceneBundle.load(out)


def _project_means(x_world: torch.Tensor, cam: Camera) -> torch.Tensor:
    """Full-length (n,2) projections used as flow references (no culling)."""
    x_c = world_to_cam(x_world, cam)
    z = x_c[:, 2]
    return torch.stack([cam.fx * x_c[:, 0] / z + cam.cx,
                        cam.fy * x_c[:, 1] / z + cam.cy], dim=-1)


def _write_bundle(out: Path, spec: GenerationSpec, seed: int,
                  scene: SceneConfig, cam: Camera, material: MaterialParams,
                  v0: np.ndarray, init: Gaussians, traj: Trajectory) -> None:
    for sub in ("frames", "masks", "flow0", "flowp", "sigma", "gt_pc"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    refs = []  # per-frame full-length projections for flow references
    noise_rng = (seeded_generator(seed, "flow-noise")
                 if spec.flow_noise > 0 else None)
    sigma_value = spec.flow_noise if spec.flow_noise > 0 else 1.0
    sigma_map = np.full((spec.height, spec.width), sigma_value, dtype=np.float32)

    for t in range(scene.n_frames):
        frame = traj.frames[t]
        if t == 0:
            splats = project_gaussians(init, 1.0, cam)
            world_t = to_world(init.x_cam, 1.0, cam)
        else:
            world_t = frame.x
            splats = project_gaussians(init, 1.0, cam, x_world=world_t)
        refs.append(_project_means(world_t, cam))
        maps = composite(splats, cam, background=spec.background,
                         want=("color", "alpha"))
        io_formats.write_png(out / "frames" / f"{t:04d}.png", maps.color)
        io_formats.write_png(out / "masks" / f"{t:04d}.png", maps.alpha, bits=16)
        io_formats.write_ply(out / "gt_pc" / f"{t:04d}.ply", world_t, frame.v)

        if t >= 1:
            for name, ref in (("flow0", refs[0]), ("flowp", refs[t - 1])):
                spl = project_gaussians(init, 1.0, cam, x_world=world_t,
                                        flow_ref2d=ref)
                fmaps = composite(spl, cam, want=("flow",))
                flow = fmaps.flow
                if noise_rng is not None:
                    flow = flow + torch.from_numpy(
                        noise_rng.normal(0.0, spec.flow_noise, size=tuple(flow.shape)))
                io_formats.write_flo(out / name / f"{t:04d}.flo", flow)
            io_formats.write_raw_map(out / "sigma" / f"{t:04d}.raw", sigma_map)

    with open(out / "scene.json", "w") as f:
        json.dump({"spec": spec.to_json(), "seed": seed,
                   "scene": scene.to_json(), "camera": cam.to_json()},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out / "gt_params.json", "w") as f:
        json.dump({
            "material": {"model": material.model.value, "E": float(material.E),
                         "nu": float(material.nu),
                         "sigma_y": (None if material.sigma_y is None
                                     else float(material.sigma_y)),
                         "rho": material.rho},
            "v0": [float(x) for x in v0],
            "s": 1.0,
            "n_particles": init.n,
            "init": {f: getattr(init, f).tolist()
                     for f in ("x_cam", "log_scale", "rot", "color", "opacity_raw")},
        }, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# Bundle handle
# ---------------------------------------------------------------------------

@dataclass
class SceneBundle:
    """Read handle over a bundle directory (heavy arrays load lazily)."""

    root: Path
    spec: GenerationSpec
    seed: int
    scene: SceneConfig
    camera: Camera
    material: MaterialParams
    v0: torch.Tensor
    s_true: float
    init: Gaussians

    @staticmethod
    def load(root) -> "SceneBundle":
        root = Path(root)
        problems = validate_bundle(root)
        if problems:
            raise ValueError(f"incomplete bundle at {root}: " + "; ".join(problems))
        with open(root / "scene.json") as f:
            meta = json.load(f)
        with open(root / "gt_params.json") as f:
            gp = json.load(f)
        spec = GenerationSpec.from_json(meta["spec"])
        scene = SceneConfig.from_json(meta["scene"])
        cam = Camera.from_json(meta["camera"])
        m = gp["material"]
        material = MaterialParams(model=MaterialModel(m["model"]), E=m["E"],
                                  nu=m["nu"], sigma_y=m["sigma_y"], rho=m["rho"])
        init_d = gp["init"]
        n = gp["n_particles"]
        t64 = lambda key: torch.tensor(init_d[key], dtype=DEFAULT_DTYPE)
        v0 = torch.tensor(gp["v0"], dtype=DEFAULT_DTYPE)
        init = Gaussians.create(
            x_cam=t64("x_cam"), log_scale=t64("log_scale"), rot=t64("rot"),
            color=t64("color"), opacity_raw=t64("opacity_raw"),
            v=v0.expand(n, 3).clone(),
        )
        init.V = estimate_volumes(to_world(init.x_cam, 1.0, cam), scene.dx,
                                  origin=scene.origin, grid_res=scene.grid_res)
        return SceneBundle(root=root, spec=spec, seed=meta["seed"], scene=scene,
                           camera=cam, material=material, v0=v0,
                           s_true=gp["s"], init=init)

    @property
    def n_frames(self) -> int:
        return self.scene.n_frames

    def frame(self, t: int) -> torch.Tensor:
        return io_formats.read_png(self.root / "frames" / f"{t:04d}.png")

    def mask(self, t: int) -> torch.Tensor:
        return io_formats.read_png(self.root / "masks" / f"{t:04d}.png")

    def flow0(self, t: int) -> torch.Tensor:
        return io_formats.read_flo(self.root / "flow0" / f"{t:04d}.flo")

    def flowp(self, t: int) -> torch.Tensor:
        return io_formats.read_flo(self.root / "flowp" / f"{t:04d}.flo")

    def sigma(self, t: int) -> torch.Tensor:
        return io_formats.read_raw_map(self.root / "sigma" / f"{t:04d}.raw",
                                       self.camera.height, self.camera.width)

    def gt_pc(self, t: int) -> tuple[torch.Tensor, torch.Tensor]:
        return io_formats.read_ply(self.root / "gt_pc" / f"{t:04d}.ply")


def validate_bundle(root) -> list[str]:
    """Check a bundle directory for completeness; returns problems found."""
    root = Path(root)
    problems = []
    for name in ("scene.json", "gt_params.json"):
        if not (root / name).is_file():
            problems.append(f"missing {name}")
    if problems:
        return problems
    try:
        with open(root / "scene.json") as f:
            n = json.load(f)["scene"]["n_frames"]
    except (KeyError, json.JSONDecodeError) as e:
        return [f"unreadable scene.json: {e}"]
    counts = {"frames": (n, ".png"), "masks": (n, ".png"),
              "flow0": (n - 1, ".flo"), "flowp": (n - 1, ".flo"),
              "sigma": (n - 1, ".raw"), "gt_pc": (n, ".ply")}
    for sub, (want, ext) in counts.items():
        have = len(list((root / sub).glob(f"*{ext}"))) if (root / sub).is_dir() else 0
        if have != want:
            problems.append(f"{sub}: expected {want} {ext} files, found {have}")
    return problems


def derive_scene(world_points: torch.Tensor, template: SceneConfig,
                 pad_cells: int = 4) -> SceneConfig:
    """Place a simulation grid around a particle set.

    Keeps the template's dx/timing/ground physics; centers the grid on the
    points' xy centroid (the same convention scene generation uses, so a
    fit starting from the true geometry at the true scale lands on the
    exact same grid) and drops the z origin in whole cells so the ground
    plane stays lattice-aligned (contact nodes sit exactly at z = ground_z
    when the template was aligned).  Grows the resolution when the points
    plus margin do not fit — a fit initialized with an over-scaled geometry
    legitimately needs a larger grid than the truth.
    """
    dx = template.dx
    lo = world_points.min(dim=0).values
    hi = world_points.max(dim=0).values
    c = world_points.mean(dim=0)
    k_down = max(3, int(math.ceil((template.ground_z - float(lo[2])) / dx)) + 3)
    origin_z = template.ground_z - k_down * dx
    ext_xy = max(float(hi[0] - c[0]), float(c[0] - lo[0]),
                 float(hi[1] - c[1]), float(c[1] - lo[1]))
    need_z = float(hi[2]) - origin_z + pad_cells * dx
    res = template.grid_res
    while 0.5 * res * dx < ext_xy + pad_cells * dx or res * dx < need_z:
        res += 8
    if res != template.grid_res:
        warnings.warn(f"grid grown from {template.grid_res} to {res} cells "
                      "to cover the initial geometry")
    cx = float(c[0])
    cy = float(c[1])
    half = 0.5 * res * dx
    return SceneConfig(
        grid_res=res, dx=dx, dt=template.dt,
        substeps_per_frame=template.substeps_per_frame,
        n_frames=template.n_frames, fps=template.fps,
        gravity=template.gravity, ground_z=template.ground_z,
        origin=(cx - half, cy - half, origin_z),
        ground_sticky=template.ground_sticky)


def resimulate_bundle(bundle: SceneBundle,
                      n_frames: Optional[int] = None) -> Trajectory:
    """Re-run the ground-truth simulation from the stored frame-0 state.

    In deterministic mode this reproduces ``gt_pc`` bit-exactly (the
    closure property that makes inverse-crime evaluation meaningful).
    """
    with torch.no_grad():
        return simulate(bundle.init, bundle.material, bundle.v0,
                        bundle.s_true, bundle.camera, bundle.scene,
                        n_frames=n_frames, checkpoint_frames=False)


# ---------------------------------------------------------------------------
# Perturbed initialization
# ---------------------------------------------------------------------------

def backfacing_mask(g: Gaussians, cam: Camera, dx: float,
                    bin_px: Optional[int] = None) -> torch.Tensor:
    """Boolean mask of camera-occluded particles.

    Particles project into coarse screen bins; within a bin, those lying
    deeper than the bin's front surface by more than one grid cell are
    considered hidden from the camera.
    """
    x_c = 1.0 * g.x_cam
    z = x_c[:, 2]
    u = cam.fx * x_c[:, 0] / z + cam.cx
    v = cam.fy * x_c[:, 1] / z + cam.cy
    if bin_px is None:
        bin_px = max(2, cam.width // 32)
    bu = (u / bin_px).floor().long()
    bv = (v / bin_px).floor().long()
    key = bu * 100_000 + bv
    uniq, inv = torch.unique(key, return_inverse=True)
    zmin = torch.full((uniq.shape[0],), float("inf"), dtype=z.dtype)
    zmin = zmin.scatter_reduce(0, inv, z, reduce="amin")
    return z > zmin[inv] + dx


def perturb_init(bundle: SceneBundle, scale_factor: float = 1.0,
                 dropout_back_fraction: float = 0.0,
                 jitter_sigma: float = 0.0):
    """Build the fit's starting particle set from a bundle's ground truth.

    The true frame-0 particles are scaled by ``scale_factor`` about the
    camera origin (moving them along their own camera rays, so the 2D
    projection is exactly preserved — the monocular ambiguity the scale
    recovery must resolve; splat extents scale along too).  A fraction of
    the camera-occluded particles is dropped, positions are jittered,
    colors are reset to mid-gray, and the returned parameter block trusts
    the perturbed scale (log_s = 0) with zero initial velocity.

    Returns:
        (Gaussians, OptimizableParams)

    Raises:
        ValueError: if dropout leaves fewer than 100 particles.
    """
    from .scene_model import OptimizableParams  # local import to avoid cycle
    if scale_factor <= 0:
        raise ValueError(f"scale_factor must be positive, got {scale_factor}")
    g = bundle.init.clone()
    n = g.n

    keep = torch.ones(n, dtype=torch.bool)
    if dropout_back_fraction > 0:
        back = backfacing_mask(g, bundle.camera, bundle.scene.dx)
        back_idx = back.nonzero(as_tuple=False).squeeze(-1)
        k = int(round(dropout_back_fraction * back_idx.shape[0]))
        if k > 0:
            rng = seeded_generator(bundle.seed, "perturb-dropout")
            drop = back_idx[torch.from_numpy(
                rng.permutation(back_idx.shape[0])[:k].copy())]
            keep[drop] = False
    if int(keep.sum()) < MIN_PARTICLES:
        raise ValueError(
            f"dropout leaves {int(keep.sum())} particles (< {MIN_PARTICLES})")

    x_cam = g.x_cam[keep] * scale_factor
    if jitter_sigma > 0:
        rng = seeded_generator(bundle.seed, "perturb-jitter")
        x_cam = x_cam + torch.from_numpy(
            rng.normal(0.0, jitter_sigma, size=(int(keep.sum()), 3)))
    log_scale = g.log_scale[keep] + math.log(scale_factor)

    m = x_cam.shape[0]
    init = Gaussians.create(
        x_cam=x_cam,
        log_scale=log_scale,
        rot=g.rot[keep],
        color=torch.full((m, 3), 0.5, dtype=DEFAULT_DTYPE),
        opacity_raw=g.opacity_raw[keep],
    )
    # The perturbed geometry may extend beyond the ground-truth grid (that
    # is the point of the scale perturbation); volumes use a self-derived
    # grid, and the fit later places its own simulation grid around the init.
    init.V = estimate_volumes(
        to_world(init.x_cam, 1.0, bundle.camera), bundle.scene.dx)
    params = OptimizableParams.create(
        log10_E=4.5, nu_raw=0.0, log10_sigma_y=3.0,
        v0=(0.0, 0.0, 0.0), log_s=0.0, model=bundle.material.model)
    return init, params
