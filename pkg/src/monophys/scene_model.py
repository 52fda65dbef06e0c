"""Core scene types shared by every module, plus the camera-space scale transform.

All numeric state lives in torch tensors (float64 by default).  Particle
positions are stored in *camera space*; a single global scale ``s`` maps them
into world space through

    x_world = R @ (s * x_cam) + t,

where ``(R, t)`` is the camera-to-world pose.  Because the scaling acts along
camera rays, the perspective projection of the initial configuration is
invariant to ``s`` — this is exactly the monocular scale ambiguity the
optimizer has to resolve from dynamics rather than from appearance.

Camera convention: +z forward, +x right, +y down (pinhole).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import torch

DEFAULT_DTYPE = torch.float64


class MaterialModel(str, Enum):
    """Supported constitutive models."""

    NeoHookean = "NeoHookean"
    Plasticine = "Plasticine"


# Poisson's ratio is optimized through a sigmoid onto this open interval;
# lambda diverges as nu -> 0.5, so the upper end stays well clear of it.
NU_LOW = 0.05
NU_SPAN = 0.40  # nu = NU_LOW + NU_SPAN * sigmoid(nu_raw)


@dataclass
class MaterialParams:
    """Physical material description (SI units).

    Attributes:
        model: constitutive model.
        E: Young's modulus [Pa].
        nu: Poisson's ratio.
        sigma_y: yield stress [Pa]; required for Plasticine, ignored otherwise.
        rho: density [kg/m^3].
    """

    model: MaterialModel
    E: float | torch.Tensor
    nu: float | torch.Tensor
    sigma_y: Optional[float | torch.Tensor] = None
    rho: float = 1000.0

    def validate(self) -> None:
        def _val(x):
            return float(x.detach()) if torch.is_tensor(x) else float(x)

        E = _val(self.E)
        nu = _val(self.nu)
        if not E > 0:
            raise ValueError(f"Young's modulus must be positive, got {E}")
        if not (0 < nu < 0.5):
            raise ValueError(f"Poisson's ratio must lie in (0, 0.5), got {nu}")
        if self.model == MaterialModel.Plasticine:
            if self.sigma_y is None or not _val(self.sigma_y) > 0:
                raise ValueError("Plasticine requires a positive yield stress")
        if not self.rho > 0:
            raise ValueError(f"density must be positive, got {self.rho}")


@dataclass
class OptimizableParams:
    """Unconstrained reparameterization of the quantities the optimizer moves.

    The decoded values satisfy the MaterialParams invariants for *any* finite
    raw values:

        E       = 10 ** log10_E
        nu      = 0.05 + 0.40 * sigmoid(nu_raw)
        sigma_y = 10 ** log10_sigma_y
        s       = exp(log_s)

    All fields are torch tensors so they can be optimized directly.
    """

    log10_E: torch.Tensor
    nu_raw: torch.Tensor
    log10_sigma_y: torch.Tensor
    v0: torch.Tensor  # (3,) initial velocity [m/s]
    log_s: torch.Tensor  # global scale s = exp(log_s)
    model: MaterialModel = MaterialModel.NeoHookean

    @staticmethod
    def create(
        log10_E: float = 4.0,
        nu_raw: float = 0.0,
        log10_sigma_y: float = 3.0,
        v0=(0.0, 0.0, 0.0),
        log_s: float = 0.0,
        model: MaterialModel = MaterialModel.NeoHookean,
        dtype: torch.dtype = DEFAULT_DTYPE,
    ) -> "OptimizableParams":
        t = lambda x: torch.as_tensor(x, dtype=dtype)
        return OptimizableParams(
            log10_E=t(log10_E),
            nu_raw=t(nu_raw),
            log10_sigma_y=t(log10_sigma_y),
            v0=t(list(v0)),
            log_s=t(log_s),
            model=model,
        )

    def tensors(self) -> dict[str, torch.Tensor]:
        return {
            "log10_E": self.log10_E,
            "nu_raw": self.nu_raw,
            "log10_sigma_y": self.log10_sigma_y,
            "v0": self.v0,
            "log_s": self.log_s,
        }


def decode_params(raw: OptimizableParams) -> tuple[MaterialParams, torch.Tensor, torch.Tensor]:
    """Map unconstrained raw parameters to (MaterialParams, v0, s).

    Total on finite inputs; differentiable; bijective on the open constraint
    set (see ``encode_params``).
    """
    for name, t in raw.tensors().items():
        if not torch.isfinite(t).all():
            raise ValueError(f"non-finite raw parameter {name}: {t}")
    E = torch.pow(10.0, raw.log10_E)
    nu = NU_LOW + NU_SPAN * torch.sigmoid(raw.nu_raw)
    sigma_y = torch.pow(10.0, raw.log10_sigma_y)
    s = torch.exp(raw.log_s)
    mat = MaterialParams(model=raw.model, E=E, nu=nu, sigma_y=sigma_y)
    return mat, raw.v0, s


def encode_params(
    mat: MaterialParams,
    v0,
    s: float,
    dtype: torch.dtype = DEFAULT_DTYPE,
) -> OptimizableParams:
    """Inverse of ``decode_params`` on the open constraint set."""
    E = float(mat.E)
    nu = float(mat.nu)
    if not (NU_LOW < nu < NU_LOW + NU_SPAN):
        raise ValueError(f"nu={nu} outside the representable interval "
                         f"({NU_LOW}, {NU_LOW + NU_SPAN})")
    u = (nu - NU_LOW) / NU_SPAN
    nu_raw = math.log(u / (1.0 - u))
    sigma_y = float(mat.sigma_y) if mat.sigma_y is not None else 1e3
    t = lambda x: torch.as_tensor(x, dtype=dtype)
    return OptimizableParams(
        log10_E=t(math.log10(E)),
        nu_raw=t(nu_raw),
        log10_sigma_y=t(math.log10(sigma_y)),
        v0=t([float(x) for x in v0]),
        log_s=t(math.log(float(s))),
        model=mat.model,
    )


@dataclass
class Camera:
    """Pinhole camera with camera-to-world pose.

    ``R`` maps camera-space directions to world space; ``t`` is the camera
    origin in world coordinates.  Intrinsics are in pixels.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    R: torch.Tensor  # (3,3) camera-to-world rotation
    t: torch.Tensor  # (3,) camera-to-world translation
    width: int
    height: int

    def __post_init__(self):
        self.R = torch.as_tensor(self.R, dtype=DEFAULT_DTYPE)
        self.t = torch.as_tensor(self.t, dtype=DEFAULT_DTYPE)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        eye = torch.eye(3, dtype=self.R.dtype)
        if (self.R @ self.R.T - eye).abs().max() > 1e-9:
            raise ValueError("camera rotation is not orthonormal within 1e-9")
        if abs(float(torch.linalg.det(self.R)) - 1.0) > 1e-9:
            raise ValueError("camera rotation must have determinant +1")

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "R": self.R.tolist(), "t": self.t.tolist(),
            "width": self.width, "height": self.height,
        }

    @staticmethod
    def from_json(d: dict) -> "Camera":
        return Camera(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                      R=torch.tensor(d["R"], dtype=DEFAULT_DTYPE),
                      t=torch.tensor(d["t"], dtype=DEFAULT_DTYPE),
                      width=d["width"], height=d["height"])


@dataclass
class SceneConfig:
    """Simulation/scene constants, all SI.

    ``origin`` is the world position of grid node (0,0,0); the grid spans
    ``origin + [0, grid_res*dx]^3`` and must cover the object's trajectory
    with a two-cell interior margin.
    """

    grid_res: int
    dx: float
    dt: float
    substeps_per_frame: int
    n_frames: int
    fps: float = 20.0
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    ground_z: float = 0.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    ground_sticky: bool = False

    def __post_init__(self):
        if self.dt <= 0 or self.dx <= 0:
            raise ValueError("dt and dx must be positive")
        if self.substeps_per_frame != round(1.0 / (self.fps * self.dt)):
            raise ValueError(
                f"substeps_per_frame={self.substeps_per_frame} inconsistent with "
                f"round(1/(fps*dt))={round(1.0 / (self.fps * self.dt))}")

    @staticmethod
    def with_substeps(grid_res: int, dx: float, substeps_per_frame: int,
                      n_frames: int, fps: float = 20.0, **kw) -> "SceneConfig":
        """Build a config whose dt exactly satisfies dt = 1/(fps*substeps)."""
        dt = 1.0 / (fps * substeps_per_frame)
        return SceneConfig(grid_res=grid_res, dx=dx, dt=dt,
                           substeps_per_frame=substeps_per_frame,
                           n_frames=n_frames, fps=fps, **kw)

    def to_json(self) -> dict:
        return {
            "gravity": list(self.gravity),
            "ground_z": self.ground_z,
            "grid_res": self.grid_res,
            "dx": self.dx,
            "dt": self.dt,
            "substeps_per_frame": self.substeps_per_frame,
            "fps": self.fps,
            "n_frames": self.n_frames,
            "origin": list(self.origin),
            "ground_sticky": self.ground_sticky,
        }

    @staticmethod
    def from_json(d: dict) -> "SceneConfig":
        return SceneConfig(
            gravity=tuple(d["gravity"]),
            ground_z=d["ground_z"],
            grid_res=d["grid_res"],
            dx=d["dx"],
            dt=d["dt"],
            substeps_per_frame=d["substeps_per_frame"],
            fps=d["fps"],
            n_frames=d["n_frames"],
            origin=tuple(d.get("origin", (0.0, 0.0, 0.0))),
            ground_sticky=d.get("ground_sticky", False),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def load(path) -> "SceneConfig":
        with open(path) as f:
            return SceneConfig.from_json(json.load(f))


@dataclass
class Gaussians:
    """A batch of Gaussian particles (struct-of-tensors).

    Each particle is simultaneously a rendering primitive (position,
    covariance via log_scale+rot, color, opacity) and an MPM material point
    (volume, velocity, deformation gradient).

    Attributes:
        x_cam: (n,3) camera-space positions [m] (unscaled; world position is
            R @ (s*x_cam) + t).
        log_scale: (n,3) per-axis Gaussian extents, log meters (unscaled).
        rot: (n,4) unit quaternions (w,x,y,z).
        color: (n,3) RGB in [0,1].
        opacity_raw: (n,) logits; opacity o = sigmoid(opacity_raw).
        V: (n,) physical volumes [m^3].
        v: (n,3) velocities [m/s].
        F: (n,3,3) deformation gradients.
    """

    x_cam: torch.Tensor
    log_scale: torch.Tensor
    rot: torch.Tensor
    color: torch.Tensor
    opacity_raw: torch.Tensor
    V: torch.Tensor
    v: torch.Tensor
    F: torch.Tensor

    @property
    def n(self) -> int:
        return self.x_cam.shape[0]

    @property
    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_raw)

    def validate(self, dx: Optional[float] = None) -> None:
        qn = torch.linalg.norm(self.rot, dim=-1)
        if (qn - 1.0).abs().max() > 1e-6:
            raise ValueError("quaternions must be normalized within 1e-6")
        if (self.V <= 0).any():
            raise ValueError("particle volumes must be positive")
        if dx is not None and (self.V > dx**3 * (1 + 1e-9)).any():
            raise ValueError("particle volumes must not exceed one cell volume")
        detF = torch.linalg.det(self.F)
        if (detF <= 0).any():
            raise ValueError("deformation gradients must have positive determinant")

    def clone(self) -> "Gaussians":
        return Gaussians(*(getattr(self, f).clone() for f in _GAUSSIAN_FIELDS))

    def detach(self) -> "Gaussians":
        return Gaussians(*(getattr(self, f).detach() for f in _GAUSSIAN_FIELDS))

    @staticmethod
    def create(x_cam, log_scale=None, rot=None, color=None, opacity_raw=None,
               V=None, v=None, F=None, dtype: torch.dtype = DEFAULT_DTYPE) -> "Gaussians":
        """Convenience constructor filling unspecified fields with defaults."""
        x = torch.as_tensor(x_cam, dtype=dtype)
        n = x.shape[0]
        if log_scale is None:
            log_scale = torch.full((n, 3), math.log(1e-3), dtype=dtype)
        if rot is None:
            rot = torch.zeros((n, 4), dtype=dtype)
            rot[:, 0] = 1.0
        if color is None:
            color = torch.full((n, 3), 0.5, dtype=dtype)
        if opacity_raw is None:
            opacity_raw = torch.zeros(n, dtype=dtype)
        if V is None:
            V = torch.full((n,), 1e-9, dtype=dtype)
        if v is None:
            v = torch.zeros((n, 3), dtype=dtype)
        if F is None:
            F = torch.eye(3, dtype=dtype).expand(n, 3, 3).clone()
        g = Gaussians(x, torch.as_tensor(log_scale, dtype=dtype),
                      torch.as_tensor(rot, dtype=dtype),
                      torch.as_tensor(color, dtype=dtype),
                      torch.as_tensor(opacity_raw, dtype=dtype),
                      torch.as_tensor(V, dtype=dtype),
                      torch.as_tensor(v, dtype=dtype),
                      torch.as_tensor(F, dtype=dtype))
        shapes = {"x_cam": (n, 3), "log_scale": (n, 3), "rot": (n, 4),
                  "color": (n, 3), "opacity_raw": (n,), "V": (n,),
                  "v": (n, 3), "F": (n, 3, 3)}
        for name, want in shapes.items():
            got = tuple(getattr(g, name).shape)
            if got != want:
                raise ValueError(f"{name} must have shape {want}, got {got}")
        return g


_GAUSSIAN_FIELDS = ("x_cam", "log_scale", "rot", "color", "opacity_raw", "V", "v", "F")


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Convert unit quaternions (...,4) in (w,x,y,z) order to rotation matrices.

    The input is normalized defensively; callers should maintain unit norm.
    """
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def to_world(x_cam: torch.Tensor, s, cam: Camera) -> torch.Tensor:
    """Map camera-space positions to world space: R @ (s * x_cam) + t.

    Differentiable w.r.t. both ``x_cam`` and ``s``.

    Args:
        x_cam: (...,3) camera-space positions.
        s: positive global scale (scalar tensor or float).
        cam: camera pose.
    """
    s = torch.as_tensor(s, dtype=x_cam.dtype)
    if not torch.isfinite(x_cam).all():
        raise ValueError("to_world: non-finite camera-space position")
    if not torch.isfinite(s).all() or float(s.detach()) <= 0:
        raise ValueError(f"to_world: scale must be finite and positive, got {s}")
    R = cam.R.to(x_cam.dtype)
    t = cam.t.to(x_cam.dtype)
    return (s * x_cam) @ R.T + t


def world_to_cam(x_world: torch.Tensor, cam: Camera) -> torch.Tensor:
    """Inverse pose transform (without scale): R^T @ (x_world - t)."""
    R = cam.R.to(x_world.dtype)
    t = cam.t.to(x_world.dtype)
    return (x_world - t) @ R


def covariance_3d(g: Gaussians) -> torch.Tensor:
    """Per-particle 3D covariance Σ = R_q diag(exp(2·log_scale)) R_qᵀ.

    Symmetric positive definite by construction.  Scales below 1e-8 m are
    rejected: they signal a degenerate Gaussian that would destabilize both
    rendering and the importance statistics.
    """
    scale = torch.exp(g.log_scale)
    if (scale < 1e-8).any():
        raise ValueError("degenerate Gaussian scale below 1e-8 m")
    Rq = quat_to_rotmat(g.rot)
    return Rq @ torch.diag_embed(scale**2) @ Rq.transpose(-1, -2)
