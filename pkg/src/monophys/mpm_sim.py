"""Differentiable 3D MLS-MPM forward simulation.

One substep is the classic particle-grid-particle cycle:

    p2g: scatter mass and momentum (including the APIC affine term and the
         Kirchhoff-stress impulse) to a dense background grid with quadratic
         B-spline weights;
    grid_update: momentum → velocity, gravity, frictionless ground contact;
    g2p: gather velocity and its local gradient back, advect positions,
         update deformation gradients, and (for plasticine) apply the
         von Mises return map.

The MLS weight-gradient approximation ∇w ≈ w·(4/Δx²)·(x_node − x_p) makes the
transfer pair exactly momentum conserving: the stress impulse sums to zero
over the stencil because the quadratic B-spline has zero first moment.

Everything runs on torch tensors (float64 by default) and is differentiable
w.r.t. initial positions, velocity, material parameters, and the global
scale.  Frame blocks are activation-checkpointed so memory stays bounded by
one frame's substeps plus the per-frame boundary states.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
from torch.utils.checkpoint import checkpoint as _torch_checkpoint

from . import constitutive
from .scene_model import Camera, Gaussians, MaterialModel, MaterialParams, SceneConfig, to_world

MASS_EPS = 1e-30  # guards 0/0 at nodes no stencil touches; real nodes far exceed it


class SimulationAbort(RuntimeError):
    """Simulation left the valid regime (out of grid, inversion, non-finite)."""

    def __init__(self, reason: str, particle: Optional[int] = None,
                 substep: Optional[int] = None):
        self.reason = reason
        self.particle = particle
        self.substep = substep
        msg = f"simulation aborted: {reason}"
        if particle is not None:
            msg += f" (particle {particle})"
        if substep is not None:
            msg += f" (substep {substep})"
        super().__init__(msg)


def bspline_weights(x_world: torch.Tensor, dx: float, origin, grid_res: int):
    """Quadratic B-spline stencil of each particle.

    Returns ``(idx, w, gw, dpos)``:
        idx:  (n,27) int64 linear node ids,
        w:    (n,27) weights (sum to 1),
        gw:   (n,27,3) true tensor-product weight gradients (sum to 0),
        dpos: (n,27,3) node position minus particle position [m].

    Particles must stay two cells clear of the grid boundary; violations
    abort with the offending particle index.
    """
    if not torch.isfinite(x_world).all():
        bad = int((~torch.isfinite(x_world).all(dim=-1)).nonzero()[0])
        raise SimulationAbort("non-finite particle position", particle=bad)
    origin_t = torch.as_tensor(origin, dtype=x_world.dtype)
    xp = (x_world - origin_t) / dx                       # grid units
    base = torch.floor(xp - 0.5).detach()
    lo = base.min()
    hi = base.max()
    if lo < 1 or hi > grid_res - 4:
        outside = ((base < 1) | (base > grid_res - 4)).any(dim=-1)
        bad = int(outside.nonzero()[0])
        raise SimulationAbort("particle outside grid interior margin", particle=bad)
    fx = xp - base                                       # in [0.5, 1.5)

    # per-axis quadratic B-spline values and derivatives at offsets 0,1,2
    wa = torch.stack([0.5 * (1.5 - fx) ** 2,
                      0.75 - (fx - 1.0) ** 2,
                      0.5 * (fx - 0.5) ** 2], dim=-1)    # (n,3,3): axis, offset
    da = torch.stack([fx - 1.5,
                      -2.0 * (fx - 1.0),
                      fx - 0.5], dim=-1) / dx            # d/dx_world

    # tensor products over the 27 offsets (ox,oy,oz)
    wx, wy, wz = wa[:, 0], wa[:, 1], wa[:, 2]            # (n,3) each
    dxw, dyw, dzw = da[:, 0], da[:, 1], da[:, 2]
    w = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 27)
    gx = (dxw[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 27)
    gy = (wx[:, :, None, None] * dyw[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 27)
    gz = (wx[:, :, None, None] * wy[:, None, :, None] * dzw[:, None, None, :]).reshape(-1, 27)
    gw = torch.stack([gx, gy, gz], dim=-1)

    offs = torch.stack(torch.meshgrid(
        torch.arange(3), torch.arange(3), torch.arange(3), indexing="ij"),
        dim=-1).reshape(27, 3).to(x_world.device)
    nodes = base.long().unsqueeze(1) + offs.unsqueeze(0)  # (n,27,3)
    idx = (nodes[..., 0] * grid_res + nodes[..., 1]) * grid_res + nodes[..., 2]
    dpos = (offs.to(x_world.dtype).unsqueeze(0) - fx.unsqueeze(1)) * dx
    return idx, w, gw, dpos


def p2g(x: torch.Tensor, v: torch.Tensor, C: torch.Tensor, tau: torch.Tensor,
        mass_p: torch.Tensor, Vp: torch.Tensor, scene: SceneConfig, dt: float):
    """Particle-to-grid transfer (MLS-MPM).

    Node mass m_ℓ = Σ w·m_p; node momentum collects the particle momentum,
    the APIC affine contribution m_p·C·(x_ℓ−x_p), and the stress impulse
    −dt·(4/Δx²)·V_p·τ·(x_ℓ−x_p).

    Returns (grid_mass (G,), grid_mom (G,3), stencil) with G = grid_res³.
    """
    dx = scene.dx
    idx, w, _, dpos = bspline_weights(x, dx, scene.origin, scene.grid_res)
    affine = (-dt * 4.0 / dx**2) * Vp.reshape(-1, 1, 1) * tau \
        + mass_p.reshape(-1, 1, 1) * C
    mom_contrib = w.unsqueeze(-1) * (
        mass_p.reshape(-1, 1, 1) * v.unsqueeze(1)
        + torch.einsum("nij,npj->npi", affine, dpos))
    mass_contrib = w * mass_p.unsqueeze(-1)

    G = scene.grid_res ** 3
    flat = idx.reshape(-1)
    grid_mass = torch.zeros(G, dtype=x.dtype).index_add(0, flat, mass_contrib.reshape(-1))
    grid_mom = torch.zeros(G, 3, dtype=x.dtype).index_add(0, flat, mom_contrib.reshape(-1, 3))
    return grid_mass, grid_mom, (idx, w, dpos)


def grid_update(grid_mass: torch.Tensor, grid_mom: torch.Tensor,
                scene: SceneConfig, dt: float) -> torch.Tensor:
    """Momentum → velocity, gravity, and ground contact on grid nodes.

    The ground plane at z = ground_z is frictionless slip by default: nodes
    on or below the plane with downward velocity lose the normal component
    and keep the tangential one.  ``scene.ground_sticky`` zeroes the full
    velocity instead (ablation option).
    """
    res = scene.grid_res
    has_mass = grid_mass > MASS_EPS
    safe_mass = torch.where(has_mass, grid_mass, torch.ones_like(grid_mass))
    vel = grid_mom / safe_mass.unsqueeze(-1)
    vel = torch.where(has_mass.unsqueeze(-1), vel, torch.zeros_like(vel))
    g = torch.tensor(scene.gravity, dtype=vel.dtype)
    vel = vel + torch.where(has_mass.unsqueeze(-1), dt * g.expand_as(vel),
                            torch.zeros_like(vel))

    iz = torch.arange(res).repeat(res * res)
    node_z = torch.as_tensor(scene.origin[2], dtype=vel.dtype) + iz.to(vel.dtype) * scene.dx
    on_ground = node_z <= scene.ground_z + 1e-12
    moving_down = vel[:, 2] < 0
    contact = on_ground & moving_down
    if scene.ground_sticky:
        vel = torch.where(contact.unsqueeze(-1), torch.zeros_like(vel), vel)
    else:
        vz = torch.where(contact, torch.zeros_like(vel[:, 2]), vel[:, 2])
        vel = torch.cat([vel[:, :2], vz.unsqueeze(-1)], dim=-1)
    return vel


def g2p(grid_vel: torch.Tensor, stencil, x: torch.Tensor, F: torch.Tensor,
        scene: SceneConfig, dt: float):
    """Grid-to-particle gather and advection.

    Returns (x_new, v_new, C_new, F_trial) with
        v_p = Σ w v_ℓ,   C = (4/Δx²) Σ w v_ℓ (x_ℓ−x_p)ᵀ,
        x ← x + dt v_p,  F_trial = (I + dt·C) F.

    Plastic projection is the caller's job (it owns the material model).
    """
    idx, w, dpos = stencil
    vg = grid_vel[idx.reshape(-1)].reshape(*idx.shape, 3)     # (n,27,3)
    v_new = torch.einsum("np,npi->ni", w, vg)
    C_new = (4.0 / scene.dx**2) * torch.einsum("np,npi,npj->nij", w, vg, dpos)
    x_new = x + dt * v_new
    eye = torch.eye(3, dtype=F.dtype).expand_as(F)
    F_trial = (eye + dt * C_new) @ F
    return x_new, v_new, C_new, F_trial


@dataclass
class FrameState:
    """Particle state at one frame boundary."""

    x: torch.Tensor     # (n,3) world positions
    v: torch.Tensor     # (n,3)
    C: torch.Tensor     # (n,3,3) affine velocity field
    F: torch.Tensor     # (n,3,3)
    t: float            # time [s]


@dataclass
class Trajectory:
    """Per-frame states (frame 0 = initial) plus the constants of the run."""

    frames: list[FrameState]
    mass_p: torch.Tensor
    scene: SceneConfig

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def positions(self, frame: int) -> torch.Tensor:
        return self.frames[frame].x


def _make_step(model: MaterialModel, mu, lam, k, mass_p, Vp, scene: SceneConfig,
               dt: float):
    """Build the substep function.  State is (x, v, C, F) for Neo-Hookean and
    (x, v, C, F, R) for plasticine, where R caches the polar rotation of F so
    each substep costs exactly one SVD (inside the fused return map)."""

    if model == MaterialModel.NeoHookean:
        def step(i, x, v, C, F):
            lp = constitutive.LameParams(mu, lam)
            tau = constitutive.neo_hookean_tau(F, lp)
            gm, gp, stencil = p2g(x, v, C, tau, mass_p, Vp, scene, dt)
            vel = grid_update(gm, gp, scene, dt)
            x, v, C, F_new = g2p(vel, stencil, x, F, scene, dt)
            return x, v, C, F_new
        return step

    def step(i, x, v, C, F, R):
        lp = constitutive.LameParams(mu, lam)
        tau = constitutive.corotated_tau(F, lp, R=R)
        gm, gp, stencil = p2g(x, v, C, tau, mass_p, Vp, scene, dt)
        vel = grid_update(gm, gp, scene, dt)
        x, v, C, F_trial = g2p(vel, stencil, x, F, scene, dt)
        F_new, R_new = constitutive.return_map_with_rotation(F_trial, k)
        return x, v, C, F_new, R_new
    return step


def simulate(init: Gaussians, material: MaterialParams, v0: torch.Tensor,
             s, cam: Camera, scene: SceneConfig, *, n_frames: Optional[int] = None,
             checkpoint_frames: bool = True) -> Trajectory:
    """Forward-simulate ``n_frames`` of the scene.

    The initial camera-space particle set is mapped to world space with the
    global scale ``s`` at entry; per-frame states are recorded at fps spacing
    (frame 0 is the initial state).  Differentiable w.r.t. init.x_cam, v0,
    material parameter tensors, and s.

    Args:
        init: particle set (x_cam, V used; v is ignored in favor of v0).
        material: decoded material parameters (tensors keep gradients).
        v0: (3,) shared initial velocity.
        s: global scale (tensor or float).
        cam: camera pose used by the scale transform.
        scene: grid and time stepping constants.
        n_frames: overrides scene.n_frames when given.
        checkpoint_frames: activation-checkpoint each frame block.
    """
    material.validate()
    n_frames = scene.n_frames if n_frames is None else n_frames
    dt = scene.dt
    lp = constitutive.lame(material.E, material.nu)
    mu, lam = lp.mu, lp.lam

    x = to_world(init.x_cam, s, cam)
    n = x.shape[0]
    v = v0.reshape(1, 3).expand(n, 3) + torch.zeros_like(x)
    C = torch.zeros((n, 3, 3), dtype=x.dtype)
    F = init.F
    Vp = init.V.detach()
    mass_p = (material.rho * Vp).detach()

    if material.model == MaterialModel.Plasticine:
        sy = material.sigma_y if torch.is_tensor(material.sigma_y) \
            else torch.as_tensor(material.sigma_y, dtype=x.dtype)
        k = sy / (2.0 * mu)
        state = (x, v, C, F, constitutive.polar_rotation(F))
    else:
        k = None
        state = (x, v, C, F)
    step = _make_step(material.model, mu, lam, k, mass_p, Vp, scene, dt)

    def frame_block(*st):
        for i in range(scene.substeps_per_frame):
            st = step(i, *st)
        return st

    frames = [FrameState(x=state[0], v=state[1], C=state[2], F=state[3], t=0.0)]
    maybe_grad = list(state) + [t for t in (mu, lam, k) if torch.is_tensor(t)]
    need_grad = torch.is_grad_enabled() and any(t.requires_grad for t in maybe_grad)
    for f in range(1, n_frames):
        if checkpoint_frames and need_grad:
            state = _torch_checkpoint(frame_block, *state, use_reentrant=False)
        else:
            state = frame_block(*state)
        frames.append(FrameState(x=state[0], v=state[1], C=state[2],
                                 F=state[3], t=f / scene.fps))
    return Trajectory(frames=frames, mass_p=mass_p, scene=scene)
