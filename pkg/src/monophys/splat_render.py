"""Differentiable perspective Gaussian splatting.

Particles are anisotropic 3D Gaussians defined in the camera frame of the
reference view.  Rendering projects them with the local-affine (Jacobian)
approximation and alpha-composites them front to back:

    C(p) = sum_i alpha_i c_i prod_{j<i} (1 - alpha_j) + c_bg prod_i (1 - alpha_i)

with alpha_i = o_i * exp(-1/2 d^T cov2d^{-1} d), d = p - mean2d_i.

Four maps share one compositing pass (identical alphas and transmittances):
color, alpha, screen-space flow, and the differentiable position map

    ptilde_i = mean2d_i + B_i sg(B_i^{-1} (p - mean2d_i)),   B_i = cov2d_i^{1/2},

whose forward value is exactly the pixel coordinate while its derivative
w.r.t. mean2d is the identity — the mechanism that lets a silhouette
objective move Gaussians even when supports do not overlap.

The compositor is vectorized over (pixel, splat) pairs: each splat contributes
a bounded window of pixels, pairs are sorted by (pixel, global depth rank),
and per-pixel exclusive transmittances come from a global cumulative sum of
log(1 - alpha) differenced at segment starts.  Scatter-adds are index_add on
flattened maps, which is deterministic on CPU.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .diff_engine import stop_gradient
from .scene_model import Camera, Gaussians, covariance_3d, world_to_cam

NEAR_PLANE = 0.01       # m; splats at or behind are culled
ALPHA_MIN = 1.0 / 255.0  # contributions below this are skipped
ALPHA_MAX = 0.999        # numerical ceiling so log(1 - alpha) stays finite
COV2D_FLOOR = 0.3        # px^2 anti-aliasing floor added to cov2d
WINDOW_SIGMA = 3.5       # window half-size in standard deviations
MAX_RADIUS_PX = 64       # hard cap on the per-splat window radius


@dataclass
class Splats:
    """Projected 2D splats (struct of arrays), culled to z > near plane.

    ``index`` maps each splat back to its source particle.
    """

    mean2d: torch.Tensor            # (m,2) pixels, (col,row)
    cov2d: torch.Tensor             # (m,2,2) pixels^2, SPD (floored)
    depth: torch.Tensor             # (m,) camera-space z [m]
    color: torch.Tensor             # (m,3)
    opacity: torch.Tensor           # (m,) in (0,1)
    index: torch.Tensor             # (m,) long, source particle ids
    flow: Optional[torch.Tensor] = None   # (m,2) pixels/frame

    @property
    def n(self) -> int:
        return self.mean2d.shape[0]


@dataclass
class RenderedMaps:
    """Output maps of one compositing pass (requested channels only)."""

    color: Optional[torch.Tensor] = None     # (H,W,3)
    alpha: Optional[torch.Tensor] = None     # (H,W) in [0,1]
    flow: Optional[torch.Tensor] = None      # (H,W,2)
    posmap: Optional[torch.Tensor] = None    # (H,W,2)
    n_contrib: Optional[torch.Tensor] = None  # (H,W) int32 splats per pixel


def project_gaussians(g: Gaussians, s, cam: Camera,
                      x_world: Optional[torch.Tensor] = None,
                      flow_ref2d: Optional[torch.Tensor] = None) -> Splats:
    """Project Gaussians to screen space, culling behind the near plane.

    With ``x_world`` omitted the reference-frame positions are used, i.e.
    camera-space x = s * x_cam — the configuration whose projection is
    invariant to s (scaling moves particles along their own camera rays).
    For simulated frames pass the world positions from the trajectory.

    ``flow_ref2d``: optional (n,2) reference projections; when given, the
    splats' flow channel is set to mean2d - flow_ref2d.
    """
    s_t = torch.as_tensor(s, dtype=g.x_cam.dtype)
    if x_world is None:
        x_c = s_t * g.x_cam
    else:
        x_c = world_to_cam(x_world, cam)
    z = x_c[:, 2]
    keep = z > NEAR_PLANE
    idx = keep.nonzero(as_tuple=False).squeeze(-1)
    x_c = x_c[idx]
    z = z[idx]

    fx, fy, cx, cy = cam.fx, cam.fy, cam.cx, cam.cy
    mean2d = torch.stack([fx * x_c[:, 0] / z + cx,
                          fy * x_c[:, 1] / z + cy], dim=-1)

    cov3d = (s_t ** 2) * covariance_3d(
        Gaussians(x_cam=g.x_cam[idx], log_scale=g.log_scale[idx], rot=g.rot[idx],
                  color=g.color[idx], opacity_raw=g.opacity_raw[idx],
                  V=g.V[idx], v=g.v[idx], F=g.F[idx]))
    zero = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([fx / z, zero, -fx * x_c[:, 0] / z**2], dim=-1),
        torch.stack([zero, fy / z, -fy * x_c[:, 1] / z**2], dim=-1),
    ], dim=-2)                                              # (m,2,3)
    cov2d = J @ cov3d @ J.transpose(-1, -2)
    cov2d = cov2d + COV2D_FLOOR * torch.eye(2, dtype=cov2d.dtype)

    flow = None
    if flow_ref2d is not None:
        flow = mean2d - flow_ref2d[idx]
    g_op = g.opacity
    return Splats(mean2d=mean2d, cov2d=cov2d, depth=z, color=g.color[idx],
                  opacity=g_op[idx], index=idx, flow=flow)


def _inv_2x2(A: torch.Tensor) -> torch.Tensor:
    a, b = A[..., 0, 0], A[..., 0, 1]
    c, d = A[..., 1, 0], A[..., 1, 1]
    det = a * d - b * c
    inv = torch.stack([torch.stack([d, -b], dim=-1),
                       torch.stack([-c, a], dim=-1)], dim=-2)
    return inv / det.unsqueeze(-1).unsqueeze(-1)


def _sqrt_2x2_spd(A: torch.Tensor) -> torch.Tensor:
    """Closed-form principal square root of a 2x2 SPD matrix:
    sqrt(A) = (A + sqrt(det) I) / sqrt(trace + 2 sqrt(det))."""
    det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    tr = A[..., 0, 0] + A[..., 1, 1]
    sq = torch.sqrt(det)
    eye = torch.eye(2, dtype=A.dtype)
    denom = torch.sqrt(tr + 2.0 * sq)
    return (A + sq.unsqueeze(-1).unsqueeze(-1) * eye) / denom.unsqueeze(-1).unsqueeze(-1)


def pixel_grid(H: int, W: int, dtype=torch.float64) -> torch.Tensor:
    """(H,W,2) map of pixel coordinates, channel order (col,row)."""
    ys, xs = torch.meshgrid(torch.arange(H, dtype=dtype),
                            torch.arange(W, dtype=dtype), indexing="ij")
    return torch.stack([xs, ys], dim=-1)


def position_proxy(mean2d: torch.Tensor, cov2d: torch.Tensor,
                   p: torch.Tensor) -> torch.Tensor:
    """Per-splat differentiable position p̃ = mean2d + B·sg(B⁻¹(p − mean2d)),
    B = cov2d^{1/2}.

    Evaluated in the compensated form p + B·(sg(y) − y), y = B⁻¹(p − mean2d):
    the forward value is bit-exactly p (sg is the identity forward), while
    the derivatives equal those of the defining formula — in particular
    ∂p̃/∂mean2d = I.
    """
    B = _sqrt_2x2_spd(cov2d)
    y = torch.einsum("...ij,...j->...i", _inv_2x2(B), p - mean2d)
    return p + torch.einsum("...ij,...j->...i", B, stop_gradient(y) - y)


def composite(splats: Splats, cam: Camera, background: Sequence[float] = (0., 0., 0.),
              want: Sequence[str] = ("color", "alpha"),
              max_radius: int = MAX_RADIUS_PX) -> RenderedMaps:
    """Alpha-composite the splats into the requested maps.

    Splats are ordered globally by (depth, source index); each contributes a
    WINDOW_SIGMA-sigma pixel window (radius capped).  Contributions with
    alpha < 1/255 are skipped.  All requested channels share one pass, so
    their alphas/transmittances are identical by construction.
    """
    H, W = cam.height, cam.width
    dtype = splats.mean2d.dtype
    bg = torch.as_tensor(background, dtype=dtype)
    pgrid = pixel_grid(H, W, dtype)

    def empty_maps() -> RenderedMaps:
        e = RenderedMaps(n_contrib=torch.zeros(H, W, dtype=torch.int32))
        if "color" in want:
            e.color = bg.expand(H, W, 3).clone()
        if "alpha" in want:
            e.alpha = torch.zeros(H, W, dtype=dtype)
        if "flow" in want:
            e.flow = torch.zeros(H, W, 2, dtype=dtype)
        if "posmap" in want:
            e.posmap = pgrid.clone()
        return e

    m = splats.n
    if m == 0:
        return empty_maps()

    # global front-to-back order; stable sort breaks depth ties by index
    order = torch.argsort(splats.depth.detach(), stable=True)
    rank = torch.empty(m, dtype=torch.long)
    rank[order] = torch.arange(m)

    # per-splat pixel windows from the dominant eigenvalue of cov2d
    with torch.no_grad():
        a = splats.cov2d[:, 0, 0]
        c = splats.cov2d[:, 1, 1]
        b = splats.cov2d[:, 0, 1]
        lam_max = 0.5 * (a + c + torch.sqrt((a - c) ** 2 + 4 * b * b))
        radius = torch.clamp(torch.ceil(WINDOW_SIGMA * torch.sqrt(lam_max)) + 1,
                             min=1, max=max_radius).long()
        mx = splats.mean2d[:, 0]
        my = splats.mean2d[:, 1]
        x0 = torch.clamp(torch.floor(mx - radius).long(), 0, W - 1)
        x1 = torch.clamp(torch.ceil(mx + radius).long(), 0, W - 1)
        y0 = torch.clamp(torch.floor(my - radius).long(), 0, H - 1)
        y1 = torch.clamp(torch.ceil(my + radius).long(), 0, H - 1)
        wk = x1 - x0 + 1
        hk = y1 - y0 + 1
        counts = wk * hk
        total = int(counts.sum())
        pair_splat = torch.repeat_interleave(torch.arange(m), counts)
        offsets = torch.cumsum(counts, 0) - counts
        local = torch.arange(total) - offsets[pair_splat]
        px = x0[pair_splat] + local % wk[pair_splat]
        py = y0[pair_splat] + local // wk[pair_splat]

    # pair alphas
    d = torch.stack([px.to(dtype), py.to(dtype)], dim=-1) - splats.mean2d[pair_splat]
    inv = _inv_2x2(splats.cov2d)[pair_splat]
    q = torch.einsum("pi,pij,pj->p", d, inv, d)
    alpha = splats.opacity[pair_splat] * torch.exp(-0.5 * q)
    alpha = torch.clamp(alpha, max=ALPHA_MAX)

    live = alpha.detach() >= ALPHA_MIN
    pair_splat = pair_splat[live]
    px, py = px[live], py[live]
    alpha = alpha[live]
    d = d[live]

    pid = py * W + px
    key = pid * m + rank[pair_splat]
    sort_idx = torch.argsort(key)
    pair_splat = pair_splat[sort_idx]
    pid_s = pid[sort_idx]
    alpha_s = alpha[sort_idx]
    d_s = d[sort_idx]
    P = alpha_s.shape[0]

    if P == 0:
        return empty_maps()
    flat_maps = RenderedMaps()

    # exclusive per-pixel transmittance via segment-differenced global cumsum
    log_t = torch.log1p(-alpha_s)
    cs = torch.cumsum(log_t, 0)
    cs_prev = torch.cat([torch.zeros(1, dtype=dtype), cs[:-1]])
    is_start = torch.cat([torch.ones(1, dtype=torch.bool), pid_s[1:] != pid_s[:-1]])
    start_pos = torch.cummax(torch.where(is_start, torch.arange(P),
                                         torch.zeros(P, dtype=torch.long)), 0).values
    base = cs_prev[start_pos]
    T = torch.exp(cs_prev - base)          # transmittance before each pair
    wgt = alpha_s * T                      # compositing weight per pair

    # per-pixel final transmittance (ends of segments)
    is_end = torch.cat([is_start[1:], torch.ones(1, dtype=torch.bool)])
    seg_total = cs[is_end] - base[is_end]
    end_pid = pid_s[is_end]
    logT_map = torch.zeros(H * W, dtype=dtype).index_add(0, end_pid, seg_total)
    T_final = torch.exp(logT_map)

    def scatter(values: torch.Tensor, channels: int) -> torch.Tensor:
        m_ = torch.zeros(H * W, channels, dtype=dtype)
        return m_.index_add(0, pid_s, wgt.unsqueeze(-1) * values)

    if "color" in want:
        cmap = scatter(splats.color[pair_splat], 3)
        cmap = cmap + bg.unsqueeze(0) * T_final.unsqueeze(-1)
        flat_maps.color = cmap.reshape(H, W, 3)
    if "alpha" in want:
        flat_maps.alpha = (1.0 - T_final).reshape(H, W)
    if "flow" in want:
        if splats.flow is None:
            raise ValueError("flow channel requested but splats carry no flow")
        flat_maps.flow = scatter(splats.flow[pair_splat], 2).reshape(H, W, 2)
    if "posmap" in want:
        # p̃ - p = B(sg(y) - y) is exactly zero forward, so compositing it on
        # top of the pixel grid realizes   Σ w p̃ + p·Π(1-α)   with a
        # bit-exact identity map and unchanged derivatives (the -y term
        # reintroduces the stop-gradient-blocked dependence with opposite
        # sign, giving ∂p̃/∂mean2d = I and ∂p̃/∂B = δB·y as in the
        # uncompensated form).
        B = _sqrt_2x2_spd(splats.cov2d)
        Binv = _inv_2x2(B)
        yloc = torch.einsum("pij,pj->pi", Binv[pair_splat], d_s)
        corr = torch.einsum("pij,pj->pi", B[pair_splat],
                            stop_gradient(yloc) - yloc)
        pm = scatter(corr, 2)
        flat_maps.posmap = (pgrid.reshape(-1, 2) + pm).reshape(H, W, 2)

    ones = torch.ones(P, dtype=torch.int32)
    flat_maps.n_contrib = torch.zeros(H * W, dtype=torch.int32).index_add(
        0, pid_s, ones).reshape(H, W)
    return flat_maps


def render_flow(splats: Splats, cam: Camera) -> torch.Tensor:
    """Composite the per-splat flow channel over a zero background."""
    return composite(splats, cam, want=("flow",)).flow


def render_position_map(splats: Splats, cam: Camera) -> torch.Tensor:
    """Composite the differentiable position map (background = pixel grid)."""
    return composite(splats, cam, want=("posmap",)).posmap


def render_frame(g: Gaussians, s, cam: Camera,
                 x_world: Optional[torch.Tensor] = None,
                 flow_ref2d: Optional[torch.Tensor] = None,
                 background: Sequence[float] = (0., 0., 0.),
                 want: Sequence[str] = ("color", "alpha")) -> RenderedMaps:
    """Project and composite in one call."""
    splats = project_gaussians(g, s, cam, x_world=x_world, flow_ref2d=flow_ref2d)
    return composite(splats, cam, background=background, want=want)
