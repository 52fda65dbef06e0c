"""Physics-aware geometry adaptation between optimizer iterations.

Two mechanisms:

* iterative per-particle volume estimation: distribute each grid cell's
  volume dx^3 among the particles covering it, by B-spline weight, and
  iterate a multiplicative correction so that no node ends up promising
  more volume than its cell holds;
* importance-driven relocation: every few iterations the least important
  Gaussians (by visual footprint and by physical volume) are replaced with
  copies split off the most important ones, keeping the particle count
  fixed.

Both run outside the differentiated graph (no_grad); the optimizer treats
them as discrete events.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import torch

from .mpm_sim import bspline_weights
from .scene_model import Gaussians, _GAUSSIAN_FIELDS

VOLUME_ROUNDS = 5
RELOCATE_FRACTION = 0.01


def volume_transfer_passes(rounds: int = VOLUME_ROUNDS) -> int:
    """Grid transfer passes (scatter or gather) one volume estimate costs:
    one scatter + one gather to initialize, then one of each per round."""
    return 2 + 2 * rounds


def estimate_volumes(positions: torch.Tensor, dx: float,
                     rounds: int = VOLUME_ROUNDS, *,
                     origin=None, grid_res: Optional[int] = None) -> torch.Tensor:
    """Per-particle volumes in (0, dx^3] by iterative cell-volume sharing.

    Initialization: n_l = sum_i w_il (crowding per node), n_hat_i =
    sum_l w_il n_l, V_i = min(dx^3 / n_hat_i, dx^3).  Each round then scatters
    claimed volume Vt_l = sum_i w_il V_i, forms the per-node correction
    c_l = min(dx^3 / Vt_l, 1) (c_l = 1 where nothing is claimed), and updates
    V_i <- min(V_i * sum_l w_il c_l, dx^3).

    ``origin``/``grid_res`` default to a grid derived from the positions'
    bounding box (cell-aligned, 3-cell margin); pass the simulation grid to
    share its phase.
    """
    with torch.no_grad():
        x = positions.detach()
        if origin is None or grid_res is None:
            lo = torch.floor(x.min(dim=0).values / dx) - 3
            hi = torch.ceil(x.max(dim=0).values / dx) + 3
            origin = tuple((lo * dx).tolist())
            grid_res = int((hi - lo).max()) + 1
        idx, w, _, _ = bspline_weights(x, dx, origin, grid_res)
        G = grid_res ** 3
        flat = idx.reshape(-1)
        cell = dx ** 3

        n_node = torch.zeros(G, dtype=x.dtype).index_add(0, flat, w.reshape(-1))
        n_hat = (w * n_node[idx.reshape(-1)].reshape(w.shape)).sum(dim=1)
        V = torch.clamp(cell / n_hat, max=cell)
        for _ in range(rounds):
            claimed = torch.zeros(G, dtype=x.dtype).index_add(
                0, flat, (w * V.unsqueeze(1)).reshape(-1))
            c = torch.where(claimed > 0, torch.clamp(cell / claimed, max=1.0),
                            torch.ones_like(claimed))
            gain = (w * c[idx.reshape(-1)].reshape(w.shape)).sum(dim=1)
            V = torch.clamp(V * gain, max=cell)
        return V


@dataclass
class ImportanceTriple:
    """Per-particle importance, each family normalized to sum to 1."""

    p_vis: torch.Tensor
    p_phys: torch.Tensor
    p: torch.Tensor


def compute_importance(g: Gaussians) -> ImportanceTriple:
    """Visual importance ~ sqrt(det Sigma_3D) * opacity; physical ~ volume.

    The combined score is the average of the two normalized families.
    """
    with torch.no_grad():
        vis = torch.exp(g.log_scale.sum(dim=-1)) * g.opacity
        vis_sum = vis.sum()
        if float(vis_sum) <= 0:
            warnings.warn("compute_importance: all-zero visual importance, using uniform")
            p_vis = torch.full_like(vis, 1.0 / vis.shape[0])
        else:
            p_vis = vis / vis_sum
        p_phys = g.V / g.V.sum()
        p = 0.5 * p_vis + 0.5 * p_phys
        return ImportanceTriple(p_vis=p_vis, p_phys=p_phys, p=p)


@dataclass
class RelocationEvent:
    """Indices of one relocation: removed[i] was replaced by a copy split
    off split_source[i]."""

    removed: torch.Tensor
    split_source: torch.Tensor


def relocate(g: Gaussians, imp: ImportanceTriple,
             fraction: float = RELOCATE_FRACTION) -> tuple[Gaussians, RelocationEvent]:
    """Replace the least important Gaussians with splits of the most important.

    Removal set: union of the bottom-``fraction`` (at least one) by p_vis and
    by p_phys, deduplicated.  An equal number of splitters is taken from the
    top of the combined score p (excluding removed; ties by index).  Each
    splitter is halved by the appearance-preserving rule

        o' = 1 - sqrt(1 - o),   scale' = scale * (o / (2 o'))^{1/3},

    (two copies at opacity o' composite to o; the scale shrink keeps the
    opacity-weighted footprint approximately constant) and the copy takes the
    removed Gaussian's position while inheriting the splitter's appearance
    and physical state.  Particle count is unchanged.
    """
    n = g.n
    if n < 2:
        raise ValueError("relocate requires at least 2 particles")
    k = max(1, math.ceil(n * fraction))

    order_vis = torch.argsort(imp.p_vis, stable=True)
    order_phys = torch.argsort(imp.p_phys, stable=True)
    removed = torch.unique(torch.cat([order_vis[:k], order_phys[:k]]))
    m = removed.shape[0]

    order_p = torch.argsort(-imp.p, stable=True)
    removed_mask = torch.zeros(n, dtype=torch.bool)
    removed_mask[removed] = True
    splitters = order_p[~removed_mask[order_p]][:m]

    out = g.clone()
    o = out.opacity_raw.sigmoid()[splitters]
    o_new = 1.0 - torch.sqrt(1.0 - o)
    raw_new = torch.log(o_new) - torch.log1p(-o_new)      # logit
    scale_shift = torch.log(o / (2.0 * o_new)) / 3.0

    out.opacity_raw[splitters] = raw_new
    out.log_scale[splitters] = out.log_scale[splitters] + scale_shift.unsqueeze(-1)

    removed_pos = g.x_cam[removed]
    for name in _GAUSSIAN_FIELDS:
        field = getattr(out, name)
        field[removed] = field[splitters]
    out.x_cam[removed] = removed_pos
    return out, RelocationEvent(removed=removed, split_source=splitters)
