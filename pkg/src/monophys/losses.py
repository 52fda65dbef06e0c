"""Supervision signals for the two fitting stages.

Stage 1 combines, with unit weights,
    alpha:        L1 between rendered opacity and the target mask,
    silhouette:   unbalanced debiased Sinkhorn divergence between the
                  rendered foreground (position-map points weighted by
                  rendered alpha) and the target foreground,
    flow:         Laplace negative log-likelihood of the two rendered flow
                  fields (reference->t and (t-1)->t) under per-pixel scales,
    distribution: hinge penalty keeping frame-0 nearest-neighbor distances
                  inside [0.3, 0.8]*dx.

Stage 2 adds the color loss (L1 + SSIM).

The Sinkhorn solver runs in the log domain with epsilon scaling and damped
symmetric updates.  One implementation serves the cross problem and both
self problems with the same iteration schedule, which makes the debiased
divergence vanish identically (not merely approximately) when both point
sets coincide.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as Fnn


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
COLOR_SSIM_WEIGHT = 0.2      # lambda_s
SIL_EPS_PX = 2.0             # entropic blur in pixels (eps = SIL_EPS_PX^2)
SIL_REACH_PX = 32.0          # marginal KL strength rho = SIL_REACH_PX^2
SIL_FG_THRESHOLD = 0.05
SIL_MAX_POINTS = 2048
SINKHORN_TOL = 1e-6
SINKHORN_MAX_ITERS = 200
SINKHORN_SCALING = 0.25      # epsilon annealing ratio per step
DISTR_K = 3
DISTR_LO = 0.3               # hinge bounds in units of dx
DISTR_HI = 0.8


@dataclass
class WeightedPointSet2D:
    """Point cloud in pixel coordinates with nonnegative weights."""

    points: torch.Tensor    # (n,2)
    weights: torch.Tensor   # (n,)

    def __post_init__(self):
        if self.points.shape[0] != self.weights.shape[0]:
            raise ValueError("points and weights must have equal length")
        if self.points.numel() and float(self.weights.detach().min()) < 0:
            raise ValueError("weights must be nonnegative")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def mass(self) -> torch.Tensor:
        return self.weights.sum()


@dataclass
class SinkhornResult:
    value: torch.Tensor
    converged: bool
    iterations: int


# --------------------------------------------------------------------------
# image losses
# --------------------------------------------------------------------------

def _gaussian_window(dtype) -> torch.Tensor:
    half = (SSIM_WINDOW - 1) / 2.0
    xs = torch.arange(SSIM_WINDOW, dtype=dtype) - half
    g = torch.exp(-0.5 * (xs / SSIM_SIGMA) ** 2)
    g = g / g.sum()
    return g.outer(g)


def ssim(img_a: torch.Tensor, img_b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over valid windows (11x11 Gaussian, K1=0.01, K2=0.03).

    Accepts (H,W) or (H,W,C) images with values in [0,1]; channels are
    averaged.
    """
    if img_a.shape != img_b.shape:
        raise ValueError(f"shape mismatch: {tuple(img_a.shape)} vs {tuple(img_b.shape)}")
    a = img_a.unsqueeze(-1) if img_a.dim() == 2 else img_a
    b = img_b.unsqueeze(-1) if img_b.dim() == 2 else img_b
    a = a.permute(2, 0, 1).unsqueeze(0)   # (1,C,H,W)
    b = b.permute(2, 0, 1).unsqueeze(0)
    C = a.shape[1]
    win = _gaussian_window(a.dtype).expand(C, 1, SSIM_WINDOW, SSIM_WINDOW)

    def f(x):
        return Fnn.conv2d(x, win, groups=C)

    mu_a = f(a)
    mu_b = f(b)
    var_a = f(a * a) - mu_a ** 2
    var_b = f(b * b) - mu_b ** 2
    cov = f(a * b) - mu_a * mu_b
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
        ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return s.mean()


def color_loss(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """(1 - lambda_s) * L1 + lambda_s * (1 - SSIM), lambda_s = 0.2."""
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    l1 = (rendered - target).abs().mean()
    return (1.0 - COLOR_SSIM_WEIGHT) * l1 + COLOR_SSIM_WEIGHT * (1.0 - ssim(rendered, target))


def alpha_loss(rendered_alpha: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between opacity map and mask."""
    if rendered_alpha.shape != target_mask.shape:
        raise ValueError(
            f"shape mismatch: {tuple(rendered_alpha.shape)} vs {tuple(target_mask.shape)}")
    return (rendered_alpha - target_mask).abs().mean()


def flow_nll(flow_hat: torch.Tensor, flow_target: torch.Tensor,
             sigma: torch.Tensor) -> torch.Tensor:
    """Per-pixel Laplace NLL ||f - f_hat||_1 / sigma + 2 ln sigma.

    Additive constants are dropped so a perfect fit at sigma = 1 scores 0.
    """
    err = (flow_target - flow_hat).abs().sum(dim=-1)
    return err / sigma + 2.0 * torch.log(sigma)


def flow_loss(flow0_hat: torch.Tensor, flowp_hat: torch.Tensor,
              flow0: torch.Tensor, flowp: torch.Tensor,
              sigma0: torch.Tensor, sigmap: torch.Tensor,
              foreground: torch.Tensor) -> torch.Tensor:
    """Mean over the target foreground of both flow NLL terms.

    flow0*: reference frame -> t;  flowp*: (t-1) -> t.  ``foreground`` is a
    boolean (H,W) mask; an empty mask yields 0 with a warning.
    """
    if not bool(foreground.any()):
        warnings.warn("flow_loss: empty foreground, returning 0")
        return torch.zeros((), dtype=flow0_hat.dtype)
    n0 = flow_nll(flow0_hat, flow0, sigma0)[foreground].mean()
    np_ = flow_nll(flowp_hat, flowp, sigmap)[foreground].mean()
    return n0 + np_


# --------------------------------------------------------------------------
# Sinkhorn divergence
# --------------------------------------------------------------------------

def _sq_dist(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return ((x.unsqueeze(1) - y.unsqueeze(0)) ** 2).sum(-1)


def _softmin(eps: float, C: torch.Tensor, h_log: torch.Tensor) -> torch.Tensor:
    """softmin_eps(C, h)_i = -eps * logsumexp_j(h_j - C_ij / eps)."""
    return -eps * torch.logsumexp(h_log.unsqueeze(0) - C / eps, dim=1)


def _eps_schedule(diameter2: float, eps: float) -> list[float]:
    """Annealed epsilons from the squared diameter down to the target."""
    sched = []
    e = max(diameter2, eps)
    while e > eps:
        sched.append(e)
        e *= SINKHORN_SCALING
    sched.append(eps)
    return sched


def _uot_value(x, a_log, y, b_log, f, g, eps: float, rho: float) -> torch.Tensor:
    """Entropic unbalanced OT value, evaluated through the dual objective

        rho<a, 1 - e^{-f/rho}> + rho<b, 1 - e^{-g/rho}>
            - eps<a x b, e^{(f + g - C)/eps} - 1>,

    which equals   min_pi <pi,C> + eps KL(pi|a x b) + rho KL(pi1|a)
    + rho KL(pi^T1|b)   at the optimal potentials.  The dual is stationary
    in (f, g) there, so first-order potential errors perturb the value only
    to second order — much tighter than evaluating the primal plan when the
    iteration stops at a tolerance.  Potentials enter detached (envelope
    theorem): gradients flow through points and weights only.
    """
    f = f.detach()
    g = g.detach()
    a = torch.exp(a_log)
    b = torch.exp(b_log)
    C = _sq_dist(x, y)
    t_a = rho * (a * (1.0 - torch.exp(-f / rho))).sum()
    t_b = rho * (b * (1.0 - torch.exp(-g / rho))).sum()
    M = (f.unsqueeze(1) + g.unsqueeze(0) - C) / eps
    t_ab = eps * ((a.unsqueeze(1) * b.unsqueeze(0)) * (torch.exp(M) - 1.0)).sum()
    return t_a + t_b - t_ab


def sinkhorn_divergence(A: WeightedPointSet2D, B: WeightedPointSet2D,
                        eps: float = SIL_EPS_PX ** 2,
                        reach: float = SIL_REACH_PX,
                        max_iters: int = SINKHORN_MAX_ITERS) -> SinkhornResult:
    """Unbalanced debiased Sinkhorn divergence between weighted point sets.

    SD(A,B) = UOT(A,B) - 1/2 UOT(A,A) - 1/2 UOT(B,B) + eps/2 (m_A - m_B)^2
    with squared-Euclidean cost, KL marginal penalties of strength reach^2,
    damped symmetric log-domain iterations, and epsilon scaling from the
    squared data diameter down to ``eps``.  The three problems share one
    schedule, so SD(A,A) cancels exactly.

    Differentiable w.r.t. A's points and weights (Danskin: converged
    potentials are detached in the primal value).
    """
    if A.n == 0 or B.n == 0:
        raise ValueError("sinkhorn_divergence requires non-empty point sets")
    rho = float(reach) ** 2
    x = A.points
    y = B.points
    a_log = torch.log(A.weights)
    b_log = torch.log(B.weights)

    with torch.no_grad():
        allpts = torch.cat([x, y], dim=0)
        diam2 = float(((allpts.max(0).values - allpts.min(0).values) ** 2).sum())
        C_ab = _sq_dist(x, y)
        # materialized so its row reductions run in the same memory order as
        # C_ab's — with A = B this makes the cross and self problems agree
        # bit for bit and the divergence cancel exactly
        C_ba = C_ab.T.contiguous()
        C_aa = _sq_dist(x, x)
        C_bb = _sq_dist(y, y)
        f_ab = torch.zeros_like(a_log)
        g_ab = torch.zeros_like(b_log)
        f_aa = torch.zeros_like(a_log)
        f_bb = torch.zeros_like(b_log)

        schedule = _eps_schedule(diam2, eps)
        iterations = 0
        converged = False
        while iterations < max_iters:
            annealing = iterations < len(schedule)
            e = schedule[iterations] if annealing else eps
            damp = 1.0 / (1.0 + e / rho)
            nf = 0.5 * (f_ab + damp * _softmin(e, C_ab, b_log + g_ab / e))
            ng = 0.5 * (g_ab + damp * _softmin(e, C_ba, a_log + f_ab / e))
            na = 0.5 * (f_aa + damp * _softmin(e, C_aa, a_log + f_aa / e))
            nb = 0.5 * (f_bb + damp * _softmin(e, C_bb, b_log + f_bb / e))
            delta = max(float((nf - f_ab).abs().max()), float((ng - g_ab).abs().max()),
                        float((na - f_aa).abs().max()), float((nb - f_bb).abs().max()))
            f_ab, g_ab, f_aa, f_bb = nf, ng, na, nb
            iterations += 1
            if not annealing and delta < SINKHORN_TOL:
                converged = True
                break

    ot_ab = _uot_value(x, a_log, y, b_log, f_ab, g_ab, eps, rho)
    ot_aa = _uot_value(x, a_log, x, a_log, f_aa, f_aa, eps, rho)
    ot_bb = _uot_value(y, b_log, y, b_log, f_bb, f_bb, eps, rho)
    m_a = A.weights.sum()
    m_b = B.weights.sum()
    value = ot_ab - 0.5 * ot_aa - 0.5 * ot_bb + 0.5 * eps * (m_a - m_b) ** 2
    if bool(torch.isnan(value.detach())):
        raise FloatingPointError("sinkhorn_divergence produced NaN")
    return SinkhornResult(value=value, converged=converged, iterations=iterations)


def _pixel_hash_u01(flat_idx: torch.Tensor, seed: int) -> torch.Tensor:
    """Deterministic uniform draw in [0,1) per flattened pixel index
    (splitmix64 finalizer, emulated with wrapping int64 arithmetic).

    Keying the draw on the pixel lattice rather than on the point list means
    the two sides of the divergence select the *same pixels* wherever their
    foregrounds agree, so subsampling preserves the loss's exact
    self-cancellation and, near convergence, estimates the divergence with
    common random numbers instead of independent-subset noise."""
    def lshr(x: torch.Tensor, k: int) -> torch.Tensor:
        return (x >> k) & ((1 << (64 - k)) - 1)

    mix = (2654435769 * (seed + 1)) & 0xFFFFFFFFFFFFFFFF
    if mix >= 1 << 63:          # wrap to signed 64-bit
        mix -= 1 << 64
    x = flat_idx.to(torch.int64) + torch.tensor(mix, dtype=torch.int64)
    x = (x ^ lshr(x, 30)) * (0xBF58476D1CE4E5B9 - (1 << 64))
    x = (x ^ lshr(x, 27)) * (0x94D049BB133111EB - (1 << 64))
    x = x ^ lshr(x, 31)
    return (x & 0x7FFFFFFFFFFFFFFF).to(torch.float64) / float(2 ** 63)


def _subsample(points: torch.Tensor, weights: torch.Tensor,
               flat_idx: torch.Tensor, p: float,
               seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Keep each point independently with probability ``p`` (hash of its
    pixel index), rescaling weights to preserve total mass (the divergence
    is mass-sensitive)."""
    if p >= 1.0:
        return points, weights
    keep = _pixel_hash_u01(flat_idx, seed) < p
    if not bool(keep.any()):
        keep = torch.zeros_like(keep)
        keep[_pixel_hash_u01(flat_idx, seed).argmin()] = True
    w_sel = weights[keep]
    return points[keep], w_sel * (weights.sum() / w_sel.sum())


def silhouette_loss(posmap: torch.Tensor, rendered_alpha: torch.Tensor,
                    target_alpha: torch.Tensor, *,
                    eps: float = SIL_EPS_PX ** 2, reach: float = SIL_REACH_PX,
                    threshold: float = SIL_FG_THRESHOLD,
                    max_points: int = SIL_MAX_POINTS,
                    max_iters: int = SINKHORN_MAX_ITERS,
                    seed: int = 0) -> torch.Tensor:
    """Sinkhorn divergence between rendered and target foregrounds.

    Rendered foreground: position-map points at pixels with rendered alpha
    above the threshold, weighted by that alpha — gradients reach the
    Gaussian means through the position map.  Target foreground: pixel
    coordinates weighted by the mask alpha.  Both sets are subsampled to
    ``max_points`` (seeded).  Either side empty yields 0 with a warning.
    """
    fg_r = rendered_alpha > threshold
    fg_t = target_alpha > threshold
    if not bool(fg_r.any()) or not bool(fg_t.any()):
        warnings.warn("silhouette_loss: empty foreground, returning 0")
        return torch.zeros((), dtype=posmap.dtype)
    pts_r = posmap[fg_r]
    w_r = rendered_alpha[fg_r]
    H, W = rendered_alpha.shape
    ys, xs = torch.meshgrid(torch.arange(H, dtype=posmap.dtype),
                            torch.arange(W, dtype=posmap.dtype), indexing="ij")
    pix = torch.stack([xs, ys], dim=-1)
    pts_t = pix[fg_t]
    w_t = target_alpha[fg_t].to(posmap.dtype)

    # Subsample both sides with the same per-pixel draws so that equal
    # silhouettes keep subsampling to equal point sets.
    n_max = max(pts_r.shape[0], pts_t.shape[0])
    if n_max > max_points:
        p = max_points / n_max
        flat = torch.arange(H * W).reshape(H, W)
        pts_r, w_r = _subsample(pts_r, w_r, flat[fg_r], p, seed)
        pts_t, w_t = _subsample(pts_t, w_t, flat[fg_t], p, seed)
    res = sinkhorn_divergence(WeightedPointSet2D(pts_r, w_r),
                              WeightedPointSet2D(pts_t, w_t),
                              eps=eps, reach=reach, max_iters=max_iters)
    return res.value


# --------------------------------------------------------------------------
# distribution loss
# --------------------------------------------------------------------------

def knn_indices(x: torch.Tensor, k: int, chunk: int = 512) -> torch.Tensor:
    """Indices (n,k) of the k nearest neighbors of each point (self excluded).

    Computed without gradient in chunks; distances for the loss are
    recomputed differentiably by the caller.
    """
    n = x.shape[0]
    out = []
    with torch.no_grad():
        for lo in range(0, n, chunk):
            d = torch.cdist(x[lo:lo + chunk], x)
            d[torch.arange(lo, min(lo + chunk, n)) - lo,
              torch.arange(lo, min(lo + chunk, n))] = float("inf")
            out.append(d.topk(k, largest=False).indices)
    return torch.cat(out, dim=0)


def distribution_loss(positions: torch.Tensor, dx: float,
                      k: int = DISTR_K) -> torch.Tensor:
    """Hinge penalty on K-NN distances outside [0.3, 0.8]*dx (summed).

    Requires at least k+1 particles; k is capped at n-1.
    """
    n = positions.shape[0]
    if n < 2:
        raise ValueError("distribution_loss requires at least 2 particles")
    k_eff = min(k, n - 1)
    idx = knn_indices(positions, k_eff)
    nb = positions[idx]                                   # (n,k,3)
    d = (positions.unsqueeze(1) - nb).norm(dim=-1)        # (n,k)
    lo = DISTR_LO * dx
    hi = DISTR_HI * dx
    return (torch.clamp(d - hi, min=0) + torch.clamp(lo - d, min=0)).sum()


# --------------------------------------------------------------------------
# stage-1 total
# --------------------------------------------------------------------------

@dataclass
class FrameLossInputs:
    """Per-frame quantities needed by the stage-1 objective."""

    rendered_alpha: torch.Tensor            # (H,W)
    posmap: torch.Tensor                    # (H,W,2)
    target_mask: torch.Tensor               # (H,W) in [0,1]
    flow0_hat: Optional[torch.Tensor] = None    # (H,W,2), frames t >= 1
    flowp_hat: Optional[torch.Tensor] = None
    flow0: Optional[torch.Tensor] = None
    flowp: Optional[torch.Tensor] = None
    sigma0: Optional[torch.Tensor] = None
    sigmap: Optional[torch.Tensor] = None


@dataclass
class Stage1LossBreakdown:
    total: torch.Tensor
    alpha: float
    silhouette: float
    flow: float
    distribution: float


def total_stage1_loss(frames: Sequence[FrameLossInputs],
                      positions0: torch.Tensor, dx: float, *,
                      use_sil: bool = True, use_flow: bool = True,
                      use_distr: bool = True,
                      sil_max_points: int = SIL_MAX_POINTS,
                      sil_max_iters: int = SINKHORN_MAX_ITERS,
                      seed: int = 0) -> Stage1LossBreakdown:
    """Unit-weight sum over the frame window.

    alpha + silhouette at every frame, flow at frames >= 1, distribution at
    frame 0 only.  Ablation flags zero individual terms.
    """
    zero = torch.zeros((), dtype=positions0.dtype)
    l_alpha = zero.clone()
    l_sil = zero.clone()
    l_flow = zero.clone()
    for t, fr in enumerate(frames):
        l_alpha = l_alpha + alpha_loss(fr.rendered_alpha, fr.target_mask)
        if use_sil:
            l_sil = l_sil + silhouette_loss(
                fr.posmap, fr.rendered_alpha, fr.target_mask,
                max_points=sil_max_points, max_iters=sil_max_iters,
                seed=seed * 100003 + t)
        if use_flow and t >= 1:
            fg = fr.target_mask > SIL_FG_THRESHOLD
            l_flow = l_flow + flow_loss(fr.flow0_hat, fr.flowp_hat,
                                        fr.flow0, fr.flowp,
                                        fr.sigma0, fr.sigmap, fg)
    l_distr = distribution_loss(positions0, dx) if use_distr else zero.clone()
    total = l_alpha + l_sil + l_flow + l_distr
    return Stage1LossBreakdown(total=total, alpha=float(l_alpha.detach()),
                               silhouette=float(l_sil.detach()),
                               flow=float(l_flow.detach()),
                               distribution=float(l_distr.detach()))
