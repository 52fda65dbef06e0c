"""Evaluation metrics: geometry (CD, EMD), image (PSNR, SSIM), parameter
MAE, and the future-prediction protocol.

Unit conventions (flagged in every CSV header this module writes):

* Chamfer distance is the symmetric, halved, mean *squared* distance,
  reported in units of 1e-4 m² (i.e. cm²) — ``chamfer_1e-4m2``.
* EMD is the entropic-regularized optimal-transport cost with squared-
  distance ground cost, reported in raw m² — ``emd_m2``.
* PSNR in dB, capped at 99 (identical images report the cap).

These conventions are internal: absolute values are comparable across runs
of this package, not across publications that leave their normalization
undefined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .diff_engine import seeded_generator
from .losses import ssim as _ssim_impl
from .scene_model import MaterialModel

CHAMFER_UNIT_SCALE = 1e4      # m^2 -> 1e-4 m^2 (cm^2)
EMD_MAX_POINTS = 512
EMD_EPS_DIAG_FRACTION = 1e-3  # final epsilon: fraction of squared bbox diagonal
PSNR_CAP_DB = 99.0


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------

def chamfer(pred: torch.Tensor, gt: torch.Tensor,
            chunk: int = 2048) -> float:
    """Bidirectional Chamfer distance in units of 1e-4 m² (cm²).

    0.5 * mean_p min_g ||p-g||^2  +  0.5 * mean_g min_p ||g-p||^2,
    computed exactly (chunked brute force).  Symmetric by construction.
    """
    if pred.numel() == 0 or gt.numel() == 0:
        raise ValueError("chamfer requires non-empty point sets")
    a = pred.reshape(-1, pred.shape[-1]).to(torch.float64)
    b = gt.reshape(-1, gt.shape[-1]).to(torch.float64)

    def _mean_min_sq(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        mins = []
        for lo in range(0, x.shape[0], chunk):
            # elementwise distance mode: exact zeros for coincident points
            # (the matmul path leaves ~1e-13 cancellation residue)
            d = torch.cdist(x[lo:lo + chunk], y,
                            compute_mode="donot_use_mm_for_euclid_dist") ** 2
            mins.append(d.min(dim=1).values)
        return torch.cat(mins).mean()

    raw = 0.5 * _mean_min_sq(a, b) + 0.5 * _mean_min_sq(b, a)
    return float(raw) * CHAMFER_UNIT_SCALE


def _subsample_equal(a: torch.Tensor, b: torch.Tensor, limit: int,
                     seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Seeded subsample of both clouds to a common size <= limit."""
    n = min(a.shape[0], b.shape[0], limit)
    rng = seeded_generator(seed, "emd-subsample")
    if a.shape[0] > n:
        a = a[torch.from_numpy(rng.permutation(a.shape[0])[:n].copy())]
    if b.shape[0] > n:
        b = b[torch.from_numpy(rng.permutation(b.shape[0])[:n].copy())]
    return a, b


def _entropic_ot_cost(a: torch.Tensor, b: torch.Tensor,
                      eps_final: float, iters_per_level: int) -> float:
    """Primal cost <P, C> of balanced entropic OT between uniform clouds,
    with geometric ε-annealing (×0.25 per level) down to ``eps_final``."""
    C = torch.cdist(a, b) ** 2
    n, m = C.shape
    log_mu = torch.full((n,), -math.log(n), dtype=torch.float64)
    log_nu = torch.full((m,), -math.log(m), dtype=torch.float64)
    f = torch.zeros(n, dtype=torch.float64)
    g = torch.zeros(m, dtype=torch.float64)

    eps = max(eps_final, float(C.max()))
    levels = [eps]
    while eps > eps_final * 1.0001:
        eps = max(eps * 0.25, eps_final)
        levels.append(eps)
    for eps in levels:
        for _ in range(iters_per_level):
            f_prev = f
            # log-domain balanced Sinkhorn updates (warm-started per level)
            f = -eps * torch.logsumexp(
                (g.unsqueeze(0) - C) / eps + log_nu.unsqueeze(0), dim=1)
            g = -eps * torch.logsumexp(
                (f.unsqueeze(1) - C) / eps + log_mu.unsqueeze(1), dim=0)
            if float((f - f_prev).abs().max()) < 1e-9 * eps:
                break
    log_P = (f.unsqueeze(1) + g.unsqueeze(0) - C) / eps \
        + log_mu.unsqueeze(1) + log_nu.unsqueeze(0)
    return float((log_P.exp() * C).sum())


def emd(pred: torch.Tensor, gt: torch.Tensor, *,
        max_points: int = EMD_MAX_POINTS, seed: int = 0,
        iters_per_level: int = 200) -> float:
    """Entropic-regularized EMD (squared-distance cost, uniform weights),
    reported in raw m².

    Both clouds are subsampled (seeded) to a common size ``<= max_points``.
    The entropic regularizer is annealed geometrically down to 1e-3 of the
    squared bounding-box diagonal of the union, and the reported value is
    the debiased transport cost

        <P_ab, C_ab> - 1/2 <P_aa, C_aa> - 1/2 <P_bb, C_bb>,

    clamped at zero.  The self-term subtraction cancels the entropic blur
    (exactly so under translation, since the self plans are translation
    invariant), leaving the metric within a fraction of a percent of the
    exact optimal-transport cost at the annealed ε.
    """
    if pred.numel() == 0 or gt.numel() == 0:
        raise ValueError("emd requires non-empty point sets")
    a = pred.reshape(-1, pred.shape[-1]).to(torch.float64)
    b = gt.reshape(-1, gt.shape[-1]).to(torch.float64)
    a, b = _subsample_equal(a, b, max_points, seed)

    with torch.no_grad():
        both = torch.cat([a, b], dim=0)
        diag_sq = float(((both.max(dim=0).values
                          - both.min(dim=0).values) ** 2).sum())
        if diag_sq <= 0.0:
            return 0.0
        eps_final = EMD_EPS_DIAG_FRACTION * diag_sq
        cost_ab = _entropic_ot_cost(a, b, eps_final, iters_per_level)
        cost_aa = _entropic_ot_cost(a, a, eps_final, iters_per_level)
        cost_bb = _entropic_ot_cost(b, b, eps_final, iters_per_level)
    return max(0.0, cost_ab - 0.5 * cost_aa - 0.5 * cost_bb)


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def psnr(img_a: torch.Tensor, img_b: torch.Tensor) -> float:
    """PSNR in dB for images in [0,1]: 10 log10(1/MSE), capped at 99."""
    if img_a.shape != img_b.shape:
        raise ValueError(f"shape mismatch: {tuple(img_a.shape)} vs "
                         f"{tuple(img_b.shape)}")
    mse = float(((img_a.to(torch.float64) - img_b.to(torch.float64)) ** 2)
                .mean())
    if mse <= 10.0 ** (-PSNR_CAP_DB / 10.0):
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * math.log10(mse))


def ssim(img_a: torch.Tensor, img_b: torch.Tensor) -> float:
    """Structural similarity (same windowed implementation the losses use)."""
    return float(_ssim_impl(img_a.to(torch.float64), img_b.to(torch.float64)))


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass
class ParamMAE:
    """Per-parameter absolute errors between a fit and the ground truth."""

    v0: float              # mean |v0_hat - v0| over components [m/s]
    log10_E: float
    nu: float
    log10_sigma_y: Optional[float]   # None unless both sides are plasticine

    def to_dict(self) -> dict:
        return {"mae_v0_mps": self.v0, "mae_log10_E": self.log10_E,
                "mae_nu": self.nu,
                "mae_log10_sigma_y": (float("nan")
                                      if self.log10_sigma_y is None
                                      else self.log10_sigma_y)}


def param_mae(fit: dict, gt: dict) -> ParamMAE:
    """Absolute parameter errors.

    ``fit``/``gt`` are decoded-parameter dicts with keys E, nu, v0, and
    (for plasticine) sigma_y — the shape written by the fitting run's
    final_params.json and the bundle's gt_params.json.
    """
    v0_f = torch.as_tensor(fit["v0"], dtype=torch.float64)
    v0_g = torch.as_tensor(gt["v0"], dtype=torch.float64)
    mae_sig = None
    if fit.get("sigma_y") is not None and gt.get("sigma_y") is not None:
        mae_sig = abs(math.log10(fit["sigma_y"]) - math.log10(gt["sigma_y"]))
    return ParamMAE(
        v0=float((v0_f - v0_g).abs().mean()),
        log10_E=abs(math.log10(fit["E"]) - math.log10(gt["E"])),
        nu=abs(fit["nu"] - gt["nu"]),
        log10_sigma_y=mae_sig,
    )


def scale_error(s_fit: float, s_true: float) -> float:
    """Relative scale error |ln(s_fit / s_true)| (symmetric in over/under
    estimation; ~fractional error for small values)."""
    if s_fit <= 0 or s_true <= 0:
        raise ValueError("scales must be positive")
    return abs(math.log(s_fit / s_true))


# --------------------------------------------------------------------------
# future prediction
# --------------------------------------------------------------------------

def future_prediction(pred_positions: Sequence[torch.Tensor],
                      pred_frames: Sequence[torch.Tensor],
                      bundle, t_obs: int, *,
                      seed: int = 0) -> dict:
    """Metrics over the predicted frames t >= t_obs.

    ``pred_positions[t]`` are the fitted simulation's world positions and
    ``pred_frames[t]`` its renders, both indexed by absolute frame over the
    full sequence.  Rows cover every future frame; the summary keys are the
    means.
    """
    n = bundle.n_frames
    if not 0 < t_obs < n:
        raise ValueError(f"t_obs must split the sequence, got {t_obs} of {n}")
    rows = []
    for t in range(t_obs, n):
        gt_pos, _ = bundle.gt_pc(t)
        gt_img = torch.as_tensor(bundle.frame(t), dtype=torch.float64)
        row = {
            "frame": t,
            "chamfer_1e-4m2": chamfer(pred_positions[t], gt_pos),
            "emd_m2": emd(pred_positions[t], gt_pos, seed=seed * 8191 + t),
            "psnr_db": psnr(pred_frames[t], gt_img),
            "ssim": ssim(pred_frames[t], gt_img),
        }
        rows.append(row)
    out = {"rows": rows, "t_obs": t_obs, "n_future": n - t_obs}
    for key in ("chamfer_1e-4m2", "emd_m2", "psnr_db", "ssim"):
        out[f"mean_{key}"] = sum(r[key] for r in rows) / len(rows)
    return out


# --------------------------------------------------------------------------
# batch table plumbing
# --------------------------------------------------------------------------

METRICS_COLUMNS = ("scene", "seed", "config",
                   "chamfer_1e-4m2", "emd_m2", "psnr_db", "ssim",
                   "mae_v0_mps", "mae_log10_E", "mae_nu",
                   "mae_log10_sigma_y", "scale_abs_log_error")


def write_metrics_csv(path, rows: list[dict]) -> None:
    """One row per (scene, seed, method-config); unit-flagged headers.
    Missing values render as nan."""
    with open(path, "w") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for row in rows:
            cells = []
            for col in METRICS_COLUMNS:
                val = row.get(col, float("nan"))
                if isinstance(val, float):
                    cells.append(format(val, ".10g"))
                else:
                    cells.append(str(val))
            fh.write(",".join(cells) + "\n")


def summary_table(rows: list[dict],
                  group_by: str = "config") -> str:
    """Mean ± std text table of the numeric metric columns, grouped."""
    numeric = [c for c in METRICS_COLUMNS if c not in ("scene", "seed",
                                                       "config")]
    groups: dict[str, list[dict]] = {}
    for row in rows:
        groups.setdefault(str(row.get(group_by, "")), []).append(row)
    lines = []
    header = [group_by] + [f"{c} (mean±std)" for c in numeric]
    lines.append(" | ".join(header))
    lines.append("-+-".join("-" * len(h) for h in header))
    for name in sorted(groups):
        cells = [name]
        for col in numeric:
            vals = [float(r[col]) for r in groups[name]
                    if col in r and not math.isnan(float(r[col]))]
            if not vals:
                cells.append("—")
                continue
            mean = sum(vals) / len(vals)
            var = (sum((v - mean) ** 2 for v in vals) / len(vals)
                   if len(vals) > 1 else 0.0)
            cells.append(f"{mean:.4g}±{math.sqrt(var):.3g}")
        lines.append(" | ".join(cells))
    return "\n".join(lines) + "\n"
