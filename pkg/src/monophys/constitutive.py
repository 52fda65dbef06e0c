"""Constitutive models: Lamé conversion, hyperelastic Kirchhoff stresses, and
the von Mises return map in principal log-strain space.

Gradient treatment
------------------
The polar rotation (for the corotated stress) and the plastic return map both
live on the singular value decomposition F = U Σ Vᵀ.  Generic SVD autograd is
unusable here: the standard backward contains 1/(σi² − σj²) factors that blow
up whenever two singular values approach each other, which happens constantly
for nearly-rigid deformation (σ ≈ (1,1,1)).

Both operations are *isotropic spectral maps* Y = U g(Σ) Vᵀ, and for that
class the vector-Jacobian product has a closed form in divided differences of
g that stays finite at coincident singular values:

    M̄ = Uᵀ Ȳ V
    F̄ = U [ c1 ∘ M̄ + (c2 ∘ M̄)ᵀ  (off-diagonal)
            + diag(Jᵀ · diag(M̄)) (diagonal)      ] Vᵀ

with, for i ≠ j,

    c1_ij = DD(σ·g)_ij / (σi + σj),
    c2_ij = (σi·DD(g)_ij − g_i) / (σi + σj),

where DD(f)_ij = (f_j − f_i)/(σj − σi) is a divided difference whose
coincident limit is ½(J_ii + J_jj − J_ij − J_ji) for the (symmetric) Jacobian
J of the spectral function, and J_ij = ∂g_i/∂σ_j feeds the diagonal term.
For the polar rotation g ≡ 1, so c1 = −c2 = 1/(σi+σj): unconditionally
stable.  Every formula below is verified against central finite differences
in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

_DD_GUARD = 1e-7  # relative width of the coincident-singular-value guard


@dataclass
class LameParams:
    """Lamé parameters (SI Pa).  ``mu`` is the shear modulus, ``lam`` the
    first Lamé parameter (may be 0 at nu=0)."""

    mu: torch.Tensor
    lam: torch.Tensor


def lame(E, nu) -> LameParams:
    """Convert Young's modulus and Poisson's ratio to Lamé parameters.

    mu = E / (2(1+nu)),  lam = E·nu / ((1+nu)(1−2nu)).
    """
    E = torch.as_tensor(E, dtype=torch.float64) if not torch.is_tensor(E) else E
    nu = torch.as_tensor(nu, dtype=E.dtype) if not torch.is_tensor(nu) else nu
    if (E <= 0).any():
        raise ValueError("Young's modulus must be positive")
    if (nu >= 0.5).any() or (nu <= 0).any():
        raise ValueError("Poisson's ratio must lie in (0, 0.5); lambda is "
                         "singular at 0.5")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return LameParams(mu=mu, lam=lam)


class InversionError(RuntimeError):
    """An element inverted (det F ≤ 0); carries the offending particle index."""

    def __init__(self, index: int, det: float, context: str = ""):
        self.index = index
        self.det = det
        super().__init__(
            f"deformation gradient inverted at particle {index}: det={det:.6g}"
            + (f" ({context})" if context else ""))


def _check_positive_det(F: torch.Tensor, context: str) -> torch.Tensor:
    J = torch.linalg.det(F)
    bad = J <= 0
    if bad.any():
        idx = int(bad.reshape(-1).nonzero()[0])
        raise InversionError(idx, float(J.reshape(-1)[idx]), context)
    return J


def neo_hookean_tau(F: torch.Tensor, lame_params: LameParams) -> torch.Tensor:
    """Compressible Neo-Hookean Kirchhoff stress τ = μ F Fᵀ + (λ ln J − μ) I.

    Symmetric for all valid F; zero at the identity and at pure rotations.
    """
    batched = F.dim() == 3
    Fb = F if batched else F.unsqueeze(0)
    J = _check_positive_det(Fb, "neo_hookean_tau")
    mu, lam = lame_params.mu, lame_params.lam
    eye = torch.eye(3, dtype=Fb.dtype, device=Fb.device).expand_as(Fb)
    tau = mu * (Fb @ Fb.transpose(-1, -2)) \
        + ((lam * torch.log(J) - mu)).reshape(-1, 1, 1) * eye
    return tau if batched else tau.squeeze(0)


def _svd_rotations(F: torch.Tensor):
    """Batched SVD with U, V forced into SO(3) (requires det F > 0).

    torch returns orthogonal U, V that may have determinant −1; when det F > 0
    the two determinants agree, so flipping the last column of both factors
    leaves Σ untouched and yields proper rotations.
    """
    U, S, Vh = torch.linalg.svd(F)
    V = Vh.transpose(-1, -2)
    flip = torch.linalg.det(U) < 0
    if flip.any():
        sgn = torch.where(flip, -1.0, 1.0).to(F.dtype)
        U = torch.cat([U[..., :2], (U[..., 2] * sgn.unsqueeze(-1)).unsqueeze(-1)], dim=-1)
        V = torch.cat([V[..., :2], (V[..., 2] * sgn.unsqueeze(-1)).unsqueeze(-1)], dim=-1)
    return U, S, V


def _spectral_offdiag_coeffs(sig: torch.Tensor, g: torch.Tensor, Jg: torch.Tensor):
    """Divided-difference coefficients c1, c2 (n,3,3) for the spectral VJP.

    ``sig``: (n,3) singular values; ``g``: (n,3) spectral values;
    ``Jg``: (n,3,3) Jacobian ∂g_i/∂σ_j.  Coincident singular values take the
    analytic limit; only the off-diagonal entries are meaningful.
    """
    si = sig.unsqueeze(-1)   # (n,3,1) -> index i
    sj = sig.unsqueeze(-2)   # (n,1,3) -> index j
    gi = g.unsqueeze(-1)
    gj = g.unsqueeze(-2)
    den = sj - si
    small = den.abs() < _DD_GUARD * (si + sj)
    den_safe = torch.where(small, torch.ones_like(den), den)

    # DD(g) with limit ½(J_ii + J_jj − J_ij − J_ji)
    Jd = torch.diagonal(Jg, dim1=-2, dim2=-1)           # (n,3)
    lim_g = 0.5 * (Jd.unsqueeze(-1) + Jd.unsqueeze(-2) - Jg - Jg.transpose(-1, -2))
    dd_g = torch.where(small, lim_g, (gj - gi) / den_safe)

    # DD(h) for h = σ·g, with H_ij = δ_ij g_i + σ_i J_ij
    H = si * Jg + torch.diag_embed(g)
    Hd = torch.diagonal(H, dim1=-2, dim2=-1)
    lim_h = 0.5 * (Hd.unsqueeze(-1) + Hd.unsqueeze(-2) - H - H.transpose(-1, -2))
    hi = sig * g
    dd_h = torch.where(small, lim_h, (hi.unsqueeze(-2) - hi.unsqueeze(-1)) / den_safe)

    inv_sum = 1.0 / (si + sj)
    c1 = dd_h * inv_sum
    c2 = (si * dd_g - gi) * inv_sum
    return c1, c2


def _spectral_mbar(Gbar_hat: torch.Tensor, c1, c2, Jg) -> torch.Tensor:
    """Assemble the M̄ matrix of the spectral VJP from the cotangent Ḡ = UᵀȲV."""
    off = c1 * Gbar_hat + (c2 * Gbar_hat).transpose(-1, -2)
    off = off - torch.diag_embed(torch.diagonal(off, dim1=-2, dim2=-1))
    Gd = torch.diagonal(Gbar_hat, dim1=-2, dim2=-1)          # (n,3)
    diag = torch.einsum("ni,nij->nj", Gd, Jg)
    return off + torch.diag_embed(diag)


class _PolarRotation(torch.autograd.Function):
    """R = U Vᵀ from F = U Σ Vᵀ, with the stable closed-form VJP
    M̄_ij = (Ḡ_ij − Ḡ_ji)/(σi + σj)."""

    @staticmethod
    def forward(ctx, F):
        U, S, V = _svd_rotations(F)
        R = U @ V.transpose(-1, -2)
        ctx.save_for_backward(U, S, V)
        return R

    @staticmethod
    def backward(ctx, Rbar):
        U, S, V = ctx.saved_tensors
        Gbar = U.transpose(-1, -2) @ Rbar @ V
        inv_sum = 1.0 / (S.unsqueeze(-1) + S.unsqueeze(-2))
        Mbar = (Gbar - Gbar.transpose(-1, -2)) * inv_sum
        return U @ Mbar @ V.transpose(-1, -2)


def polar_rotation(F: torch.Tensor) -> torch.Tensor:
    """Rotation factor of the polar decomposition F = R S (batched or single)."""
    batched = F.dim() == 3
    Fb = F if batched else F.unsqueeze(0)
    _check_positive_det(Fb, "polar_rotation")
    R = _PolarRotation.apply(Fb)
    return R if batched else R.squeeze(0)


def _return_map_spectral(S: torch.Tensor, k: torch.Tensor):
    """Spectral data of the von Mises projection.

    Given singular values S (n,3) and yield radius k = σ_y/(2μ) (broadcast to
    (n,)), returns (g, Jg, dg_dk, yielded):
        g      (n,3)  projected singular values,
        Jg     (n,3,3) ∂g_i/∂σ_j,
        dg_dk  (n,3)  ∂g_i/∂k,
        yielded (n,)  mask of particles projected onto the yield surface.

    In log-strain space ε = ln σ the projection is ε' = m·1 + k·ε̂/‖ε̂‖ when
    ‖ε̂‖ > k (with m the mean and ε̂ the deviator), identity otherwise; the
    trace of ε — hence det F — is preserved exactly.
    """
    eps = torch.log(S)
    m = eps.mean(dim=-1, keepdim=True)
    ehat = eps - m
    nrm = torch.linalg.norm(ehat, dim=-1)                     # (n,)
    k = torch.as_tensor(k, dtype=S.dtype).expand_as(nrm)
    yielded = nrm > k
    nrm_safe = torch.where(yielded, nrm, torch.ones_like(nrm))
    coef = (k / nrm_safe).unsqueeze(-1)
    eps_new = torch.where(yielded.unsqueeze(-1), m + coef * ehat, eps)
    g = torch.exp(eps_new)

    ones_outer = torch.full((*S.shape[:-1], 3, 3), 1.0 / 3.0,
                            dtype=S.dtype, device=S.device)
    eye = torch.eye(3, dtype=S.dtype, device=S.device).expand(*S.shape[:-1], 3, 3)
    P = eye - ones_outer
    ehat_u = ehat / nrm_safe.unsqueeze(-1)
    # A = ∂ε'/∂ε = (1/3)·11ᵀ + (k/‖ε̂‖)(P − êêᵀ) with ê the unit deviator.
    A_yield = ones_outer + coef.unsqueeze(-1) * (P - ehat_u.unsqueeze(-1) * ehat_u.unsqueeze(-2))
    A = torch.where(yielded.unsqueeze(-1).unsqueeze(-1), A_yield, eye)
    # chain rule through ε = ln σ and g = exp(ε'):  J_ij = g_i · A_ij / σ_j
    Jg = g.unsqueeze(-1) * A / S.unsqueeze(-2)
    dg_dk = torch.where(yielded.unsqueeze(-1), g * ehat_u, torch.zeros_like(g))
    return g, Jg, dg_dk, yielded


class _ReturnMapWithRotation(torch.autograd.Function):
    """Fused von Mises return map + polar rotation from a single SVD.

    (F_trial, k) → (F_new, R).  The projection rescales singular values only,
    so U and V — hence the polar rotation U Vᵀ — are shared between both
    outputs, and the subsequent corotated stress needs no second SVD.
    """

    @staticmethod
    def forward(ctx, F, k):
        U, S, V = _svd_rotations(F)
        g, Jg, dg_dk, _ = _return_map_spectral(S, k)
        F_new = U @ torch.diag_embed(g) @ V.transpose(-1, -2)
        R = U @ V.transpose(-1, -2)
        ctx.save_for_backward(U, S, V, g, Jg, dg_dk)
        ctx.k_shape = k.shape if torch.is_tensor(k) else ()
        return F_new, R

    @staticmethod
    def backward(ctx, Fbar, Rbar):
        U, S, V, g, Jg, dg_dk = ctx.saved_tensors
        Ut, Vt = U.transpose(-1, -2), V.transpose(-1, -2)
        Mbar = torch.zeros_like(U)
        kbar = None
        if Fbar is not None:
            Gbar = Ut @ Fbar @ V
            c1, c2 = _spectral_offdiag_coeffs(S, g, Jg)
            Mbar = Mbar + _spectral_mbar(Gbar, c1, c2, Jg)
            Gd = torch.diagonal(Gbar, dim1=-2, dim2=-1)
            kbar = (Gd * dg_dk).sum(dim=-1)
        if Rbar is not None:
            GbarR = Ut @ Rbar @ V
            inv_sum = 1.0 / (S.unsqueeze(-1) + S.unsqueeze(-2))
            Mbar = Mbar + (GbarR - GbarR.transpose(-1, -2)) * inv_sum
        Fgrad = U @ Mbar @ Vt
        if kbar is None:
            kbar = torch.zeros(S.shape[:-1], dtype=S.dtype, device=S.device)
        if ctx.k_shape == ():
            kbar = kbar.sum()
        return Fgrad, kbar


def return_map_with_rotation(F: torch.Tensor, k) -> tuple[torch.Tensor, torch.Tensor]:
    """von Mises projection of F plus its polar rotation, sharing one SVD.

    ``k`` is the yield radius σ_y/(2μ) in log-strain space (scalar tensor).
    """
    batched = F.dim() == 3
    Fb = F if batched else F.unsqueeze(0)
    _check_positive_det(Fb, "return_map")
    k_t = k if torch.is_tensor(k) else torch.as_tensor(k, dtype=Fb.dtype)
    F_new, R = _ReturnMapWithRotation.apply(Fb, k_t)
    return (F_new, R) if batched else (F_new.squeeze(0), R.squeeze(0))


def von_mises_return_map(F_trial: torch.Tensor, mu, sigma_y) -> torch.Tensor:
    """Project the trial elastic deformation gradient onto the yield surface.

    SVD F = U Σ Vᵀ; ε = ln Σ; with deviator ε̂ and indicator
    y = ‖ε̂‖ − σ_y/(2μ): if y > 0, ε ← ε − y·ε̂/‖ε̂‖ and F ← U exp(ε) Vᵀ,
    otherwise F is returned unchanged.  det F is preserved exactly (the
    projection is deviatoric).
    """
    mu_t = mu if torch.is_tensor(mu) else torch.as_tensor(mu, dtype=F_trial.dtype)
    sy_t = sigma_y if torch.is_tensor(sigma_y) else torch.as_tensor(sigma_y, dtype=F_trial.dtype)
    k = sy_t / (2.0 * mu_t)
    F_new, _ = return_map_with_rotation(F_trial, k)
    return F_new


def corotated_tau(F: torch.Tensor, lame_params: LameParams,
                  R: torch.Tensor | None = None) -> torch.Tensor:
    """Fixed Corotated Kirchhoff stress τ = 2μ(F − R)Fᵀ + λ J(J−1) I.

    ``R`` is the polar rotation of F; pass it in when it is already available
    (e.g. from the fused return map) to avoid a second SVD.
    """
    batched = F.dim() == 3
    Fb = F if batched else F.unsqueeze(0)
    J = _check_positive_det(Fb, "corotated_tau")
    if R is None:
        Rb = _PolarRotation.apply(Fb)
    else:
        Rb = R if R.dim() == 3 else R.unsqueeze(0)
    mu, lam = lame_params.mu, lame_params.lam
    eye = torch.eye(3, dtype=Fb.dtype, device=Fb.device).expand_as(Fb)
    tau = 2.0 * mu * ((Fb - Rb) @ Fb.transpose(-1, -2)) \
        + (lam * J * (J - 1.0)).reshape(-1, 1, 1) * eye
    return tau if batched else tau.squeeze(0)
