"""Gradient and invariant check suites behind ``monophys gradcheck``.

Four levels, each a list of named checks with a worst-observed statistic and
a tolerance:

* ``unit``   — differentiable-primitive VJPs vs central finite differences;
               constitutive identities (stress-free states, return-map cap,
               volume preservation).
* ``sim``    — end-to-end simulation gradients on tiny random scenes vs
               central finite differences; conservation laws.
* ``render`` — position-map pixel identity and unit positional gradient;
               compositing gradients vs finite differences.
* ``losses`` — Sinkhorn self-divergence, translated-cloud gradient
               direction, small-instance optimality; image-loss values.

The same functions back the acceptance tests, so the CLI gate and the test
suite cannot drift apart.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from . import diff_engine
from .constitutive import (LameParams, corotated_tau, neo_hookean_tau,
                           von_mises_return_map)
from .losses import (WeightedPointSet2D, alpha_loss, color_loss, flow_nll,
                     sinkhorn_divergence, ssim)
from .mpm_sim import bspline_weights, p2g, simulate
from .scene_model import (Camera, Gaussians, MaterialModel,
                          OptimizableParams, SceneConfig, decode_params)
from .splat_render import (composite, pixel_grid, position_proxy,
                           project_gaussians)

DEFAULT_DTYPE = torch.float64


@dataclass
class CheckResult:
    """One named check: worst observed statistic against its tolerance."""

    name: str
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.name}: worst {self.worst:.3e} (tol {self.tol:.1e})"


def _rel_err(got: torch.Tensor, want: torch.Tensor,
             floor: float = 1e-12) -> float:
    """Max elementwise relative error with an absolute floor.

    The floor absorbs central-difference roundoff (~1e-16·|f|/h) so that a
    genuinely zero gradient compared against FD noise reads as agreement
    rather than 100% error.
    """
    denom = max(float(want.abs().max()), float(got.abs().max()), floor)
    return float((got - want).abs().max()) / denom


# --------------------------------------------------------------------------
# unit level
# --------------------------------------------------------------------------

def _fd_vjp(fn: Callable, inputs: tuple, h: float = 1e-6):
    """Central finite-difference VJP against a fixed random cotangent.

    Returns (analytic_grads, fd_grads) flattened over differentiable inputs.
    """
    diffable = [torch.is_tensor(t) and t.is_floating_point() for t in inputs]
    leaves = [t.clone().requires_grad_(True) if d else t
              for t, d in zip(inputs, diffable)]
    out = fn(*leaves)
    outs = out if isinstance(out, tuple) else (out,)
    outs = [o for o in outs if o.is_floating_point()]
    rng = np.random.default_rng(7)
    cots = [torch.tensor(rng.normal(size=tuple(o.shape)), dtype=o.dtype)
            for o in outs]
    total = sum((o * c).sum() for o, c in zip(outs, cots))
    total.backward()
    analytic = [leaf.grad.detach().clone()
                if d and leaf.grad is not None else None
                for leaf, d in zip(leaves, diffable)]

    fd = []
    for k, base in enumerate(inputs):
        if not diffable[k]:
            fd.append(None)
            continue
        gk = torch.zeros_like(base)
        flat = base.reshape(-1)
        for j in range(flat.numel()):
            for sign in (+1.0, -1.0):
                pert = [t.clone() if torch.is_tensor(t) else t
                        for t in inputs]
                pert[k].reshape(-1)[j] += sign * h
                out_p = fn(*pert)
                outs_p = out_p if isinstance(out_p, tuple) else (out_p,)
                outs_p = [o for o in outs_p if o.is_floating_point()]
                val = sum(float((o * c).sum())
                          for o, c in zip(outs_p, cots))
                gk.reshape(-1)[j] += sign * val / (2 * h)
        fd.append(gk)
    analytic = [a if a is not None else torch.zeros_like(inputs[i])
                for i, a in enumerate(analytic) if diffable[i]]
    fd = [f for f in fd if f is not None]
    return analytic, fd


def check_primitives(seed: int = 0) -> list[CheckResult]:
    """Every registered differentiable primitive vs central differences."""
    results = []
    rng = np.random.default_rng(seed)
    for name, prim in sorted(diff_engine.PRIMITIVES.items()):
        inputs = prim.gen(rng)
        if prim.zero_vjp:
            leaves = [t.clone().requires_grad_(True)
                      if torch.is_tensor(t) and t.is_floating_point() else t
                      for t in inputs]
            out = prim.fn(*leaves)
            outs = out if isinstance(out, tuple) else (out,)
            sum(o.sum() for o in outs if o.is_floating_point()).backward()
            worst = max((float(leaf.grad.abs().max())
                         for leaf in leaves
                         if torch.is_tensor(leaf) and leaf.grad is not None),
                        default=0.0)
            results.append(CheckResult(f"primitive/{name} (zero vjp)",
                                       worst, 1e-12))
            continue
        analytic, fd = _fd_vjp(prim.fn, inputs)
        worst = max(_rel_err(a, f) for a, f in zip(analytic, fd))
        results.append(CheckResult(f"primitive/{name}", worst, 1e-5))
    return results


def check_constitutive(seed: int = 0, trials: int = 1000) -> list[CheckResult]:
    """Stress-free states, return-map cap, and plastic volume preservation."""
    rng = np.random.default_rng(seed)
    lp = LameParams(mu=torch.tensor(1.0, dtype=DEFAULT_DTYPE),
                    lam=torch.tensor(1.0, dtype=DEFAULT_DTYPE))

    def rand_rot():
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        return torch.tensor([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ], dtype=DEFAULT_DTYPE)

    worst_tau = 0.0
    eye = torch.eye(3, dtype=DEFAULT_DTYPE).unsqueeze(0)
    for tau_fn in (neo_hookean_tau, corotated_tau):
        worst_tau = max(worst_tau, float(tau_fn(eye, lp).abs().max()))
        rots = torch.stack([rand_rot() for _ in range(trials)])
        worst_tau = max(worst_tau, float(tau_fn(rots, lp).abs().max()))
    out = [CheckResult("constitutive/stress-free rotations", worst_tau, 1e-10)]

    mu = torch.tensor(1.3, dtype=DEFAULT_DTYPE)
    sigma_y = torch.tensor(0.4, dtype=DEFAULT_DTYPE)
    cap = float(sigma_y / (2 * mu))
    worst_cap, worst_det = 0.0, 0.0
    for _ in range(trials):
        F = diff_engine._spd_f(rng).unsqueeze(0)
        F_new = von_mises_return_map(F, mu, sigma_y)
        sig = torch.linalg.svdvals(F_new[0])
        eps_hat = torch.log(sig)
        eps_hat = eps_hat - eps_hat.mean()
        worst_cap = max(worst_cap, float(eps_hat.norm()) - cap)
        det_rel = abs(float(torch.linalg.det(F_new[0]))
                      - float(torch.linalg.det(F[0]))) \
            / abs(float(torch.linalg.det(F[0])))
        worst_det = max(worst_det, det_rel)
    out.append(CheckResult("constitutive/return-map norm cap",
                           worst_cap, 1e-8))
    out.append(CheckResult("constitutive/return-map det preserved",
                           worst_det, 1e-8))
    return out


# --------------------------------------------------------------------------
# sim level
# --------------------------------------------------------------------------

def _tiny_scene(rng: np.random.Generator):
    """A random ≤64-particle scene with a slightly randomized camera."""
    n = int(rng.integers(24, 65))
    dx = 0.03
    res = 24
    half = 0.5 * res * dx
    scene = SceneConfig.with_substeps(
        grid_res=res, dx=dx, substeps_per_frame=int(rng.integers(10, 21)),
        n_frames=2, fps=20.0, gravity=(0.0, 0.0, -9.81),
        ground_z=0.0, origin=(-half, -half, -3 * dx))
    # cluster above ground, moving down; height randomized so some scenes
    # reach ground contact within the window and some stay in flight
    center = np.array([0.0, 0.0, float(rng.uniform(0.07, 0.12))])
    pts = center + rng.uniform(-0.03, 0.03, size=(n, 3))
    dist = 0.5
    cam = Camera(fx=96.0, fy=96.0, cx=32.0, cy=32.0,
                 R=torch.tensor([[1.0, 0.0, 0.0],
                                 [0.0, 0.0, -1.0],
                                 [0.0, 1.0, 0.0]], dtype=DEFAULT_DTYPE),
                 t=torch.tensor([0.0, -dist, 0.10], dtype=DEFAULT_DTYPE),
                 width=64, height=64)
    x_world = torch.tensor(pts, dtype=DEFAULT_DTYPE)
    x_cam = (x_world - cam.t) @ cam.R
    g = Gaussians.create(
        x_cam=x_cam,
        log_scale=torch.full((n, 3), math.log(6e-3), dtype=DEFAULT_DTYPE),
        opacity_raw=torch.full((n,), 1.5, dtype=DEFAULT_DTYPE),
        color=torch.tensor(rng.uniform(0.2, 0.9, size=(n, 3)),
                           dtype=DEFAULT_DTYPE),
    )
    g.V = torch.full((n,), (0.5 * dx) ** 3, dtype=DEFAULT_DTYPE)
    # small initial deformation so elastic stress (and hence E, nu) acts on
    # the trajectory even in scenes that never touch the ground
    eye = torch.eye(3, dtype=DEFAULT_DTYPE)
    g.F = eye + 0.02 * torch.tensor(rng.normal(size=(n, 3, 3)),
                                    dtype=DEFAULT_DTYPE)
    model = MaterialModel.NeoHookean if rng.uniform() < 0.5 \
        else MaterialModel.Plasticine
    params = OptimizableParams.create(
        log10_E=float(rng.uniform(3.2, 4.0)),
        nu_raw=float(rng.uniform(-0.5, 0.5)),
        log10_sigma_y=float(rng.uniform(2.5, 3.5)),
        v0=(float(rng.uniform(-0.1, 0.1)), float(rng.uniform(-0.1, 0.1)),
            float(rng.uniform(-0.6, -0.2))),
        log_s=float(rng.uniform(-0.1, 0.1)),
        model=model,
    )
    return g, params, cam, scene


def _composite_sim_loss(g: Gaussians, params: OptimizableParams, cam: Camera,
                        scene: SceneConfig, probes: dict) -> torch.Tensor:
    """Scalar functional exercising simulate + project + composite.

    Fixed random probe tensors contract the rendered alpha map, the flow
    map, and the final particle positions so every output influences the
    value.
    """
    mat, v0, s = decode_params(params)
    traj = simulate(g, mat, v0, s, cam, scene, checkpoint_frames=False)
    x_T = traj.positions(scene.n_frames - 1)
    ref0 = project_gaussians(g, s, cam)
    splats = project_gaussians(g, s, cam, x_world=x_T,
                               flow_ref2d=ref0.mean2d)
    maps = composite(splats, cam, want=("alpha", "flow"))
    return (maps.alpha * probes["alpha"]).sum() \
        + (maps.flow * probes["flow"]).sum() \
        + (x_T * probes["x"]).sum()


def check_sim_gradients(seed: int = 0, n_scenes: int = 20,
                        log: Optional[Callable[[str], None]] = None
                        ) -> list[CheckResult]:
    """End-to-end reverse-mode gradients vs central finite differences.

    For each random tiny scene: gradients w.r.t. v0, log10_E, nu_raw, log_s,
    and 5 random particle positions, from a composite render+trajectory
    functional, at fp64.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_scenes):
        g, params, cam, scene = _tiny_scene(rng)
        probes = {
            "alpha": torch.tensor(rng.normal(size=(cam.height, cam.width)),
                                  dtype=DEFAULT_DTYPE),
            "flow": torch.tensor(rng.normal(size=(cam.height, cam.width, 2)),
                                 dtype=DEFAULT_DTYPE),
            "x": torch.tensor(rng.normal(size=(g.n, 3)), dtype=DEFAULT_DTYPE),
        }
        pick = rng.permutation(g.n)[:5]

        g.x_cam.requires_grad_(True)
        for t in params.tensors().values():
            t.requires_grad_(True)
        loss = _composite_sim_loss(g, params, cam, scene, probes)
        loss.backward()

        grads = {
            "v0": params.v0.grad.clone(),
            "log10_E": params.log10_E.grad.clone(),
            "nu_raw": params.nu_raw.grad.clone(),
            "log_s": params.log_s.grad.clone(),
            "x_cam": g.x_cam.grad[pick].clone(),
        }

        def loss_at(pt, vt, et, nt, st):
            g2 = Gaussians(x_cam=pt, log_scale=g.log_scale.detach(),
                           rot=g.rot, color=g.color,
                           opacity_raw=g.opacity_raw.detach(),
                           V=g.V, v=g.v, F=g.F)
            p2 = OptimizableParams(
                log10_E=et, nu_raw=nt,
                log10_sigma_y=params.log10_sigma_y.detach(),
                v0=vt, log_s=st, model=params.model)
            return float(_composite_sim_loss(g2, p2, cam, scene, probes))

        base = (g.x_cam.detach(), params.v0.detach(),
                params.log10_E.detach(), params.nu_raw.detach(),
                params.log_s.detach())

        def fd_slot(slot: int, idx: tuple, h: float) -> float:
            vals = []
            for sign in (+1.0, -1.0):
                mod = [t.clone() for t in base]
                mod[slot][idx] += sign * h
                vals.append(loss_at(*mod))
            return (vals[0] - vals[1]) / (2 * h)

        fd = {
            "v0": torch.tensor([fd_slot(1, (i,), 1e-6) for i in range(3)],
                               dtype=DEFAULT_DTYPE),
            "log10_E": torch.tensor(fd_slot(2, (), 1e-6),
                                    dtype=DEFAULT_DTYPE),
            "nu_raw": torch.tensor(fd_slot(3, (), 1e-6),
                                   dtype=DEFAULT_DTYPE),
            "log_s": torch.tensor(fd_slot(4, (), 1e-7),
                                  dtype=DEFAULT_DTYPE),
            "x_cam": torch.stack([
                torch.tensor([fd_slot(0, (int(p), j), 1e-7)
                              for j in range(3)], dtype=DEFAULT_DTYPE)
                for p in pick]),
        }
        # Central FD noise is ~1e-16*|loss|/h ~ 1e-9..1e-10 here; gradients
        # below 1e-6 in magnitude cannot be certified by FD, so agreement at
        # that scale counts as consistent (e.g. E/nu in a contact-free scene
        # where the body stays rigid and stress never activates).
        scene_worst = max(_rel_err(grads[k2], fd[k2], floor=1e-6)
                          for k2 in grads)
        worst = max(worst, scene_worst)
        if log:
            log(f"  sim-grad scene {k}: rel err {scene_worst:.3e} "
                f"({params.model.value}, n={g.n})")
    return [CheckResult("sim/end-to-end gradients vs FD", worst, 1e-3)]


def check_conservation(seed: int = 0) -> list[CheckResult]:
    """Free-flight momentum follows p0 + M g t; grid mass equals particle
    mass at every transfer (partition of unity)."""
    rng = np.random.default_rng(seed)
    g, params, cam, scene = _tiny_scene(rng)
    # hover well above ground so nothing touches it over the check horizon
    scene = SceneConfig.with_substeps(
        grid_res=scene.grid_res, dx=scene.dx, substeps_per_frame=100,
        n_frames=2, fps=scene.fps, gravity=scene.gravity,
        ground_z=scene.ground_z, origin=scene.origin)
    mat, v0, s = decode_params(params)
    with torch.no_grad():
        traj = simulate(g, mat, v0, s, cam, scene, checkpoint_frames=False)
    masses = mat.rho * g.V
    M = float(masses.sum())
    t_total = scene.dt * scene.substeps_per_frame
    gvec = torch.tensor(scene.gravity, dtype=DEFAULT_DTYPE)
    want = M * v0 + M * gvec * t_total
    got = (masses.unsqueeze(1) * traj.frames[1].v).sum(dim=0)
    rel = float((got - want).abs().max()) / max(float(want.abs().max()), 1e-12)

    # mass conservation at the transfer: for both recorded frame states the
    # grid mass must equal the particle mass (Σ weights = 1 per particle)
    worst_mass = 0.0
    with torch.no_grad():
        for fs in traj.frames:
            grid_mass, _, _ = p2g(fs.x, fs.v, fs.C,
                                  torch.zeros_like(fs.F), masses, g.V,
                                  scene, scene.dt)
            worst_mass = max(worst_mass,
                             abs(float(grid_mass.sum()) - M) / M)
        _, w, gw, _ = bspline_weights(traj.frames[1].x, scene.dx,
                                      scene.origin, scene.grid_res)
        worst_mass = max(worst_mass,
                         float((w.sum(dim=1) - 1.0).abs().max()))
    return [CheckResult("sim/free-flight momentum", rel, 1e-8),
            CheckResult("sim/mass conservation (transfer)", worst_mass, 1e-10)]


# --------------------------------------------------------------------------
# render level
# --------------------------------------------------------------------------

def _random_render_scene(rng: np.random.Generator, n: int = 40):
    cam = Camera(fx=float(rng.uniform(70, 130)),
                 fy=float(rng.uniform(70, 130)),
                 cx=float(rng.uniform(28, 36)), cy=float(rng.uniform(28, 36)),
                 R=torch.eye(3, dtype=DEFAULT_DTYPE),
                 t=torch.zeros(3, dtype=DEFAULT_DTYPE), width=64, height=64)
    x_cam = torch.tensor(
        np.stack([rng.uniform(-0.08, 0.08, n), rng.uniform(-0.08, 0.08, n),
                  rng.uniform(0.35, 0.6, n)], axis=1), dtype=DEFAULT_DTYPE)
    g = Gaussians.create(
        x_cam=x_cam,
        log_scale=torch.tensor(rng.uniform(math.log(4e-3), math.log(1.2e-2),
                                           (n, 3)), dtype=DEFAULT_DTYPE),
        opacity_raw=torch.tensor(rng.uniform(0.5, 2.5, n),
                                 dtype=DEFAULT_DTYPE),
        color=torch.tensor(rng.uniform(0, 1, (n, 3)), dtype=DEFAULT_DTYPE),
    )
    return g, cam


def check_posmap(seed: int = 0, n_scenes: int = 50) -> list[CheckResult]:
    """Position map == pixel grid (fp32); ∂p̃/∂mean2d == identity."""
    rng = np.random.default_rng(seed)
    worst_px = 0.0
    for _ in range(n_scenes):
        g, cam = _random_render_scene(rng)
        with torch.no_grad():
            splats = project_gaussians(g, 1.0, cam)
            cast = {k: (v.to(torch.float32)
                        if torch.is_tensor(v) and v.is_floating_point()
                        else v)
                    for k, v in vars(splats).items()}
            maps = composite(type(splats)(**cast), cam, want=("posmap",))
            grid = pixel_grid(cam.height, cam.width, dtype=torch.float32)
            worst_px = max(worst_px,
                           float((maps.posmap - grid).abs().max()))
    out = [CheckResult("render/posmap pixel identity (fp32, px)",
                       worst_px, 1e-4)]

    # unit positional gradient: the per-splat position proxy satisfies
    # ∂p̃/∂mean2d = I exactly, for arbitrary query pixels and covariances
    worst_jac = 0.0
    for _ in range(20):
        mean2d = torch.tensor(rng.uniform(0, 60, size=2),
                              dtype=DEFAULT_DTYPE, requires_grad=True)
        a, b, c = rng.uniform(0.5, 4.0), rng.uniform(0.5, 4.0), \
            rng.uniform(-0.4, 0.4)
        cov2d = torch.tensor([[a, c * math.sqrt(a * b)],
                              [c * math.sqrt(a * b), b]], dtype=DEFAULT_DTYPE)
        p = torch.tensor(rng.uniform(0, 60, size=2), dtype=DEFAULT_DTYPE)
        jac = torch.stack([
            torch.autograd.grad(position_proxy(mean2d, cov2d, p)[axis],
                                mean2d, retain_graph=True)[0]
            for axis in range(2)])
        worst_jac = max(worst_jac, float(
            (jac - torch.eye(2, dtype=DEFAULT_DTYPE)).abs().max()))
    out.append(CheckResult("render/unit positional gradient", worst_jac, 1e-6))
    return out


def check_render_gradients(seed: int = 0) -> list[CheckResult]:
    """Compositing gradients (alpha, color, flow) vs central differences."""
    rng = np.random.default_rng(seed)
    g, cam = _random_render_scene(rng, n=10)
    probes = {
        "alpha": torch.tensor(rng.normal(size=(cam.height, cam.width)),
                              dtype=DEFAULT_DTYPE),
        "color": torch.tensor(rng.normal(size=(cam.height, cam.width, 3)),
                              dtype=DEFAULT_DTYPE),
    }

    def value(x_cam: torch.Tensor) -> torch.Tensor:
        g2 = Gaussians(x_cam=x_cam, log_scale=g.log_scale, rot=g.rot,
                       color=g.color, opacity_raw=g.opacity_raw,
                       V=g.V, v=g.v, F=g.F)
        splats = project_gaussians(g2, 1.0, cam)
        maps = composite(splats, cam, want=("alpha", "color"))
        return (maps.alpha * probes["alpha"]).sum() \
            + (maps.color * probes["color"]).sum()

    x0 = g.x_cam.detach().clone().requires_grad_(True)
    value(x0).backward()
    analytic = x0.grad.clone()
    fd = torch.zeros_like(analytic)
    h = 1e-6
    base = g.x_cam.detach()
    for i in range(min(4, g.n)):
        for j in range(3):
            for sign in (+1.0, -1.0):
                p = base.clone()
                p[i, j] += sign * h
                fd[i, j] += sign * float(value(p)) / (2 * h)
    worst = _rel_err(analytic[:4], fd[:4])
    return [CheckResult("render/compositing gradients vs FD", worst, 1e-4)]


# --------------------------------------------------------------------------
# losses level
# --------------------------------------------------------------------------

def _rand_set(rng: np.random.Generator, n: int) -> WeightedPointSet2D:
    pts = torch.tensor(rng.uniform(0, 40, size=(n, 2)), dtype=DEFAULT_DTYPE)
    w = torch.tensor(rng.uniform(0.2, 1.0, size=n), dtype=DEFAULT_DTYPE)
    return WeightedPointSet2D(points=pts, weights=w)


def check_sinkhorn(seed: int = 0, n_sets: int = 100) -> list[CheckResult]:
    """Self-divergence, translated-cloud gradient direction, and
    small-instance optimality of the Sinkhorn machinery."""
    rng = np.random.default_rng(seed)
    worst_self = 0.0
    for _ in range(n_sets):
        A = _rand_set(rng, int(rng.integers(5, 40)))
        worst_self = max(worst_self,
                         abs(float(sinkhorn_divergence(A, A).value)))
    out = [CheckResult("losses/SD(A,A) self-divergence", worst_self, 1e-6)]

    # translated cloud: gradient at each point should oppose the shift
    worst_cos = 0.0
    for _ in range(10):
        n = int(rng.integers(8, 24))
        A = _rand_set(rng, n)
        d = torch.tensor(rng.uniform(-3, 3, size=2), dtype=DEFAULT_DTYPE)
        pts = A.points.clone().requires_grad_(True)
        moved = WeightedPointSet2D(points=pts + d, weights=A.weights)
        val = sinkhorn_divergence(moved, A).value
        grad = torch.autograd.grad(val, pts)[0]
        mean_g = grad.mean(dim=0)
        cos = float((mean_g @ d) / (mean_g.norm() * d.norm() + 1e-30))
        worst_cos = max(worst_cos, 1.0 - cos)
    out.append(CheckResult("losses/translated gradient cosine (1-cos)",
                           worst_cos, 0.1))

    # ≤6-point instances against brute-force assignment enumeration in the
    # balanced limit: equal masses, reach >> diameter, eps << cost gaps,
    # and an iteration budget deep enough for the small-eps regime (these
    # matrices are 6x6, so the extra iterations are microseconds)
    worst_rel = 0.0
    for _ in range(12):
        n = int(rng.integers(2, 7))
        x = torch.tensor(rng.uniform(0, 30, size=(n, 2)), dtype=DEFAULT_DTYPE)
        y = torch.tensor(rng.uniform(0, 30, size=(n, 2)), dtype=DEFAULT_DTYPE)
        w = torch.full((n,), 1.0 / n, dtype=DEFAULT_DTYPE)
        A = WeightedPointSet2D(points=x, weights=w)
        B = WeightedPointSet2D(points=y, weights=w)
        got = float(sinkhorn_divergence(A, B, eps=1.0, reach=1e3,
                                        max_iters=5000).value)
        C = torch.cdist(x, y) ** 2
        best = min(sum(float(C[i, p[i]]) for i in range(n)) / n
                   for p in itertools.permutations(range(n)))
        worst_rel = max(worst_rel, abs(got - best) / max(best, 1e-12))
    out.append(CheckResult("losses/≤6-point vs brute-force assignment",
                           worst_rel, 0.01))
    return out


def check_loss_values(seed: int = 0) -> list[CheckResult]:
    """Closed-form image-loss values and a flow-NLL gradient probe."""
    out = []
    a = torch.full((16, 16, 3), 0.3, dtype=DEFAULT_DTYPE)
    b = torch.full((16, 16, 3), 0.4, dtype=DEFAULT_DTYPE)
    # constant images: L1 term exact, SSIM reduces to the luminance factor
    c1 = 0.01 ** 2
    lum = (2 * 0.3 * 0.4 + c1) / (0.3 ** 2 + 0.4 ** 2 + c1)
    want = 0.8 * 0.1 + 0.2 * (1.0 - lum)
    got = float(color_loss(a, b))
    out.append(CheckResult("losses/color closed form (const images)",
                           abs(got - want), 1e-10))

    mask = torch.zeros(16, 16, dtype=DEFAULT_DTYPE)
    mask[4:12, 4:12] = 1.0
    out.append(CheckResult("losses/alpha self", float(alpha_loss(mask, mask)),
                           1e-15))

    flow = torch.tensor(np.random.default_rng(seed).normal(
        size=(8, 8, 2)), dtype=DEFAULT_DTYPE)
    sigma = torch.full((8, 8), 1.3, dtype=DEFAULT_DTYPE)
    fh = flow.clone().requires_grad_(True)
    val = flow_nll(fh, flow + 0.5, sigma).mean()
    grad = torch.autograd.grad(val, fh)[0]
    # Laplace NLL: d/df_hat mean(|t - f_hat|_1/sigma) = -sign(t-f)/sigma/HW
    want_g = torch.full_like(grad, -1.0 / 1.3 / (8 * 8))
    out.append(CheckResult("losses/flow NLL gradient closed form",
                           float((grad - want_g).abs().max()), 1e-12))

    img = torch.rand(16, 16, 3, dtype=torch.float64,
                     generator=torch.Generator().manual_seed(seed))
    out.append(CheckResult("losses/ssim self", abs(float(ssim(img, img)) - 1.0),
                           1e-12))
    return out


# --------------------------------------------------------------------------
# level driver
# --------------------------------------------------------------------------

LEVELS: dict[str, list[Callable[..., list[CheckResult]]]] = {
    "unit": [check_primitives, check_constitutive],
    "sim": [check_sim_gradients, check_conservation],
    "render": [check_posmap, check_render_gradients],
    "losses": [check_sinkhorn, check_loss_values],
}


def run_level(level: str, seed: int = 0,
              log: Optional[Callable[[str], None]] = None
              ) -> list[CheckResult]:
    """Run one level's checks; returns all results (callers decide exit)."""
    if level not in LEVELS:
        raise ValueError(f"unknown gradcheck level {level!r} "
                         f"(expected one of {sorted(LEVELS)})")
    emit = log or (lambda line: None)
    results: list[CheckResult] = []
    for fn in LEVELS[level]:
        got = fn(seed=seed)
        for r in got:
            emit(r.line())
        results.extend(got)
    return results
