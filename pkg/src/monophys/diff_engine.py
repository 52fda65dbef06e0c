"""Reverse-mode differentiation contract for simulation and rendering.

The engine is a thin, honest layer over torch autograd:

* ``record_forward`` runs a program on leaf inputs and returns a replayable
  :class:`Tape`.  While recording, every torch API call is checked against the
  primitive registry (a ``TorchFunctionMode`` allowlist), so a program built
  from unregistered operations fails loudly at record time rather than
  producing silently wrong gradients later.
* ``backward`` pulls a vector-Jacobian product back through a tape.
* ``run_segmented`` / ``checkpointed_backward`` bound memory on long rollouts
  by recomputation: only segment-boundary states stay alive, interior
  activations are rebuilt during the backward sweep.
* Every registered primitive carries an input generator so a single property
  test can finite-difference the whole VJP surface.

Gradients deliberately do *not* flow through particle relocation or volume
re-estimation; those are discrete events between optimizer iterations.
"""

from __future__ import annotations

import hashlib
import math
import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
from torch.overrides import TorchFunctionMode
from torch.utils.checkpoint import checkpoint as _torch_checkpoint

from . import constitutive


class ContractError(RuntimeError):
    """A program used an operation outside the registered primitive set."""


# --------------------------------------------------------------------------
# deterministic mode
# --------------------------------------------------------------------------

_DETERMINISTIC = False


def set_deterministic(enabled: bool = True) -> None:
    """Force bit-reproducible execution: single-threaded torch kernels and
    deterministic algorithms.  All random sampling in this package already
    flows through explicitly seeded generators."""
    global _DETERMINISTIC
    _DETERMINISTIC = bool(enabled)
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def deterministic() -> bool:
    return _DETERMINISTIC


def seeded_generator(seed: int, *keys) -> np.random.Generator:
    """A numpy Generator seeded stably from a root seed and subkeys.

    Subkeys may be integers or strings; strings are hashed with a fixed
    algorithm so the stream is stable across processes and platforms.
    """
    ints = []
    for k in keys:
        if isinstance(k, str):
            ints.append(int.from_bytes(hashlib.blake2s(k.encode()).digest()[:8], "little"))
        else:
            ints.append(int(k))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *ints])))


# --------------------------------------------------------------------------
# stop-gradient primitive
# --------------------------------------------------------------------------

class _StopGradient(torch.autograd.Function):
    """Identity forward, zero vector-Jacobian product."""

    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, gbar):
        return torch.zeros_like(gbar)


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Treat ``x`` as a constant: forward identity, backward zero."""
    return _StopGradient.apply(x)


# --------------------------------------------------------------------------
# primitive registry
# --------------------------------------------------------------------------

@dataclass
class Primitive:
    """A differentiable building block with a self-test input generator.

    Attributes:
        fn: the operation, called as ``fn(*inputs)`` returning a tensor or a
            tuple of tensors.
        gen: ``gen(rng) -> tuple`` producing randomized double-precision
            inputs on which the VJP is finite-difference checked.
        torch_names: torch-level function names this primitive may invoke
            while recording (allowlist entries).
        zero_vjp: the VJP is identically zero (stop-gradient family); the
            property test asserts zero instead of matching finite differences.
    """

    name: str
    fn: Callable
    gen: Callable[[np.random.Generator], tuple]
    torch_names: tuple[str, ...] = ()
    zero_vjp: bool = False


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(p: Primitive) -> None:
    PRIMITIVES[p.name] = p


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return torch.tensor(rng.uniform(lo, hi, size=shape), dtype=torch.float64)


def _spd_f(rng):
    """A random deformation gradient with singular values in [0.5, 2]."""
    a = torch.tensor(rng.normal(size=(3, 3)), dtype=torch.float64)
    q1, _ = torch.linalg.qr(a)
    q2, _ = torch.linalg.qr(torch.tensor(rng.normal(size=(3, 3)), dtype=torch.float64))
    if torch.linalg.det(q1) < 0:
        q1 = q1 * torch.tensor([1.0, 1.0, -1.0], dtype=torch.float64)
    if torch.linalg.det(q2) < 0:
        q2 = q2 * torch.tensor([1.0, 1.0, -1.0], dtype=torch.float64)
    s = torch.tensor(rng.uniform(0.5, 2.0, size=3), dtype=torch.float64)
    return q1 @ torch.diag(s) @ q2.T


def _register_defaults() -> None:
    reg = register_primitive
    reg(Primitive("add", torch.add, lambda r: (_t(r, 4), _t(r, 4)), ("add", "__add__")))
    reg(Primitive("sub", torch.sub, lambda r: (_t(r, 4), _t(r, 4)), ("sub", "__sub__", "__neg__", "neg")))
    reg(Primitive("mul", torch.mul, lambda r: (_t(r, 4), _t(r, 4)), ("mul", "__mul__")))
    reg(Primitive("div", torch.div, lambda r: (_t(r, 4), _t(r, 4, lo=0.5, hi=2.0)), ("div", "__truediv__")))
    reg(Primitive("pow", torch.pow, lambda r: (_t(r, 4, lo=0.2, hi=2.0), _t(r, 4)), ("pow", "__pow__")))
    reg(Primitive("matmul", torch.matmul, lambda r: (_t(r, 3, 4), _t(r, 4, 2)), ("matmul", "__matmul__", "bmm", "mm", "einsum")))
    reg(Primitive("sin", torch.sin, lambda r: (_t(r, 5),), ("sin",)))
    reg(Primitive("cos", torch.cos, lambda r: (_t(r, 5),), ("cos",)))
    reg(Primitive("exp", torch.exp, lambda r: (_t(r, 5),), ("exp",)))
    reg(Primitive("log", torch.log, lambda r: (_t(r, 5, lo=0.2, hi=3.0),), ("log",)))
    reg(Primitive("log1p", torch.log1p, lambda r: (_t(r, 5, lo=-0.5, hi=0.5),), ("log1p",)))
    reg(Primitive("sqrt", torch.sqrt, lambda r: (_t(r, 5, lo=0.2, hi=3.0),), ("sqrt",)))
    reg(Primitive("sigmoid", torch.sigmoid, lambda r: (_t(r, 5),), ("sigmoid",)))
    reg(Primitive("tanh", torch.tanh, lambda r: (_t(r, 5),), ("tanh",)))
    reg(Primitive("abs", torch.abs, lambda r: (_t(r, 5, lo=0.2, hi=2.0),), ("abs", "__abs__")))
    reg(Primitive("sum", lambda x: x.sum(), lambda r: (_t(r, 6),), ("sum",)))
    reg(Primitive("mean", lambda x: x.mean(), lambda r: (_t(r, 6),), ("mean",)))
    reg(Primitive("cumsum", lambda x: torch.cumsum(x, 0), lambda r: (_t(r, 6),), ("cumsum",)))
    reg(Primitive("norm", lambda x: torch.linalg.norm(x, dim=-1),
                  lambda r: (_t(r, 4, 3, lo=0.3, hi=1.0),), ("norm", "linalg_norm", "vector_norm")))
    reg(Primitive("max_reduce", lambda x: x.max(), lambda r: (_t(r, 6),), ("max", "maximum", "clamp", "clamp_min", "clamp_max")))
    reg(Primitive("min_reduce", lambda x: x.min(), lambda r: (_t(r, 6),), ("min", "minimum")))
    reg(Primitive("where", lambda c, a, b: torch.where(c, a, b),
                  lambda r: (torch.tensor(r.uniform(size=5) > 0.5), _t(r, 5), _t(r, 5)),
                  ("where",)))
    reg(Primitive("gather", lambda x, i: torch.gather(x, 0, i),
                  lambda r: (_t(r, 6), torch.tensor(r.integers(0, 6, size=4))),
                  ("gather", "index_select", "take_along_dim")))
    reg(Primitive(
        "index_add",
        lambda acc, i, src: acc.index_add(0, i, src),
        lambda r: (_t(r, 5), torch.tensor(r.integers(0, 5, size=7)), _t(r, 7)),
        ("index_add", "index_add_", "scatter_add", "bincount"),
    ))
    reg(Primitive("softmax", lambda x: torch.softmax(x, -1), lambda r: (_t(r, 5),), ("softmax",)))
    reg(Primitive("logsumexp", lambda x: torch.logsumexp(x, -1), lambda r: (_t(r, 4, 5),), ("logsumexp",)))
    reg(Primitive("det3", torch.linalg.det, lambda r: (_spd_f(r),), ("det", "linalg_det")))
    reg(Primitive("inverse2", torch.linalg.inv, lambda r: (_spd_f(r),), ("inv", "linalg_inv", "linalg_solve", "solve")))
    reg(Primitive("diag_embed", torch.diag_embed, lambda r: (_t(r, 3),), ("diag_embed", "diagonal", "diag")))
    reg(Primitive("stack_ops", lambda a, b: torch.stack([a, b], dim=0),
                  lambda r: (_t(r, 3), _t(r, 3)), ("stack", "cat", "unbind", "split", "chunk", "flip")))
    reg(Primitive("conv2d", lambda x, w: torch.nn.functional.conv2d(x, w),
                  lambda r: (_t(r, 1, 1, 6, 6), _t(r, 1, 1, 3, 3)), ("conv2d",)))
    reg(Primitive("stop_gradient", stop_gradient, lambda r: (_t(r, 4),),
                  ("_StopGradient",), zero_vjp=True))
    reg(Primitive("polar_rotation", constitutive.polar_rotation,
                  lambda r: (_spd_f(r),), ("_PolarRotation", "svd", "linalg_svd")))
    reg(Primitive(
        "return_map_with_rotation",
        constitutive.return_map_with_rotation,
        # keep k away from the yield boundary: the map is C0 there, so finite
        # differences would straddle the kink
        lambda r: (_spd_f(r).unsqueeze(0),
                   torch.tensor(r.uniform(0.05, 0.15), dtype=torch.float64)),
        ("_ReturnMapWithRotation",),
    ))
    reg(Primitive("neo_hookean_tau",
                  lambda F, mu, lam: constitutive.neo_hookean_tau(F, constitutive.LameParams(mu, lam)),
                  lambda r: (_spd_f(r),
                             torch.tensor(r.uniform(0.5, 2.0), dtype=torch.float64),
                             torch.tensor(r.uniform(0.5, 2.0), dtype=torch.float64)),
                  ()))
    reg(Primitive("corotated_tau",
                  lambda F, mu, lam: constitutive.corotated_tau(F, constitutive.LameParams(mu, lam)),
                  lambda r: (_spd_f(r),
                             torch.tensor(r.uniform(0.5, 2.0), dtype=torch.float64),
                             torch.tensor(r.uniform(0.5, 2.0), dtype=torch.float64)),
                  ()))


_register_defaults()

# torch functions that move data without computing on it; always allowed
# while recording (shape management, construction, bookkeeping, comparisons).
_STRUCTURAL = {
    "reshape", "view", "permute", "transpose", "t", "unsqueeze", "squeeze",
    "expand", "expand_as", "contiguous", "clone", "detach", "to", "type_as",
    "__getitem__", "__setitem__", "index", "select", "narrow", "repeat",
    "repeat_interleave", "roll", "tensor", "as_tensor", "zeros", "ones",
    "full", "empty", "arange", "linspace", "meshgrid", "eye", "zeros_like",
    "ones_like", "full_like", "empty_like", "rand_like", "tile",
    "__eq__", "__ne__", "__lt__", "__le__", "__gt__", "__ge__", "eq", "ne",
    "lt", "le", "gt", "ge", "logical_and", "logical_or", "logical_not",
    "__and__", "__or__", "__invert__", "any", "all", "isfinite", "isnan",
    "nonzero", "count_nonzero", "unique", "unique_consecutive", "sort",
    "argsort", "searchsorted", "topk", "argmax", "argmin", "floor", "ceil",
    "round", "sign", "item", "numel", "size", "dim", "is_floating_point",
    "__bool__", "__len__", "__iter__", "unbind", "is_contiguous", "numpy",
    "tolist", "float", "double", "long", "int", "bool", "copy_", "fill_",
    "masked_fill", "masked_select", "cummax", "flatten", "ravel", "outer",
    "prod", "set_grad_enabled", "is_grad_enabled", "_has_compatible_shallow_copy_type",
    "__rsub__", "__rmul__", "__radd__", "__rtruediv__", "__rpow__",
}


def _allowed_names() -> set[str]:
    names = set(_STRUCTURAL)
    for p in PRIMITIVES.values():
        names.update(p.torch_names)
        names.add(p.name)
    return names


class _AllowlistMode(TorchFunctionMode):
    """Raises ContractError when an unregistered torch function runs."""

    def __init__(self):
        super().__init__()
        self.allowed = _allowed_names()

    def __torch_function__(self, func, types, args=(), kwargs=None):
        name = getattr(func, "__name__", str(func))
        base = name.rstrip("_") if name.endswith("_") and not name.endswith("__") else name
        if name not in self.allowed and base not in self.allowed:
            raise ContractError(f"unregistered primitive in recorded program: {name}")
        return func(*args, **(kwargs or {}))


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

@dataclass
class Tape:
    """Recorded forward pass: leaf inputs, graph-connected outputs, and the
    program for bit-exact replay.  Checkpoint markers (segment boundaries in
    substeps) are carried for segmented rollouts."""

    program: Callable
    inputs: tuple[torch.Tensor, ...]
    outputs: tuple[torch.Tensor, ...]
    checkpoints: tuple[int, ...] = ()

    def replay(self) -> tuple[torch.Tensor, ...]:
        """Re-run the recorded program on the recorded inputs."""
        with torch.no_grad():
            out = self.program(*self.inputs)
        return out if isinstance(out, tuple) else (out,)


def record_forward(program: Callable, inputs: Sequence[torch.Tensor],
                   enforce: bool = True) -> tuple[tuple[torch.Tensor, ...], Tape]:
    """Run ``program`` on leaf copies of ``inputs`` and return (outputs, tape).

    With ``enforce`` the recording rejects any torch operation outside the
    primitive registry allowlist.
    """
    leaves = tuple(x.detach().clone().requires_grad_(x.is_floating_point())
                   for x in inputs)
    if enforce:
        with _AllowlistMode():
            out = program(*leaves)
    else:
        out = program(*leaves)
    outputs = out if isinstance(out, tuple) else (out,)
    return outputs, Tape(program=program, inputs=leaves, outputs=outputs)


def backward(tape: Tape, output_cotangent) -> tuple[torch.Tensor, ...]:
    """Vector-Jacobian product through a recorded tape.

    ``output_cotangent`` is a tensor (single output) or a sequence matching
    ``tape.outputs``; for a scalar loss pass cotangent 1.
    """
    cots = output_cotangent if isinstance(output_cotangent, (tuple, list)) \
        else (output_cotangent,)
    if len(cots) != len(tape.outputs):
        raise ValueError(f"cotangent count {len(cots)} != output count {len(tape.outputs)}")
    cots = tuple(torch.as_tensor(c, dtype=o.dtype) for c, o in zip(cots, tape.outputs))
    for c, o in zip(cots, tape.outputs):
        if c.shape != o.shape:
            raise ValueError(f"cotangent shape {tuple(c.shape)} != output shape {tuple(o.shape)}")
    wrt = [x for x in tape.inputs if x.requires_grad]
    grads = torch.autograd.grad(tape.outputs, wrt, grad_outputs=cots,
                                retain_graph=True, allow_unused=True,
                                materialize_grads=True)
    out, it = [], iter(grads)
    for x in tape.inputs:
        out.append(next(it) if x.requires_grad else torch.zeros_like(x))
    return tuple(out)


# --------------------------------------------------------------------------
# segmented (checkpointed) rollouts
# --------------------------------------------------------------------------

def segment_bounds(n_steps: int, n_segments: int) -> list[tuple[int, int]]:
    """Split ``range(n_steps)`` into ``n_segments`` contiguous segments."""
    if not (1 <= n_segments <= n_steps):
        raise ValueError(f"need 1 <= n_segments={n_segments} <= n_steps={n_steps}")
    edges = [round(i * n_steps / n_segments) for i in range(n_segments + 1)]
    return [(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def run_segmented(step_fn: Callable, state: tuple[torch.Tensor, ...], n_steps: int,
                  n_segments: int, *shared: torch.Tensor) -> tuple[torch.Tensor, ...]:
    """Run ``state = step_fn(step_index, *state, *shared)`` for n_steps.

    With ``n_segments`` > 1, each segment runs under activation
    checkpointing: the graph keeps only segment-boundary states and rebuilds
    interior activations during backward, so peak memory is one segment's
    tape plus the boundaries.  Gradients are identical to the full tape
    (same arithmetic, same order).
    """
    n_state = len(state)

    def run_segment(a: int, b: int, *tensors):
        st = tuple(tensors[:n_state])
        sh = tuple(tensors[n_state:])
        for i in range(a, b):
            st = step_fn(i, *st, *sh)
        return st

    bounds = segment_bounds(n_steps, n_segments)
    for (a, b) in bounds:
        if n_segments == 1:
            state = run_segment(a, b, *state, *shared)
        else:
            state = _torch_checkpoint(
                lambda *ts, _a=a, _b=b: run_segment(_a, _b, *ts),
                *state, *shared, use_reentrant=False)
    return state


def checkpointed_backward(step_fn: Callable, state0: tuple[torch.Tensor, ...],
                          n_steps: int, loss_fn: Callable,
                          wrt: Sequence[torch.Tensor], n_segments: int,
                          *shared: torch.Tensor):
    """Gradient of ``loss_fn(final_state)`` after a segmented rollout.

    Returns ``(loss, grads)`` with grads aligned to ``wrt``.  ``n_segments=1``
    degenerates to the plain full-tape backward.
    """
    final = run_segmented(step_fn, state0, n_steps, n_segments, *shared)
    loss = loss_fn(*final)
    grads = torch.autograd.grad(loss, list(wrt), allow_unused=True,
                                materialize_grads=True)
    return loss.detach(), grads


# --------------------------------------------------------------------------
# saved-tensor accounting
# --------------------------------------------------------------------------

class _Slot:
    __slots__ = ("t", "__weakref__")

    def __init__(self, t):
        self.t = t


class SavedTensorMeter:
    """Measures live bytes held by autograd's saved tensors.

    Every tensor the graph saves is wrapped in a slot whose lifetime matches
    the saved reference; a finalizer decrements the running total when the
    slot is released, so ``peak`` is the high-water mark of saved-tensor
    memory during the measured region.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0
        self._ctx = None

    def _pack(self, t: torch.Tensor):
        nbytes = t.numel() * t.element_size()
        self.live += nbytes
        self.peak = max(self.peak, self.live)
        slot = _Slot(t)
        weakref.finalize(slot, self._release, nbytes)
        return slot

    def _release(self, nbytes: int):
        self.live -= nbytes

    @staticmethod
    def _unpack(slot: _Slot):
        return slot.t

    def __enter__(self):
        self._ctx = torch.autograd.graph.saved_tensors_hooks(self._pack, self._unpack)
        self._ctx.__enter__()
        return self

    def __exit__(self, *exc):
        return self._ctx.__exit__(*exc)
