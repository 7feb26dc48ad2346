"""Dense float64 tensors with reverse-mode autodiff and an Adam optimizer.

Everything is double precision and deterministic: same inputs give
bitwise-same outputs. Any op that produces a NaN/Inf raises immediately
instead of letting it propagate into downstream probes.
"""

from __future__ import annotations

import ctypes
import sys
import threading
from dataclasses import dataclass, field

import numpy as np

# Large tensors churn through the allocator every step; stop glibc from
# returning freed buffers to the kernel so reuse skips the page-fault storm.
if sys.platform.startswith("linux"):
    try:
        _libc = ctypes.CDLL("libc.so.6")
        _libc.mallopt(-1, 2 ** 31 - 1)  # M_TRIM_THRESHOLD
        _libc.mallopt(-3, 2 ** 31 - 1)  # M_MMAP_THRESHOLD
    except OSError:  # non-glibc: harmless to skip
        pass


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GradError(RuntimeError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph construction (per thread)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _finite(name: str, arr: np.ndarray) -> np.ndarray:
    # single-pass check: any NaN/Inf in arr drives the sum non-finite, and
    # activations here are far too small for a finite sum to overflow
    if not np.isfinite(arr.sum()):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{name} produced non-finite values")
    return arr


class Tensor:
    """A float64 array plus an optional gradient and backward closure.

    Leaves created with requires_grad=True are trainable parameters;
    everything else is an intermediate node or a constant.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._backward_done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accum_grad(self, g: np.ndarray, own: bool = False) -> None:
        """Add g into this node's grad. own=True promises g is a freshly
        allocated array no one else references, so it can be adopted."""
        if self.grad is None:
            self.grad = g if own else g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar; populates .grad on the graph."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        if self._backward_done:
            raise GradError("backward() already called on this node; rebuild the graph "
                            "or zero grads before accumulating again")
        self._backward_done = True
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()
                # interior node: its grad and closure are dead now; free them
                # so peak memory tracks the frontier, not the whole graph
                node._backward = None
                node._parents = ()
                if node is not self:
                    node.grad = None

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, name: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(_finite(name, data))
    if _grad_enabled() and any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = backward
        out.requires_grad = True
    return out


def _needs(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


# ---------------------------------------------------------------------------
# elementwise / broadcast ops


def add(a: Tensor, b) -> Tensor:
    """a + b. b may be a scalar, a same-shaped tensor, or a trailing-shape
    tensor (bias over the last axes); no other broadcasting is supported."""
    if not isinstance(b, Tensor):
        bval = float(b)
        out_data = a.data + bval

        def back_scalar():
            if _needs(a):
                a.accum_grad(out.grad)

        out = _make(out_data, "add", (a,), back_scalar)
        return out
    lead = a.data.ndim - b.data.ndim
    if lead < 0 or (a.shape != b.shape and b.shape != a.shape[lead:]):
        raise ShapeError(f"add: incompatible shapes {a.shape} vs {b.shape}")

    def back():
        # a may adopt the buffer (safe: out fired, nothing reads out.grad
        # again); b must copy since it could be handed the same buffer
        if _needs(a):
            a.accum_grad(out.grad, own=True)
        if _needs(b):
            if lead:
                b.accum_grad(out.grad.sum(axis=tuple(range(lead))), own=True)
            else:
                b.accum_grad(out.grad)

    out = _make(a.data + b.data, "add", (a, b), back)
    return out


def mul(a: Tensor, b) -> Tensor:
    """a * b for a same-shaped tensor or a python scalar."""
    if not isinstance(b, Tensor):
        bval = float(b)

        def back_scalar():
            if _needs(a):
                a.accum_grad(out.grad * bval, own=True)

        out = _make(a.data * bval, "mul", (a,), back_scalar)
        return out
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def back():
        if _needs(a):
            a.accum_grad(out.grad * b.data, own=True)
        if _needs(b):
            b.accum_grad(out.grad * a.data, own=True)

    out = _make(a.data * b.data, "mul", (a, b), back)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-d x 2-d, or stacked n-d x n-d with equal batch dims."""
    if a.data.ndim == 2 and b.data.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")

        def back2d():
            if _needs(a):
                a.accum_grad(out.grad @ b.data.T, own=True)
            if _needs(b):
                b.accum_grad(a.data.T @ out.grad, own=True)

        out = _make(a.data @ b.data, "matmul", (a, b), back2d)
        return out
    if a.data.ndim == b.data.ndim and a.data.ndim >= 3:
        if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: batched dims {a.shape} x {b.shape}")

        def backnd():
            if _needs(a):
                a.accum_grad(np.matmul(out.grad, np.swapaxes(b.data, -1, -2)), own=True)
            if _needs(b):
                b.accum_grad(np.matmul(np.swapaxes(a.data, -1, -2), out.grad), own=True)

        out = _make(np.matmul(a.data, b.data), "matmul", (a, b), backnd)
        return out
    raise ShapeError(f"matmul: unsupported ranks {a.data.ndim} and {b.data.ndim}")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def back():
        if _needs(a):
            a.accum_grad(out.grad.reshape(a.shape), own=True)

    out = _make(a.data.reshape(shape), "reshape", (a,), back)
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def back():
        if _needs(a):
            a.accum_grad(out.grad.transpose(inv), own=True)

    out = _make(a.data.transpose(axes), "transpose", (a,), back)
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from table (V x d) by an integer id array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table with {table.shape[0]} rows")

    def back():
        if _needs(table):
            g = np.zeros_like(table.data)
            np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.shape[1]))
            table.accum_grad(g, own=True)

    out = _make(table.data[ids], "embedding", (table,), back)
    return out


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def back():
        if _needs(a):
            a.accum_grad(np.full_like(a.data, float(out.grad)), own=True)

    out = _make(np.array(a.data.sum()), "sum", (a,), back)
    return out


# ---------------------------------------------------------------------------
# fused neural-net ops (hand-derived gradients, all finite-difference tested)


def softmax(x: Tensor, axis: int = -1, bias: np.ndarray | None = None) -> Tensor:
    """Max-stabilized softmax along one axis.

    bias is an optional constant additive term (e.g. a causal mask) folded
    in before normalization; it carries no gradient.
    """
    _finite("softmax input", x.data)
    z = x.data if bias is None else x.data + bias
    shifted = z - z.max(axis=axis, keepdims=True)
    y = np.exp(shifted, out=shifted)
    y /= y.sum(axis=axis, keepdims=True)

    def back():
        if _needs(x):
            g = out.grad
            dot = (g * y).sum(axis=axis, keepdims=True)
            x.accum_grad(y * (g - dot), own=True)

    out = _make(y, "softmax", (x,), back)
    return out


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """RMS normalization over the last axis with a learned gain vector."""
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError(f"rms_norm: gain shape {gain.shape} vs feature dim {d}")
    r = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    u = x.data / r
    y = u * gain.data
    u = None  # recomputed in back(); keeping it would pin a full-size buffer

    def back():
        g = out.grad
        if _needs(gain):
            gain.accum_grad((g * (x.data / r)).reshape(-1, d).sum(axis=0), own=True)
        if _needs(x):
            h = g * gain.data
            dot = (h * x.data).sum(axis=-1, keepdims=True)
            x.accum_grad(h / r - x.data * dot / (d * r ** 3), own=True)

    out = _make(y, "rms_norm", (x, gain), back)
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    t = np.tanh(_GELU_C * (x.data + _GELU_A * (x.data * x.data * x.data)))
    y = 0.5 * x.data * (1.0 + t)

    def back():
        if _needs(x):
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * (x.data * x.data))
            dy = 0.5 * (1.0 + t) + (0.5 * x.data) * ((1.0 - t * t) * dinner)
            x.accum_grad(out.grad * dy, own=True)

    out = _make(y, "gelu", (x,), back)
    return out


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Pairwise rotation of the last axis by per-position angles.

    x is (..., T, dh) with even dh; cos/sin are (T, dh//2) constants.
    """
    if x.shape[-1] % 2:
        raise ShapeError("rotary: head dim must be even")
    x0 = x.data[..., 0::2]
    x1 = x.data[..., 1::2]
    y = np.empty_like(x.data)
    y[..., 0::2] = x0 * cos - x1 * sin
    y[..., 1::2] = x0 * sin + x1 * cos

    def back():
        if _needs(x):
            g0 = out.grad[..., 0::2]
            g1 = out.grad[..., 1::2]
            gx = np.empty_like(x.data)
            gx[..., 0::2] = g0 * cos + g1 * sin
            gx[..., 1::2] = -g0 * sin + g1 * cos
            x.accum_grad(gx, own=True)

    out = _make(y, "rotary", (x,), back)
    return out


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Plain-numpy stable log-softmax over the last axis (no autograd)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over masked positions.

    logits is (N, V); targets (N,) integer ids; mask (N,) per-position
    weights. Raises if every weight is zero.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    n, v = logits.shape
    if targets.shape != (n,) or mask.shape != (n,):
        raise ShapeError("cross_entropy: targets/mask must be (N,) matching logits rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(f"cross_entropy: target id outside [0,{v})")
    total = mask.sum()
    if total <= 0.0:
        raise ShapeError("cross_entropy: mask selects no positions")
    logp = log_softmax_rows(logits.data)
    picked = logp[np.arange(n), targets]
    loss = -(picked * mask).sum() / total

    def back():
        if _needs(logits):
            p = np.exp(logp)
            p[np.arange(n), targets] -= 1.0
            p *= (mask * (float(out.grad) / total))[:, None]
            logits.accum_grad(p, own=True)

    out = _make(np.array(loss), "cross_entropy", (logits,), back)
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Optimizer state for one parameter list (order must stay fixed)."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: list[Tensor], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(params: list[Tensor], state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update, in place. Every param needs a grad."""
    if len(params) != len(state.m):
        raise GradError("adam_step: param list does not match optimizer state")
    step_lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradError(f"adam_step: parameter {i} has no gradient")
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        mhat = state.m[i] / (1 - b1 ** t)
        vhat = state.v[i] / (1 - b2 ** t)
        p.data -= step_lr * mhat / (np.sqrt(vhat) + state.eps)
        _finite("adam_step", p.data)


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.zero_grad()
