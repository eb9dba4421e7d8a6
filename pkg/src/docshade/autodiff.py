"""Minimal reverse-mode automatic differentiation on float32 numpy buffers.

A Tensor wraps a value array plus a gradient accumulator; each operation
records a closure that propagates adjoints to its parents. backward() runs
the closures in reverse topological order. Scalar reductions accumulate in
float64 internally to keep long sums stable, then store float32.

Only the primitives the networks and losses need are provided: elementwise
arithmetic, basic slicing, channel concat, 3x3 same-padding convolution,
2x2 average pooling, 2x nearest upsampling, leaky ReLU, sigmoid, softplus
and mean/sum reductions. Network activations use the NCHW layout.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteDetected, ShapeMismatch

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (validation / inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        # production dtype is float32; float64 is allowed so that the
        # finite-difference instruments can evaluate in wide precision
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32, copy=False)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- graph plumbing -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse pass from a scalar node; accumulates grads on leaves."""
        if self.data.size != 1:
            raise ShapeMismatch("backward() starts from a scalar")
        if not np.isfinite(self.data).all():
            raise NonFiniteDetected("non-finite loss value")
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return narrow(self, idx)

    def abs(self):
        return absolute(self)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _make(data, parents, backward_fn) -> Tensor:
    """Create a result node; records the tape only when a parent needs grads."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn(out)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(out):
        def fn(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))
        return fn
    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(out):
        def fn(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))
        return fn
    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(out):
        def fn(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))
        return fn
    return _make(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(out):
        def fn(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        return fn
    return _make(a.data / b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(out):
        def fn(g):
            a._accumulate(-g)
        return fn
    return _make(-a.data, (a,), bwd)


def absolute(a: Tensor) -> Tensor:
    def bwd(out):
        sign = np.sign(a.data)

        def fn(g):
            a._accumulate(g * sign)
        return fn
    return _make(np.abs(a.data), (a,), bwd)


def maximum_scalar(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    lo32 = np.float32(lo)

    def bwd(out):
        live = (a.data > lo32).astype(np.float32)

        def fn(g):
            a._accumulate(g * live)
        return fn
    return _make(np.maximum(a.data, lo32), (a,), bwd)


def narrow(a: Tensor, idx) -> Tensor:
    """Basic slicing; the adjoint scatters into a zero buffer."""
    def bwd(out):
        def fn(g):
            buf = np.zeros_like(a.data)
            buf[idx] = g
            a._accumulate(buf)
        return fn
    return _make(a.data[idx], (a,), bwd)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(out):
        def fn(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t._accumulate(piece)
        return fn
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    # accumulate in float64, store in the input's dtype
    val = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    val = np.asarray(val).astype(a.data.dtype)

    def bwd(out):
        def fn(g):
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy())
        return fn
    return _make(val, (a,), bwd)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    val = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    val = np.asarray(val).astype(a.data.dtype)
    inv = np.float32(1.0 / count)

    def bwd(out):
        def fn(g):
            gg = np.asarray(g) * inv
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy())
        return fn
    return _make(val, (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    s32 = np.float32(slope)

    def bwd(out):
        factor = np.where(a.data > 0, np.float32(1.0), s32)

        def fn(g):
            a._accumulate(g * factor)
        return fn
    return _make(np.where(a.data > 0, a.data, a.data * s32), (a,), bwd)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid(a: Tensor) -> Tensor:
    val = _stable_sigmoid(a.data)

    def bwd(out):
        def fn(g):
            a._accumulate(g * val * (1.0 - val))
        return fn
    return _make(val, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    val = np.logaddexp(0.0, a.data).astype(a.data.dtype)

    def bwd(out):
        sig = _stable_sigmoid(a.data)

        def fn(g):
            a._accumulate(g * sig)
        return fn
    return _make(val, (a,), bwd)


# -- spatial primitives (NCHW) ------------------------------------------------

def _corr3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padding 3x3 correlation: (N,C,H,W) x (O,C,3,3) -> (N,O,H,W)."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return np.einsum("nchwuv,ocuv->nohw", win, w, optimize=True)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"conv2d expects NCHW input, got {x.data.shape}")
    if w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise ShapeMismatch(f"conv2d expects (O,C,3,3) weights, got {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch(
            f"input channels {x.data.shape[1]} != weight channels {w.data.shape[1]}")
    if b.data.shape != (w.data.shape[0],):
        raise ShapeMismatch(f"bias shape {b.data.shape} != ({w.data.shape[0]},)")
    val = _corr3x3(x.data, w.data) + b.data[None, :, None, None]

    def bwd(out):
        def fn(g):
            if x.requires_grad:
                wt = np.ascontiguousarray(
                    w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
                x._accumulate(_corr3x3(g, wt))
            if w.requires_grad:
                xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
                win = np.lib.stride_tricks.sliding_window_view(
                    xp, (3, 3), axis=(2, 3))
                w._accumulate(np.einsum("nohw,nchwuv->ocuv", g, win,
                                        optimize=True))
            if b.requires_grad:
                b._accumulate(g.sum(axis=(0, 2, 3)))
        return fn
    return _make(val, (x, w, b), bwd)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    val = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(out):
        def fn(g):
            up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
            x._accumulate(up * np.float32(0.25))
        return fn
    return _make(val, (x,), bwd)


def upsample2(x: Tensor) -> Tensor:
    """2x nearest-neighbor upsampling."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"upsample2 expects NCHW input, got {x.data.shape}")
    val = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(out):
        def fn(g):
            n, c, h2, w2 = g.shape
            x._accumulate(g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))
        return fn
    return _make(val, (x,), bwd)


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """One Adam update over a name->Tensor parameter dict, in place.

    Parameters with no accumulated gradient are left untouched. All
    gradients are validated before any state changes, so a non-finite step
    leaves parameters and moments exactly as they were.
    """
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteDetected(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = betas
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(np.float32)


def zero_grads(params: dict):
    for p in params.values():
        p.grad = None


# -- finite-difference checking ------------------------------------------------

def fd_gradcheck(fn, tensors, h: float = 1e-3, tol: float = 1e-2) -> float:
    """Element-wise central-difference check of fn's gradient.

    fn maps the tensor list to a scalar Tensor. The analytic gradient comes
    from the float32 tape under test; the difference quotient is evaluated
    in float64 so the comparison measures the tape, not rounding noise.
    Returns the worst relative error over all elements of all inputs;
    raises AssertionError above tol.
    """
    out = fn(*tensors)
    for t in tensors:
        t.grad = None
    out.backward()
    analytic = {id(t): (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for t in tensors}
    saved = {id(t): t.data for t in tensors}
    for t in tensors:
        t.data = t.data.astype(np.float64)
    worst = 0.0
    try:
        for t in tensors:
            if not t.requires_grad:
                continue
            flat = t.data.reshape(-1)
            an_flat = analytic[id(t)].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                with no_grad():
                    fp = fn(*tensors).item()
                flat[i] = orig - h
                with no_grad():
                    fm = fn(*tensors).item()
                flat[i] = orig
                fd = (fp - fm) / (2.0 * h)
                an = float(an_flat[i])
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-3)
                worst = max(worst, rel)
    finally:
        for t in tensors:
            t.data = saved[id(t)]
    if worst > tol:
        raise AssertionError(f"gradient check failed: rel err {worst:.4g} > {tol}")
    return worst


def directional_gradcheck(fn, params: dict, rng, n_dirs: int = 10,
                          h: float = 1e-3, tol: float = 2e-2) -> float:
    """Directional-derivative check of a scalar objective over a param dict.

    Compares the float32 tape's <grad, d> against a float64 symmetric
    difference quotient along n_dirs random unit directions. Returns the
    worst relative error; raises AssertionError above tol.
    """
    zero_grads(params)
    base = fn()
    base.backward()
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
             for k, p in params.items()}
    saved = {k: p.data for k, p in params.items()}
    worst = 0.0
    try:
        for _ in range(n_dirs):
            direction = {k: rng.standard_normal(p.data.shape)
                         for k, p in params.items()}
            norm = np.sqrt(sum(float((d * d).sum()) for d in direction.values()))
            analytic = sum(float(np.sum(grads[k].astype(np.float64)
                                        * direction[k]))
                           for k in params) / norm
            for k, p in params.items():
                p.data = saved[k].astype(np.float64) + (h / norm) * direction[k]
            with no_grad():
                fp = fn().item()
            for k, p in params.items():
                p.data = saved[k].astype(np.float64) - (h / norm) * direction[k]
            with no_grad():
                fm = fn().item()
            fd = (fp - fm) / (2.0 * h)
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-4)
            worst = max(worst, rel)
    finally:
        for k, p in params.items():
            p.data = saved[k]
    if worst > tol:
        raise AssertionError(f"directional check failed: rel err {worst:.4g} > {tol}")
    return worst
