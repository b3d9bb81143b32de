"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operations the segmentation model needs are provided. Every op
records its parents and a closure mapping the output gradient to parent
gradients; :func:`backward` replays those closures in reverse creation order.

Broadcasting is deliberately restricted: binary ops accept equal shapes,
python scalars, or a trailing-axis bias (``b.shape == a.shape[-1:]``).
Anything else raises :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "tensor",
    "get_default_dtype",
    "set_default_dtype",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "tsum",
    "mean",
    "log",
    "relu",
    "gelu",
    "layer_norm",
    "softmax_rows",
    "log_softmax_rows",
    "conv3d",
    "conv_transpose3d",
    "conv_output_size",
    "conv_transpose_output_size",
    "backward",
    "grad_check",
    "GradCheckReport",
]

_node_ids = itertools.count()
_state = threading.local()
_default_dtype = np.float32


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A numpy array with optional gradient tracking.

    ``data`` is never mutated by ops; only optimizers and checkpoint loaders
    write to leaf tensors in place.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _default_dtype
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data, parents, backward_fn):
    req = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, dtype=data.dtype)
    if req:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise


def _binary_kind(a, b):
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1:] == b.shape:
        return "bias"
    if b.ndim == 0:
        return "scalar"
    raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g, kind, shape):
    if kind == "same":
        return g
    if kind == "bias":
        return g.reshape(-1, shape[0]).sum(axis=0)
    return np.asarray(g.sum(), dtype=g.dtype)


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    kind = _binary_kind(a, b)

    def _bw(g):
        return g, _reduce_to(g, kind, b.shape)

    return _make(a.data + b.data, (a, b), _bw)


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    kind = _binary_kind(a, b)

    def _bw(g):
        return g, -_reduce_to(g, kind, b.shape)

    return _make(a.data - b.data, (a, b), _bw)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    kind = _binary_kind(a, b)

    def _bw(g):
        ga = g * b.data if a.requires_grad else None
        gb = _reduce_to(g * a.data, kind, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), _bw)


def div(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    kind = _binary_kind(a, b)
    out = a.data / b.data

    def _bw(g):
        ga = g / b.data if a.requires_grad else None
        gb = _reduce_to(-g * out / b.data, kind, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), _bw)


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out.astype(x.dtype, copy=False), (a,), _bw)


# ---------------------------------------------------------------------------
# shape ops


def matmul(a, b):
    """Matrix product of ``m x k`` and ``k x n`` operands.

    Stacks of matrices with identical leading extents are also accepted
    (used by multi-head attention); leading extents are never broadcast.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), _bw)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inverse),))


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, index):
    out = a.data[index]

    def _bw(g):
        full = np.zeros_like(a.data)
        if _has_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), _bw)


def _has_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise DimensionError(f"concat shape mismatch along axis {axis}: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _bw(g):
        grads = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, _bw)


def tsum(a, axis=None):
    out = a.data.sum(axis=axis)

    def _bw(g):
        if axis is None:
            return (np.full(a.shape, g, dtype=a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), _bw)


def mean(a, axis=None):
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / count)


# ---------------------------------------------------------------------------
# normalisation and attention helpers


def layer_norm(x, gamma, beta, eps=1e-5):
    """Row-wise layer normalisation over the last axis, then ``gamma * xhat + beta``."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm feature mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def _bw(g):
        gx = gg = gb = None
        flat_g = g.reshape(-1, d)
        if gamma.requires_grad:
            gg = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        if beta.requires_grad:
            gb = flat_g.sum(axis=0)
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), _bw)


def softmax_rows(x):
    """Softmax over the last axis, stabilised by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), _bw)


def log_softmax_rows(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def _bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), _bw)


# ---------------------------------------------------------------------------
# 3D convolutions; volumes are (channels, X, Y, Z) without a batch axis


def conv_output_size(n, kernel, stride=1, padding=0):
    """Output extent of a convolution: floor((n + 2*padding - kernel) / stride) + 1."""
    return (n + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(n, kernel, stride=1):
    """Output extent of a transposed convolution (no padding): (n - 1) * stride + kernel."""
    return (n - 1) * stride + kernel


def _check_kernel(w, cin_axis, x):
    if w.ndim != 5 or w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4]:
        raise DimensionError(f"expected a cubic 5-d kernel, got {w.shape}")
    if x.ndim != 4:
        raise DimensionError(f"expected a (channels, X, Y, Z) volume, got {x.shape}")
    if w.shape[cin_axis] != x.shape[0]:
        raise DimensionError(f"kernel {w.shape} expects {w.shape[cin_axis]} input channels, volume {x.shape} has {x.shape[0]}")


def conv3d(x, w, b=None, stride=1, padding=0):
    """3D cross-correlation.

    x: (Cin, X, Y, Z); w: (Cout, Cin, k, k, k); b: (Cout,) or None.
    Each output extent is ``conv_output_size(n, k, stride, padding)``.
    """
    _check_kernel(w, 1, x)
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride {stride} / padding {padding}")
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"bias {b.shape} does not match {cout} output channels")
    out_sz = tuple(conv_output_size(n, k, stride, padding) for n in x.shape[1:])
    if min(out_sz) < 1:
        raise DimensionError(f"kernel {k} with padding {padding} does not fit volume {x.shape}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    win = win[:, : out_sz[0], : out_sz[1], : out_sz[2]]
    nvox = out_sz[0] * out_sz[1] * out_sz[2]
    # columns laid out (Cin*k^3, voxels) so every tap slice stays contiguous
    cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(cin * k**3, nvox)
    wmat = w.data.reshape(cout, cin * k**3)
    out = (wmat @ cols).reshape((cout,) + out_sz)
    if b is not None:
        out = out + b.data[:, None, None, None]

    def _bw(g):
        gmat = g.reshape(cout, nvox)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gmat @ cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gmat.sum(axis=1)
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape((cin, k, k, k) + out_sz)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            s = stride
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        gxp[:, i : i + s * out_sz[0] : s, j : j + s * out_sz[1] : s, l : l + s * out_sz[2] : s] += dcols[:, i, j, l]
            gx = gxp[:, p : p + x.shape[1], p : p + x.shape[2], p : p + x.shape[3]] if p else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out, dtype=x.dtype), parents, _bw)


def conv_transpose3d(x, w, b=None, stride=2):
    """3D transposed convolution without padding.

    x: (Cin, X, Y, Z); w: (Cin, Cout, k, k, k); b: (Cout,) or None.
    Each output extent is ``conv_transpose_output_size(n, k, stride)``.
    """
    _check_kernel(w, 0, x)
    if stride < 1:
        raise DimensionError(f"invalid stride {stride}")
    cin, cout, k = w.shape[0], w.shape[1], w.shape[2]
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"bias {b.shape} does not match {cout} output channels")
    in_sz = x.shape[1:]
    nvox = in_sz[0] * in_sz[1] * in_sz[2]
    out_sz = tuple(conv_transpose_output_size(n, k, stride) for n in in_sz)
    xm = x.data.reshape(cin, nvox)
    wmat = w.data.reshape(cin, cout * k**3)
    t = (wmat.T @ xm).reshape(cout, k, k, k, *in_sz)
    s = stride
    if k == s:
        # non-overlapping taps: pure interleave
        out = t.transpose(0, 4, 1, 5, 2, 6, 3).reshape((cout,) + out_sz)
    else:
        out = np.zeros((cout,) + out_sz, dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    out[:, i : i + s * in_sz[0] : s, j : j + s * in_sz[1] : s, l : l + s * in_sz[2] : s] += t[:, i, j, l]
    if b is not None:
        out = out + b.data[:, None, None, None]

    def _bw(g):
        if k == s:
            gt = g.reshape(cout, in_sz[0], k, in_sz[1], k, in_sz[2], k).transpose(0, 2, 4, 6, 1, 3, 5)
        else:
            gt = np.empty((cout, k, k, k) + in_sz, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        gt[:, i, j, l] = g[:, i : i + s * in_sz[0] : s, j : j + s * in_sz[1] : s, l : l + s * in_sz[2] : s]
        gt = gt.reshape(cout * k**3, nvox)
        gx = (wmat @ gt).reshape(x.shape) if x.requires_grad else None
        gw = (xm @ gt.T).reshape(w.shape) if w.requires_grad else None
        gb = g.reshape(cout, -1).sum(axis=1) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out, dtype=x.dtype), parents, _bw)


# ---------------------------------------------------------------------------
# reverse pass


def backward(root):
    """Populate ``.grad`` on every leaf reachable from the scalar ``root``.

    Nodes are visited in reverse creation order, each exactly once. Leaves
    with ``requires_grad=False`` are never touched.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root does not depend on any tensor requiring grad")

    nodes = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads = {root._id: np.ones(root.shape, dtype=root.dtype)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self):
        return self.worst < self.tol


def grad_check(f, params, h=1e-5, tol=1e-4, max_coords=None, rng=None, floor=1e-6):
    """Compare autodiff gradients with central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from
    ``params`` (a Tensor, or a mapping name -> Tensor), which are perturbed
    in place. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. With ``max_coords`` only that many
    randomly chosen coordinates are probed per parameter.
    """
    if isinstance(params, Tensor):
        params = {params.name or "theta": params}
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"grad_check requires float64 parameters; {name} is {p.dtype}")
    first, second = f(), f()
    if first.size != 1:
        raise ContractError("grad_check target must return a scalar")
    if first.data.tobytes() != second.data.tobytes():
        raise ContractError("grad_check target is not deterministic")
    rng = np.random.default_rng(0) if rng is None else rng

    for p in params.values():
        p.requires_grad = True
        p.grad = None
    backward(f())
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report.max_rel_error[name] = worst
        report.checked[name] = len(coords)
    return report
