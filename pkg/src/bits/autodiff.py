"""Small reverse-mode differentiation engine over numpy arrays.

Only the primitives needed by the backbones, the projection head and the
losses are provided. Every primitive records a closure that maps the output
gradient to input gradients (a vector-Jacobian product).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from numpy.lib.stride_tricks import sliding_window_view

NORM_JITTER = 1e-12
CHOLESKY_JITTER = 1e-6

# Flipped by the verification harness to prove the gradient checks can fail.
_LOGDET_GRAD_SIGN = 1.0

_state = threading.local()


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A dense array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op or 'leaf'})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _lift(*xs):
    ts = [x if isinstance(x, Tensor) else None for x in xs]
    dtype = next((t.dtype for t in ts if t is not None), np.float32)
    return [t if t is not None else Tensor(np.asarray(x, dtype=dtype)) for t, x in zip(ts, xs)]


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match value shape {t.shape}")
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The graph is released afterwards, so a second call on the same loss is an
    error: run the forward pass again instead.
    """
    if loss.data.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise BackwardError("backward already ran on this graph; recompute the forward pass")
    loss._consumed = True
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in topo:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            if node is not loss:
                node.grad = None


# --- element-wise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = _lift(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)

    def bw(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bw, "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        _accum(x, g * mask)

    return _make(x.data * mask, (x,), bw, "relu")


_GELU_K = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    k = v.dtype.type(_GELU_K)
    c = v.dtype.type(0.044715)
    vv = v * v
    t = np.tanh(k * v * (1 + c * vv))
    half = v.dtype.type(0.5)
    out = half * v * (1 + t)

    def bw(g):
        dt = (1 - t * t) * k * (1 + 3 * c * vv)
        _accum(x, g * (half * (1 + t) + half * v * dt))

    return _make(out, (x,), bw, "gelu")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1 / (1 + e), e / (1 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)

    def bw(g):
        _accum(x, g * s * (1 - s))

    return _make(s, (x,), bw, "sigmoid")


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Row-wise x / (||x|| + 1e-12)."""
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a 2-D value, got {x.shape}")
    v = x.data
    n = np.sqrt((v * v).sum(axis=1, keepdims=True))
    d = n + v.dtype.type(NORM_JITTER)
    y = v / d

    def bw(g):
        safe_n = np.where(n > 0, n, 1)
        proj = (g * v).sum(axis=1, keepdims=True)
        _accum(x, g / d - v * proj / (safe_n * d * d))

    return _make(y, (x,), bw, "l2norm")


# --- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D value, got {x.shape}")

    def bw(g):
        _accum(x, g.T)

    return _make(x.data.T, (x,), bw, "transpose")


def covariance(x: Tensor) -> Tensor:
    """Biased (1/N) covariance of the rows of an N x B value."""
    if x.ndim != 2:
        raise ShapeError(f"covariance expects a 2-D value, got {x.shape}")
    n = x.shape[0]
    # Shifting by the first row first makes identical rows center to exact zeros.
    xs = x.data - x.data[:1]
    xc = xs - xs.mean(axis=0, keepdims=True)
    cov = xc.T @ xc / x.dtype.type(n)

    def bw(g):
        _accum(x, xc @ (g + g.T) / x.dtype.type(n))

    return _make(cov, (x,), bw, "cov")


def half_logdet_identity_plus(a: Tensor, c: float) -> Tensor:
    """0.5 * log det(I + c*A) for symmetric PSD A, via Cholesky.

    Backward uses the closed form d/dA = (c/2) (I + cA)^-1.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"logdet expects a square matrix, got {a.shape}")
    k = a.shape[0]
    m = np.eye(k, dtype=np.float64) + c * a.data.astype(np.float64)
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        m = m + CHOLESKY_JITTER * np.eye(k)
        try:
            chol = np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("I + cA is not positive definite even after jitter") from None
    value = np.log(np.diag(chol)).sum()

    def bw(g):
        inv = scipy.linalg.cho_solve((chol, True), np.eye(k))
        inv = 0.5 * (inv + inv.T)
        _accum(a, _LOGDET_GRAD_SIGN * float(g) * 0.5 * c * inv)

    return _make(np.asarray(value, dtype=a.dtype), (a,), bw, "logdet")


def logdet_regularized_cov(normalized_logits: Tensor, eps: float, scale_dim: float | None = None) -> Tensor:
    """Coding rate 0.5 * log det(I + (d/eps^2) Cov(z)) of row-normalized logits.

    ``scale_dim`` is the constant d; it defaults to the logit width.
    """
    n, width = normalized_logits.shape
    if n < 2:
        raise ShapeError("coding rate needs at least 2 rows")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = width if scale_dim is None else scale_dim
    return half_logdet_identity_plus(covariance(normalized_logits), d / eps**2)


# --- losses -----------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Element-wise max(a,0) - a*z + log(1 + exp(-|a|)); targets carry no gradient."""
    z = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if z.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs targets {z.shape}")
    a = logits.data
    z = z.astype(a.dtype)
    loss = np.maximum(a, 0) - a * z + np.log1p(np.exp(-np.abs(a)))

    def bw(g):
        _accum(logits, g * (stable_sigmoid(a) - z))

    return _make(loss, (logits,), bw, "bce")


# --- reductions and reshaping -----------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(axis=ax, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    return scale(sum_(x, ax, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        _accum(x, g.reshape(x.shape))

    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), bw, "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        for t, part in zip(xs, np.split(g, sizes, axis=axis)):
            _accum(t, part)

    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}") from None
    return _make(out, xs, bw, "concat")


# --- convolution and pooling (NCHW) -----------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    n, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2:4]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        if w.requires_grad:
            _accum(w, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gw = np.tensordot(g, w.data, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
            gw = gw.transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gw[..., i, j]
            _accum(x, dxp[:, :, p : p + h, p : p + wd])

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv2d")


def avg_pool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2 needs even spatial size, got {x.shape}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * x.dtype.type(0.25)
        _accum(x, up)

    return _make(out, (x,), bw, "avgpool")


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


# --- verification -----------------------------------------------------------


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    num_elements_checked: int
    step_size: float

    def passed(self, rel_tol: float) -> bool:
        return self.max_rel_err <= rel_tol


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float | None = None,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    The analytic pass runs in the dtype of ``inputs``; the finite differences
    are always evaluated in float64 at the same point. The relative error of
    an input array is ``max|a - n| / max(|a|, |n|)`` over its checked
    elements, i.e. errors are measured against the magnitude of that array's
    gradient; the report holds the worst array.
    """
    inputs = [np.asarray(x) for x in inputs]
    dtype = inputs[0].dtype
    if step is None:
        step = 1e-3 if dtype == np.float32 else 1e-5
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    loss = fn(*leaves)
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]

    ref = [x.astype(np.float64) for x in inputs]
    candidates = [(i, j) for i, x in enumerate(ref) for j in range(x.size)]
    if max_elements is not None and len(candidates) > max_elements:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(candidates), size=max_elements, replace=False)
        candidates = [candidates[k] for k in np.sort(pick)]

    owner = np.array([i for i, _ in candidates])
    numeric = np.empty(len(candidates))
    got = np.empty(len(candidates))
    with no_grad():
        for k, (i, j) in enumerate(candidates):
            flat = ref[i].reshape(-1)
            orig = flat[j]
            flat[j] = orig + step
            fp = float(fn(*[Tensor(r) for r in ref]).data)
            flat[j] = orig - step
            fm = float(fn(*[Tensor(r) for r in ref]).data)
            flat[j] = orig
            numeric[k] = (fp - fm) / (2 * step)
            got[k] = float(analytic[i].reshape(-1)[j])

    abs_err = np.abs(got - numeric)
    rel = 0.0
    for i in np.unique(owner):
        sel = owner == i
        scale_i = max(np.abs(got[sel]).max(), np.abs(numeric[sel]).max())
        err_i = abs_err[sel].max()
        if err_i > 0:
            rel = max(rel, err_i / scale_i if scale_i > 0 else np.inf)
    return GradCheckReport(
        max_abs_err=float(abs_err.max()),
        max_rel_err=float(rel),
        num_elements_checked=len(candidates),
        step_size=step,
    )
