"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: graphs are built eagerly during the
forward pass and freed after backward, and the operation set covers
exactly what the estimation head needs (contractions, softmax, atan2,
smooth L1, cross entropy, strided convolution, and structural ops).
All arithmetic is 64-bit; tensors with no active graph are plain
read-only value holders and safe to share.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

ATAN2_EPS = 1e-12

_node_ids = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    """Shapes violate an operation's contract."""


class DegenerateDirectionError(ValueError):
    """atan2 input too close to the origin to define a direction."""


class NonFiniteError(ArithmeticError):
    """A value that must be finite is NaN or Inf."""


class GraphError(RuntimeError):
    """Backward invoked on an unsuitable graph (e.g. a non-scalar root)."""


class no_grad:
    """Context manager that disables graph construction (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-d float64 array, optionally a node in a differentiation graph.

    Leaves are created directly; interior nodes are created by the ops in
    this module and carry a vector-Jacobian closure used by ``backward``.
    """

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_node_ids)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def is_leaf(self):
        return self._vjp is None

    def backward(self):
        return backward(self)

    def __repr__(self):
        tag = "leaf" if self.is_leaf() else "node"
        return f"Tensor({tag}, shape={self.data.shape}, id={self.node_id})"

    # Operator sugar; scalars and arrays are lifted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("tensor/tensor division is not provided; divide by a scalar")
        return mul(self, _lift(1.0 / float(other)))

    def __getitem__(self, idx):
        return getitem(self, idx)


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _needs_graph(parents):
    if not _grad_enabled:
        return False
    return any(p.requires_grad or p._vjp is not None for p in parents)


def _node(data, parents, vjp):
    out = Tensor(data)
    if _needs_graph(parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural primitives

def add(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), vjp)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), vjp)


def neg(a):
    a = _lift(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), vjp)


def scale(a, s):
    """Multiply by a python scalar constant."""
    a = _lift(a)
    s = float(s)
    return _node(a.data * s, (a,), lambda g: (g * s,))


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _node(out, (a,), vjp)


def mean(a):
    a = _lift(a)
    return scale(tsum(a), 1.0 / a.size)


def reshape(a, shape):
    a = _lift(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, idx):
    """Basic (integer/slice/tuple) indexing; each element selected at most once."""
    a = _lift(a)
    out = a.data[idx]

    def vjp(g):
        gp = np.zeros(a.shape)
        gp[idx] = g
        return (gp,)

    return _node(out, (a,), vjp)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), vjp)


def flip(a, axis):
    a = _lift(a)
    return _node(np.flip(a.data, axis=axis).copy(), (a,), lambda g: (np.flip(g, axis=axis).copy(),))


def take_wrap(a, indices, axis):
    """Select along ``axis`` with wraparound (indices taken modulo the extent)."""
    a = _lift(a)
    n = a.shape[axis]
    idx = np.mod(np.asarray(indices, dtype=np.intp), n)
    out = np.take(a.data, idx, axis=axis)
    slicer = (slice(None),) * axis

    def vjp(g):
        gp = np.zeros(a.shape)
        np.add.at(gp, slicer + (idx,), g)
        return (gp,)

    return _node(out, (a,), vjp)


def sliding_windows(a, axis, size):
    """Stack all contiguous windows of ``size`` along ``axis`` on a new axis 0."""
    a = _lift(a)
    n = a.shape[axis]
    if size < 1 or size > n:
        raise DimensionError(f"window size {size} does not fit extent {n}")
    count = n - size + 1
    head = (slice(None),) * axis
    out = np.stack([a.data[head + (slice(j, j + size),)] for j in range(count)], axis=0)

    def vjp(g):
        gp = np.zeros(a.shape)
        for j in range(count):
            gp[head + (slice(j, j + size),)] += g[j]
        return (gp,)

    return _node(out, (a,), vjp)


def sin(a):
    a = _lift(a)
    c = np.cos(a.data)
    return _node(np.sin(a.data), (a,), lambda g: (g * c,))


def cos(a):
    a = _lift(a)
    s = np.sin(a.data)
    return _node(np.cos(a.data), (a,), lambda g: (-g * s,))


def relu(a):
    a = _lift(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _node(np.maximum(a.data, 0.0), (a,), vjp)


# ---------------------------------------------------------------------------
# contractions

def tensordot(a, b, contracted_axes):
    """Contract ``a`` and ``b`` over the given (a_axis, b_axis) pairs.

    Output axes are the uncontracted axes of ``a`` followed by those of
    ``b``, both in original order.
    """
    a, b = _lift(a), _lift(b)
    pairs = [(int(i), int(j)) for i, j in contracted_axes]
    a_axes = [p[0] for p in pairs]
    b_axes = [p[1] for p in pairs]
    for i, j in pairs:
        if a.shape[i] != b.shape[j]:
            raise DimensionError(
                f"contracted extents differ: a.axis{i}={a.shape[i]} vs b.axis{j}={b.shape[j]}"
            )
    a_free = [ax for ax in range(a.ndim) if ax not in a_axes]
    b_free = [ax for ax in range(b.ndim) if ax not in b_axes]
    a_perm = a_free + a_axes
    b_perm = b_axes + b_free
    m = int(np.prod([a.shape[ax] for ax in a_free], dtype=np.int64))
    n = int(np.prod([b.shape[ax] for ax in b_free], dtype=np.int64))
    kk = int(np.prod([a.shape[ax] for ax in a_axes], dtype=np.int64))

    a2 = a.data.transpose(a_perm).reshape(m, kk)
    b2 = b.data.transpose(b_perm).reshape(kk, n)
    out_shape = tuple(a.shape[ax] for ax in a_free) + tuple(b.shape[ax] for ax in b_free)
    out = (a2 @ b2).reshape(out_shape)

    a_inv = np.argsort(a_perm)
    b_inv = np.argsort(b_perm)
    a_perm_shape = tuple(a.shape[ax] for ax in a_perm)
    b_perm_shape = tuple(b.shape[ax] for ax in b_perm)

    def vjp(g):
        g2 = g.reshape(m, n)
        ga = (g2 @ b2.T).reshape(a_perm_shape).transpose(a_inv)
        gb = (a2.T @ g2).reshape(b_perm_shape).transpose(b_inv)
        return ga, gb

    return _node(out, (a, b), vjp)


def linear(x, w, b):
    """Affine map over the last axis: out[..., m] = b[m] + sum_j x[..., j] w[j, m].

    The forward accumulation runs over j in ascending order, one term at a
    time, so results are bit-identical to a naive ordered loop. The backward
    pass uses BLAS (covered by finite-difference checks, not bitwise ones).
    """
    x, w, b = _lift(x), _lift(w), _lift(b)
    if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
        raise DimensionError(f"bad affine parameter shapes {w.shape} / {b.shape}")
    kk = w.shape[0]
    if x.shape[-1] != kk:
        raise DimensionError(f"input features {x.shape[-1]} != weight rows {kk}")
    out = np.empty(x.shape[:-1] + (w.shape[1],))
    out[...] = b.data
    tmp = np.empty_like(out)
    for j in range(kk):
        np.multiply(x.data[..., j, None], w.data[j], out=tmp)
        np.add(out, tmp, out=out)

    batch_axes = tuple(range(x.ndim - 1))

    def vjp(g):
        gx = g @ w.data.T
        xf = x.data.reshape(-1, kk)
        gf = g.reshape(-1, w.shape[1])
        gw = xf.T @ gf
        gb = g.sum(axis=batch_axes) if batch_axes else g.copy()
        return gx, gw, gb

    return _node(out, (x, w, b), vjp)


# ---------------------------------------------------------------------------
# nonlinear heads of the loss

def softmax_axis(t, axis):
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    t = _lift(t)
    if not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {t.ndim}")
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _node(s, (t,), vjp)


def atan2(y, x):
    """Angle of the vector (x, y) in (-pi, pi]; scalar tensors only.

    Raises DegenerateDirectionError when x^2 + y^2 < ATAN2_EPS^2; the
    caller decides the fallback.
    """
    y, x = _lift(y), _lift(x)
    if y.size != 1 or x.size != 1:
        raise DimensionError("atan2 takes scalar tensors")
    yv = float(y.data)
    xv = float(x.data)
    r2 = xv * xv + yv * yv
    if r2 < ATAN2_EPS * ATAN2_EPS:
        raise DegenerateDirectionError(
            f"direction undefined: |(x, y)| = {np.sqrt(r2):.3e} < {ATAN2_EPS:g}"
        )
    out = np.arctan2(yv, xv).reshape(y.shape)

    def vjp(g):
        gs = float(g)
        return (
            np.full(y.shape, gs * xv / r2),
            np.full(x.shape, gs * (-yv) / r2),
        )

    return _node(out, (y, x), vjp)


def smooth_l1(pred, target, beta):
    """Summed smooth-L1 (Huber-style) loss; differentiable in ``pred`` only."""
    pred = _lift(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if target.shape != pred.shape:
        raise DimensionError(f"pred shape {pred.shape} != target shape {target.shape}")
    d = pred.data - target
    ad = np.abs(d)
    elem = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    out = elem.sum()

    def vjp(g):
        return (float(g) * np.clip(d / beta, -1.0, 1.0),)

    return _node(out, (pred,), vjp)


def cross_entropy_logits(logits, label):
    """-log softmax(logits)[label], computed in log space."""
    logits = _lift(logits)
    if logits.ndim != 1:
        raise DimensionError("logits must be rank 1")
    n = logits.shape[0]
    label = int(label)
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range [0, {n})")
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    out = lse - z[label]
    p = np.exp(z - lse)

    def vjp(g):
        gl = p.copy()
        gl[label] -= 1.0
        return (float(g) * gl,)

    return _node(np.float64(out), (logits,), vjp)


def conv2d(x, w, b, stride=1, padding=0):
    """2-D convolution, NHWC layout: x (B,H,W,C), w (kh,kw,C,Co), b (Co,)."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects x rank 4 (NHWC) and w rank 4 (kh,kw,C,Co)")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise DimensionError(f"input channels {x.shape[3]} != kernel channels {cin}")
    if b.shape != (cout,):
        raise DimensionError(f"bias shape {b.shape} != ({cout},)")
    s = int(stride)
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    bsz, hp, wp, _ = xp.shape
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kh}x{kw} does not fit padded input {hp}x{wp}")

    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::s, ::s]                       # (B, Ho, Wo, C, kh, kw)
    patches = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    p2 = patches.reshape(bsz * ho * wo, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = (p2 @ w2 + b.data).reshape(bsz, ho, wo, cout)

    def vjp(g):
        g2 = g.reshape(bsz * ho * wo, cout)
        gw = (p2.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gp = (g2 @ w2.T).reshape(bsz, ho, wo, kh, kw, cin)
        gxp = np.zeros((bsz, hp, wp, cin))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + ho * s:s, j:j + wo * s:s, :] += gp[:, :, :, i, j, :]
        gx = gxp[:, p:hp - p, p:wp - p, :] if p else gxp
        return gx, gw, gb

    return _node(out, (x, w, b), vjp)


# ---------------------------------------------------------------------------
# backward and the finite-difference harness

def backward(loss):
    """Reverse-mode sweep from a scalar root.

    Accumulates into the ``grad`` of every reachable leaf that requires
    gradients (multiple uses of the same leaf sum), frees the graph, and
    returns {node_id: grad} for those leaves.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward root must be a Tensor")
    if loss.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {loss.shape}")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.node_id not in seen:
                stack.append((parent, False))

    grads = {loss.node_id: np.ones(loss.shape)}
    leaf_grads = {}
    for node in reversed(topo):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError("non-finite gradient reached a leaf")
                node.grad = g if node.grad is None else node.grad + g
                leaf_grads[node.node_id] = node.grad
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg

    # graphs are built per forward pass; release them once consumed
    for node in topo:
        if node._vjp is not None:
            node._parents = ()
            node._vjp = None
    return leaf_grads


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    worst_index: int
    passed: bool

    def __str__(self):
        word = "PASS" if self.passed else "FAIL"
        return f"{word} {self.op_name}: max_rel_error={self.max_rel_error:.3e} worst_index={self.worst_index}"


def finite_diff_check(f, params, h=1e-5, tol=1e-4, op_name=""):
    """Compare backward gradients of ``f`` against central differences.

    ``f`` is a deterministic scalar function called as f(**params), where
    params maps names to requires_grad leaves. Relative error uses the
    denominator max(|analytic|, |numeric|, 1e-8); ``worst_index`` is the
    flat index within the parameter where the worst error occurred.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params.values():
        p.zero_grad()
    loss = f(**params)
    if loss.size != 1:
        raise GraphError("finite_diff_check needs a scalar function")
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
        for name, p in params.items()
    }

    max_rel = 0.0
    worst = 0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            ana = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(**params).data)
                flat[i] = orig - h
                fm = float(f(**params).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"non-finite probe value for {name}[{i}]")
                num = (fp - fm) / (2.0 * h)
                rel = abs(ana[i] - num) / max(abs(ana[i]), abs(num), 1e-8)
                if rel > max_rel:
                    max_rel = rel
                    worst = i
    return GradReport(op_name=op_name, max_rel_error=max_rel, worst_index=worst, passed=max_rel < tol)


def wrap_angle(a):
    """Wrap an angle (scalar or array, radians) into (-pi, pi]."""
    w = np.remainder(a, 2.0 * np.pi)
    if np.isscalar(a) or np.ndim(a) == 0:
        w = float(w)
        return w - 2.0 * np.pi if w > np.pi else w
    w = np.asarray(w)
    out = np.where(w > np.pi, w - 2.0 * np.pi, w)
    return out
