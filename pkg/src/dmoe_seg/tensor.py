"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds nodes on an implicit tape (creation-ordered); backward()
replays the tape in strict reverse construction order, accumulating
gradients across all consumers. Tensors are treated as immutable after
construction; the optimizer rewrites parameter buffers between graphs.
"""

import itertools

import numpy as np


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DegenerateGatingError(ValueError):
    """Raised when every gate score along the softmax axis is -inf."""


_order_counter = itertools.count()

# When enabled, every forward op asserts its output is finite.
_debug_check_finite = False


def set_debug_checks(enabled):
    global _debug_check_finite
    _debug_check_finite = bool(enabled)


class Tensor:
    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._order = next(_order_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return "Tensor(shape=%s, requires_grad=%s)" % (self.shape, self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar, got shape %s" % (self.shape,))
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        self.grad = np.ones_like(self.data)
        for node in sorted(nodes, key=lambda t: t._order, reverse=True):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, shape):
        return reshape(self, shape)


def _from_op(data, parents, backward):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    out = Tensor(data)
    # -inf is legitimate as the keep_top_k sentinel; NaN never is
    if _debug_check_finite and np.isnan(out.data).any():
        raise FloatingPointError("NaN produced in forward op")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    g = np.broadcast_to(g, t.data.shape) if g.shape != t.data.shape else g
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul shape mismatch: %s @ %s" % (a.shape, b.shape))
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _from_op(out_data, (a, b), backward)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _from_op(out_data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(out_data, (a, b), backward)


def scale(a, s):
    a = as_tensor(a)
    s = float(s)
    out_data = a.data * s

    def backward(g):
        _accum(a, g * s)

    return _from_op(out_data, (a,), backward)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def backward(g):
        _accum(a, g * mask)

    return _from_op(out_data, (a,), backward)


def softplus(a):
    """log(1 + exp(x)) with an overflow-safe branch for large x."""
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(np.minimum(x, 0.0)) / (1.0 + np.exp(np.minimum(x, 0.0))))

    def backward(g):
        _accum(a, g * sig)

    return _from_op(out_data, (a,), backward)


def _stable_max(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateGatingError("all entries are -inf along the softmax axis")
    return m


def softmax(a, axis=-1):
    """Probability-vector softmax: -inf entries map to exactly 0."""
    a = as_tensor(a)
    m = _stable_max(a.data, axis)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _from_op(y, (a,), backward)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    m = _stable_max(a.data, axis)
    shifted = a.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out_data = shifted - lse
    y = np.exp(out_data)

    def backward(g):
        _accum(a, g - y * np.sum(g, axis=axis, keepdims=True))

    return _from_op(out_data, (a,), backward)


def reduce_mean(a):
    a = as_tensor(a)
    n = a.data.size
    out_data = np.asarray(a.data.mean())

    def backward(g):
        _accum(a, np.full(a.data.shape, float(g) / n))

    return _from_op(out_data, (a,), backward)


def reduce_sum(a):
    a = as_tensor(a)
    out_data = np.asarray(a.data.sum())

    def backward(g):
        _accum(a, np.full(a.data.shape, float(g)))

    return _from_op(out_data, (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("cannot reshape %s into %s" % (a.shape, shape))

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _from_op(out_data, (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _from_op(out_data, (a,), backward)


def dropout(a, p, training, rng=None):
    """Inverted dropout: identity at evaluation time."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ConfigError("dropout probability must be in [0, 1), got %r" % (p,))
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ConfigError("dropout with p > 0 in training mode requires an rng")
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out_data = a.data * mask

    def backward(g):
        _accum(a, g * mask)

    return _from_op(out_data, (a,), backward)


def keep_top_k(a, k):
    """Per row, keep the k largest entries and set the rest to -inf.

    Ties break toward the lower column index. Gradient w.r.t. dropped
    entries is 0 (the -inf branch is non-differentiable).
    """
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("keep_top_k expects a 2-D tensor, got %s" % (a.shape,))
    n = a.shape[1]
    if not 1 <= k <= n:
        raise ConfigError("k must be in [1, %d], got %d" % (n, k))
    order = np.argsort(-a.data, axis=1, kind="stable")
    mask = np.zeros(a.data.shape, dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=1)
    out_data = np.where(mask, a.data, -np.inf)

    def backward(g):
        _accum(a, g * mask)

    return _from_op(out_data, (a,), backward)


def take_rows(a, idx):
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = a.data[idx]

    def backward(g):
        buf = np.zeros(a.data.shape)
        np.add.at(buf, idx, g)
        _accum(a, buf)

    return _from_op(out_data, (a,), backward)


def scatter_rows(a, idx, n_rows):
    """Place rows of a at positions idx in a zero matrix of n_rows rows."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = np.zeros((n_rows,) + a.data.shape[1:])
    np.add.at(out_data, idx, a.data)

    def backward(g):
        _accum(a, g[idx])

    return _from_op(out_data, (a,), backward)


def gather_pairs(a, rows, cols):
    """a[rows[i], cols[i]] as a 1-D tensor."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out_data = a.data[rows, cols]

    def backward(g):
        buf = np.zeros(a.data.shape)
        np.add.at(buf, (rows, cols), g)
        _accum(a, buf)

    return _from_op(out_data, (a,), backward)


class GradCheckReport:
    def __init__(self, max_rel_err, worst_param, tolerance):
        self.max_rel_err = max_rel_err
        self.worst_param = worst_param
        self.tolerance = tolerance
        self.passed = max_rel_err < tolerance

    def __repr__(self):
        return "GradCheckReport(max_rel_err=%.3e, worst=%r, passed=%s)" % (
            self.max_rel_err, self.worst_param, self.passed)


def grad_check(f, params, step=1e-5, tolerance=1e-4):
    """Compare tape gradients of scalar f() against central finite differences.

    f must be deterministic across calls (freeze any noise/dropout by
    reconstructing the rng inside f). params is a {name: Tensor} map.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss in grad_check baseline")
    loss.backward()
    analytic = {name: (np.zeros(p.data.shape) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    max_rel = 0.0
    worst = None
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data)
            flat[i] = orig - step
            lo = float(f().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError("non-finite loss while perturbing %s[%d]" % (name, i))
            numeric = (hi - lo) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            if rel > max_rel:
                max_rel = rel
                worst = "%s[%d]" % (name, i)
    return GradCheckReport(max_rel, worst, tolerance)
