"""Reverse-mode automatic differentiation over numpy, and the layer set.

A ``Tensor`` wraps an ndarray and remembers how it was produced; calling
``backward`` on a scalar loss walks the recorded graph in reverse
topological order and accumulates gradients into every tensor that
requires them.  Only the operations this model family needs are
implemented: dense affine maps, layer normalization, dropout, softmax
self-attention, the two activations, and the shape plumbing between
them.  ``finite_diff_check`` is the independent oracle used to verify
every analytic gradient.
"""

import numpy as np

from . import kernels as K
from .errors import ConfigError, ContractError, DimensionError


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return "Tensor(shape=%s, dtype=%s%s)" % (self.shape, self.dtype, flag)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


_grad_enabled = True


class no_grad:
    """Context manager: ops built inside record no graph.

    Forward values are bit-identical; only the autodiff bookkeeping is
    skipped. Used by the sampling and evaluation loops, where graphs
    would otherwise accumulate as cyclic garbage faster than the gc
    reclaims them.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    # accumulation is never in-place, so aliasing g is safe
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum g over the axes numpy broadcasting introduced or stretched."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeezed = tuple(
        i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1
    )
    if squeezed:
        g = g.sum(axis=squeezed, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    out = _node(a.data + b.data, (a, b), None)

    def _bw():
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(out.grad, b.data.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def sub(a, b):
    out = _node(a.data - b.data, (a, b), None)

    def _bw():
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(-out.grad, b.data.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def mul(a, b):
    out = _node(a.data * b.data, (a, b), None)

    def _bw():
        _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def scale(a, s):
    s = float(s)
    out = _node(a.data * s, (a,), None)

    def _bw():
        _accum(a, out.grad * s)

    out._backward = _bw if out.requires_grad else None
    return out


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            "matmul needs rank >= 2 operands, got %s and %s"
            % (a.data.shape, b.data.shape)
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            "matmul inner dimensions disagree: %s vs %s"
            % (a.data.shape, b.data.shape)
        )
    out = _node(a.data @ b.data, (a, b), None)

    def _bw():
        g = out.grad
        _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def reshape(a, shape):
    shape = tuple(shape)
    out = _node(a.data.reshape(shape), (a,), None)

    def _bw():
        _accum(a, out.grad.reshape(a.data.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _node(np.transpose(a.data, axes), (a,), None)

    def _bw():
        _accum(a, np.ascontiguousarray(np.transpose(out.grad, inv)))

    out._backward = _bw if out.requires_grad else None
    return out


def slice_axis(a, axis, start, stop):
    """Contiguous slice [start:stop) along one axis."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = _node(np.ascontiguousarray(a.data[index]), (a,), None)

    def _bw():
        buf = np.zeros_like(a.data)
        buf[index] = out.grad
        _accum(a, buf)

    out._backward = _bw if out.requires_grad else None
    return out


def concat(tensors, axis):
    out = _node(np.concatenate([t.data for t in tensors], axis=axis),
                tuple(tensors), None)

    def _bw():
        offset = 0
        for t in tensors:
            n = t.data.shape[axis]
            index = [slice(None)] * out.grad.ndim
            index[axis] = slice(offset, offset + n)
            _accum(t, np.ascontiguousarray(out.grad[tuple(index)]))
            offset += n

    out._backward = _bw if out.requires_grad else None
    return out


def sum_(a, axis=None, keepdims=False):
    out = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), None)

    def _bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    out._backward = _bw if out.requires_grad else None
    return out


def mean_(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def relu(a):
    out = _node(K.relu_forward(a.data), (a,), None)

    def _bw():
        _accum(a, K.relu_backward(out.grad, a.data))

    out._backward = _bw if out.requires_grad else None
    return out


def gelu(a):
    out = _node(K.gelu_forward(a.data), (a,), None)

    def _bw():
        _accum(a, K.gelu_backward(out.grad, a.data))

    out._backward = _bw if out.requires_grad else None
    return out


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(a):
    """Softmax over the last axis."""
    p2 = K.softmax_rows(_rows(a.data))
    out = _node(p2.reshape(a.data.shape), (a,), None)

    def _bw():
        dx = K.softmax_rows_backward(_rows(out.grad), p2)
        _accum(a, dx.reshape(a.data.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def layer_norm(a, gain=None, bias=None, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine.

    gain and bias are optional Parameter tensors; without them the
    normalization is plain.
    """
    d = a.data.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    x2 = _rows(a.data)
    gdata = gain.data if gain is not None else np.ones(d, dtype=a.data.dtype)
    bdata = bias.data if bias is not None else np.zeros(d, dtype=a.data.dtype)
    y2, mean, rstd = K.layer_norm_forward(x2, gdata, bdata, eps)
    parents = [a] + [t for t in (gain, bias) if t is not None]
    out = _node(y2.reshape(a.data.shape), tuple(parents), None)

    def _bw():
        dx, dgain, dbias = K.layer_norm_backward(
            _rows(out.grad), x2, mean, rstd, gdata
        )
        _accum(a, dx.reshape(a.data.shape))
        if gain is not None:
            _accum(gain, dgain)
        if bias is not None:
            _accum(bias, dbias)

    out._backward = _bw if out.requires_grad else None
    return out


def dropout(a, rate, training, rng=None):
    """Inverted dropout; bit-exact identity when not training or rate=0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError("dropout rate must be in [0, 1), got %r" % rate)
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ContractError("training-mode dropout needs a seeded generator")
    uniform = rng.random(a.data.size)
    y, mult = K.dropout_apply(a.data, uniform.reshape(a.data.shape), rate)
    out = _node(y, (a,), None)

    def _bw():
        _accum(a, out.grad * mult)

    out._backward = _bw if out.requires_grad else None
    return out


def embedding(table, ids):
    """Row lookup into a [rows, width] table; gradients scatter-add."""
    ids = np.asarray(ids, dtype=np.int64)
    out = _node(np.ascontiguousarray(table.data[ids]), (table,), None)

    def _bw():
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, out.grad)
        _accum(table, buf)

    out._backward = _bw if out.requires_grad else None
    return out


def dense_forward(x, w, b):
    """y = x @ w + b with shape validation."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(
            "dense input width %s does not match weight %s"
            % (x.data.shape, w.data.shape)
        )
    return add(matmul(x, w), b)


def mse(a, b):
    d = sub(a, b)
    return mean_(mul(d, d))


def backward(loss):
    """Populate .grad for every requires_grad tensor reachable from loss.

    The graph is dismantled afterwards (each node's backward closure is
    dropped, breaking the node<->closure reference cycles), so memory is
    reclaimed by plain refcounting the moment the loss goes out of
    scope. Build a fresh loss for another pass.
    """
    if loss.data.size != 1:
        raise ContractError(
            "backward needs a scalar loss, got shape %s" % (loss.data.shape,)
        )
    topo = []
    seen = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
    for node in topo:
        node._backward = None


class Module:
    """Base with recursive named-parameter discovery."""

    def parameters(self):
        """Yield (name, Parameter) pairs in stable attribute order.

        Attributes starting with an underscore are skipped, so a module
        may hold references (e.g. to a frozen sibling) without claiming
        their parameters.
        """
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            if isinstance(value, Parameter):
                yield attr, value
            elif isinstance(value, Module):
                for name, p in value.parameters():
                    yield "%s.%s" % (attr, name), p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for name, p in item.parameters():
                            yield "%s.%d.%s" % (attr, i, name), p

    def set_trainable(self, flag):
        for _, p in self.parameters():
            p.requires_grad = bool(flag)

    def zero_grads(self):
        for _, p in self.parameters():
            p.grad = None


class Dense(Module):
    """Affine map. init: 'scaled' (std 1/sqrt(d_in)), 'normal', 'zeros'."""

    def __init__(self, d_in, d_out, rng=None, init="scaled", std=0.02,
                 dtype=np.float32):
        if init == "zeros":
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            if rng is None:
                raise ConfigError("non-zero Dense init needs a generator")
            s = (1.0 / np.sqrt(d_in)) if init == "scaled" else std
            w = rng.normal(0.0, s, size=(d_in, d_out)).astype(dtype)
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(d_out, dtype=dtype))

    def __call__(self, x):
        return dense_forward(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d, affine=True, eps=1e-5, dtype=np.float32):
        if d < 1:
            raise DimensionError("layer_norm width must be >= 1")
        self.eps = eps
        if affine:
            self.gain = Parameter(np.ones(d, dtype=dtype))
            self.bias = Parameter(np.zeros(d, dtype=dtype))
        else:
            self.gain = None
            self.bias = None

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class Dropout(Module):
    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ConfigError("dropout rate must be in [0, 1), got %r" % rate)
        self.rate = rate

    def __call__(self, x, training=False, rng=None):
        return dropout(x, self.rate, training, rng)


class SelfAttention(Module):
    """Multi-head softmax attention over the middle axis of (N, T, H)."""

    def __init__(self, width, heads, rng, dtype=np.float32):
        if width % heads != 0:
            raise ConfigError(
                "width %d not divisible by %d heads" % (width, heads)
            )
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = Dense(width, 3 * width, rng, dtype=dtype)
        self.proj = Dense(width, width, rng, dtype=dtype)

    def __call__(self, x):
        n, t, h = x.data.shape
        fused = self.qkv(x)
        parts = []
        for i in range(3):
            piece = slice_axis(fused, -1, i * h, (i + 1) * h)
            piece = reshape(piece, (n, t, self.heads, self.head_dim))
            parts.append(transpose(piece, (0, 2, 1, 3)))
        q, k, v = parts
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))),
                       1.0 / np.sqrt(self.head_dim))
        attn = softmax(scores)
        mixed = matmul(attn, v)
        mixed = reshape(transpose(mixed, (0, 2, 1, 3)), (n, t, h))
        return self.proj(mixed)


class MlpBlock(Module):
    """Dense expansion, gelu, dense contraction."""

    def __init__(self, width, rng, expand=4, dtype=np.float32):
        self.up = Dense(width, expand * width, rng, dtype=dtype)
        self.down = Dense(expand * width, width, rng, dtype=dtype)

    def __call__(self, x):
        return self.down(gelu(self.up(x)))


def finite_diff_check(build_loss, params, eps=1e-5, floor=1e-6):
    """Max relative error between analytic and central-difference grads.

    build_loss must rebuild the scalar loss from current parameter values
    and be deterministic; it is called twice up front and a value mismatch
    raises ContractError.  Run in float64 for meaningful tolerances.
    """
    first = build_loss()
    second = build_loss()
    if first.data.size != 1:
        raise ContractError("build_loss must return a scalar")
    if not np.array_equal(first.data, second.data):
        raise ContractError(
            "build_loss is not deterministic; seed every random source"
        )
    for p in params:
        p.grad = None
    backward(first)
    analytic = []
    for p in params:
        analytic.append(
            np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        )
    worst = 0.0
    for p, ag in zip(params, analytic):
        if not p.data.flags["C_CONTIGUOUS"]:
            raise ContractError("finite_diff_check needs contiguous parameters")
        flat = p.data.reshape(-1)
        aflat = ag.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(build_loss().data)
            flat[i] = keep - eps
            lo = float(build_loss().data)
            flat[i] = keep
            cd = (hi - lo) / (2.0 * eps)
            rel = abs(float(aflat[i]) - cd) / (abs(cd) + floor)
            if rel > worst:
                worst = rel
    return worst
