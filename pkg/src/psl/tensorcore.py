"""Dense tensors with reverse-mode automatic differentiation.

Every cotangent produced during a backward pass is itself assembled from
the primitives below, so gradients stay on the tape and second-order
derivatives (needed by the interpolate gradient penalty) come for free.

Float32 is the training precision; wrap code in ``default_dtype(np.float64)``
for gradient checking.  Set ``PSL_DEBUG=1`` to enable NaN/Inf and math
domain checks after every primitive.
"""

from __future__ import annotations

import math
import os
import warnings
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_DEFAULT_DTYPE = np.float32
_DEBUG = os.environ.get("PSL_DEBUG") == "1"

GELU_TANH_COEFF = 0.044715  # cubic coefficient of the tanh-form GELU


def set_debug(flag):
    """Toggle NaN/domain checking (also settable via PSL_DEBUG=1)."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled():
    return _DEBUG


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    """N-dimensional array with an optional gradient slot and tape linkage."""

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._backward_called = False

    # -- construction helpers -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """A view of the same data with no tape linkage."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None
        self._backward_called = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, pow_(_as_tensor(other), -1.0))

    def __rtruediv__(self, other):
        return mul(_as_tensor(other), pow_(self, -1.0))

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, tuple(reversed(range(self.ndim))))


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=_DEFAULT_DTYPE))


def _check_finite(data, op_name):
    if _DEBUG and not np.all(np.isfinite(data)):
        raise DomainError(f"non-finite values produced by {op_name}")


def _make(data, parents, vjp, op_name):
    _check_finite(data, op_name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward_called = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast cotangent back to ``shape`` (differentiable)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = sum_(grad, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1
    )
    if axes:
        grad = sum_(grad, axis=axes, keepdims=True)
    if grad.shape != shape:  # e.g. scalar target of shape ()
        grad = reshape(grad, shape)
    return grad


def _broadcastable(a_shape, b_shape):
    try:
        np.broadcast_shapes(a_shape, b_shape)
        return True
    except ValueError:
        return False


# -- binary primitives ---------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires ndim >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ: {a.shape} x {b.shape}")

    def vjp(g):
        ga = _unbroadcast(matmul(g, _mT(b)), a.shape)
        gb = _unbroadcast(matmul(_mT(a), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), vjp, "matmul")


def _mT(t):
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return transpose(t, axes)


# -- unary primitives ----------------------------------------------------------


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def pow_(a, exponent):
    a = _as_tensor(a)
    exponent = float(exponent)

    def vjp(g):
        return (mul(g, mul(exponent, pow_(a, exponent - 1.0))),)

    return _make(a.data ** exponent, (a,), vjp, "pow")


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def vjp(g):
        return (mul(g, out),)

    out = _make(out_data, (a,), vjp, "exp")
    return out


def log(a):
    a = _as_tensor(a)
    if _DEBUG and np.any(a.data <= 0):
        raise DomainError("log of non-positive value")

    def vjp(g):
        return (mul(g, pow_(a, -1.0)),)

    return _make(np.log(a.data), (a,), vjp, "log")


def cos(a):
    a = _as_tensor(a)

    def vjp(g):
        return (mul(g, neg(sin(a))),)

    return _make(np.cos(a.data), (a,), vjp, "cos")


def sin(a):
    a = _as_tensor(a)

    def vjp(g):
        return (mul(g, cos(a)),)

    return _make(np.sin(a.data), (a,), vjp, "sin")


def tanh(a):
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def vjp(g):
        return (mul(g, add(1.0, neg(mul(out, out)))),)

    out = _make(out_data, (a,), vjp, "tanh")
    return out


def relu(a):
    a = _as_tensor(a)
    mask = (a.data > 0).astype(a.data.dtype)

    def vjp(g):
        return (mul(g, Tensor(mask, dtype=mask.dtype)),)

    return _make(a.data * mask, (a,), vjp, "relu")


def abs_(a):
    a = _as_tensor(a)
    sign = np.sign(a.data)

    def vjp(g):
        return (mul(g, Tensor(sign, dtype=sign.dtype)),)

    return _make(np.abs(a.data), (a,), vjp, "abs")


# -- shape primitives ----------------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    old_shape = a.shape
    return _make(
        a.data.reshape(shape), (a,), lambda g: (reshape(g, old_shape),), "reshape"
    )


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(
        np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inverse),), "transpose"
    )


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    in_shape = a.shape

    if axis is None:
        reduced_axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        reduced_axes = (axis % a.ndim,)
    else:
        reduced_axes = tuple(ax % a.ndim for ax in axis)

    def vjp(g):
        gg = g
        if not keepdims and reduced_axes:
            kd_shape = tuple(
                1 if i in reduced_axes else s for i, s in enumerate(in_shape)
            )
            gg = reshape(gg, kd_shape)
        ones = Tensor(np.ones(in_shape, dtype=a.data.dtype), dtype=a.data.dtype)
        return (mul(gg, ones),)

    return _make(
        np.sum(a.data, axis=axis if axis is not None else None, keepdims=keepdims),
        (a,),
        vjp,
        "sum",
    )


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis]
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- gather / scatter ----------------------------------------------------------


def take(a, flat_index, out_shape):
    """Gather ``a.flat[flat_index]`` into ``out_shape``; adjoint is scatter_add."""
    a = _as_tensor(a)
    flat_index = np.asarray(flat_index, dtype=np.int64)
    out_shape = tuple(out_shape)
    if flat_index.size != int(np.prod(out_shape)):
        raise DimensionError(
            f"take: index count {flat_index.size} != output size {np.prod(out_shape)}"
        )
    in_shape = a.shape

    def vjp(g):
        return (scatter_add(g, flat_index, in_shape),)

    return _make(
        a.data.ravel()[flat_index.ravel()].reshape(out_shape), (a,), vjp, "take"
    )


def scatter_add(a, flat_index, out_shape):
    """Scatter-add each element of ``a`` into a zero tensor of ``out_shape``."""
    a = _as_tensor(a)
    flat_index = np.asarray(flat_index, dtype=np.int64)
    out_shape = tuple(out_shape)
    if flat_index.size != a.size:
        raise DimensionError(
            f"scatter_add: index count {flat_index.size} != input size {a.size}"
        )
    in_shape = a.shape

    flat = np.zeros(int(np.prod(out_shape)), dtype=a.data.dtype)
    np.add.at(flat, flat_index.ravel(), a.data.ravel())

    def vjp(g):
        return (take(g, flat_index, in_shape),)

    return _make(flat.reshape(out_shape), (a,), vjp, "scatter_add")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    base = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(base) or any(
            s != b for i, (s, b) in enumerate(zip(t.shape, base)) if i != axis % len(base)
        ):
            raise DimensionError(
                f"concat: incompatible shapes {base} and {t.shape} along axis {axis}"
            )
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    shapes = [t.shape for t in tensors]

    def vjp(g):
        flat_ids = np.arange(out_data.size, dtype=np.int64).reshape(out_data.shape)
        grads = []
        offset = 0
        for shp in shapes:
            extent = shp[axis]
            sl = [slice(None)] * out_data.ndim
            sl[axis] = slice(offset, offset + extent)
            grads.append(take(g, flat_ids[tuple(sl)], shp))
            offset += extent
        return tuple(grads)

    return _make(out_data, tuple(tensors), vjp, "concat")


# -- composites ----------------------------------------------------------------


def sigmoid(a):
    # tanh form is overflow-free for large |a|, unlike 1/(1+e^-a)
    return mul(0.5, add(1.0, tanh(mul(0.5, _as_tensor(a)))))


def gelu(a):
    """GELU, tanh approximation (coefficient 0.044715)."""
    a = _as_tensor(a)
    c = math.sqrt(2.0 / math.pi)
    inner = mul(c, add(a, mul(GELU_TANH_COEFF, pow_(a, 3.0))))
    return mul(mul(0.5, a), add(1.0, tanh(inner)))


def softmax(x, axis=-1):
    """Numerically stabilized softmax; slices along ``axis`` sum to 1."""
    x = _as_tensor(x)
    ax = axis % x.ndim if x.ndim else 0
    if x.ndim == 0 or x.shape[ax] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    shift = Tensor(np.max(x.data, axis=ax, keepdims=True), dtype=x.data.dtype)
    e = exp(add(x, neg(shift)))
    return mul(e, pow_(sum_(e, axis=ax, keepdims=True), -1.0))


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to mean 0 / variance 1, then apply the affine."""
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"layernorm needs a non-empty last axis, got {x.shape}")
    mu = mean(x, axis=-1, keepdims=True)
    centered = add(x, neg(mu))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = mul(centered, pow_(add(var, eps), -0.5))
    return add(mul(normed, gain), bias)


# -- convolution ---------------------------------------------------------------

_GEOMETRY_CACHE = {}


def _conv_geometry(batch, channels, height, width, kh, kw, stride, pad):
    """Flat gather indices mapping a padded (B,C,Hp,Wp) tensor to im2col columns.

    Returns (pad_index, col_index, (Hp, Wp), (Ho, Wo)) where ``pad_index``
    scatters the unpadded tensor into the padded one and ``col_index``
    gathers (B, C*kh*kw, Ho*Wo) columns from the padded tensor.
    """
    key = (batch, channels, height, width, kh, kw, stride, pad)
    cached = _GEOMETRY_CACHE.get(key)
    if cached is not None:
        return cached

    hp, wp = height + 2 * pad, width + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    # scatter indices: element (b,c,i,j) of the input lands at (b,c,i+pad,j+pad)
    bi, ci, ii, ji = np.meshgrid(
        np.arange(batch),
        np.arange(channels),
        np.arange(height),
        np.arange(width),
        indexing="ij",
    )
    pad_index = (
        ((bi * channels + ci) * hp + (ii + pad)) * wp + (ji + pad)
    ).astype(np.int64)

    # gather indices for im2col over one sample, then offset per batch element
    ci, ki, kj = np.meshgrid(
        np.arange(channels), np.arange(kh), np.arange(kw), indexing="ij"
    )
    oh, ow = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = (ci * hp * wp + ki * wp + kj).reshape(-1, 1)
    cols = (oh * stride * wp + ow * stride).reshape(1, -1)
    sample = rows + cols  # (C*kh*kw, Ho*Wo)
    batch_offsets = (np.arange(batch) * channels * hp * wp).reshape(-1, 1, 1)
    col_index = (sample[None, :, :] + batch_offsets).astype(np.int64)

    result = (pad_index, col_index, (hp, wp), (ho, wo))
    _GEOMETRY_CACHE[key] = result
    return result


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation of (B,C,H,W) with (O,C,kh,kw) kernels."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D operands, got {x.shape}, {w.shape}")
    b, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise DimensionError(f"conv2d: channel mismatch {x.shape} vs {w.shape}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise DimensionError(
            f"conv2d: kernel {(kh, kw)} larger than padded input {(h + 2 * pad, wd + 2 * pad)}"
        )

    pad_index, col_index, (hp, wp), (ho, wo) = _conv_geometry(
        b, c, h, wd, kh, kw, stride, pad
    )
    padded = scatter_add(x, pad_index, (b, c, hp, wp)) if pad else x
    cols = take(padded, col_index, (b, c * kh * kw, ho * wo))
    w_mat = reshape(w, (o, c * kh * kw))
    out = matmul(w_mat, cols)
    return reshape(out, (b, o, ho, wo))


def conv_transpose2d(x, w, stride=1, pad=0):
    """Adjoint of conv2d: maps (B,O,H',W') back to (B,C,H,W) extents."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv_transpose2d expects 4-D operands, got {x.shape}, {w.shape}"
        )
    b, o, hi, wi = x.shape
    o2, c, kh, kw = w.shape
    if o != o2:
        raise DimensionError(f"conv_transpose2d: channel mismatch {x.shape} vs {w.shape}")
    ho = (hi - 1) * stride - 2 * pad + kh
    wo = (wi - 1) * stride - 2 * pad + kw
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv_transpose2d: output extents {(ho, wo)} are not positive"
        )

    pad_index, col_index, (hp, wp), (hi2, wi2) = _conv_geometry(
        b, c, ho, wo, kh, kw, stride, pad
    )
    if (hi2, wi2) != (hi, wi):
        raise DimensionError(
            f"conv_transpose2d: input extents {(hi, wi)} inconsistent with geometry {(hi2, wi2)}"
        )
    w_mat = reshape(w, (o, c * kh * kw))
    y_mat = reshape(x, (b, o, hi * wi))
    cols = matmul(_mT(w_mat), y_mat)  # (B, C*kh*kw, Hi*Wi)
    padded = scatter_add(cols, col_index, (b, c, hp, wp))
    if pad:
        return take(padded, pad_index, (b, c, ho, wo))
    return padded


# -- tape traversal ------------------------------------------------------------


def _topo_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def grads_wrt(output, inputs):
    """Gradients of a scalar ``output`` w.r.t. ``inputs``, kept on the tape.

    The returned tensors participate in further differentiation, which is
    how second-order terms (gradient penalty) are obtained.
    """
    output = _as_tensor(output)
    if output.size != 1:
        raise ContractError(f"grads_wrt needs a scalar output, got shape {output.shape}")
    order = _topo_order(output)
    grad_map = {
        id(output): Tensor(np.ones(output.shape, dtype=output.data.dtype))
    }
    for node in reversed(order):
        g = grad_map.pop(id(node), None)
        if g is None or node._vjp is None:
            if g is not None and node._vjp is None:
                grad_map[id(node)] = g  # leaf: keep for lookup below
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            existing = grad_map.get(id(parent))
            grad_map[id(parent)] = pg if existing is None else add(existing, pg)
        grad_map[id(node)] = g  # retain for callers asking about interior nodes

    results = []
    for inp in inputs:
        g = grad_map.get(id(inp))
        if g is None:
            g = Tensor(np.zeros(inp.shape, dtype=inp.data.dtype))
        results.append(g)
    return results


def backward(loss):
    """Populate ``.grad`` on every reachable requires_grad leaf of ``loss``."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_called:
        raise ContractError("backward called twice on the same loss without reset")
    loss._backward_called = True

    leaves = [
        node
        for node in _topo_order(loss)
        if node.requires_grad and node._vjp is None
    ]
    if not leaves:
        warnings.warn("backward on a detached graph: no gradients to populate")
        return
    grads = grads_wrt(loss, leaves)
    for leaf, g in zip(leaves, grads):
        leaf.grad = g if leaf.grad is None else add(leaf.grad, g)


# -- verification oracle -------------------------------------------------------


def gradcheck(f, x, h=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued; the check runs in 64-bit regardless of the
    ambient default dtype.
    """
    with default_dtype(np.float64):
        xt = Tensor(np.array(x.data if isinstance(x, Tensor) else x, np.float64),
                    requires_grad=True, dtype=np.float64)
        out = f(xt)
        if out.size != 1:
            raise ContractError("gradcheck requires a scalar-valued function")
        (analytic_t,) = grads_wrt(out, [xt])
        analytic = analytic_t.data

        numeric = np.zeros_like(xt.data)
        flat = xt.data.ravel()
        num_flat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f(Tensor(xt.data.copy(), dtype=np.float64)).data)
            flat[i] = orig - h
            down = float(f(Tensor(xt.data.copy(), dtype=np.float64)).data)
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * h)

        max_err = 0.0
        for i in range(flat.size):
            a, n = analytic.ravel()[i], num_flat[i]
            if not (np.isfinite(a) and np.isfinite(n)):
                raise DomainError(f"gradcheck: NaN/Inf gradient at flat coordinate {i}")
            err = abs(a - n) / max(1.0, abs(n))
            max_err = max(max_err, err)
        return max_err
