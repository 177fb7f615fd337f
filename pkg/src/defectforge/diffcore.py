"""
A small reverse-mode differentiable tensor engine.

It supplies exactly the primitives the networks and losses in this package
need, a central-difference gradient checker, the Adam optimizer and the
``DSTW1`` tensor archive used to persist every network.

Classes:
========
    Tensor
    ParameterSet
    AdamState
    Adam

Functions:
==========
    tensor, constant
    conv2d_reflect, instance_norm, add_bias
    relu, tanh, add, sub, mul, scale, shift, square
    upsample2x, concat, reshape, crop, matmul, transpose
    total, mean, log_softmax
    backward, grad_check, adam_step
    save_archive, load_archive

Miscellaneous objects:
======================
    Except the above, all other objects in this module are to be considered implementation details.
"""

import collections
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import IoError
from .exceptions import NonFiniteValue
from .exceptions import NotScalar
from .exceptions import ShapeMismatch
from .exceptions import UnsupportedKernel
from .exceptions import WeightsMismatch

ARCHIVE_MAGIC = b'DSTW1'
# largest patch matrix conv2d_reflect unrolls at once, in entries
PATCH_LIMIT = 1 << 24


class Tensor(object):
    """
    An N-dimensional value that may take part in a recorded computation.

    Tensors produced by an operation remember their parents and a closure
    that maps the output gradient to the parents' gradients. Nothing is
    recorded unless at least one input has :attr:`requires_grad` set, so
    inference through frozen parameters builds no graph at all.
    """

    __slots__ = ('value', 'grad', 'requires_grad', 'name', '_parents', '_backward')

    def __init__(self, value, requires_grad=False, name=None, _parents=(), _backward=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self):
        return self.value.size

    def item(self):
        return float(self.value.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.value)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return '<Tensor {} {}{}>'.format(
            'x'.join(str(d) for d in self.shape), self.dtype, ' grad' if self.requires_grad else '')


def tensor(value, requires_grad=False, dtype=np.float32, name=None):
    """
    Creates a leaf tensor, rejecting NaN and infinite values.

    :rtype: Tensor
    """
    value = np.array(value, dtype=dtype)
    if not np.all(np.isfinite(value)):
        raise NonFiniteValue('tensor {} holds non-finite values'.format(name or ''))
    return Tensor(value, requires_grad=requires_grad, name=name)


def constant(value, dtype=None):
    """
    Wraps *value* as a tensor that never receives gradients.
    """
    return Tensor(np.asarray(value, dtype=dtype))


def _result(value, parents, backward_fn):
    if any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(value)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatch('{}: shapes {} and {} differ'.format(op, a.shape, b.shape))


# Elementwise primitives


def add(a, b):
    _same_shape(a, b, 'add')
    return _result(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape(a, b, 'sub')
    return _result(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape(a, b, 'mul')
    av, bv = a.value, b.value
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, factor):
    return _result(a.value * a.value.dtype.type(factor), (a,), lambda g: (g * g.dtype.type(factor),))


def shift(a, offset):
    return _result(a.value + a.value.dtype.type(offset), (a,), lambda g: (g,))


def square(a):
    av = a.value
    return _result(av * av, (a,), lambda g: (2 * g * av,))


def relu(a):
    positive = a.value > 0
    return _result(np.where(positive, a.value, 0).astype(a.dtype), (a,), lambda g: (g * positive,))


def tanh(a):
    out = np.tanh(a.value)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


# Shape primitives


def reshape(a, shape):
    original = a.shape
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(original),))


def transpose(a):
    if a.value.ndim != 2:
        raise ShapeMismatch('transpose expects a matrix, got {}'.format(a.shape))
    return _result(a.value.T.copy(), (a,), lambda g: (g.T,))


def concat(tensors, axis=1):
    """
    Joins *tensors* along *axis*; every other dimension must agree.
    """
    tensors = list(tensors)
    reference = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(reference) or any(
                x != y for i, (x, y) in enumerate(zip(other, reference)) if i != axis):
            raise ShapeMismatch('concat: shapes {} and {} disagree'.format(t.shape, tensors[0].shape))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.value for t in tensors], axis=axis), tensors, backward_fn)


def crop(a, top, left, height, width):
    """
    Slices the last two (spatial) axes.
    """
    h, w = a.shape[-2:]
    if top < 0 or left < 0 or top + height > h or left + width > w or height < 1 or width < 1:
        raise ShapeMismatch('crop ({}, {}, {}, {}) outside {}x{}'.format(top, left, height, width, h, w))
    original = a.shape

    def backward_fn(g):
        full = np.zeros(original, dtype=g.dtype)
        full[..., top:top + height, left:left + width] = g
        return (full,)

    return _result(a.value[..., top:top + height, left:left + width].copy(), (a,), backward_fn)


def upsample2x(a):
    """
    Nearest-neighbor upsampling of an ``N x C x H x W`` tensor: every pixel
    becomes a 2x2 block.
    """
    n, c, h, w = a.shape
    out = np.repeat(np.repeat(a.value, 2, axis=2), 2, axis=3)
    return _result(out, (a,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch('matmul: cannot multiply {} by {}'.format(a.shape, b.shape))
    av, bv = a.value, b.value
    return _result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


# Reductions


def total(a):
    shape = a.shape
    return _result(a.value.sum().reshape(()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a):
    shape, n = a.shape, a.size
    return _result((a.value.sum() / n).reshape(()), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def log_softmax(a, axis=1):
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _result(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


# Convolution and normalization


def _reflect_index(n, pad):
    """
    Source index for every position of an axis of length *n* padded by
    *pad* on both sides, reflecting without repeating the edge
    (``... 2, 1, 0 | 1, 2 ...``).
    """
    positions = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(positions)
    period = 2 * (n - 1)
    folded = np.abs(positions) % period
    return np.where(folded >= n, period - folded, folded)


def _scatter_matrix(index, n, dtype):
    # rows: source positions, columns: padded positions
    matrix = np.zeros((n, index.size), dtype=dtype)
    matrix[index, np.arange(index.size)] = 1
    return matrix


def _row_blocks(k, row_size):
    """
    Splits the kernel rows so that one block's patch matrix holds at most
    ``PATCH_LIMIT`` entries; *row_size* is the entry count of one row.
    """
    per_block = max(1, min(k, PATCH_LIMIT // max(row_size, 1)))
    return [(start, min(start + per_block, k)) for start in range(0, k, per_block)]


def conv2d_reflect(x, kernel, stride=1):
    """
    Cross-correlates an ``N x C x H x W`` input with an ``O x C x K x K``
    kernel after reflection padding by ``K // 2``.

    The output is ``N x O x ceil(H / stride) x ceil(W / stride)``; with
    stride 1 the spatial shape is preserved. The padded input is unrolled
    into a patch matrix (in blocks of kernel rows when it would be large)
    and contracted with the kernel by one matrix product per block.

    :rtype: Tensor
    """
    if x.value.ndim != 4 or kernel.value.ndim != 4:
        raise ShapeMismatch('conv2d expects NCHW input and OIKK kernel')
    n, c, h, w = x.shape
    out_c, in_c, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise UnsupportedKernel('kernel must be square and odd-sized, got {}x{}'.format(k, k2))
    if in_c != c:
        raise ShapeMismatch('kernel expects {} channels, input has {}'.format(in_c, c))
    if stride < 1:
        raise ValueError('stride must be at least 1')

    pad = k // 2
    rows = _reflect_index(h, pad)
    cols = _reflect_index(w, pad)
    xp = x.value[:, :, rows][:, :, :, cols]
    wv = kernel.value
    oh = (h - 1) // stride + 1
    ow = (w - 1) // stride + 1
    span_h = stride * (oh - 1) + 1
    span_w = stride * (ow - 1) + 1
    positions = n * oh * ow

    # n x c x oh x ow x k x k view, no copy
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    blocks = _row_blocks(k, positions * c * k)

    def patches(top, bottom):
        return windows[..., top:bottom, :].transpose(0, 2, 3, 1, 4, 5).reshape(positions, -1)

    def kernel_block(top, bottom):
        return wv[:, :, top:bottom, :].reshape(out_c, -1)

    out = np.zeros((positions, out_c), dtype=np.result_type(xp, wv))
    for top, bottom in blocks:
        out += patches(top, bottom) @ kernel_block(top, bottom).T
    out = np.ascontiguousarray(out.reshape(n, oh, ow, out_c).transpose(0, 3, 1, 2))

    def backward_fn(g):
        g_rows = g.transpose(0, 2, 3, 1).reshape(positions, out_c)
        grad_w = np.zeros_like(wv) if kernel.requires_grad else None
        grad_xp = np.zeros_like(xp) if x.requires_grad else None
        for top, bottom in blocks:
            if grad_w is not None:
                grad_w[:, :, top:bottom, :] = (g_rows.T @ patches(top, bottom)).reshape(out_c, c, bottom - top, k)
            if grad_xp is not None:
                grad_patches = (g_rows @ kernel_block(top, bottom)).reshape(n, oh, ow, c, bottom - top, k)
                for i in range(top, bottom):
                    for j in range(k):
                        grad_xp[:, :, i:i + span_h:stride, j:j + span_w:stride] += \
                            grad_patches[:, :, :, :, i - top, j].transpose(0, 3, 1, 2)
        grad_x = None
        if grad_xp is not None:
            row_fold = _scatter_matrix(rows, h, grad_xp.dtype)
            col_fold = _scatter_matrix(cols, w, grad_xp.dtype)
            grad_x = row_fold @ grad_xp @ col_fold.T
        return grad_x, grad_w

    return _result(out, (x, kernel), backward_fn)


def add_bias(x, bias):
    """
    Adds the per-channel *bias* to an ``N x C x H x W`` tensor.
    """
    c = x.shape[1]
    if bias.shape != (c,):
        raise ShapeMismatch('bias must have shape ({},)'.format(c))
    out = x.value + bias.value.reshape(1, c, 1, 1)
    return _result(out.astype(x.dtype, copy=False), (x, bias), lambda g: (g, g.sum(axis=(0, 2, 3))))


def instance_norm(x, gamma, beta, eps=1e-5):
    """
    Standardizes every channel of every sample over its ``H x W`` pixels
    (population variance), then applies the per-channel affine *gamma*, *beta*.

    :rtype: Tensor
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch('instance norm affine must have shape ({},)'.format(c))
    count = h * w
    xv = x.value
    mu = xv.mean(axis=(2, 3), keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gv = gamma.value.reshape(1, c, 1, 1)
    out = gv * xhat + beta.value.reshape(1, c, 1, 1)

    def backward_fn(g):
        grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
        grad_beta = g.sum(axis=(0, 2, 3))
        dxhat = g * gv
        grad_x = (inv_std / count) * (
            count * dxhat
            - dxhat.sum(axis=(2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta

    return _result(out.astype(xv.dtype, copy=False), (x, gamma, beta), backward_fn)


# Reverse pass


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(output):
    """
    Accumulates ``d output / d t`` into :attr:`Tensor.grad` of every tensor
    reachable from the scalar *output* that requires gradients.

    Gradients of intermediate results are released once propagated; leaf
    gradients accumulate across calls until :meth:`Tensor.zero_grad`.
    """
    if output.size != 1:
        raise NotScalar('backward needs a scalar output, got shape {}'.format(output.shape))
    if not output.requires_grad:
        return
    pending = {id(output): np.ones_like(output.value)}
    for node in reversed(_topological_order(output)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = np.asarray(parent_grad, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def grad_check(scalar_fn, point, step=1e-5):
    """
    Compares the reverse-mode gradient of *scalar_fn* at *point* with central
    differences and returns the largest relative error over all coordinates:
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    *scalar_fn* takes a :class:`Tensor` and returns a scalar :class:`Tensor`.
    The analytic gradient is computed in the dtype of *point*; the
    differences are always taken in float64.

    :rtype: float
    """
    base = np.array(point.value if isinstance(point, Tensor) else point)
    leaf = Tensor(base.copy(), requires_grad=True)
    backward(scalar_fn(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    wide = base.astype(np.float64)
    numeric = np.zeros_like(wide)
    flat = wide.reshape(-1)
    for idx in range(flat.size):
        original = flat[idx]
        flat[idx] = original + step
        upper = scalar_fn(Tensor(wide.copy())).item()
        flat[idx] = original - step
        lower = scalar_fn(Tensor(wide.copy())).item()
        flat[idx] = original
        numeric.reshape(-1)[idx] = (upper - lower) / (2.0 * step)

    analytic = analytic.astype(np.float64)
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denominator))


# Optimizer


class AdamState(object):
    """
    First and second moment estimates for every parameter plus the step counter.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError('learning rate must be positive')
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.first = None
        self.second = None


def adam_step(params, grads, state):
    """
    Applies one bias-corrected Adam update to the arrays *params* given
    *grads* and returns ``(new_params, state)``. The moment accumulators are
    created on the first call and *state* is updated in place.

    :rtype: Tuple[List[numpy.ndarray], AdamState]
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeMismatch('adam: parameters and gradients disagree')
    if state.first is None:
        state.first = [np.zeros_like(p) for p in params]
        state.second = [np.zeros_like(p) for p in params]
    elif any(m.shape != p.shape for m, p in zip(state.first, params)) or len(state.first) != len(params):
        raise ShapeMismatch('adam: state does not mirror the parameters')

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.first[i] = state.beta1 * state.first[i] + (1.0 - state.beta1) * g
        v = state.second[i] = state.beta2 * state.second[i] + (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        updated.append((p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype))
    return updated, state


class Adam(object):
    """
    Drives :func:`adam_step` over the trainable tensors of a :class:`ParameterSet`.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [t for t in params.values() if t.requires_grad]
        self.state = AdamState(lr, beta1, beta2, eps)

    def zero_grad(self):
        for t in self.params:
            t.zero_grad()

    def step(self, grad_scale=1.0):
        grads = [
            (t.grad * grad_scale if t.grad is not None else np.zeros_like(t.value))
            for t in self.params
        ]
        updated, _ = adam_step([t.value for t in self.params], grads, self.state)
        for t, value in zip(self.params, updated):
            t.value = value


# Parameter containers and the tensor archive


class ParameterSet(collections.OrderedDict):
    """
    Ordered mapping of parameter names to :class:`Tensor` leaves.

    The insertion order is the order tensors are written to an archive.
    """

    def count(self):
        """
        Returns the number of scalar parameters.
        """
        return int(sum(t.size for t in self.values()))

    def arrays(self):
        return collections.OrderedDict((name, t.value) for name, t in self.items())

    def freeze(self):
        for t in self.values():
            t.requires_grad = False
            t.grad = None
        return self

    def thaw(self):
        for t in self.values():
            t.requires_grad = True
        return self

    def load_arrays(self, arrays):
        """
        Replaces every value with the array of the same name from *arrays*.

        :raises WeightsMismatch: when a name is missing or a shape differs.
        """
        missing = [name for name in self if name not in arrays]
        if missing:
            raise WeightsMismatch('archive lacks tensors: {}'.format(', '.join(missing)))
        for name, t in self.items():
            value = np.asarray(arrays[name])
            if value.shape != t.shape:
                raise WeightsMismatch('tensor {} has shape {}, expected {}'.format(name, value.shape, t.shape))
            t.value = value.astype(t.dtype)
        return self

    def save(self, path):
        save_archive(path, self.arrays())


def save_archive(path, arrays):
    """
    Writes the name-to-array mapping *arrays* in the ``DSTW1`` format:
    magic, u32 count, then per tensor u16 name length, UTF-8 name, u8 rank,
    rank u32 dimensions and little-endian f32 data.
    """
    chunks = [ARCHIVE_MAGIC, struct.pack('<I', len(arrays))]
    for name, array in arrays.items():
        encoded = name.encode('utf-8')
        array = np.asarray(array)
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', array.ndim))
        chunks.append(struct.pack('<{}I'.format(array.ndim), *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype='<f4').tobytes())
    try:
        with open(path, 'wb') as fh:
            fh.write(b''.join(chunks))
    except OSError as exc:
        raise IoError('cannot write archive {}: {}'.format(path, exc))


def load_archive(path):
    """
    Reads a ``DSTW1`` archive into an ordered name-to-``float32``-array mapping.

    :rtype: collections.OrderedDict
    """
    try:
        with open(path, 'rb') as fh:
            payload = fh.read()
    except OSError as exc:
        raise IoError('cannot read archive {}: {}'.format(path, exc))

    if payload[:len(ARCHIVE_MAGIC)] != ARCHIVE_MAGIC:
        raise IoError('{} is not a tensor archive'.format(path))
    offset = len(ARCHIVE_MAGIC)
    arrays = collections.OrderedDict()
    try:
        (count,) = struct.unpack_from('<I', payload, offset)
        offset += 4
        for _ in range(count):
            (name_length,) = struct.unpack_from('<H', payload, offset)
            offset += 2
            name = payload[offset:offset + name_length].decode('utf-8')
            offset += name_length
            (rank,) = struct.unpack_from('<B', payload, offset)
            offset += 1
            dims = struct.unpack_from('<{}I'.format(rank), payload, offset)
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            data = np.frombuffer(payload, dtype='<f4', count=size, offset=offset)
            offset += 4 * size
            arrays[name] = data.astype(np.float32).reshape(dims)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise IoError('corrupt tensor archive {}: {}'.format(path, exc))
    return arrays
