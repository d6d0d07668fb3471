#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op returns a new Tensor. While gradients are enabled and any input
requires a gradient, the output keeps its inputs and a backward rule; backward()
orders those outputs into a Tape and replays the rules in reverse.
"""

import threading

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Tensor extents do not line up."""


class GroupsError(ShapeError):
    """Channel counts are not divisible by the convolution groups."""


class LabelError(ValueError):
    """Class labels are outside [0, num_classes)."""


class BackwardError(RuntimeError):
    """backward() was called on something that is not a taped scalar."""


def is_grad_enabled():
    return getattr(_state, 'grad_enabled', True)


class no_grad:
    """
    Context manager that stops ops in the current thread from recording backward rules.
    """

    def __enter__(self):
        self._previous = is_grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc_info):
        _state.grad_enabled = self._previous
        return False


class Tensor:
    """
    N-dimensional float64 array with an optional gradient accumulator.
    """

    def __init__(self, data, requires_grad=False):
        data = np.asarray(data, dtype=DTYPE)
        self.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = 'leaf'
        self._parents = ()
        self._backward = None

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
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, inputs, backward, op):
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(inputs)
        out._backward = backward
    return out


class Tape:
    """
    Recorded ops reachable from one output, in topological order (inputs first).
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output):
        order = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    @property
    def records(self):
        """(output, inputs, op name) for every recorded op, in execution order."""
        return [(node, node._parents, node.op) for node in self.nodes if node._backward is not None]

    def __len__(self):
        return len(self.nodes)


def _accumulate(tensor, grad):
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=DTYPE, copy=True).reshape(tensor.shape)
    else:
        tensor.grad += grad


def backward(loss):
    """
    Populate .grad of every requires_grad tensor reachable from a scalar loss.

    Gradients accumulate: calling backward twice without zero_grad() adds.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise BackwardError(f"backward() needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any tensor that requires a gradient")

    tape = Tape.from_output(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        _accumulate(node, grad)
        if node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
    return tape


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(grad):
        return (_unbroadcast(grad, a.shape) if a.requires_grad else None,
                _unbroadcast(grad, b.shape) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), _backward, 'add')


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(grad):
        return (_unbroadcast(grad, a.shape) if a.requires_grad else None,
                _unbroadcast(-grad, b.shape) if b.requires_grad else None)

    return _result(a.data - b.data, (a, b), _backward, 'sub')


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(grad):
        return (_unbroadcast(grad * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(grad * a.data, b.shape) if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), _backward, 'mul')


def sum_all(x):
    x = as_tensor(x)

    def _backward(grad):
        return (np.full(x.shape, float(grad)),)

    return _result(np.array(x.data.sum()), (x,), _backward, 'sum')


def relu(x):
    """
    max(0, x) elementwise; the subgradient at exactly 0 is 0.
    """
    x = as_tensor(x)
    mask = x.data > 0

    def _backward(grad):
        return (grad * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), _backward, 'relu')


def dense(x, weight, bias=None):
    """
    Fully connected layer: x[N,F] @ weight[F,O] + bias[O].
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense in_features mismatch: input dimension 1 is {x.shape[1]}, "
                         f"weight dimension 0 is {weight.shape[0]}")
    inputs = (x, weight)
    out = x.data @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense bias dimension 0 is {bias.shape}, expected ({weight.shape[1]},)")
        inputs += (bias,)
        out = out + bias.data

    def _backward(grad):
        grads = (grad @ weight.data.T if x.requires_grad else None,
                 x.data.T @ grad if weight.requires_grad else None)
        if bias is not None:
            grads += (grad.sum(axis=0) if bias.requires_grad else None,)
        return grads

    return _result(out, inputs, _backward, 'dense')


def conv_output_size(size, kernel, stride=1, dilation=1, padding=0):
    return (size + 2 * padding - ((kernel - 1) * dilation + 1)) // stride + 1


def _windows(xp, kh, kw, out_h, out_w, stride, dilation):
    # read-only view [N, C, H', W', Kh, Kw]; element (.., h, w, i, j) is xp[.., h*s + i*d, w*s + j*d]
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, shape=(n, c, out_h, out_w, kh, kw),
                      strides=(sn, sc, sh * stride, sw * stride, sh * dilation, sw * dilation),
                      writeable=False)


def conv2d(x, weight, bias=None, stride=1, dilation=1, groups=1, padding=0):
    """
    Grouped, dilated 2-D convolution over NCHW input with symmetric zero padding.

    output[n, o, h, w] = bias[o] + sum over (c, i, j) in o's group of
    weight[o, c, i, j] * input[n, c, h*stride + i*dilation, w*stride + j*dilation].
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [N,C,H,W], got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D [O,C/g,Kh,Kw], got shape {weight.shape}")
    if min(stride, dilation, groups) < 1 or padding < 0:
        raise ShapeError(f"invalid conv2d settings stride={stride} dilation={dilation} "
                         f"groups={groups} padding={padding}")
    n, c, h, w = x.shape
    o, cin_g, kh, kw = weight.shape
    if c % groups:
        raise GroupsError(f"input channels C={c} are not divisible by groups={groups}")
    if o % groups:
        raise GroupsError(f"output channels O={o} are not divisible by groups={groups}")
    if cin_g != c // groups:
        raise ShapeError(f"weight dimension 1 (C/g) is {cin_g}, expected {c // groups} "
                         f"for C={c} and groups={groups}")
    extent_h, extent_w = (kh - 1) * dilation + 1, (kw - 1) * dilation + 1
    if extent_h > h + 2 * padding:
        raise ShapeError(f"effective kernel height {extent_h} exceeds padded input height {h + 2 * padding}")
    if extent_w > w + 2 * padding:
        raise ShapeError(f"effective kernel width {extent_w} exceeds padded input width {w + 2 * padding}")
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d bias dimension 0 is {bias.shape}, expected ({o},)")
        inputs += (bias,)

    out_h = conv_output_size(h, kh, stride, dilation, padding)
    out_w = conv_output_size(w, kw, stride, dilation, padding)
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    cols = _windows(xp, kh, kw, out_h, out_w, stride, dilation)
    cout_g = o // groups

    out = np.empty((n, o, out_h, out_w), dtype=DTYPE)
    for g in range(groups):
        cs, os_ = slice(g * cin_g, (g + 1) * cin_g), slice(g * cout_g, (g + 1) * cout_g)
        out[:, os_] = np.tensordot(cols[:, cs], weight.data[os_], axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def _backward(grad):
        grad_x = grad_w = None
        if weight.requires_grad:
            grad_w = np.empty_like(weight.data)
            for g in range(groups):
                cs, os_ = slice(g * cin_g, (g + 1) * cin_g), slice(g * cout_g, (g + 1) * cout_g)
                grad_w[os_] = np.tensordot(grad[:, os_], cols[:, cs], axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            grad_xp = np.zeros_like(xp)
            rows = stride * (out_h - 1) + 1
            span = stride * (out_w - 1) + 1
            for g in range(groups):
                cs, os_ = slice(g * cin_g, (g + 1) * cin_g), slice(g * cout_g, (g + 1) * cout_g)
                # [N, H', W', C/g, Kh, Kw]
                grad_cols = np.tensordot(grad[:, os_], weight.data[os_], axes=([1], [0]))
                for i in range(kh):
                    for j in range(kw):
                        top, left = i * dilation, j * dilation
                        grad_xp[:, cs, top:top + rows:stride, left:left + span:stride] += \
                            grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            grad_x = np.ascontiguousarray(grad_xp[:, :, padding:padding + h, padding:padding + w])
        grads = (grad_x, grad_w)
        if bias is not None:
            grads += (grad.sum(axis=(0, 2, 3)) if bias.requires_grad else None,)
        return grads

    return _result(out, inputs, _backward, 'conv2d')


def max_pool2d(x, kernel=2, stride=None):
    """
    2-D max pooling without padding; ties route the gradient to the first maximum.
    """
    x = as_tensor(x)
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d input must be 4-D [N,C,H,W], got shape {x.shape}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"pool kernel {kernel} exceeds input extent {h}x{w}")
    out_h, out_w = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    windows = _windows(x.data, kernel, kernel, out_h, out_w, stride, 1).reshape(n, c, out_h, out_w, kernel * kernel)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def _backward(grad):
        grad_x = np.zeros_like(x.data)
        rows, span = stride * (out_h - 1) + 1, stride * (out_w - 1) + 1
        for tap in range(kernel * kernel):
            i, j = divmod(tap, kernel)
            grad_x[:, :, i:i + rows:stride, j:j + span:stride] += np.where(arg == tap, grad, 0.0)
        return (grad_x,)

    return _result(out, (x,), _backward, 'max_pool2d')


def global_avg_pool(x):
    """[N,C,H,W] -> [N,C] spatial mean."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-D [N,C,H,W], got shape {x.shape}")
    area = x.shape[2] * x.shape[3]

    def _backward(grad):
        return (np.broadcast_to(grad[:, :, None, None] / area, x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), _backward, 'global_avg_pool')


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or any(a != b for k, (a, b) in enumerate(zip(t.shape, reference)) if k != axis):
            raise ShapeError(f"concat along axis {axis}: shape {t.shape} does not match {reference}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(grad):
        return tuple(part if t.requires_grad else None
                     for t, part in zip(tensors, np.split(grad, bounds, axis=axis)))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward, 'concat')


def channel_norm(x, weight, bias, running_mean, running_var, training=False, momentum=0.1, eps=1e-5):
    """
    Per-channel affine normalization of NCHW input.

    In training mode the batch statistics normalize the input and are folded
    into running_mean / running_var in place. Otherwise the running statistics
    are used as constants, so the output of each example is independent of the
    rest of the batch.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4:
        raise ShapeError(f"channel_norm input must be 4-D [N,C,H,W], got shape {x.shape}")
    c = x.shape[1]
    for name, arr in (('weight', weight.data), ('bias', bias.data), ('running_mean', running_mean),
                      ('running_var', running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"channel_norm {name} dimension 0 is {arr.shape}, expected ({c},)")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps))[None, :, None, None]
    xhat = (x.data - mean[None, :, None, None]) * inv
    scale = weight.data[None, :, None, None]
    out = xhat * scale + bias.data[None, :, None, None]

    def _backward(grad):
        grad_x = None
        if x.requires_grad:
            grad_xhat = grad * scale
            if training:
                grad_x = inv / count * (count * grad_xhat
                                        - grad_xhat.sum(axis=axes, keepdims=True)
                                        - xhat * (grad_xhat * xhat).sum(axis=axes, keepdims=True))
            else:
                grad_x = grad_xhat * inv
        return (grad_x,
                (grad * xhat).sum(axis=axes) if weight.requires_grad else None,
                grad.sum(axis=axes) if bias.requires_grad else None)

    return _result(out, (x, weight, bias), _backward, 'channel_norm')


def softmax(logits):
    """Row-wise softmax of a [N,C] array (not taped)."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=DTYPE)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n, num_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n:
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise LabelError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    bad = (labels < 0) | (labels >= num_classes)
    if np.any(bad):
        raise LabelError(f"label {labels[bad][0]} is outside [0, {num_classes})")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits, labels, reduction='mean'):
    """
    Sparse categorical cross-entropy, -log softmax(logits)[label].

    reduction: 'mean' (batch mean, the training loss), 'sum' (each example
    carries the gradient of its own loss) or 'none' (per-example vector).
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D [N,C], got shape {logits.shape}")
    n, num_classes = logits.shape
    if n < 1:
        raise ShapeError("softmax_cross_entropy needs at least one example")
    if reduction not in ('mean', 'sum', 'none'):
        raise ValueError(f"unknown reduction '{reduction}'")
    labels = _check_labels(labels, n, num_classes)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    losses = np.maximum(log_norm - shifted[np.arange(n), labels], 0.0)
    if reduction == 'mean':
        value = np.array(losses.mean())
    elif reduction == 'sum':
        value = np.array(losses.sum())
    else:
        value = losses

    def _backward(grad):
        delta = softmax(logits.data)
        delta[np.arange(n), labels] -= 1.0
        if reduction == 'mean':
            return (delta * (float(grad) / n),)
        if reduction == 'sum':
            return (delta * float(grad),)
        return (delta * grad[:, None],)

    return _result(value, (logits,), _backward, 'softmax_cross_entropy')


def make_rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def uniform(shape, low=0.0, high=1.0, seed=None, requires_grad=False):
    return Tensor(make_rng(seed).uniform(low, high, size=shape), requires_grad=requires_grad)


def normal(shape, std=1.0, seed=None, requires_grad=False):
    return Tensor(make_rng(seed).normal(0.0, std, size=shape), requires_grad=requires_grad)


def numerical_gradient(fn, array, h=1e-5):
    """
    Central finite-difference gradient of a scalar function of one array.

    fn receives a perturbed copy of `array` and must return a float.
    """
    base = np.array(array, dtype=DTYPE, copy=True)
    grad = np.zeros_like(base)
    flat, flat_grad = base.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        original = flat[k]
        flat[k] = original + h
        plus = fn(base.copy())
        flat[k] = original - h
        minus = fn(base.copy())
        flat[k] = original
        flat_grad[k] = (plus - minus) / (2 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
