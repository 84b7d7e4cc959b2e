"""Differentiable layer primitives on ``Tensor``.

Each function computes its forward result with numpy and hands a closure for
the backward pass to ``Tensor.from_op``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from rerender_pi.tensor import Tensor


def conv2d(input, weight, bias=None, stride=1, padding=0):
    """2-d cross-correlation.

    Parameters
    ----------
    input : Tensor
        (N, C_in, H, W)
    weight : Tensor
        (C_out, C_in, k, k)
    bias : Tensor, optional
        (1, C_out, 1, 1), by default None
    stride : int, optional
        by default 1
    padding : int, optional
        zero padding on every side, by default 0

    Returns
    -------
    Tensor
        (N, C_out, floor((H + 2 padding - k) / stride) + 1, ...)

    Raises
    ------
    ValueError
        on a channel mismatch or a non-positive output size.
    """
    n, c_in, h, w = input.shape
    c_out, w_in, k, k2 = weight.shape
    if w_in != c_in or k != k2:
        raise ValueError('conv2d weight {} does not fit input {}'.format(weight.shape, input.shape))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError('conv2d output size ({}, {}) is not positive for input {}'.format(h_out, w_out, input.shape))

    padded = np.pad(input.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = (input, weight)
    if bias is not None:
        if bias.shape != (1, c_out, 1, 1):
            raise ValueError('conv2d bias must have shape {}, got {}'.format((1, c_out, 1, 1), bias.shape))
        out = out + bias.data
        parents = parents + (bias, )
    weight_data = weight.data

    def _backward(grad):
        grad_weight = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_padded = np.zeros(padded.shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                contribution = np.tensordot(grad, weight_data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                grad_padded[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += contribution
        grad_input = grad_padded[:, :, padding:padding + h, padding:padding + w]
        grads = (grad_input, grad_weight)
        if bias is not None:
            grads = grads + (grad.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1), )
        return grads

    return Tensor.from_op(out, parents, _backward, 'conv2d')


def avg_pool2(input):
    """2x2 average pooling with stride 2.

    Raises
    ------
    ValueError
        if height or width is odd.
    """
    n, c, h, w = input.shape
    if h % 2 or w % 2:
        raise ValueError('avg_pool2 needs even spatial dims, got {}x{}'.format(h, w))
    out = input.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def _backward(grad):
        return (np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) * 0.25, )

    return Tensor.from_op(out, (input, ), _backward, 'avg_pool2')


def resize_matrix(n_in, n_out, dtype=np.float64):
    """Linear interpolation weights from ``n_in`` to ``n_out`` samples with
    half-pixel centres (align_corners=False).

    Returns
    -------
    numpy.ndarray
        (n_out, n_in) matrix whose rows sum to one.
    """
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    low = np.floor(src).astype(int)
    high = np.minimum(low + 1, n_in - 1)
    frac = src - low
    matrix = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(matrix, (rows, low), 1 - frac)
    np.add.at(matrix, (rows, high), frac)
    return matrix.astype(dtype)


def bilinear_resize(input, out_h, out_w):
    """Bilinear resampling to ``(out_h, out_w)``.

    Raises
    ------
    ValueError
        if an output size is smaller than 1.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError('bilinear_resize output size must be positive, got {}x{}'.format(out_h, out_w))
    _, _, h, w = input.shape
    if (h, w) == (out_h, out_w):
        return Tensor.from_op(input.data.copy(), (input, ), lambda grad: (grad, ), 'bilinear_resize')
    rows = resize_matrix(h, out_h, input.dtype)
    cols = resize_matrix(w, out_w, input.dtype)
    out = rows @ input.data @ cols.T

    def _backward(grad):
        return (rows.T @ grad @ cols, )

    return Tensor.from_op(out, (input, ), _backward, 'bilinear_resize')


def grid_sample(input, flow):
    """Samples ``input`` at every output position displaced by ``flow``.

    Displacements are in normalized image coordinates, where the image spans
    [-1, 1] on both axes, so a field keeps its meaning when resized. Channel 0
    moves along x, channel 1 along y. Samples outside the image read the
    nearest border value.

    Parameters
    ----------
    input : Tensor
        (N, C, H, W)
    flow : Tensor
        (N, 2, H_out, W_out)

    Returns
    -------
    Tensor
        (N, C, H_out, W_out)

    Raises
    ------
    ValueError
        if flow does not have two channels or batch sizes differ.
    """
    n, c, h, w = input.shape
    if flow.shape[1] != 2:
        raise ValueError('flow must have 2 channels, got {}'.format(flow.shape[1]))
    if flow.shape[0] != n:
        raise ValueError('flow batch {} does not match input batch {}'.format(flow.shape[0], n))
    h_out, w_out = flow.shape[2:]

    fx = flow.data[:, 0].astype(np.float64)
    fy = flow.data[:, 1].astype(np.float64)
    base_x = (np.arange(w_out) + 0.5) * (w / w_out) - 0.5
    base_y = (np.arange(h_out) + 0.5) * (h / h_out) - 0.5
    raw_x = base_x[None, None, :] + fx * (w / 2)
    raw_y = base_y[None, :, None] + fy * (h / 2)
    ix = np.clip(raw_x, 0, w - 1)
    iy = np.clip(raw_y, 0, h - 1)
    x0 = np.floor(ix).astype(int)
    y0 = np.floor(iy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (ix - x0).astype(input.dtype)[:, None]
    wy = (iy - y0).astype(input.dtype)[:, None]

    batch = np.arange(n)[:, None, None]
    data = input.data

    def gather(rows, cols):
        return data[batch, :, rows, cols].transpose(0, 3, 1, 2)

    v00, v01, v10, v11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)

    inside_x = ((raw_x >= 0) & (raw_x <= w - 1))[:, None]
    inside_y = ((raw_y >= 0) & (raw_y <= h - 1))[:, None]

    def _backward(grad):
        plane = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)
        plane = plane[:, :, None, None]
        index, weights = [], []
        for rows, cols, weight in ((y0, x0, (1 - wy) * (1 - wx)), (y0, x1, (1 - wy) * wx), (y1, x0, wy * (1 - wx)),
                                   (y1, x1, wy * wx)):
            index.append(np.broadcast_to(plane + (rows * w + cols)[:, None], grad.shape))
            weights.append(grad * weight)
        grad_input = np.bincount(np.concatenate([i.ravel() for i in index]),
                                 weights=np.concatenate([v.ravel() for v in weights]),
                                 minlength=n * c * h * w).reshape(n, c, h, w)
        d_ix = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        d_iy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        grad_fx = (grad * d_ix * inside_x).sum(axis=1) * (w / 2)
        grad_fy = (grad * d_iy * inside_y).sum(axis=1) * (h / 2)
        return grad_input, np.stack([grad_fx, grad_fy], axis=1)

    return Tensor.from_op(out, (input, flow), _backward, 'grid_sample')


def instance_norm(input, eps=1e-5):
    """Normalizes every (sample, channel) plane to zero mean and unit
    variance (biased estimate).

    Raises
    ------
    ValueError
        if a plane has fewer than two pixels.
    """
    if input.shape[2] * input.shape[3] < 2:
        raise ValueError('instance_norm needs at least 2 pixels per channel, got {}'.format(input.shape))
    x = input.data
    centred = x - x.mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=(2, 3), keepdims=True) + eps)
    out = centred * inv_std

    def _backward(grad):
        mean_grad = grad.mean(axis=(2, 3), keepdims=True)
        mean_grad_out = (grad * out).mean(axis=(2, 3), keepdims=True)
        return (inv_std * (grad - mean_grad - out * mean_grad_out), )

    return Tensor.from_op(out, (input, ), _backward, 'instance_norm')


def relu(input):
    x = input.data
    positive = (x > 0).astype(x.dtype)
    return Tensor.from_op(x * positive, (input, ), lambda grad: (grad * positive, ), 'relu')


def sigmoid(input):
    out = special.expit(input.data)
    return Tensor.from_op(out, (input, ), lambda grad: (grad * out * (1 - out), ), 'sigmoid')


def concat(*tensors, axis=1):
    """Stacks tensors along ``axis`` (channels by default).

    Raises
    ------
    ValueError
        if the other dimensions disagree.
    """
    if not tensors:
        raise ValueError('concat needs at least one tensor')
    reference = tensors[0].shape
    for tensor in tensors[1:]:
        others = [size for i, size in enumerate(tensor.shape) if i != axis]
        expected = [size for i, size in enumerate(reference) if i != axis]
        if others != expected:
            raise ValueError('Cannot concat shapes {} and {} along axis {}'.format(reference, tensor.shape, axis))
    bounds = np.cumsum([0] + [tensor.shape[axis] for tensor in tensors])

    def _backward(grad):
        return tuple(np.take(grad, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(np.concatenate([tensor.data for tensor in tensors], axis=axis), tensors, _backward,
                          'concat')


def downsample2(input):
    """Bilinear halving of both spatial dims."""
    return bilinear_resize(input, input.shape[2] // 2, input.shape[3] // 2)


def upsample2(input):
    """Bilinear doubling of both spatial dims."""
    return bilinear_resize(input, input.shape[2] * 2, input.shape[3] * 2)
