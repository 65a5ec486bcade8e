import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.exceptions import TensorShapeError

Tensor = np.ndarray

PRECISIONS = {
    "single": np.float32,
    "double": np.float64,
}


def as_tensor(data, precision="single"):
    if precision not in PRECISIONS:
        raise ValueError("Invalid precision " + str(precision))
    return np.ascontiguousarray(data, dtype=PRECISIONS[precision])


def _batched(x, ndim):
    """Adds a leading batch axis when a single sample is given."""
    if x.ndim == ndim:
        return x[np.newaxis], True
    if x.ndim == ndim + 1:
        return x, False
    raise TensorShapeError(
        f"expected {ndim}-d sample or {ndim + 1}-d batch, got shape {x.shape}")


class LayerCache:
    """Forward-pass state kept for the backward pass of one layer."""

    def __init__(self, inputs, pre_activation=None, argmax=None, mask=None):
        self.inputs = inputs
        self.pre_activation = pre_activation
        self.argmax = argmax
        self.mask = mask


def conv2d(x, kernels, bias):
    """Valid-padding, stride-1 convolution on H×W×C (or B×H×W×C) input."""
    xb, single = _batched(x, 3)
    k, k2, cin, cout = kernels.shape
    if k != k2:
        raise TensorShapeError(f"kernels must be square, got {kernels.shape}")
    if xb.shape[3] != cin:
        raise TensorShapeError(
            f"conv2d channel mismatch: input has {xb.shape[3]} channels, kernels expect {cin}")
    if xb.shape[1] < k or xb.shape[2] < k:
        raise TensorShapeError(
            f"conv2d input {xb.shape[1]}x{xb.shape[2]} smaller than kernel {k}x{k}")
    if bias.shape != (cout,):
        raise TensorShapeError(f"bias shape {bias.shape} does not match {cout} filters")

    # (B, H-K+1, W-K+1, Cin, K, K)
    windows = sliding_window_view(xb, (k, k), axis=(1, 2))
    out = np.tensordot(windows, kernels.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    out += bias
    return out[0] if single else out


def conv2d_backward(grad_out, x, kernels):
    """Returns (grad_input, grad_kernels, grad_bias)."""
    xb, single = _batched(x, 3)
    gb, _ = _batched(grad_out, 3)
    k = kernels.shape[0]

    windows = sliding_window_view(xb, (k, k), axis=(1, 2))
    grad_kernels = np.tensordot(windows, gb, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    grad_bias = gb.sum(axis=(0, 1, 2))

    # full correlation of the upstream gradient with the flipped kernels
    padded = np.pad(gb, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
    gwin = sliding_window_view(padded, (k, k), axis=(1, 2))
    flipped = kernels[::-1, ::-1].transpose(3, 0, 1, 2)
    grad_input = np.tensordot(gwin, flipped, axes=([3, 4, 5], [0, 1, 2]))

    if single:
        grad_input = grad_input[0]
    return grad_input, grad_kernels, grad_bias


def maxpool2d(x):
    """2×2 stride-2 max pooling; odd trailing rows/columns are dropped.

    Returns (output, argmax) where argmax indexes the row-major position
    (0..3) inside each window, first occurrence on ties.
    """
    xb, single = _batched(x, 3)
    b, h, w, c = xb.shape
    if h < 2 or w < 2:
        raise TensorShapeError(f"maxpool2d needs at least 2x2 input, got {h}x{w}")
    h2, w2 = h // 2, w // 2

    windows = xb[:, :2 * h2, :2 * w2].reshape(b, h2, 2, w2, 2, c)
    windows = windows.transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4)
    argmax = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, argmax[..., np.newaxis], axis=-1)[..., 0]

    if single:
        return out[0], argmax[0]
    return out, argmax


def maxpool2d_backward(grad_out, argmax, input_shape):
    gb, single = _batched(grad_out, 3)
    ab, _ = _batched(argmax, 3)
    b, h2, w2, c = gb.shape

    routed = np.zeros((b, h2, w2, c, 4), dtype=gb.dtype)
    np.put_along_axis(routed, ab[..., np.newaxis], gb[..., np.newaxis], axis=-1)
    routed = routed.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    routed = routed.reshape(b, 2 * h2, 2 * w2, c)

    h, w = input_shape[-3], input_shape[-2]
    grad_input = np.zeros((b, h, w, c), dtype=gb.dtype)
    grad_input[:, :2 * h2, :2 * w2] = routed
    return grad_input[0] if single else grad_input


def dense(x, weights, bias):
    xb, single = _batched(x, 1)
    if weights.ndim != 2 or xb.shape[1] != weights.shape[0]:
        raise TensorShapeError(
            f"dense dimension mismatch: input {xb.shape[1]}, weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise TensorShapeError(f"bias shape {bias.shape} does not match {weights.shape[1]} units")
    out = xb @ weights + bias
    return out[0] if single else out


def dense_backward(grad_out, x, weights):
    """Returns (grad_input, grad_weights, grad_bias)."""
    xb, single = _batched(x, 1)
    gb, _ = _batched(grad_out, 1)
    grad_weights = xb.T @ gb
    grad_bias = gb.sum(axis=0)
    grad_input = gb @ weights.T
    return (grad_input[0] if single else grad_input), grad_weights, grad_bias


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, onehot):
    """Mean categorical cross-entropy over the batch.

    Returns (loss, probs, grad_logits); grad_logits is the gradient of the
    mean loss, i.e. probs - onehot for a single vector.
    """
    lb, single = _batched(logits, 1)
    ob, _ = _batched(onehot, 1)
    if lb.shape != ob.shape:
        raise TensorShapeError(f"logits {lb.shape} and onehot {ob.shape} differ")
    valid = np.all((ob == 0) | (ob == 1), axis=1) & (ob.sum(axis=1) == 1)
    if not np.all(valid):
        raise TensorShapeError("onehot rows must contain exactly one 1 and zeros elsewhere")

    shifted = lb - lb.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)

    n = lb.shape[0]
    loss = float(-(log_probs * ob).sum() / n)
    grad = (probs - ob) / n

    if single:
        return loss, probs[0], grad[0]
    return loss, probs, grad
