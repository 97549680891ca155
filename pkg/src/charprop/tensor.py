"""Dense layer primitives with analytic gradients.

The public functions take NCHW arrays. Internally the network keeps
activations channel-major (C, N, H, W): unfolded columns then multiply
straight into the next activation without transposes. Every function is
dtype-preserving; the network runs in float32 and gradient checks feed
float64 through the same code paths.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


@dataclass
class LayerGrad:
    """Gradients produced by one backward step.

    ``input_grad`` is ``None`` when the caller asked to skip it (the first
    layer of a network never needs it).
    """

    input_grad: np.ndarray | None
    param_grads: list[np.ndarray] = field(default_factory=list)


def _check_4d(name: str, x: np.ndarray) -> None:
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty 4-d array, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _to_cn(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


# ---------------------------------------------------------------------------
# channel-major kernels


def unfold(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(C, N, H, W) -> (C*kh*kw, N*Ho*Wo) column matrix."""
    c, n, h, w = x.shape
    ho, wo = conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv_forward_cn(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, stride: int):
    """Convolution on a channel-major input; returns (output, columns)."""
    f, c, kh, kw = kernels.shape
    _, n, h, w = x.shape
    cols = unfold(x, kh, kw, stride)
    out = kernels.reshape(f, -1) @ cols
    out += bias[:, None]
    ho, wo = conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)
    return out.reshape(f, n, ho, wo), cols


def conv_backward_cn(
    input_shape: tuple[int, ...],
    cols: np.ndarray,
    kernels: np.ndarray,
    stride: int,
    output_grad: np.ndarray,
    compute_input_grad: bool = True,
) -> LayerGrad:
    f, c, kh, kw = kernels.shape
    _, n, h, w = input_shape
    _, _, ho, wo = output_grad.shape
    g = output_grad.reshape(f, -1)
    d_kernels = (g @ cols.T).reshape(kernels.shape)
    d_bias = g.sum(axis=1)
    d_x = None
    if compute_input_grad:
        d_cols = (kernels.reshape(f, -1).T @ g).reshape(c, kh, kw, n, ho, wo)
        d_x = np.zeros(input_shape, dtype=output_grad.dtype)
        for i in range(kh):
            for j in range(kw):
                d_x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d_cols[:, i, j]
    return LayerGrad(d_x, [d_kernels, d_bias])


def pool_forward_cn(x: np.ndarray, window: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling over the last two axes; layout of the first two is irrelevant."""
    h, w = x.shape[2:]
    ho, wo = conv_output_size(h, window, stride), conv_output_size(w, window, stride)
    out = x[:, :, 0:stride * ho:stride, 0:stride * wo:stride].copy()
    argmax = np.zeros(out.shape, dtype=np.int16)
    for i in range(window):
        for j in range(window):
            if i == 0 and j == 0:
                continue
            v = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            better = v > out  # strict: ties keep the earlier index
            np.maximum(out, v, out=out)
            np.copyto(argmax, np.int16(i * window + j), where=better)
    return out, argmax


def pool_backward_cn(
    input_shape: tuple[int, ...], argmax: np.ndarray, window: int, stride: int, output_grad: np.ndarray
) -> np.ndarray:
    ho, wo = argmax.shape[2:]
    d_x = np.zeros(input_shape, dtype=output_grad.dtype)
    for i in range(window):
        for j in range(window):
            hit = argmax == i * window + j
            d_x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += output_grad * hit
    return d_x


# ---------------------------------------------------------------------------
# public NCHW operations


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid (unpadded) cross-correlation.

    Args:
        x: input of shape (N, C, H, W).
        kernels: filters of shape (F, C, kh, kw).
        bias: vector of length F.
        stride: step between adjacent windows, same on both axes.

    Returns:
        Array of shape (N, F, (H-kh)//stride+1, (W-kw)//stride+1).
    """
    _check_4d("input", x)
    _check_4d("kernels", kernels)
    f, c, kh, kw = kernels.shape
    if x.shape[1] != c:
        raise ShapeError(f"input shape {x.shape} does not match kernel shape {kernels.shape}")
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(f"kernel shape {kernels.shape} larger than input shape {x.shape}")
    if bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match kernel shape {kernels.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    out, _ = conv_forward_cn(_to_cn(x), kernels, bias, stride)
    return _to_cn(out)


def conv2d_backward(
    x: np.ndarray,
    kernels: np.ndarray,
    stride: int,
    output_grad: np.ndarray,
    compute_input_grad: bool = True,
) -> LayerGrad:
    """Gradients of a valid convolution.

    Returns a LayerGrad whose ``param_grads`` are ``[d_kernels, d_bias]``.
    """
    f, c, kh, kw = kernels.shape
    n, _, h, w = x.shape
    ho, wo = conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)
    if x.shape[1] != c or output_grad.shape != (n, f, ho, wo):
        raise ShapeError(
            f"output_grad shape {output_grad.shape} does not match expected {(n, f, ho, wo)} "
            f"for input {x.shape} and kernels {kernels.shape}"
        )
    xc = _to_cn(x)
    lg = conv_backward_cn(xc.shape, unfold(xc, kh, kw, stride), kernels, stride, _to_cn(output_grad),
                          compute_input_grad)
    if lg.input_grad is not None:
        lg.input_grad = _to_cn(lg.input_grad)
    return lg


def maxpool_forward(x: np.ndarray, window: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling without padding.

    Returns the pooled array and, per output cell, the flat index (row-major
    within the window) of the winning input. Ties go to the first index.
    """
    _check_4d("input", x)
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    if window > x.shape[2] or window > x.shape[3]:
        raise ShapeError(f"pool window {window} larger than input shape {x.shape}")
    return pool_forward_cn(x, window, stride)


def maxpool_backward(
    input_shape: tuple[int, ...], argmax: np.ndarray, window: int, stride: int, output_grad: np.ndarray
) -> np.ndarray:
    if output_grad.shape != argmax.shape:
        raise ShapeError(f"output_grad shape {output_grad.shape} does not match {argmax.shape}")
    return pool_backward_cn(input_shape, argmax, window, stride, output_grad)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, output_grad: np.ndarray) -> np.ndarray:
    """Pass ``output_grad`` through where the forward input was positive."""
    return np.where(x > 0, output_grad, 0).astype(output_grad.dtype, copy=False)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against 1-based class labels.

    ``logits`` is either a single vector of K scores with an integer label,
    or an (N, K) matrix with N labels. The loss is averaged over rows and
    the returned gradient is with respect to that mean.
    """
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(labels))
    k = z.shape[1]
    if y.shape != (z.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match logits shape {logits.shape}")
    if np.any(y < 1) or np.any(y > k):
        raise ValueError(f"labels must lie in [1, {k}], got {y}")
    idx = y.astype(np.intp) - 1
    rows = np.arange(z.shape[0])
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[rows, idx] - log_norm
    loss = float(-log_p.mean())
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, idx] -= 1
    grad /= z.shape[0]
    return loss, (grad[0] if single else grad)


def mse_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over the entries where ``mask`` is nonzero.

    An empty mask yields zero loss and zero gradient.
    """
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(
            f"pred {pred.shape}, target {target.shape} and mask {mask.shape} must match"
        )
    m = mask != 0
    count = int(m.sum())
    if count == 0:
        return 0.0, np.zeros_like(pred)
    diff = np.where(m, pred - target, 0)
    loss = float((diff**2).sum() / count)
    return loss, (2.0 / count) * diff.astype(pred.dtype, copy=False)
