"""
ops.py
Layer-level differentiable ops: convolution, affine map, activations, loss
"""
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from engine.tensor import Tensor, make_result
from utils.errors import ShapeError


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """
    Cross-correlation of a [N, C1, H, W] batch with a [C2, C1, K, K] kernel.

    Output extent per spatial axis is floor((H + 2*padding - K) / stride) + 1.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c1, h, w = x.shape
    c2, kc1, kh, kw = kernel.shape
    if kc1 != c1:
        raise ShapeError(
            f"conv2d channel mismatch: input has C1={c1} (shape {x.shape}), "
            f"kernel expects C1={kc1} (shape {kernel.shape})"
        )
    if kh != kw:
        raise ShapeError(f"conv2d needs a square kernel, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.shape != (c2,):
        raise ShapeError(f"conv2d bias must have shape ({c2},), got {bias.shape}")

    k = kh
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # [N, H', W', C1, K, K] -> rows of C1*K*K
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c1 * k * k)
    w_mat = kernel.data.reshape(c2, c1 * k * k)
    out_rows = cols @ w_mat.T
    if bias is not None:
        out_rows = out_rows + bias.data
    out_data = out_rows.reshape(n, h_out, w_out, c2).transpose(0, 3, 1, 2)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = make_result(np.ascontiguousarray(out_data), parents, "conv2d")

    def _backward():
        g_rows = out.grad.transpose(0, 2, 3, 1).reshape(-1, c2)
        if kernel.requires_grad:
            kernel._accumulate((g_rows.T @ cols).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g_rows.sum(axis=0))
        if x.requires_grad:
            g_cols = (g_rows @ w_mat).reshape(n, h_out, w_out, c1, k, k)
            g_xp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    g_xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += (
                        g_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            x._accumulate(g_xp[:, :, padding:padding + h, padding:padding + w])
    out._backward = _backward
    return out


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of a [N, Din] batch with a [Dout, Din] weight"""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear needs 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear dimension mismatch: input Din={x.shape[1]}, weight Din={weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
    out = x @ weight.transpose()
    if bias is not None:
        out = out + bias
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = make_result(np.where(mask, x.data, 0.0), (x,), "relu")

    def _backward():
        x._accumulate(out.grad * mask)
    out._backward = _backward
    return out


def avg_pool_global(x: Tensor) -> Tensor:
    """Mean over the spatial axes of a [N, C, H, W] map"""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool_global needs [N, C, H, W], got {x.shape}")
    return x.mean(axis=(2, 3))


def cross_entropy(logits: Tensor, labels: Union[np.ndarray, Sequence[int]]) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]"""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy needs [N, Classes] logits, got {logits.shape}")
    n, classes = logits.shape
    if n == 0:
        raise ShapeError("cross_entropy on an empty batch")
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy needs {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ShapeError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -log_probs[np.arange(n), labels].mean()
    out = make_result(np.array(loss), (logits,), "cross_entropy")

    def _backward():
        g = np.exp(log_probs)
        g[np.arange(n), labels] -= 1.0
        logits._accumulate(g * (out.grad / n))
    out._backward = _backward
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
