"""Dense-array operations with hand-written backward passes.

There is no tape or autodiff here: every operation is a pure function over
numpy arrays, and each one ships a matching ``*_backward`` that maps an
upstream gradient onto gradients for the inputs. Callers wire the chain rule
explicitly, which keeps every term of the backward pass visible and testable
against finite differences.

All ops preserve the dtype of their inputs (float64 by default, float32 for
speed) and raise ``NonFiniteError`` instead of silently propagating NaN/Inf.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "assert_finite",
    "conv2d",
    "conv2d_backward",
    "batched_matvec",
    "batched_matvec_backward",
    "softmax",
    "softmax_backward",
    "reduce_sum",
    "reduce_sum_backward",
    "reduce_mean",
    "reduce_mean_backward",
    "vec_norm",
    "vec_norm_backward",
    "relu",
    "relu_backward",
    "sigmoid",
    "sigmoid_backward",
    "add",
    "add_backward",
    "mul",
    "mul_backward",
    "scale",
    "scale_backward",
    "squash",
    "squash_backward",
]


class ShapeError(ValueError):
    """Operand shapes do not conform; the message names the offending dimension."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf; surfaced immediately rather than propagated."""


def assert_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        kind = "NaN" if np.isnan(arr).any() else "Inf"
        raise NonFiniteError(f"{name}: output contains {kind}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_hw(H, W, k, stride):
    return (H - k) // stride + 1, (W - k) // stride + 1


def _im2col(x, k, stride):
    # x: [B, C, H, W] -> [B*Ho*Wo, C*k*k]; one gather copy feeding one GEMM
    B, C, H, W = x.shape
    Ho, Wo = _conv_out_hw(H, W, k, stride)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]          # [B, C, Ho, Wo, k, k] view
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(B * Ho * Wo, C * k * k)


def _col2im(cols, x_shape, k, stride):
    # inverse scatter-add of _im2col; cols: [B*Ho*Wo, C*k*k]
    B, C, H, W = x_shape
    Ho, Wo = _conv_out_hw(H, W, k, stride)
    blocks = cols.reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 4, 5, 1, 2)
    x = np.zeros(x_shape, dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            x[:, :, ki : ki + Ho * stride : stride,
              kj : kj + Wo * stride : stride] += blocks[:, :, ki, kj]
    return x


def _check_conv_shapes(x, kernels, bias, stride):
    B, C, H, W = x.shape
    C_out, C_k, k, k2 = kernels.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernels must be square, got {k}x{k2}")
    if C_k != C:
        raise ShapeError(
            f"conv2d: kernel input-channel dim {C_k} != input channel dim {C}")
    if k > H or k > W:
        raise ShapeError(f"conv2d: kernel size {k} exceeds input {H}x{W}")
    if bias.shape != (C_out,):
        raise ShapeError(
            f"conv2d: bias dim {bias.shape} != output channel dim ({C_out},)")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
           stride: int = 1) -> np.ndarray:
    """Valid (no padding) 2-d convolution.

    Accepts one image [C, H, W] or a batch [B, C, H, W]; the kernel tensor is
    [C_out, C_in, k, k]. Output height is floor((H - k)/stride) + 1.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    _check_conv_shapes(x, kernels, bias, stride)
    B, C, H, W = x.shape
    C_out, _, k, _ = kernels.shape
    Ho, Wo = _conv_out_hw(H, W, k, stride)
    cols = _im2col(x, k, stride)
    out = cols @ kernels.reshape(C_out, -1).T        # [B*Ho*Wo, C_out]
    out = out.reshape(B, Ho, Wo, C_out).transpose(0, 3, 1, 2) \
        + bias[:, None, None]
    assert_finite("conv2d", out)
    return out[0] if single else out


def conv2d_backward(x, kernels, stride, grad_out, need_input_grad=True):
    """Gradients of conv2d w.r.t. (input, kernels, bias).

    ``need_input_grad=False`` skips the input-gradient scatter for the first
    layer of a network.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
        grad_out = grad_out[None]
    B = x.shape[0]
    C_out, _, k, _ = kernels.shape
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)) \
        .reshape(-1, C_out)                          # [B*Ho*Wo, C_out]
    cols = _im2col(x, k, stride)
    grad_bias = g.sum(axis=0)
    grad_kernels = (g.T @ cols).reshape(kernels.shape)
    grad_x = None
    if need_input_grad:
        grad_cols = g @ kernels.reshape(C_out, -1)
        grad_x = _col2im(grad_cols, x.shape, k, stride)
        if single:
            grad_x = grad_x[0]
    return grad_x, grad_kernels, grad_bias


# ---------------------------------------------------------------------------
# batched matrix-vector product
# ---------------------------------------------------------------------------

def batched_matvec(W: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-slice matrix-vector product: W[..., d_out, d_in] @ u[..., d_in].

    Leading (batch) dimensions broadcast under numpy rules.
    """
    if W.shape[-1] != u.shape[-1]:
        raise ShapeError(
            f"batched_matvec: W trailing dim d_in={W.shape[-1]} != "
            f"u trailing dim {u.shape[-1]}")
    out = np.matmul(W, u[..., None])[..., 0]
    return assert_finite("batched_matvec", out)


def batched_matvec_backward(W, u, grad_out):
    """Gradients of batched_matvec w.r.t. (W, u), summed over broadcast axes."""
    grad_W = _unbroadcast(grad_out[..., :, None] * u[..., None, :], W.shape)
    grad_u = _unbroadcast(np.matmul(np.swapaxes(W, -1, -2),
                                    grad_out[..., None])[..., 0], u.shape)
    return grad_W, grad_u


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stabilized softmax (max subtraction) along ``axis``."""
    if not -logits.ndim <= axis < logits.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {logits.shape}")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return assert_finite("softmax", out)


def softmax_backward(out, grad_out, axis: int = -1):
    """VJP of softmax given its own output ``out``."""
    inner = (grad_out * out).sum(axis=axis, keepdims=True)
    return out * (grad_out - inner)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(x, axis=None, keepdims=False):
    out = x.sum(axis=axis, keepdims=keepdims)
    return assert_finite("reduce_sum", np.asarray(out))


def reduce_sum_backward(x_shape, axis, keepdims, grad_out):
    grad = np.asarray(grad_out)
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, x_shape).copy()


def reduce_mean(x, axis=None, keepdims=False):
    out = x.mean(axis=axis, keepdims=keepdims)
    return assert_finite("reduce_mean", np.asarray(out))


def reduce_mean_backward(x_shape, axis, keepdims, grad_out):
    full = np.prod(x_shape)
    kept = np.prod(np.asarray(grad_out).shape) if axis is not None else 1
    count = full // max(kept, 1) if axis is not None else full
    return reduce_sum_backward(x_shape, axis, keepdims, grad_out) / count


def vec_norm(x):
    """Euclidean norm along the last axis; norm of a zero vector is 0."""
    out = np.sqrt((x * x).sum(axis=-1))
    return assert_finite("vec_norm", out)


def vec_norm_backward(x, norm, grad_out):
    # grad is x/|x| scaled by upstream; defined as 0 at the origin
    safe = np.where(norm > 0.0, norm, 1.0)
    return grad_out[..., None] * x / safe[..., None]


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0.0)


def sigmoid(x):
    # split by sign to avoid exp overflow for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return assert_finite("sigmoid", out)


def sigmoid_backward(out, grad_out):
    return grad_out * out * (1.0 - out)


def add(a, b):
    return assert_finite("add", a + b)


def add_backward(a_shape, b_shape, grad_out):
    return _unbroadcast(grad_out, a_shape), _unbroadcast(grad_out, b_shape)


def mul(a, b):
    return assert_finite("mul", a * b)


def mul_backward(a, b, grad_out):
    return _unbroadcast(grad_out * b, a.shape), _unbroadcast(grad_out * a, b.shape)


def scale(x, alpha: float):
    return assert_finite("scale", x * alpha)


def scale_backward(alpha: float, grad_out):
    return grad_out * alpha


# ---------------------------------------------------------------------------
# squash nonlinearity
# ---------------------------------------------------------------------------

def squash(s: np.ndarray, epsilon: float = 1e-8) -> np.ndarray:
    """Shrink vectors along the last axis to norm |s|^2/(1+|s|^2) < 1.

    Direction is preserved; ``epsilon`` in the norm denominator removes the
    zero-vector singularity (squash(0) = 0).
    """
    n = vec_norm(s)
    factor = n / ((1.0 + n * n) * (n + epsilon)) * n
    out = s * factor[..., None]
    return assert_finite("squash", out)


def squash_backward(s: np.ndarray, grad_out: np.ndarray,
                    epsilon: float = 1e-8) -> np.ndarray:
    """VJP of squash, exact for the epsilon-guarded forward above."""
    n = vec_norm(s)
    denom = (1.0 + n * n) * (n + epsilon)
    f = n * n / denom
    # d f / d n, from f(n) = n^2 / ((1+n^2)(n+eps))
    dfdn = (2.0 * n * denom - n * n * (2.0 * n * (n + epsilon) + (1.0 + n * n))) \
        / (denom * denom)
    safe = np.where(n > 0.0, n, 1.0)
    dot = (grad_out * s).sum(axis=-1)
    return grad_out * f[..., None] + s * (dfdn * dot / safe)[..., None]
