"""Dense NCHW layer primitives with hand-written backward passes.

Tensors are plain :class:`numpy.ndarray` objects laid out as
``(batch, channel, height, width)``.  ``float32`` is the working precision;
``float64`` is used by the gradient checks.  Every function here is pure
except :func:`batchnorm_forward` in train mode, which updates the running
statistics of the :class:`BatchNormState` it is given.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_CONV_IMPLS = ("ordered", "gemm")
_conv_impl = "ordered"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def get_conv_impl() -> str:
    return _conv_impl


def set_conv_impl(name: str) -> None:
    """Select the forward convolution kernel.

    ``"ordered"`` accumulates the ``(q, i, j)`` taps in row-major order, one
    vectorised multiply-add per tap, which makes it bit-identical to a scalar
    loop that sums in that order.  ``"gemm"`` hands the patch matrix to BLAS;
    it is several times faster but the summation order belongs to BLAS.
    """
    global _conv_impl
    if name not in _CONV_IMPLS:
        raise ValueError(f"unknown conv impl {name!r}; expected one of {_CONV_IMPLS}")
    _conv_impl = name


@contextlib.contextmanager
def conv_impl(name: str) -> Iterator[None]:
    previous = _conv_impl
    set_conv_impl(name)
    try:
        yield
    finally:
        set_conv_impl(previous)


def check_finite(x: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise FloatingPointError(f"{what}: {bad} non-finite element(s)")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_hw(h: int, w: int, kernel, stride, padding) -> tuple[int, int]:
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _check_conv(x: Tensor, w: Tensor, stride, padding) -> tuple[int, int]:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got x{x.shape} and w{w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: x{tuple(x.shape)} has {x.shape[1]} channels, "
            f"w{tuple(w.shape)} expects {w.shape[1]}"
        )
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise ShapeError(f"conv2d kernel must have odd sides, got w{tuple(w.shape)}")
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], w.shape[2:], stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d output would be empty: x{tuple(x.shape)}, w{tuple(w.shape)}, "
            f"stride={stride}, padding={padding}"
        )
    return ho, wo


def _pad(x: Tensor, padding, value=0.0) -> Tensor:
    ph, pw = _pair(padding)
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _windows(xp: Tensor, kh: int, kw: int, stride, ho: int, wo: int) -> Tensor:
    """View of shape (N, C, ho, wo, kh, kw) over a padded input."""
    sh, sw = _pair(stride)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def im2col(x: Tensor, kernel, stride, padding) -> Tensor:
    """Patch matrix of shape (C*kh*kw, N*ho*wo), rows in (c, i, j) order."""
    kh, kw = _pair(kernel)
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], (kh, kw), stride, padding)
    win = _windows(_pad(x, padding), kh, kw, stride, ho, wo)
    n, c = x.shape[:2]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def col2im(cols: Tensor, x_shape, kernel, stride, padding) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the input grid."""
    n, c, h, w = x_shape
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho, wo = conv_output_hw(h, w, (kh, kw), stride, padding)
    cols = cols.reshape(c, kh, kw, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += cols[:, :, i, j]
    return out[:, :, ph : ph + h, pw : pw + w]


def conv2d_forward(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation, ``out[n,p,u,v] = sum_{q,i,j} w[p,q,i,j] * xpad[n,q,u*s+i,v*s+j]``."""
    ho, wo = _check_conv(x, w, stride, padding)
    n = x.shape[0]
    p, q, kh, kw = w.shape
    dtype = np.result_type(x, w)
    if _conv_impl == "gemm":
        cols = im2col(x.astype(dtype, copy=False), (kh, kw), stride, padding)
        out = (w.reshape(p, -1).astype(dtype, copy=False) @ cols).reshape(p, n, ho, wo).transpose(1, 0, 2, 3)
        out = np.ascontiguousarray(out)
    else:
        win = _windows(_pad(x.astype(dtype, copy=False), padding), kh, kw, stride, ho, wo)
        wd = w.astype(dtype, copy=False)
        out = np.zeros((n, p, ho, wo), dtype=dtype)
        tmp = np.empty_like(out)
        for c in range(q):
            for i in range(kh):
                for j in range(kw):
                    np.multiply(wd[None, :, c, i, j, None, None], win[:, c, None, :, :, i, j], out=tmp)
                    out += tmp
    if bias is not None:
        out += bias.astype(dtype, copy=False)[None, :, None, None]
    return out


def conv2d_backward(grad_out: Tensor, x: Tensor, w: Tensor, stride=1, padding=0, with_bias: bool = False,
                    need_weight_grad: bool = True):
    """Return ``(grad_x, grad_w, grad_bias)``; ``grad_bias`` is None unless ``with_bias``."""
    ho, wo = _check_conv(x, w, stride, padding)
    n = x.shape[0]
    p, q, kh, kw = w.shape
    if grad_out.shape != (n, p, ho, wo):
        raise ShapeError(f"conv2d grad_out{tuple(grad_out.shape)} does not match forward output {(n, p, ho, wo)}")
    g = grad_out.transpose(1, 0, 2, 3).reshape(p, n * ho * wo)
    dcols = w.reshape(p, -1).T.astype(g.dtype, copy=False) @ g
    grad_x = col2im(dcols, x.shape, (kh, kw), stride, padding)
    grad_w = None
    if need_weight_grad:
        cols = im2col(x, (kh, kw), stride, padding)
        grad_w = (g @ cols.T).reshape(w.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if with_bias else None
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# elementwise, pooling, affine
# ---------------------------------------------------------------------------

def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    if grad_out.shape != x.shape:
        raise ShapeError(f"relu grad_out{grad_out.shape} vs x{x.shape}")
    return grad_out * (x > 0)


def add_forward(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def add_backward(grad_out: Tensor) -> tuple[Tensor, Tensor]:
    return grad_out, grad_out


def _maxpool_argmax(x: Tensor, kernel, stride, padding):
    kh, kw = _pair(kernel)
    ph, pw = _pair(padding)
    if ph * 2 >= kh + 1 or pw * 2 >= kw + 1:
        # a window made only of padding would have no defined maximum
        raise ShapeError(f"maxpool padding {padding} too large for kernel {kernel}")
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], (kh, kw), stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"maxpool output would be empty for input {tuple(x.shape)}")
    win = _windows(_pad(x, padding, -np.inf), kh, kw, stride, ho, wo)
    flat = win.reshape(*win.shape[:4], kh * kw)
    idx = flat.argmax(axis=-1)  # first occurrence in row-major window order
    return flat, idx, ho, wo


def maxpool_forward(x: Tensor, kernel=3, stride=2, padding=1) -> Tensor:
    """Max pooling; padded cells never win (they are treated as -inf)."""
    flat, idx, _, _ = _maxpool_argmax(x, kernel, stride, padding)
    return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]


def maxpool_backward(grad_out: Tensor, x: Tensor, kernel=3, stride=2, padding=1) -> Tensor:
    _, idx, ho, wo = _maxpool_argmax(x, kernel, stride, padding)
    if grad_out.shape != idx.shape:
        raise ShapeError(f"maxpool grad_out{grad_out.shape} vs output {idx.shape}")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    rows = np.arange(ho)[:, None] * sh + idx // kw
    cols = np.arange(wo)[None, :] * sw + idx % kw
    grad = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=grad_out.dtype)
    nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(grad, (nn[:, :, None, None], cc[:, :, None, None], rows, cols), grad_out)
    return grad[:, :, ph : ph + h, pw : pw + w]


def global_avgpool_forward(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3), keepdims=True)


def global_avgpool_backward(grad_out: Tensor, x_shape) -> Tensor:
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(grad_out / (h * w), x_shape).copy()


def linear_forward(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the flattened per-sample features; returns (N, out_features)."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[1]:
        raise ShapeError(f"linear expects {w.shape[1]} features, got x{tuple(x.shape)}")
    out = flat @ w.T
    if bias is not None:
        out = out + bias
    return out


def linear_backward(grad_out: Tensor, x: Tensor, w: Tensor, with_bias: bool = True):
    flat = x.reshape(x.shape[0], -1)
    grad_x = (grad_out @ w).reshape(x.shape)
    grad_w = grad_out.T @ flat
    grad_b = grad_out.sum(axis=0) if with_bias else None
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: str = "eval"
    # populated by a train-mode forward for the matching backward
    _saved: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )


def _bc(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None]


def batchnorm_forward(x: Tensor, state: BatchNormState, mode: str | None = None) -> Tensor:
    mode = mode or state.mode
    c = x.shape[1]
    if state.gamma.shape != (c,):
        raise ShapeError(f"batchnorm has {state.gamma.shape[0]} channels, input x{tuple(x.shape)}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2 samples")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = x.shape[0] * x.shape[2] * x.shape[3]
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var * count / max(count - 1, 1)
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - _bc(mean)) * _bc(inv_std)
    return (xhat * _bc(state.gamma) + _bc(state.beta)).astype(x.dtype, copy=False)


def batchnorm_backward(grad_out: Tensor, x: Tensor, state: BatchNormState, mode: str | None = None):
    """Return ``(grad_x, grad_gamma, grad_beta)``.

    In train mode the batch statistics are recomputed from ``x``; the running
    statistics are not touched.
    """
    mode = mode or state.mode
    axes = (0, 2, 3)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - _bc(mean)) * _bc(inv_std)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        grad_x = _bc(state.gamma * inv_std / m) * (
            m * grad_out - _bc(grad_beta) - xhat * _bc(grad_gamma)
        )
    else:
        grad_x = grad_out * _bc(state.gamma * inv_std)
    return grad_x.astype(x.dtype, copy=False), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n
