"""Dense float64 array kernels with explicit forward/backward pairs.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 laid out
row-major.  Layers in :mod:`slicenet.convnet` wire the backward passes
together by hand; there is no autodiff graph.

Conventions:

* convolution is cross-correlation (no kernel flip) with zero padding;
* ReLU has derivative 0 at exactly 0;
* max-pool ties go to the lowest flat index inside the window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are not conformable."""


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    """Return ``x`` as a C-contiguous array, validating extents and rank."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim < 1:
        raise ShapeError("tensor rank must be >= 1")
    arr = np.ascontiguousarray(arr)
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


def _require_rank(name: str, x: np.ndarray, rank: int) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}, got shape {x.shape}")


# -- convolution -------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"pad must be >= 0, got {pad}")
    if kernel > size + 2 * pad:
        raise ShapeError(f"kernel extent {kernel} exceeds padded input extent {size + 2 * pad}")
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    hi, wi = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + hi : stride, j : j + wi : stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def _col2im(cols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = padded_shape[:2]
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    hi, wi = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + hi : stride, j : j + wi : stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out


@dataclass
class ConvCache:
    input_shape: tuple
    cols: np.ndarray
    kernels: np.ndarray
    stride: int
    pad: int
    out_hw: tuple


def conv2d_forward(x, kernels, bias, stride: int = 1, pad: int = 0):
    """Cross-correlate ``x[N,C,H,W]`` with ``kernels[F,C,kH,kW]``.

    Returns ``(out[N,F,H',W'], cache)``.
    """
    x = np.asarray(x, dtype=DTYPE)
    kernels = np.asarray(kernels, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    _require_rank("input", x, 4)
    _require_rank("kernels", kernels, 4)
    n, c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"input has {c} channels but kernels expect {kc} (kernels shape {kernels.shape})")
    if bias.shape != (f,):
        raise ShapeError(f"bias must have shape ({f},), got {bias.shape}")
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = kernels.reshape(f, -1) @ cols + bias[:, None]
    out = np.ascontiguousarray(out.reshape(f, n, oh, ow).transpose(1, 0, 2, 3))
    return out, ConvCache(x.shape, cols, kernels, stride, pad, (oh, ow))


def conv2d_backward(grad_out, cache: ConvCache, input_grad: bool = True):
    """Return ``(grad_input, grad_kernels, grad_bias)`` for a cached forward call.

    With ``input_grad=False`` the (costly) input gradient is skipped and returned as None.
    """
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    n, c, h, w = cache.input_shape
    f, _, kh, kw = cache.kernels.shape
    oh, ow = cache.out_hw
    if grad_out.shape != (n, f, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {(n, f, oh, ow)}")
    g = grad_out.transpose(1, 0, 2, 3).reshape(f, -1)
    grad_bias = g.sum(axis=1)
    grad_kernels = (g @ cache.cols.T).reshape(cache.kernels.shape)
    if not input_grad:
        return None, grad_kernels, grad_bias
    dcols = cache.kernels.reshape(f, -1).T @ g
    p = cache.pad
    dxp = _col2im(dcols, (n, c, h + 2 * p, w + 2 * p), kh, kw, cache.stride, oh, ow)
    grad_input = dxp[:, :, p : p + h, p : p + w] if p else dxp
    return np.ascontiguousarray(grad_input), grad_kernels, grad_bias


# -- max pooling -------------------------------------------------------------


@dataclass
class PoolCache:
    input_shape: tuple
    window: int
    stride: int
    argmax: np.ndarray  # flat index into the H*W plane, shape (N, C, H', W')


def maxpool2d_forward(x, window: int, stride: int | None = None):
    """Max over ``window``x``window`` patches; ``stride`` defaults to ``window``."""
    x = np.asarray(x, dtype=DTYPE)
    _require_rank("input", x, 4)
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ShapeError("window and stride must be >= 1")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than spatial extent {(h, w)}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    hi, wi = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    patches = np.empty((window * window, n, c, oh, ow), dtype=DTYPE)
    for i in range(window):
        for j in range(window):
            patches[i * window + j] = x[:, :, i : i + hi : stride, j : j + wi : stride]
    local = patches.argmax(axis=0)  # first occurrence wins ties
    out = np.take_along_axis(patches, local[None], axis=0)[0]
    di, dj = np.divmod(local, window)
    rows = np.arange(oh)[:, None] * stride + di
    cols = np.arange(ow)[None, :] * stride + dj
    return out, PoolCache(x.shape, window, stride, rows * w + cols)


def maxpool2d_backward(grad_out, cache: PoolCache) -> np.ndarray:
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    n, c, h, w = cache.input_shape
    if grad_out.shape != cache.argmax.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match pool cache {cache.argmax.shape}")
    plane = h * w
    offsets = (np.arange(n * c) * plane).reshape(n, c, 1, 1)
    flat = (cache.argmax + offsets).ravel()
    grad = np.bincount(flat, weights=grad_out.ravel(), minlength=n * c * plane)
    return grad.reshape(n, c, h, w)


# -- dense / elementwise -----------------------------------------------------


def matmul_forward(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    _require_rank("a", a, 2)
    _require_rank("b", b, 2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(grad_out, a, b):
    """Gradients of ``a @ b`` w.r.t. ``a`` and ``b``."""
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    if grad_out.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match product shape {(a.shape[0], b.shape[1])}")
    return grad_out @ b.T, a.T @ grad_out


def add_forward(a, b) -> np.ndarray:
    """Elementwise sum; ``b`` may also be a row vector broadcast over the rows of ``a``."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape and not (b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]):
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def add_backward(grad_out, b_shape):
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    if tuple(b_shape) == grad_out.shape:
        return grad_out, grad_out
    return grad_out, grad_out.sum(axis=0)


def relu_forward(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def relu_backward(grad_out, x) -> np.ndarray:
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    if grad_out.shape != np.shape(x):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match input {np.shape(x)}")
    return np.where(np.asarray(x) > 0, grad_out, 0.0)


def mul_forward(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"cannot multiply elementwise {a.shape} and {b.shape}")
    return a * b


def mul_backward(grad_out, a, b):
    return grad_out * b, grad_out * a


def softmax(logits) -> np.ndarray:
    """Row-wise softmax of a 2D array."""
    z = np.asarray(logits, dtype=DTYPE)
    _require_rank("logits", z, 2)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
