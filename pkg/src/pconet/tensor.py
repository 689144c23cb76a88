"""Dense NHWC tensor kernels: valid convolution, 2x2/s2 max pooling,
matrix multiply, and elementwise activations with analytic gradients.

Tensors are plain C-contiguous ``numpy.ndarray``s of float32 (float64 for
high-precision gradient checks), rank 1..4. Convolution and pooling
dispatch to one of two interchangeable backends:

* ``cython`` -- compiled direct loop-nest kernels (``pconet._kernels``),
  the serial-order reference; parallel workers own disjoint output
  slabs, so results do not depend on the thread count.
* ``numpy`` -- pure-NumPy im2col + BLAS fallback, used automatically when
  the extension is not built.

The active backend is chosen at import (compiled if available) and can be
forced with the ``PCONET_BACKEND`` environment variable or
:func:`set_backend`. Both backends agree within 1e-5 relative.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.special import expit

from pconet import _numpy_backend

try:
    from pconet import _kernels
except ImportError:  # extension not built
    _kernels = None


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested kernel."""


_FLOAT_DTYPES = (np.float32, np.float64)


def _select_backend() -> str:
    env = os.environ.get("PCONET_BACKEND", "auto").lower()
    if env not in ("auto", "cython", "numpy"):
        raise ValueError(f"PCONET_BACKEND must be auto, cython, or numpy, got {env!r}")
    if env == "cython" and _kernels is None:
        raise ImportError("PCONET_BACKEND=cython but pconet._kernels is not built")
    if env == "auto":
        return "cython" if _kernels is not None else "numpy"
    return env


_backend = _select_backend()
_threads = 0  # 0 = resolve from env / cpu count


def available_backends() -> tuple[str, ...]:
    return ("cython", "numpy") if _kernels is not None else ("numpy",)


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    if name not in available_backends():
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    global _backend
    _backend = name


def get_num_threads() -> int:
    if _threads > 0:
        return _threads
    env = os.environ.get("PCONET_THREADS", "")
    if env.strip():
        n = int(env)
        if n < 1:
            raise ValueError(f"PCONET_THREADS must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


def set_num_threads(n: int) -> None:
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    global _threads
    _threads = n


def _impl():
    return _kernels if _backend == "cython" and _kernels is not None else _numpy_backend


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Coerce to a C-contiguous float tensor of rank 1..4 with positive dims."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"tensor rank must be 1..4, got {arr.ndim}")
    if arr.size == 0:
        raise ShapeError(f"tensor dims must all be >= 1, got shape {arr.shape}")
    return arr


def _prep(*arrays):
    """Promote operands to a common float dtype and make them contiguous."""
    dtype = np.float64 if any(a.dtype == np.float64 for a in arrays) else np.float32
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


def conv2d_output_hw(h: int, w: int, kh: int, kw: int, stride: int) -> tuple[int, int]:
    return (h - kh) // stride + 1, (w - kw) // stride + 1


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
                   stride: int = 1) -> np.ndarray:
    """Valid (unpadded) NHWC convolution: x (n,h,w,cin) * kernels
    (kh,kw,cin,cout) + bias (cout) -> (n,oh,ow,cout)."""
    if x.ndim != 4 or kernels.ndim != 4 or bias.ndim != 1:
        raise ShapeError(
            f"conv2d expects input rank 4, kernels rank 4, bias rank 1; "
            f"got {x.ndim}/{kernels.ndim}/{bias.ndim}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    kh, kw, cin, cout = kernels.shape
    if x.shape[3] != cin:
        raise ShapeError(f"input channels {x.shape[3]} != kernel cin {cin}")
    if kh > x.shape[1] or kw > x.shape[2]:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than input {x.shape[1]}x{x.shape[2]} (valid padding)"
        )
    if bias.shape[0] != cout:
        raise ShapeError(f"bias length {bias.shape[0]} != kernel cout {cout}")
    x, kernels, bias = _prep(x, kernels, bias)
    return _impl().conv2d_forward(x, kernels, bias, stride, get_num_threads())


def conv2d_backward(x: np.ndarray, kernels: np.ndarray, grad_out: np.ndarray,
                    stride: int = 1, need_input_grad: bool = True,
                    ) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Analytic gradients of conv2d_forward: returns (grad_input,
    grad_kernels, grad_bias). `need_input_grad=False` skips grad_input
    (returned as None) -- useful for the first layer of a network."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    kh, kw, cin, cout = kernels.shape
    oh, ow = conv2d_output_hw(x.shape[1], x.shape[2], kh, kw, stride)
    expected = (x.shape[0], oh, ow, cout)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    x, kernels, grad_out = _prep(x, kernels, grad_out)
    gin, gk = _impl().conv2d_backward(
        x, kernels, grad_out, stride, get_num_threads(), need_input_grad
    )
    gbias = grad_out.sum(axis=(0, 1, 2))
    return gin, gk, gbias


def maxpool2d_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pooling; odd trailing row/col dropped. Returns the
    pooled tensor and the flat input index chosen per output element
    (first maximum in window scan order on ties)."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects rank-4 NHWC input, got rank {x.ndim}")
    if x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError(f"spatial dims {x.shape[1]}x{x.shape[2]} smaller than 2x2 pool")
    (x,) = _prep(x)
    return _impl().maxpool2d_forward(x, get_num_threads())


def maxpool2d_backward(argmax_indices: np.ndarray, grad_out: np.ndarray,
                       input_shape: tuple[int, ...]) -> np.ndarray:
    """Route grad_out to the argmax positions of the matching forward call;
    every other entry of grad_input is zero."""
    if argmax_indices.shape != grad_out.shape:
        raise ShapeError(
            f"argmax shape {argmax_indices.shape} != grad_out shape {grad_out.shape}"
        )
    size = int(np.prod(input_shape))
    idx = argmax_indices.ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError(f"argmax index out of range for input shape {tuple(input_shape)}")
    flat = np.bincount(idx, weights=grad_out.ravel(), minlength=size)
    return flat.astype(grad_out.dtype).reshape(input_shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} x {b.shape}")
    return a @ b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Derivative at exactly 0 is defined as 0."""
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid_backward(sig_out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Takes the cached forward output, not the pre-activation."""
    return grad_out * sig_out * (1 - sig_out)
