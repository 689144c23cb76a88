"""Layer abstraction and the six concrete layer kinds: Conv2D, MaxPool2D,
Flatten, Dense, Activation, Dropout.

Each layer caches what its backward pass needs during forward; backward
accumulates parameter gradients into ``layer.grads`` and returns the
gradient with respect to its input. Parameter shapes are fixed at
construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from pconet import tensor
from pconet.tensor import ShapeError


class BackwardBeforeForwardError(RuntimeError):
    """backward() was called without a cached forward activation."""


@dataclass(frozen=True)
class InitPolicy:
    """Same seed + same shapes always produce identical initial weights."""

    scheme: str = "glorot_uniform"
    seed: int = 0


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grads(self) -> None:
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def astype(self, dtype) -> "Layer":
        for name in self.params:
            self.params[name] = self.params[name].astype(dtype)
        self.zero_grads()
        return self

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _cached(self):
        if self._cache is None:
            raise BackwardBeforeForwardError(
                f"{type(self).__name__}.backward() called before forward()"
            )
        return self._cache


class Conv2D(Layer):
    """Valid-padding NHWC convolution; kernels (kh,kw,cin,filters)."""

    def __init__(self, in_channels: int, filters: int, kernel_size: int = 3,
                 stride: int = 1, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.filters = filters
        self.kernel_size = kernel_size
        self.stride = stride
        # flipped off for a network's first layer, where grad_input is unused
        self.need_input_grad = True
        self.params["kernels"] = np.zeros(
            (kernel_size, kernel_size, in_channels, filters), dtype=dtype
        )
        self.params["bias"] = np.zeros((filters,), dtype=dtype)
        self.zero_grads()

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError(
                f"Conv2D expects (n,h,w,{self.in_channels}), got {tuple(x.shape)}"
            )
        self._cache = x
        return tensor.conv2d_forward(x, self.params["kernels"], self.params["bias"], self.stride)

    def backward(self, grad_out):
        x = self._cached()
        gin, gk, gb = tensor.conv2d_backward(
            x, self.params["kernels"], grad_out, self.stride,
            need_input_grad=self.need_input_grad,
        )
        self.grads["kernels"] += gk
        self.grads["bias"] += gb
        return gin


class MaxPool2D(Layer):
    """Fixed 2x2 window, stride 2; odd trailing row/col dropped."""

    def forward(self, x, training=False):
        out, idx = tensor.maxpool2d_forward(x)
        self._cache = (idx, x.shape)
        return out

    def backward(self, grad_out):
        idx, in_shape = self._cached()
        return tensor.maxpool2d_backward(idx, grad_out, in_shape)


class Flatten(Layer):
    def forward(self, x, training=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._cached())


class Dense(Layer):
    def __init__(self, in_features: int, units: int, dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.units = units
        self.params["weights"] = np.zeros((in_features, units), dtype=dtype)
        self.params["bias"] = np.zeros((units,), dtype=dtype)
        self.zero_grads()

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Dense expects (n,{self.in_features}), got {tuple(x.shape)}")
        self._cache = x
        return tensor.matmul(x, self.params["weights"]) + self.params["bias"]

    def backward(self, grad_out):
        x = self._cached()
        self.grads["weights"] += tensor.matmul(x.T, grad_out)
        self.grads["bias"] += grad_out.sum(axis=0)
        return tensor.matmul(grad_out, self.params["weights"].T)


class Activation(Layer):
    KINDS = ("relu", "sigmoid", "identity")

    def __init__(self, kind: str):
        super().__init__()
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}, expected one of {self.KINDS}")
        self.kind = kind

    def forward(self, x, training=False):
        if self.kind == "relu":
            self._cache = x
            return tensor.relu(x)
        if self.kind == "sigmoid":
            out = tensor.sigmoid(x)
            self._cache = out
            return out
        self._cache = x.shape
        return x

    def backward(self, grad_out):
        cache = self._cached()
        if self.kind == "relu":
            return tensor.relu_backward(cache, grad_out)
        if self.kind == "sigmoid":
            return tensor.sigmoid_backward(cache, grad_out)
        return grad_out


def dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator):
    """Inverted dropout: survivors scaled by 1/(1-rate) so the expectation
    is preserved. Returns (output, mask); mask entries are 0 or 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        mask = np.ones_like(x)
    else:
        keep = rng.random(x.shape) >= rate
        mask = keep.astype(x.dtype) / np.asarray(1 - rate, dtype=x.dtype)
    return x * mask, mask


class Dropout(Layer):
    """Active only when training; eval forward is the identity."""

    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x, training=False):
        if not training:
            self._cache = None
            self._identity = True
            return x
        out, mask = dropout_forward(x, self.rate, self.rng)
        self._cache = mask
        self._identity = False
        return out

    def backward(self, grad_out):
        if getattr(self, "_identity", None) is None:
            raise BackwardBeforeForwardError("Dropout.backward() called before forward()")
        if self._identity:
            return grad_out
        return grad_out * self._cache


def init_weights(layer: Layer, policy: InitPolicy, stream: int = 0) -> None:
    """Glorot-uniform fill U(-a, a), a = sqrt(6/(fan_in+fan_out)); biases
    zero. `stream` decorrelates layers sharing one policy seed."""
    if policy.scheme != "glorot_uniform":
        raise ValueError(f"unknown init scheme {policy.scheme!r}")
    if not layer.params:
        raise ValueError(f"{type(layer).__name__} has no parameters to initialize")
    rng = np.random.default_rng([policy.seed, stream])
    if isinstance(layer, Conv2D):
        kh, kw, cin, cout = layer.params["kernels"].shape
        fan_in, fan_out = kh * kw * cin, kh * kw * cout
        target = "kernels"
    elif isinstance(layer, Dense):
        fan_in, fan_out = layer.params["weights"].shape
        target = "weights"
    else:
        raise ValueError(f"no init rule for {type(layer).__name__}")
    a = math.sqrt(6.0 / (fan_in + fan_out))
    w = layer.params[target]
    w[...] = rng.uniform(-a, a, size=w.shape).astype(w.dtype)
    layer.params["bias"][...] = 0
