"""Differentiable layers for small fully convolutional networks.

Every layer works on ``(N, C, H, W)`` numpy arrays and implements an
explicit backward pass; there is no tape.  Forward calls with
``training=True`` stash whatever the backward pass needs on the instance,
while inference calls (``training=False``) store nothing so that large
tiled forwards stay memory bounded.

Convolutions use the shift-and-matmul formulation: for each of the k*k
kernel offsets a strided view of the (zero padded) input is flattened and
hit with a single batched matmul.  This keeps peak memory at one shifted
copy of the input instead of the k*k copies an im2col buffer would need.
"""

from __future__ import annotations

import numpy as np

from ..errors import ArgumentError

__all__ = [
    "Layer",
    "Conv2d",
    "BatchNorm2d",
    "ReLU",
    "Upsample2x",
    "Add",
    "Concat",
    "Sigmoid",
]


class Layer:
    """Base class: a node in the network graph with 0+ parameters."""

    #: number of graph inputs the layer consumes
    n_inputs = 1

    def params(self) -> dict[str, np.ndarray]:
        """Trainable parameters by name (empty for stateless layers)."""
        return {}

    def state(self) -> dict[str, np.ndarray]:
        """Non-trainable buffers to persist in checkpoints."""
        return {}

    def forward(self, xs: list[np.ndarray], training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> list[np.ndarray]:
        """Gradients w.r.t. each forward input; parameter gradients land
        in ``self.grads``."""
        raise NotImplementedError

    def cast(self, dtype: np.dtype) -> None:
        """Convert parameters and buffers to ``dtype`` in place."""
        for store in (self.params(), self.state()):
            for name, arr in store.items():
                setattr(self, name, arr.astype(dtype))

    def out_channels(self, in_channels: list[int]) -> int:
        return in_channels[0]

    def clear_cache(self) -> None:
        self._cache = None

    _cache = None


class Conv2d(Layer):
    """2-D convolution, kernel 1x1 or 3x3, stride 1 or 2, zero "same" padding.

    Weights are He-initialised from the fan-in: ``std = sqrt(2 / (Cin*k*k))``.
    Stride 2 requires even spatial dims (the network only ever sees
    multiples of 16, which guarantees this).
    """

    def __init__(
        self,
        in_channels: int,
        out_channels_: int,
        kernel: int = 3,
        stride: int = 1,
        *,
        rng: np.random.Generator | None = None,
        dtype: np.dtype = np.float32,
    ) -> None:
        if kernel not in (1, 3):
            raise ArgumentError(f"kernel must be 1 or 3, got {kernel}")
        if stride not in (1, 2):
            raise ArgumentError(f"stride must be 1 or 2, got {stride}")
        if in_channels < 1 or out_channels_ < 1:
            raise ArgumentError("channel counts must be positive")
        self.in_channels = in_channels
        self.out_channels_ = out_channels_
        self.kernel = kernel
        self.stride = stride
        fan_in = in_channels * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        if rng is None:
            rng = np.random.default_rng()
        self.weight = rng.normal(0.0, std, size=(out_channels_, in_channels, kernel, kernel)).astype(dtype)
        self.bias = np.zeros(out_channels_, dtype=dtype)
        self.grads: dict[str, np.ndarray] = {}

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def out_channels(self, in_channels: list[int]) -> int:
        if in_channels[0] != self.in_channels:
            raise ArgumentError(
                f"conv expects {self.in_channels} input channels, got {in_channels[0]}"
            )
        return self.out_channels_

    def _fill_col(self, col: np.ndarray, xpi: np.ndarray, ho: int, wo: int) -> None:
        """Gather the k*k shifted views of one padded sample into ``col``
        (shape ``(Cin, k*k, Ho, Wo)``), matching the flattened weight
        layout so one GEMM computes the whole convolution."""
        s = self.stride
        idx = 0
        for di in range(self.kernel):
            for dj in range(self.kernel):
                col[:, idx] = xpi[:, di : di + (ho - 1) * s + 1 : s,
                                  dj : dj + (wo - 1) * s + 1 : s]
                idx += 1

    def forward(self, xs: list[np.ndarray], training: bool) -> np.ndarray:
        (x,) = xs
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ArgumentError(f"expected {self.in_channels} channels, got {c}")
        if self.stride == 2 and (h % 2 or w % 2):
            raise ArgumentError("stride-2 conv needs even spatial dims")
        p = self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        ho, wo = h // self.stride, w // self.stride
        kk = self.kernel * self.kernel
        out = np.empty((n, self.out_channels_, ho, wo), dtype=x.dtype)
        w2 = self.weight.reshape(self.out_channels_, c * kk)
        col = np.empty((c, kk, ho, wo), dtype=x.dtype)
        col2 = col.reshape(c * kk, ho * wo)
        for i in range(n):
            self._fill_col(col, xp[i], ho, wo)
            np.matmul(w2, col2, out=out[i].reshape(self.out_channels_, ho * wo))
        out += self.bias[:, None, None]
        if training:
            self._cache = (xp, x.shape)
        return out

    def backward(self, dy: np.ndarray) -> list[np.ndarray]:
        xp, x_shape = self._cache
        n, c, h, w = x_shape
        ho, wo = dy.shape[2], dy.shape[3]
        p = self.kernel // 2
        s = self.stride
        kk = self.kernel * self.kernel
        w2 = self.weight.reshape(self.out_channels_, c * kk)
        dw2 = np.zeros((self.out_channels_, c * kk), dtype=self.weight.dtype)
        dxp = np.zeros_like(xp)
        col = np.empty((c, kk, ho, wo), dtype=xp.dtype)
        col2 = col.reshape(c * kk, ho * wo)
        dcol = np.empty_like(col)
        dcol2 = dcol.reshape(c * kk, ho * wo)
        for i in range(n):
            self._fill_col(col, xp[i], ho, wo)
            dyi = dy[i].reshape(self.out_channels_, ho * wo)
            dw2 += dyi @ col2.T
            np.matmul(w2.T, dyi, out=dcol2)
            dxpi = dxp[i]
            idx = 0
            for di in range(self.kernel):
                for dj in range(self.kernel):
                    dxpi[:, di : di + (ho - 1) * s + 1 : s,
                         dj : dj + (wo - 1) * s + 1 : s] += dcol[:, idx]
                    idx += 1
        self.grads = {
            "weight": dw2.reshape(self.weight.shape),
            "bias": dy.sum(axis=(0, 2, 3)),
        }
        dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        self._cache = None
        return [dx]


class BatchNorm2d(Layer):
    """Per-channel batch normalisation.

    Training mode normalises with the batch statistics and folds them into
    the running estimates (momentum 0.1, unbiased variance).  Inference
    mode uses only the frozen running statistics, so outputs depend on
    each pixel's value alone.
    """

    def __init__(self, channels: int, *, momentum: float = 0.1, eps: float = 1e-5,
                 dtype: np.dtype = np.float32) -> None:
        if channels < 1:
            raise ArgumentError("channels must be positive")
        self.channels = channels
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.grads: dict[str, np.ndarray] = {}

    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def state(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, xs: list[np.ndarray], training: bool) -> np.ndarray:
        (x,) = xs
        if x.shape[1] != self.channels:
            raise ArgumentError(f"expected {self.channels} channels, got {x.shape[1]}")
        cview = (1, self.channels, 1, 1)
        if training:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu.reshape(cview)) * inv_std.reshape(cview)
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (m / max(m - 1, 1))
            mom = self.momentum
            self.running_mean = ((1 - mom) * self.running_mean + mom * mu).astype(x.dtype)
            self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(x.dtype)
            self._cache = (xhat, inv_std, m)
            return (self.gamma.reshape(cview) * xhat + self.beta.reshape(cview)).astype(x.dtype)
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        shift = self.beta - self.running_mean * scale
        return x * scale.reshape(cview) + shift.reshape(cview)

    def backward(self, dy: np.ndarray) -> list[np.ndarray]:
        xhat, inv_std, m = self._cache
        cview = (1, self.channels, 1, 1)
        dbeta = dy.sum(axis=(0, 2, 3))
        dgamma = (dy * xhat).sum(axis=(0, 2, 3))
        dxhat = dy * self.gamma.reshape(cview)
        sum_dxhat = dxhat.sum(axis=(0, 2, 3)).reshape(cview)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(cview)
        dx = (inv_std.reshape(cview) / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        self.grads = {"gamma": dgamma, "beta": dbeta}
        self._cache = None
        return [dx.astype(dy.dtype, copy=False)]


class ReLU(Layer):
    def forward(self, xs: list[np.ndarray], training: bool) -> np.ndarray:
        (x,) = xs
        out = np.maximum(x, 0)
        if training:
            self._cache = x > 0
        return out

    def backward(self, dy: np.ndarray) -> list[np.ndarray]:
        mask = self._cache
        self._cache = None
        return [dy * mask]


class Upsample2x(Layer):
    """Nearest-neighbour x2 upsampling; backward sums each 2x2 cell."""

    def forward(self, xs: list[np.ndarray], training: bool) -> np.ndarray:
        (x,) = xs
        if training:
            self._cache = x.shape
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dy: np.ndarray) -> list[np.ndarray]:
        n, c, h2, w2 = dy.shape
        self._cache = None
        return [dy.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))]


class Add(Layer):
    n_inputs = 2

    def forward(self, xs: list[np.ndarray], training: bool) -> np.ndarray:
        a, b = xs
        if a.shape != b.shape:
            raise ArgumentError(f"add shape mismatch: {a.shape} vs {b.shape}")
        return a + b

    def backward(self, dy: np.ndarray) -> list[np.ndarray]:
        return [dy, dy]


class Concat(Layer):
    """Channel-axis concatenation of two feature maps."""

    n_inputs = 2

    def out_channels(self, in_channels: list[int]) -> int:
        return sum(in_channels)

    def forward(self, xs: list[np.ndarray], training: bool) -> np.ndarray:
        a, b = xs
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ArgumentError(f"concat shape mismatch: {a.shape} vs {b.shape}")
        if training:
            self._cache = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, dy: np.ndarray) -> list[np.ndarray]:
        split = self._cache
        self._cache = None
        return [dy[:, :split], dy[:, split:]]


class Sigmoid(Layer):
    def forward(self, xs: list[np.ndarray], training: bool) -> np.ndarray:
        (x,) = xs
        # Split by sign for a numerically stable logistic on both tails.
        out = np.empty_like(x)
        pos = x >= 0
        np.exp(-x, where=pos, out=out)
        out[pos] = 1.0 / (1.0 + out[pos])
        neg = ~pos
        ex = np.exp(x[neg])
        out[neg] = ex / (1.0 + ex)
        if training:
            self._cache = out
        return out

    def backward(self, dy: np.ndarray) -> list[np.ndarray]:
        y = self._cache
        self._cache = None
        return [dy * y * (1.0 - y)]
