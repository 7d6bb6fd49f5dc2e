"""Hand-differentiated layers on dense (C, H, W) numpy tensors.

Layers are stateless with respect to activations: ``forward`` returns the
output plus an opaque cache, and ``backward`` consumes that cache, so one
layer instance can be shared across pyramid levels (the shared detection
heads rely on this). Parameter gradients accumulate into ``.gw`` / ``.gb``
until ``zero_grads``.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "check_finite",
    "Conv2d",
    "ReLU",
    "UpsampleNearest2x",
    "ResidualBlock",
    "conv2d_forward",
    "conv2d_backward",
]


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    """NaN/Inf anywhere is a hard failure."""
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    c = xp.shape[0]
    sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, oh, ow),
        strides=(sc, sh, sw, sh * stride, sw * stride),
    )
    return np.ascontiguousarray(view).reshape(c * kh * kw, oh * ow)


def _col2im(
    dcols: np.ndarray, xp_shape: tuple[int, int, int], kh: int, kw: int, stride: int, oh: int, ow: int
) -> np.ndarray:
    c = xp_shape[0]
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    d = dcols.reshape(c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += d[:, i, j]
    return dxp


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0
):
    """Cross-correlation of a (C, H, W) input with an (O, C, kh, kw) kernel."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1: {stride}")
    c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"kernel expects {ci} input channels, got {c}")
    p = padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    oh = (h + 2 * p - kh) // stride + 1
    ow = (wd + 2 * p - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{wd} (pad {p})")
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    y = (w.reshape(o, -1) @ cols + b[:, None]).reshape(o, oh, ow)
    cache = (cols, xp.shape, x.shape, oh, ow)
    return y, cache


def conv2d_backward(cache, w: np.ndarray, stride: int, padding: int, dy: np.ndarray):
    """Gradients of conv2d_forward w.r.t. input, kernel, and bias."""
    cols, xp_shape, x_shape, oh, ow = cache
    o, _, kh, kw = w.shape
    dyf = dy.reshape(o, -1)
    db = dyf.sum(axis=1)
    dw = (dyf @ cols.T).reshape(w.shape)
    dcols = w.reshape(o, -1).T @ dyf
    dxp = _col2im(dcols, xp_shape, kh, kw, stride, oh, ow)
    p = padding
    dx = dxp[:, p : p + x_shape[1], p : p + x_shape[2]] if p else dxp
    return dx, dw, db


class Conv2d:
    """2-D convolution with bias. Weights: centered uniform scaled by fan-in."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
        bias_init: float = 0.0,
    ) -> None:
        k = kernel_size
        limit = 1.0 / math.sqrt(in_ch * k * k)
        self.w = rng.uniform(-limit, limit, size=(out_ch, in_ch, k, k)).astype(dtype)
        self.b = np.full(out_ch, bias_init, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self.stride = stride
        self.padding = padding

    def forward(self, x: np.ndarray):
        return conv2d_forward(x, self.w, self.b, self.stride, self.padding)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        dx, dw, db = conv2d_backward(cache, self.w, self.stride, self.padding, dy)
        self.gw += dw
        self.gb += db
        return dx

    def parameters(self):
        return [("w", self.w, self.gw), ("b", self.b, self.gb)]

    def zero_grads(self) -> None:
        self.gw[...] = 0
        self.gb[...] = 0


class ReLU:
    def forward(self, x: np.ndarray):
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, dy: np.ndarray) -> np.ndarray:
        return dy * mask

    def parameters(self):
        return []

    def zero_grads(self) -> None:
        pass


class UpsampleNearest2x:
    """Replicate each pixel 2x2; backward sums gradients over replicas."""

    def forward(self, x: np.ndarray):
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), x.shape

    def backward(self, shape, dy: np.ndarray) -> np.ndarray:
        c, h, w = shape
        return dy.reshape(c, h, 2, w, 2).sum(axis=(2, 4))

    def parameters(self):
        return []

    def zero_grads(self) -> None:
        pass


class ResidualBlock:
    """conv-ReLU-conv left branch added to a linear shortcut, then ReLU.

    The shortcut is the identity when shapes agree, otherwise a strided 1x1
    projection. No normalization layers at this scale.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        stride: int = 1,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> None:
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1, rng=rng, dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, rng=rng, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, stride, 0, rng=rng, dtype=dtype)
        else:
            self.proj = None
        self.relu_out = ReLU()

    def forward(self, x: np.ndarray):
        h1, c1 = self.conv1.forward(x)
        a1, m1 = self.relu1.forward(h1)
        left, c2 = self.conv2.forward(a1)
        if self.proj is not None:
            short, cp = self.proj.forward(x)
        else:
            short, cp = x, None
        y, mo = self.relu_out.forward(left + short)
        return y, (c1, m1, c2, cp, mo)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        c1, m1, c2, cp, mo = cache
        dsum = self.relu_out.backward(mo, dy)
        da1 = self.conv2.backward(c2, dsum)
        dh1 = self.relu1.backward(m1, da1)
        dx = self.conv1.backward(c1, dh1)
        if self.proj is not None:
            dx = dx + self.proj.backward(cp, dsum)
        else:
            dx = dx + dsum
        return dx

    def parameters(self):
        named = []
        for prefix, layer in (("conv1", self.conv1), ("conv2", self.conv2), ("proj", self.proj)):
            if layer is None:
                continue
            for suffix, p, g in layer.parameters():
                named.append((f"{prefix}.{suffix}", p, g))
        return named

    def zero_grads(self) -> None:
        self.conv1.zero_grads()
        self.conv2.zero_grads()
        if self.proj is not None:
            self.proj.zero_grads()
