"""Desk-scale single-stage detector: residual backbone, FPN, shared heads.

The backbone is a strided stem (stride 4) followed by one residual block per
stage, so stage outputs C3..C(2+n) sit at strides 8, 16, 32, ... and every
feature side equals floor(input_size / 2**level). Class and box heads share
weights across pyramid levels; per-level outputs are flattened in
(y, x, anchor) order to align index-for-index with the anchor grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, ReLU, ResidualBlock, UpsampleNearest2x, check_finite

__all__ = ["DetectorConfig", "FeaturePyramid", "Detector"]


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture knobs for the detector."""

    input_size: int = 640
    stage_widths: tuple[int, ...] = (16, 32, 64)
    pyramid_channels: int = 256
    anchors_per_location: int = 25
    num_classes: int = 1
    head_depth: int = 2
    head_prior: float = 0.01

    def __post_init__(self) -> None:
        if not self.stage_widths:
            raise ValueError("at least one backbone stage is required")
        if self.pyramid_channels <= 0:
            raise ValueError(f"pyramid channels must be positive: {self.pyramid_channels}")
        if self.num_classes < 1 or self.anchors_per_location < 1:
            raise ValueError("num_classes and anchors_per_location must be >= 1")
        if not 0.0 < self.head_prior < 1.0:
            raise ValueError(f"head prior must lie in (0, 1): {self.head_prior}")
        max_stride = 2 ** self.levels[-1]
        if self.input_size <= 0 or self.input_size % max_stride != 0:
            raise ValueError(
                f"input size {self.input_size} must be a positive multiple of {max_stride}"
            )

    @property
    def levels(self) -> tuple[int, ...]:
        """Pyramid levels 3..(2 + number of stages); level l has stride 2**l."""
        return tuple(range(3, 3 + len(self.stage_widths)))

    def feature_sides(self) -> tuple[int, ...]:
        return tuple(self.input_size // 2 ** lv for lv in self.levels)

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "stage_widths": list(self.stage_widths),
            "pyramid_channels": self.pyramid_channels,
            "anchors_per_location": self.anchors_per_location,
            "num_classes": self.num_classes,
            "head_depth": self.head_depth,
            "head_prior": self.head_prior,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(
            input_size=int(d["input_size"]),
            stage_widths=tuple(int(w) for w in d["stage_widths"]),
            pyramid_channels=int(d["pyramid_channels"]),
            anchors_per_location=int(d["anchors_per_location"]),
            num_classes=int(d["num_classes"]),
            head_depth=int(d["head_depth"]),
            head_prior=float(d["head_prior"]),
        )


class FeaturePyramid:
    """Top-down feature merging with 1x1 laterals and 3x3 output convolutions.

    Inputs are backbone stage maps ordered fine-to-coarse with spatial sides
    halving exactly at each step. The topmost output is the lateral of the
    topmost input; every lower output is a 3x3 convolution of the lateral
    plus the nearest-neighbour-upsampled output one level above. All outputs
    carry ``out_channels`` channels.
    """

    def __init__(
        self,
        in_channels: tuple[int, ...],
        out_channels: int,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> None:
        self.num_levels = len(in_channels)
        self.laterals = [
            Conv2d(c, out_channels, 1, rng=rng, dtype=dtype) for c in in_channels
        ]
        self.out_convs = [
            Conv2d(out_channels, out_channels, 3, 1, 1, rng=rng, dtype=dtype)
            for _ in range(self.num_levels - 1)
        ]
        self.upsample = UpsampleNearest2x()

    def forward(self, c_levels: list[np.ndarray]):
        if len(c_levels) != self.num_levels:
            raise ValueError(f"expected {self.num_levels} feature maps, got {len(c_levels)}")
        for lower, upper in zip(c_levels, c_levels[1:]):
            if lower.shape[1] != 2 * upper.shape[1] or lower.shape[2] != 2 * upper.shape[2]:
                raise ValueError(
                    f"pyramid sizes must halve exactly: {lower.shape} -> {upper.shape}"
                )
        lats, lat_caches = [], []
        for conv, c in zip(self.laterals, c_levels):
            y, cache = conv.forward(c)
            lats.append(y)
            lat_caches.append(cache)

        top = self.num_levels - 1
        p_out: list[np.ndarray] = [None] * self.num_levels
        up_caches: list = [None] * self.num_levels
        out_caches: list = [None] * self.num_levels
        p_out[top] = lats[top]
        for lv in range(top - 1, -1, -1):
            up, up_caches[lv] = self.upsample.forward(p_out[lv + 1])
            merged = lats[lv] + up
            p_out[lv], out_caches[lv] = self.out_convs[lv].forward(merged)
        return p_out, (lat_caches, up_caches, out_caches)

    def backward(self, cache, dp_levels: list[np.ndarray]) -> list[np.ndarray]:
        lat_caches, up_caches, out_caches = cache
        top = self.num_levels - 1
        dlat: list[np.ndarray] = [None] * self.num_levels
        acc = [d.copy() for d in dp_levels]
        for lv in range(top):
            dmerged = self.out_convs[lv].backward(out_caches[lv], acc[lv])
            dlat[lv] = dmerged
            acc[lv + 1] += self.upsample.backward(up_caches[lv], dmerged)
        dlat[top] = acc[top]
        dcs = []
        for conv, lc, dl in zip(self.laterals, lat_caches, dlat):
            dcs.append(conv.backward(lc, dl))
        return dcs

    def parameters(self):
        named = []
        for i, conv in enumerate(self.laterals):
            for suffix, p, g in conv.parameters():
                named.append((f"lateral{i}.{suffix}", p, g))
        for i, conv in enumerate(self.out_convs):
            for suffix, p, g in conv.parameters():
                named.append((f"out{i}.{suffix}", p, g))
        return named

    def zero_grads(self) -> None:
        for conv in self.laterals + self.out_convs:
            conv.zero_grads()


class _Head:
    """Shared per-level head: ``depth`` 3x3 conv+ReLU layers then a 1x1 output conv."""

    def __init__(
        self,
        channels: int,
        depth: int,
        out_per_anchor: int,
        anchors_per_location: int,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
        out_bias: float = 0.0,
    ) -> None:
        self.trunk = [
            Conv2d(channels, channels, 3, 1, 1, rng=rng, dtype=dtype) for _ in range(depth)
        ]
        self.relus = [ReLU() for _ in range(depth)]
        self.out = Conv2d(
            channels,
            out_per_anchor * anchors_per_location,
            1,
            rng=rng,
            dtype=dtype,
            bias_init=out_bias,
        )

    def forward(self, x: np.ndarray):
        caches = []
        cur = x
        for conv, relu in zip(self.trunk, self.relus):
            cur, c = conv.forward(cur)
            cur, m = relu.forward(cur)
            caches.append((c, m))
        y, out_cache = self.out.forward(cur)
        return y, (caches, out_cache)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        caches, out_cache = cache
        d = self.out.backward(out_cache, dy)
        for conv, relu, (c, m) in zip(reversed(self.trunk), reversed(self.relus), reversed(caches)):
            d = relu.backward(m, d)
            d = conv.backward(c, d)
        return d

    def parameters(self):
        named = []
        for i, conv in enumerate(self.trunk):
            for suffix, p, g in conv.parameters():
                named.append((f"trunk{i}.{suffix}", p, g))
        for suffix, p, g in self.out.parameters():
            named.append((f"out.{suffix}", p, g))
        return named

    def zero_grads(self) -> None:
        for conv in self.trunk:
            conv.zero_grads()
        self.out.zero_grads()


def _flatten_head(t: np.ndarray, a: int, c: int) -> np.ndarray:
    """(A*C, H, W) -> (H*W*A, C), matching anchor-grid flattening order."""
    _, h, w = t.shape
    return t.reshape(a, c, h, w).transpose(2, 3, 0, 1).reshape(h * w * a, c)


def _unflatten_head(g: np.ndarray, a: int, c: int, h: int, w: int) -> np.ndarray:
    return g.reshape(h, w, a, c).transpose(2, 3, 0, 1).reshape(a * c, h, w)


class Detector:
    """Backbone + FPN + shared classification/regression heads."""

    def __init__(self, config: DetectorConfig, *, seed: int = 0, dtype=np.float32) -> None:
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        w0 = config.stage_widths[0]
        self.stem1 = Conv2d(1, w0, 3, 2, 1, rng=rng, dtype=dtype)
        self.stem_relu1 = ReLU()
        self.stem2 = Conv2d(w0, w0, 3, 2, 1, rng=rng, dtype=dtype)
        self.stem_relu2 = ReLU()
        self.stages = []
        prev = w0
        for width in config.stage_widths:
            self.stages.append(ResidualBlock(prev, width, 2, rng=rng, dtype=dtype))
            prev = width
        self.fpn = FeaturePyramid(
            config.stage_widths, config.pyramid_channels, rng=rng, dtype=dtype
        )
        # Rare-positive prior: start classification outputs near head_prior.
        cls_bias = -math.log((1.0 - config.head_prior) / config.head_prior)
        self.cls_head = _Head(
            config.pyramid_channels,
            config.head_depth,
            config.num_classes,
            config.anchors_per_location,
            rng=rng,
            dtype=dtype,
            out_bias=cls_bias,
        )
        self.box_head = _Head(
            config.pyramid_channels,
            config.head_depth,
            4,
            config.anchors_per_location,
            rng=rng,
            dtype=dtype,
        )

    @property
    def levels(self) -> tuple[int, ...]:
        return self.config.levels

    def forward(self, image: np.ndarray):
        """Run the detector on a (1, S, S) image tensor.

        Returns ``(outputs, cache)`` where outputs is a per-level list of
        ``(logits, deltas)`` with shapes (H*W*A, num_classes) and (H*W*A, 4).
        """
        x = np.asarray(image, dtype=self.dtype)
        s = self.config.input_size
        if x.shape != (1, s, s):
            raise ValueError(f"expected input of shape (1, {s}, {s}), got {x.shape}")
        check_finite(x, "input image")

        h, c_s1 = self.stem1.forward(x)
        h, m_s1 = self.stem_relu1.forward(h)
        h, c_s2 = self.stem2.forward(h)
        h, m_s2 = self.stem_relu2.forward(h)
        c_feats, stage_caches = [], []
        for block in self.stages:
            h, cache = block.forward(h)
            c_feats.append(h)
            stage_caches.append(cache)
        p_feats, fpn_cache = self.fpn.forward(c_feats)

        a = self.config.anchors_per_location
        nc = self.config.num_classes
        outputs, head_caches, shapes = [], [], []
        for p in p_feats:
            cls_raw, cls_cache = self.cls_head.forward(p)
            box_raw, box_cache = self.box_head.forward(p)
            logits = _flatten_head(cls_raw, a, nc)
            deltas = _flatten_head(box_raw, a, 4)
            check_finite(logits, "class logits")
            check_finite(deltas, "box deltas")
            outputs.append((logits, deltas))
            head_caches.append((cls_cache, box_cache))
            shapes.append(p.shape)
        cache = ((c_s1, m_s1, c_s2, m_s2), stage_caches, fpn_cache, head_caches, shapes)
        return outputs, cache

    def backward(
        self,
        cache,
        dlogits: list[np.ndarray],
        ddeltas: list[np.ndarray],
    ) -> np.ndarray:
        """Backpropagate per-level output gradients; returns the input gradient."""
        stem_caches, stage_caches, fpn_cache, head_caches, shapes = cache
        a = self.config.anchors_per_location
        nc = self.config.num_classes
        dps = []
        for (cls_cache, box_cache), shape, dlg, ddl in zip(
            head_caches, shapes, dlogits, ddeltas
        ):
            _, hh, ww = shape
            dcls = _unflatten_head(np.asarray(dlg, dtype=self.dtype), a, nc, hh, ww)
            dbox = _unflatten_head(np.asarray(ddl, dtype=self.dtype), a, 4, hh, ww)
            dp = self.cls_head.backward(cls_cache, dcls)
            dp = dp + self.box_head.backward(box_cache, dbox)
            dps.append(dp)
        dcs = self.fpn.backward(fpn_cache, dps)
        d = None
        for block, cache_b, dc in zip(reversed(self.stages), reversed(stage_caches), reversed(dcs)):
            d = dc if d is None else block_input_grad + dc  # noqa: F821 (never taken)
            d = block.backward(cache_b, d)
            block_input_grad = d
        c_s1, m_s1, c_s2, m_s2 = stem_caches
        d = self.stem_relu2.backward(m_s2, d)
        d = self.stem2.backward(c_s2, d)
        d = self.stem_relu1.backward(m_s1, d)
        d = self.stem1.backward(c_s1, d)
        return d

    def named_parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        named = []
        for prefix, layer in (("stem1", self.stem1), ("stem2", self.stem2)):
            for suffix, p, g in layer.parameters():
                named.append((f"{prefix}.{suffix}", p, g))
        for i, block in enumerate(self.stages):
            for suffix, p, g in block.parameters():
                named.append((f"stage{i}.{suffix}", p, g))
        for suffix, p, g in self.fpn.parameters():
            named.append((f"fpn.{suffix}", p, g))
        for suffix, p, g in self.cls_head.parameters():
            named.append((f"cls_head.{suffix}", p, g))
        for suffix, p, g in self.box_head.parameters():
            named.append((f"box_head.{suffix}", p, g))
        return named

    def parameter_list(self) -> list[np.ndarray]:
        return [p for _, p, _ in self.named_parameters()]

    def gradient_list(self) -> list[np.ndarray]:
        return [g for _, _, g in self.named_parameters()]

    def zero_grads(self) -> None:
        for _, _, g in self.named_parameters():
            g[...] = 0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p for name, p, _ in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p for name, p, _ in self.named_parameters()}
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"state mismatch: missing={missing}, unexpected={extra}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=p.dtype)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p[...] = value
