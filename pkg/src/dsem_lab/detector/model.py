"""A miniature single-shot detector with stride-8 and stride-32 prediction taps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dsem_lab import tensor as T
from dsem_lab.nn import Conv2d, Module, rng_stream
from dsem_lab.tensor import Tensor


@dataclass
class DetectorConfig:
    num_classes: int = 3
    input_size: int = 64
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64, 64)
    head_strides: tuple[int, ...] = (8, 32)
    anchors_per_cell: int = 2
    # anchors_per_cell scales per head layer, layers in ascending stride
    anchor_scales: tuple[float, ...] = (0.22, 0.32, 0.45, 0.6)

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.head_strides = tuple(sorted({int(s) for s in self.head_strides}))
        self.anchor_scales = tuple(float(s) for s in self.anchor_scales)
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not self.head_strides or not set(self.head_strides) <= {8, 32}:
            raise ValueError(f"head_strides must be a nonempty subset of {{8, 32}}, got {self.head_strides}")
        if 2 ** len(self.backbone_channels) < max(self.head_strides):
            raise ValueError(f"{len(self.backbone_channels)} backbone stages cannot reach stride {max(self.head_strides)}")
        for s in self.head_strides:
            if self.input_size % s:
                raise ValueError(f"input_size {self.input_size} not divisible by stride {s}")
        if self.anchors_per_cell < 1:
            raise ValueError("anchors_per_cell must be >= 1")
        sc = self.anchor_scales
        if len(sc) != self.anchors_per_cell * len(self.head_strides):
            raise ValueError(
                f"need anchors_per_cell*len(head_strides)={self.anchors_per_cell * len(self.head_strides)} "
                f"anchor_scales, got {len(sc)}"
            )
        if any(b <= a for a, b in zip(sc, sc[1:])) or not all(0 < s <= 1 for s in sc):
            raise ValueError(f"anchor_scales must be strictly increasing in (0, 1], got {sc}")

    def layer_scales(self, stride: int) -> tuple[float, ...]:
        i = self.head_strides.index(stride)
        a = self.anchors_per_cell
        return self.anchor_scales[i * a : (i + 1) * a]

    def feature_size(self, stride: int) -> int:
        return self.input_size // stride


@dataclass
class AnchorSet:
    """Square priors per head layer, each a (cells·anchors_per_cell, 4) array in
    row-major (cell, scale) order."""

    strides: tuple[int, ...]
    layers: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def all(self) -> np.ndarray:
        return np.concatenate([self.layers[s] for s in self.strides], axis=0)

    def __len__(self) -> int:
        return sum(len(v) for v in self.layers.values())


def generate_anchors(config: DetectorConfig) -> AnchorSet:
    anchors = AnchorSet(config.head_strides)
    for s in config.head_strides:
        f = config.feature_size(s)
        rows = []
        for i in range(f):
            for j in range(f):
                cx, cy = (j + 0.5) / f, (i + 0.5) / f
                for scale in config.layer_scales(s):
                    h = 0.5 * scale
                    rows.append([cx - h, cy - h, cx + h, cy + h])
        anchors.layers[s] = np.clip(np.array(rows, dtype=np.float64), 0.0, 1.0)
    return anchors


@dataclass
class DetectorOutput:
    features: dict[int, Tensor]
    cls_logits: Tensor  # N × anchors × (num_classes + 1), background at index 0
    loc: Tensor  # N × anchors × 4


class Detector(Module):
    def __init__(self, config: DetectorConfig, seed: int = 0):
        self.config = config
        rng = rng_stream(seed, "init/detector")
        chans = (3,) + config.backbone_channels
        # stages past the deepest tap would never receive gradient
        n_stages = int(np.log2(max(config.head_strides)))
        self.stages = [Conv2d(chans[i], chans[i + 1], 3, rng, stride=2, padding=1) for i in range(n_stages)]
        a, k = config.anchors_per_cell, config.num_classes + 1
        self.cls_heads = {}
        self.loc_heads = {}
        for s in config.head_strides:
            c = self.feature_channels(s)
            self.cls_heads[str(s)] = Conv2d(c, a * k, 3, rng)
            self.loc_heads[str(s)] = Conv2d(c, a * 4, 3, rng)

    def feature_channels(self, stride: int) -> int:
        return self.config.backbone_channels[int(np.log2(stride)) - 1]

    def backbone_forward(self, images: Tensor) -> dict[int, Tensor]:
        """Return backbone feature maps keyed by stride for every head stride."""
        s = self.config.input_size
        if images.ndim != 4 or images.shape[1:] != (3, s, s):
            raise ValueError(f"expected N×3×{s}×{s} images, got {images.shape}")
        feats: dict[int, Tensor] = {}
        x = images
        for i, conv in enumerate(self.stages):
            x = T.relu(conv(x))
            stride = 2 ** (i + 1)
            if stride in self.config.head_strides:
                feats[stride] = x
        return feats

    def heads_forward(self, feats: dict[int, Tensor]) -> tuple[Tensor, Tensor]:
        a, k = self.config.anchors_per_cell, self.config.num_classes + 1
        cls_parts, loc_parts = [], []
        for s in self.config.head_strides:
            f = feats[s]
            n, _, h, w = f.shape
            c = T.transpose(self.cls_heads[str(s)](f), (0, 2, 3, 1))
            l = T.transpose(self.loc_heads[str(s)](f), (0, 2, 3, 1))
            cls_parts.append(T.reshape(c, (n, h * w * a, k)))
            loc_parts.append(T.reshape(l, (n, h * w * a, 4)))
        return T.concat(cls_parts, axis=1), T.concat(loc_parts, axis=1)

    def __call__(self, images: Tensor) -> DetectorOutput:
        feats = self.backbone_forward(images)
        cls_logits, loc = self.heads_forward(feats)
        return DetectorOutput(feats, cls_logits, loc)
