from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized [0, 1] image coordinates."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        coords = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(np.isfinite(c) and -1e-9 <= c <= 1 + 1e-9 for c in coords):
            raise ValueError(f"box coordinates must lie in [0, 1]: {coords}")
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError(f"degenerate box (need xmin<xmax, ymin<ymax): {coords}")

    @classmethod
    def from_seq(cls, seq) -> Box:
        x0, y0, x1, y1 = (float(v) for v in seq)
        return cls(x0, y0, x1, y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin, self.xmax, self.ymax], dtype=np.float64)

    def as_list(self) -> list[float]:
        return [self.xmin, self.ymin, self.xmax, self.ymax]

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


def iou(a: Box, b: Box) -> float:
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (P, 4) and (Q, 4) corner-format arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _center_size(boxes: np.ndarray) -> tuple[np.ndarray, ...]:
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Offsets (dcx/w_a, dcy/h_a, log w/w_a, log h/h_a) of boxes relative to anchors."""
    bx, by, bw, bh = _center_size(np.asarray(boxes, dtype=np.float64))
    ax, ay, aw, ah = _center_size(np.asarray(anchors, dtype=np.float64))
    return np.stack([(bx - ax) / aw, (by - ay) / ah, np.log(bw / aw), np.log(bh / ah)], axis=-1)


def decode(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode`; returns corner boxes (not clipped)."""
    d = np.asarray(offsets, dtype=np.float64)
    ax, ay, aw, ah = _center_size(np.asarray(anchors, dtype=np.float64))
    cx = ax + d[..., 0] * aw
    cy = ay + d[..., 1] * ah
    # exp overflow guard for untrained heads
    w = aw * np.exp(np.clip(d[..., 2], -10.0, 10.0))
    h = ah * np.exp(np.clip(d[..., 3], -10.0, 10.0))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
