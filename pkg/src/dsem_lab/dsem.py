"""Densely semantic enhancement module (DSEM).

One DSEM is attached per aligned backbone stride. Data flow for a feature map
F (N×C×U×V)::

    F ──(detached)──> seg branch ──> mask M, seg logits ──> L_seg (source)
                                     │
                                     └─ GRL ─> D_seg ─> L_seg^adv
    M ⊙ F ── GRL ─> dense dilated encoder ─> pyramid encoder ─> D_j ─> L_j^adv

The encoder and classifiers minimize their binary domain losses; everything
upstream of a GRL receives the negated gradient, so the detector backbone and
the seg branch are pushed to confuse the classifiers. All domain predictions
are made per spatial location; nothing on the adversarial path pools the map
into a vector.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dsem_lab import tensor as T
from dsem_lab.data import SOURCE, TARGET, write_pgm
from dsem_lab.detector.boxes import Box
from dsem_lab.nn import Conv2d, Module, rng_stream
from dsem_lab.tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class DsemConfig:
    dense_depth_l: int = 3
    inner_channels: int = 64
    pool_bins: tuple[int, ...] = (1, 2, 4, 8)
    grl_coeff: float = 1.0
    # ablation switches: FE = foreground enhancement, DA = adversary on the mask
    foreground_enhance: bool = True
    mask_adversary: bool = True

    def __post_init__(self):
        self.pool_bins = tuple(int(b) for b in self.pool_bins)
        if self.dense_depth_l < 0:
            raise ValueError(f"dense_depth_l must be >= 0, got {self.dense_depth_l}")
        if any(b < 1 for b in self.pool_bins) or any(b <= a for a, b in zip(self.pool_bins, self.pool_bins[1:])):
            raise ValueError(f"pool_bins must be positive and strictly increasing, got {self.pool_bins}")
        if self.inner_channels < 2:
            raise ValueError("inner_channels must be >= 2")
        if self.grl_coeff < 0:
            raise ValueError("grl_coeff must be >= 0")

    @property
    def dilations(self) -> list[int]:
        """Dilation of y_0 followed by those of dense levels 1..l."""
        return [1] + [2**level for level in range(1, self.dense_depth_l + 1)]


@dataclass
class ForegroundMask:
    mask: Tensor  # N×C×U×V, in (0, 1)
    seg_logits: Tensor  # N×2×U×V, index 1 = foreground


class SegBranch(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)
        self.mask_head = Conv2d(channels, channels, 1, rng)
        self.seg_head = Conv2d(channels, 2, 1, rng)

    def __call__(self, features: Tensor) -> ForegroundMask:
        h = T.relu(self.conv1(features))
        h = T.relu(self.conv2(h))
        return ForegroundMask(T.sigmoid(self.mask_head(h)), self.seg_head(h))


def seg_branch_forward(branch: SegBranch, features: Tensor) -> ForegroundMask:
    return branch(features)


class PixelDomainClassifier(Module):
    """Two-layer perceptron applied independently at every location (1×1 convs)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.fc1 = Conv2d(channels, max(1, channels // 2), 1, rng)
        self.fc2 = Conv2d(max(1, channels // 2), 1, 1, rng)

    def logits(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.logits(x))


class DenseDilatedEncoder(Module):
    def __init__(self, in_ch: int, inner: int, depth: int, rng: np.random.Generator):
        self.reduce = Conv2d(in_ch, inner, 3, rng, dilation=1)
        self.levels = [Conv2d(m * inner, inner, 3, rng, dilation=2**m) for m in range(1, depth + 1)]
        self.fuse = Conv2d((depth + 1) * inner, inner, 1, rng)

    @property
    def dilations(self) -> list[int]:
        return [self.reduce.dilation] + [c.dilation for c in self.levels]

    def __call__(self, x: Tensor) -> Tensor:
        ys = [T.relu(self.reduce(x))]
        for conv in self.levels:
            # newest first: [y_{m-1}, ..., y_0]
            ys.append(T.relu(conv(T.concat_channels(ys[::-1]))))
        return self.fuse(T.concat_channels(ys[::-1]))


def dense_dilated_encode(encoder: DenseDilatedEncoder, x: Tensor) -> Tensor:
    return encoder(x)


class PyramidEncoder(Module):
    def __init__(self, inner: int, bins: Sequence[int], spatial: int, rng: np.random.Generator):
        self.bins = [b for b in bins if b <= spatial]
        skipped = [b for b in bins if b > spatial]
        if skipped:
            log.warning("pyramid bins %s exceed the %dx%d feature map and are skipped", skipped, spatial, spatial)
        branch_ch = max(1, inner // max(1, len(bins)))
        self.branches = [Conv2d(inner, branch_ch, 1, rng) for _ in self.bins]
        self.fuse = Conv2d(inner + branch_ch * len(self.bins), inner, 1, rng)

    def __call__(self, y: Tensor) -> Tensor:
        _, _, h, w = y.shape
        parts = [y]
        for b, conv in zip(self.bins, self.branches):
            pooled = T.adaptive_avg_pool(y, b)
            parts.append(T.upsample_nearest(T.relu(conv(pooled)), h, w))
        return self.fuse(T.concat_channels(parts))


def pyramid_encode(encoder: PyramidEncoder, y: Tensor) -> Tensor:
    return encoder(y)


def rasterize_boxes(gt_boxes: Sequence[Box], grid_h: int, grid_w: int) -> np.ndarray:
    """1 where the cell centre lies inside any box (edges inclusive), else 0."""
    cy = ((np.arange(grid_h) + 0.5) / grid_h)[:, None]
    cx = ((np.arange(grid_w) + 0.5) / grid_w)[None, :]
    grid = np.zeros((grid_h, grid_w), dtype=np.int64)
    for b in gt_boxes:
        grid |= (cx >= b.xmin) & (cx <= b.xmax) & (cy >= b.ymin) & (cy <= b.ymax)
    return grid


def seg_loss(seg_logits: Tensor, target_grid: np.ndarray) -> Tensor:
    """Per-cell two-class softmax cross-entropy, averaged over every cell."""
    target_grid = np.asarray(target_grid)
    if target_grid.ndim == 2:
        target_grid = target_grid[None]
    if target_grid.shape != (seg_logits.shape[0],) + seg_logits.shape[2:]:
        raise ValueError(f"seg target grid {target_grid.shape} does not match logits {seg_logits.shape}")
    return T.softmax_cross_entropy(seg_logits, target_grid.astype(np.int64))


def _domain_bce(logits: Tensor, domains: np.ndarray) -> Tensor:
    """mean_source(-log D) + mean_target(-log(1 - D)) over all locations, with D = sigmoid(logits)."""
    per_loc = int(np.prod(logits.shape[1:]))
    src = (domains == SOURCE).astype(np.float64)
    weights = np.zeros(logits.shape)
    n_s, n_t = int(src.sum()), int(len(domains) - src.sum())
    if n_s:
        weights[domains == SOURCE] = 1.0 / (n_s * per_loc)
    if n_t:
        weights[domains == TARGET] = 1.0 / (n_t * per_loc)
    labels = np.broadcast_to(src[:, None, None, None], logits.shape)
    return T.binary_cross_entropy_with_logits(logits, labels, weights=weights, normalizer=1.0)


def seg_domain_adv_loss(d_seg: PixelDomainClassifier, mask_source: Tensor, mask_target: Tensor, grl_coeff: float = 1.0) -> Tensor:
    masks = T.concat([mask_source, mask_target], axis=0)
    domains = np.array([SOURCE] * mask_source.shape[0] + [TARGET] * mask_target.shape[0])
    return _domain_bce(d_seg.logits(T.grl(masks, grl_coeff)), domains)


def dsem_domain_adv_loss(d_j: PixelDomainClassifier, enc_source: Tensor, enc_target: Tensor) -> Tensor:
    encoded = T.concat([enc_source, enc_target], axis=0)
    domains = np.array([SOURCE] * enc_source.shape[0] + [TARGET] * enc_target.shape[0])
    return _domain_bce(d_j.logits(encoded), domains)


def foreground_enhance(mask: Tensor, features: Tensor) -> Tensor:
    return T.elementwise_mul(mask, features)


@dataclass
class DsemOutput:
    adv_loss: Tensor
    seg_loss: Tensor | None
    seg_adv_loss: Tensor | None
    diagnostics: dict = field(default_factory=dict)

    def total(self, lam: float) -> Tensor | None:
        """L_seg + L_seg^adv + lam·L_j^adv (terms that are absent drop out)."""
        parts = [t for t in (self.seg_loss, self.seg_adv_loss) if t is not None]
        if lam != 0.0:
            parts.append(self.adv_loss * lam)
        if not parts:
            return None
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out


class DSEM(Module):
    def __init__(self, in_channels: int, spatial: int, config: DsemConfig, seed: int = 0, name: str = "dsem"):
        self.config = config
        rng = rng_stream(seed, f"init/{name}")
        inner = config.inner_channels
        self.seg = SegBranch(in_channels, rng)
        self.d_seg = PixelDomainClassifier(in_channels, rng)
        self.encoder = DenseDilatedEncoder(in_channels, inner, config.dense_depth_l, rng)
        self.pyramid = PyramidEncoder(inner, config.pool_bins, spatial, rng)
        self.classifier = PixelDomainClassifier(inner, rng)

    def parameter_groups(self) -> list:
        """Parameters that can receive gradient under the current ablation switches."""
        mods = [self.encoder, self.pyramid, self.classifier]
        if self.config.foreground_enhance:
            mods.insert(0, self.seg)
            if self.config.mask_adversary:
                mods.insert(1, self.d_seg)
        return [p for m in mods for _, p in m.named_parameters()]

    def encode(self, features: Tensor, mask: Tensor | None, grl_coeff: float) -> Tensor:
        x = foreground_enhance(mask, features) if mask is not None else features
        return self.pyramid(self.encoder(T.grl(x, grl_coeff)))

    def __call__(
        self,
        features: Tensor,
        domains: Sequence[int],
        gt_boxes: Sequence[Sequence[Box] | None] | None = None,
        grl_coeff: float | None = None,
    ) -> DsemOutput:
        """Run the whole module on a batch that may mix source and target images.

        ``gt_boxes[i]`` must be a box list for source images; it is never read
        for target images.
        """
        domains = np.asarray(domains)
        coeff = self.config.grl_coeff if grl_coeff is None else grl_coeff
        n, _, h, w = features.shape
        if len(domains) != n:
            raise ValueError(f"{len(domains)} domain labels for a batch of {n}")
        src_idx = np.flatnonzero(domains == SOURCE)
        if (
            self.config.foreground_enhance
            and len(src_idx)
            and (gt_boxes is None or any(gt_boxes[i] is None for i in src_idx))
        ):
            raise ValueError("source images need ground-truth boxes for the segmentation loss")

        diagnostics: dict = {}
        mask = l_seg = l_seg_adv = None
        if self.config.foreground_enhance:
            # the seg branch reads a detached copy: only F_seg/D_seg train on L_seg and L_seg^adv
            fg = self.seg(T.detach(features))
            mask = fg.mask
            diagnostics["mask_mean"] = float(mask.data.mean())
            diagnostics["seg_logits"] = fg.seg_logits.data
            if len(src_idx):
                grids = np.stack([rasterize_boxes(gt_boxes[i], h, w) for i in src_idx])
                diagnostics["seg_targets"] = grids
                diagnostics["seg_source_index"] = src_idx
                src_logits = fg.seg_logits if len(src_idx) == n else _take(fg.seg_logits, src_idx)
                l_seg = seg_loss(src_logits, grids)
            if self.config.mask_adversary:
                l_seg_adv = _domain_bce(self.d_seg.logits(T.grl(mask, coeff)), domains)
        encoded = self.encode(features, mask, coeff)
        logits = self.classifier.logits(encoded)
        l_adv = _domain_bce(logits, domains)
        prob = 1.0 / (1.0 + np.exp(-logits.data.astype(np.float64)))
        diagnostics["domain_prob"] = prob.astype(logits.dtype)
        diagnostics["domain_acc"] = domain_accuracy(prob, domains)
        return DsemOutput(l_adv, l_seg, l_seg_adv, diagnostics)


def _take(x: Tensor, idx: np.ndarray) -> Tensor:
    """Batch-row gather with a scatter backward."""
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[idx] = g
        return (out,)

    return T._make(x.data[idx], (x,), backward)


def domain_accuracy(prob: np.ndarray, domains: Sequence[int]) -> float:
    """Per-location accuracy at threshold 0.5, averaged over the two domains."""
    domains = np.asarray(domains)
    accs = []
    for d in (SOURCE, TARGET):
        sel = domains == d
        if sel.any():
            pred = prob[sel] >= 0.5
            accs.append(float((pred == (d == SOURCE)).mean()))
    return float(np.mean(accs)) if accs else float("nan")


def compute_seg_miou(seg_logits: Sequence[np.ndarray], target_grids: Sequence[np.ndarray]) -> float:
    """Mean IoU over {background, foreground}, skipping classes absent from
    both prediction and target."""
    inter = np.zeros(2)
    union = np.zeros(2)
    for logits, grid in zip(seg_logits, target_grids):
        logits = np.asarray(logits)
        pred = logits.argmax(axis=-3)
        grid = np.asarray(grid).reshape(pred.shape)
        for c in (0, 1):
            p, g = pred == c, grid == c
            inter[c] += np.logical_and(p, g).sum()
            union[c] += np.logical_or(p, g).sum()
    defined = union > 0
    if not defined.any():
        return float("nan")
    return float((inter[defined] / union[defined]).mean())


def export_domain_evidence(encoded: np.ndarray | Tensor, classifier: PixelDomainClassifier) -> tuple[np.ndarray, dict]:
    """Grad-CAM style domain evidence for one image's encoded features.

    Returns the U×V heatmap in [0, 1] and the raw (pre-normalization) min/max.
    """
    data = encoded.data if isinstance(encoded, Tensor) else np.asarray(encoded)
    if data.ndim == 3:
        data = data[None]
    enc = Tensor(data.astype(np.float64), requires_grad=True)
    T.mean_all(classifier.logits(enc)).backward()
    weights = enc.grad.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((weights * enc.data).sum(axis=1)[0], 0.0)
    lo, hi = float(cam.min()), float(cam.max())
    heat = np.zeros_like(cam) if hi <= lo else (cam - lo) / (hi - lo)
    # the probe graph reached the classifier's parameters; drop those grads
    for _, p in classifier.named_parameters():
        p.grad = None
    return heat, {"min": lo, "max": hi}


def write_heatmap(path_stem: str | os.PathLike, heat: np.ndarray, raw: dict) -> tuple[Path, Path]:
    """Write ``<stem>.pgm`` (8-bit P5) and ``<stem>.json`` with the raw range."""
    stem = Path(path_stem)
    pgm, side = stem.with_suffix(".pgm"), stem.with_suffix(".json")
    write_pgm(pgm, np.round(np.clip(heat, 0.0, 1.0) * 255.0).astype(np.uint8))
    side.write_text(json.dumps({**raw, "height": heat.shape[0], "width": heat.shape[1]}, sort_keys=True) + "\n", encoding="utf-8")
    return pgm, side
