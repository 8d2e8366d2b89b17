"""Anchor matching and the SSD-style detection loss (classification + localization)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dsem_lab import tensor as T
from dsem_lab.detector.boxes import Box, encode, iou_matrix
from dsem_lab.tensor import Tensor

NEG_POS_RATIO = 3


@dataclass
class MatchTargets:
    labels: np.ndarray  # (M,) int, 0 = background, c+1 = foreground class c
    offsets: np.ndarray  # (M, 4) regression targets, zero where negative

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0


def match_anchors(anchors: np.ndarray, gt: Sequence[tuple[Box, int]], pos_iou: float = 0.5) -> MatchTargets:
    """Assign ground truth to anchors.

    Every gt box claims its best-overlap anchor; any other anchor whose best
    IoU reaches ``pos_iou`` is positive for that gt. Ties go to the lower index.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if len(anchors) == 0:
        raise ValueError("match_anchors: empty anchor set")
    if not 0 < pos_iou < 1:
        raise ValueError(f"pos_iou must be in (0, 1), got {pos_iou}")
    m = len(anchors)
    labels = np.zeros(m, dtype=np.int64)
    offsets = np.zeros((m, 4), dtype=np.float64)
    if not gt:
        return MatchTargets(labels, offsets)
    gt_boxes = np.array([b.as_array() for b, _ in gt])
    gt_cls = np.array([int(c) for _, c in gt])
    ious = iou_matrix(gt_boxes, anchors)  # G × M
    assigned = ious.argmax(axis=0)
    best_iou = ious.max(axis=0)
    forced = np.zeros(m, dtype=bool)
    for g in range(len(gt)):
        # an anchor already forced for another gt is not reused, so every gt keeps one
        a = int(np.where(forced, -1.0, ious[g]).argmax())
        assigned[a] = g
        best_iou[a] = 2.0
        forced[a] = True
    pos = best_iou >= pos_iou
    labels[pos] = gt_cls[assigned[pos]] + 1
    offsets[pos] = encode(gt_boxes[assigned[pos]], anchors[pos])
    return MatchTargets(labels, offsets)


def mine_hard_negatives(cls_logits: np.ndarray, labels: np.ndarray, ratio: int = NEG_POS_RATIO) -> np.ndarray:
    """Selection mask (positives plus hardest negatives) for N×M anchors.

    Per image, negatives are ranked by background cross-entropy (ties to the
    lower anchor index) and the top ``ratio * max(1, #positives)`` are kept.
    """
    p = T._softmax64(cls_logits, axis=-1)
    bg_loss = -np.log(np.clip(p[..., 0], T.LOG_EPS, 1.0))
    keep = labels > 0
    for i in range(labels.shape[0]):
        neg = np.flatnonzero(labels[i] == 0)
        k = min(len(neg), ratio * max(1, int(keep[i].sum())))
        if k == 0:
            continue
        order = np.lexsort((neg, -bg_loss[i, neg]))
        keep[i, neg[order[:k]]] = True
    return keep


def detection_loss(cls_logits: Tensor, loc: Tensor, targets: Sequence[MatchTargets]) -> tuple[Tensor, Tensor]:
    """Return (L_cls, L_loc), both normalized by the batch's positive count (min 1)."""
    labels = np.stack([t.labels for t in targets])
    offsets = np.stack([t.offsets for t in targets])
    n, m, k = cls_logits.shape
    pos = labels > 0
    norm = float(max(1, int(pos.sum())))
    selected = mine_hard_negatives(cls_logits.data, labels)
    l_cls = T.softmax_cross_entropy(
        T.reshape(cls_logits, (n * m, k)), labels.reshape(-1), weights=selected.reshape(-1), normalizer=norm
    )
    l_loc = T.smooth_l1(loc, offsets, mask=pos, normalizer=norm)
    return l_cls, l_loc
