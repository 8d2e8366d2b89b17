from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dsem_lab import tensor as T
from dsem_lab.detector.boxes import Box, decode, iou_matrix


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int  # foreground class, 0-based
    score: float

    def to_json(self) -> dict:
        return {"class": self.class_id, "score": self.score, "box": self.box.as_list()}

    @classmethod
    def from_json(cls, rec: dict) -> Detection:
        return cls(Box.from_seq(rec["box"]), int(rec["class"]), float(rec["score"]))


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy suppression of IoU > iou_thresh; ties broken by lower index."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = list(np.lexsort((np.arange(len(scores)), -scores)))
    ious = iou_matrix(boxes, boxes)
    keep: list[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_thresh
    return keep


def decode_and_nms(
    cls_logits: np.ndarray,
    loc: np.ndarray,
    anchors: np.ndarray,
    score_thresh: float = 0.01,
    nms_iou: float = 0.45,
    max_dets: int = 100,
) -> list[Detection]:
    """Turn one image's head outputs (M×(K+1) logits, M×4 offsets) into detections."""
    probs = T._softmax64(np.asarray(cls_logits), axis=-1)
    boxes = np.clip(decode(loc, anchors), 0.0, 1.0)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    found: list[tuple[float, int, int, np.ndarray]] = []
    for c in range(1, probs.shape[1]):
        idx = np.flatnonzero((probs[:, c] > score_thresh) & valid)
        if len(idx) == 0:
            continue
        for j in nms(boxes[idx], probs[idx, c], nms_iou):
            a = int(idx[j])
            found.append((float(probs[a, c]), a, c - 1, boxes[a]))
    found.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [Detection(Box.from_seq(b), c, s) for s, _, c, b in found[:max_dets]]
