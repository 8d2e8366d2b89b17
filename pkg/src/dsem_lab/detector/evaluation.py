"""VOC-style mAP with all-point interpolated average precision, plus the
per-image JSON-lines detection dump."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from dsem_lab.detector.boxes import Box, iou
from dsem_lab.detector.postprocess import Detection


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """Area under the precision envelope for detections already ranked by score."""
    if n_gt == 0:
        raise ValueError("average_precision needs at least one ground-truth box")
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    rec = ctp / n_gt
    prec = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]).sum())


def evaluate_map(
    detections: Mapping[str, Sequence[Detection]],
    gts: Mapping[str, Sequence[tuple[Box, int]]],
    iou_thresh: float = 0.5,
) -> tuple[dict[int, float], float]:
    """Per-class AP and their mean over classes that have ground truth.

    Detections are ranked per class over the whole set by score; ties are
    broken by (image_id, box) so the result does not depend on input order.
    """
    classes = sorted({c for boxes in gts.values() for _, c in boxes})
    if not classes:
        raise ValueError("evaluate_map: no ground-truth boxes at all")
    per_class: dict[int, float] = {}
    for c in classes:
        gt_c = {img: [b for b, k in boxes if k == c] for img, boxes in gts.items()}
        n_gt = sum(len(v) for v in gt_c.values())
        ranked = sorted(
            ((d.score, img, d.box.as_list(), d) for img, ds in detections.items() for d in ds if d.class_id == c),
            key=lambda t: (-t[0], t[1], t[2]),
        )
        used = {img: [False] * len(v) for img, v in gt_c.items()}
        tp = np.zeros(len(ranked))
        for r, (_, img, _, d) in enumerate(ranked):
            cands = gt_c.get(img, [])
            best, best_j = -1.0, -1
            for j, g in enumerate(cands):
                o = iou(d.box, g)
                if o > best:
                    best, best_j = o, j
            if best >= iou_thresh and not used[img][best_j]:
                used[img][best_j] = True
                tp[r] = 1.0
        per_class[c] = average_precision(tp, n_gt)
    return per_class, float(np.mean(list(per_class.values())))


def write_detection_dump(path: str | os.PathLike, detections: Mapping[str, Sequence[Detection]]) -> None:
    """One JSON record per line: {image_id, detections: [{class, score, box}]}."""
    lines = [
        json.dumps({"image_id": img, "detections": [d.to_json() for d in ds]}, sort_keys=True)
        for img, ds in detections.items()
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_detection_dump(path: str | os.PathLike) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out[str(rec["image_id"])] = [Detection.from_json(d) for d in rec["detections"]]
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}: bad detection record on line {n + 1}: {exc}") from exc
    return out


def ground_truth_of(samples: Iterable) -> dict[str, list[tuple[Box, int]]]:
    return {s.image_id: list(zip(s.boxes, s.labels)) for s in samples}
