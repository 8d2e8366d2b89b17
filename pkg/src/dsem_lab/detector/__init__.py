from dsem_lab.detector.boxes import Box, decode, encode, iou, iou_matrix
from dsem_lab.detector.evaluation import (
    average_precision,
    evaluate_map,
    ground_truth_of,
    read_detection_dump,
    write_detection_dump,
)
from dsem_lab.detector.loss import MatchTargets, detection_loss, match_anchors, mine_hard_negatives
from dsem_lab.detector.model import AnchorSet, Detector, DetectorConfig, DetectorOutput, generate_anchors
from dsem_lab.detector.postprocess import Detection, decode_and_nms, nms

__all__ = [
    "AnchorSet",
    "Box",
    "Detection",
    "Detector",
    "DetectorConfig",
    "DetectorOutput",
    "MatchTargets",
    "average_precision",
    "decode",
    "decode_and_nms",
    "detection_loss",
    "encode",
    "evaluate_map",
    "generate_anchors",
    "ground_truth_of",
    "iou",
    "iou_matrix",
    "match_anchors",
    "mine_hard_negatives",
    "nms",
    "read_detection_dump",
    "write_detection_dump",
]
