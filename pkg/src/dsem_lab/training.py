"""Two-stage optimization: source-only pretraining, then adversarial adaptation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from dsem_lab import tensor as T
from dsem_lab.data import SOURCE, TARGET, Sample, UnlabeledImage, strip_annotations
from dsem_lab.detector import (
    Detection,
    Detector,
    DetectorConfig,
    MatchTargets,
    decode_and_nms,
    detection_loss,
    evaluate_map,
    generate_anchors,
    ground_truth_of,
    match_anchors,
)
from dsem_lab.dsem import DSEM, DsemConfig, compute_seg_miou, domain_accuracy, rasterize_boxes
from dsem_lab.nn import Parameter, rng_stream
from dsem_lab.optim import clip_grad_norm, sgd_step
from dsem_lab.tensor import Tensor

log = logging.getLogger(__name__)

METRIC_FIELDS = ("iteration", "l_det", "l_seg", "l_seg_adv", "l_adv_8", "l_adv_32", "domain_acc", "mask_miou")
Checkpoint = dict  # parameter name -> float32 array


@dataclass
class AdaptConfig:
    lam: float = 1.0
    dsem_strides: tuple[int, ...] = (8, 32)
    pretrain_iters: int = 2000
    adapt_iters: int = 1000
    batch_size: int = 8
    pretrain_lr: float = 1e-2
    base_lr: float = 1e-3
    dsem_lr_multiplier: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    few_shot_target_per_class: int | None = None
    grl_warmup_frac: float = 0.1
    probe_iters: int = 300
    # per-group gradient norm cap during adaptation; None disables it
    grad_clip_norm: float | None = 50.0

    def __post_init__(self):
        self.dsem_strides = tuple(sorted({int(s) for s in self.dsem_strides}))
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not set(self.dsem_strides) <= {8, 32}:
            raise ValueError(f"dsem_strides must be a subset of {{8, 32}}, got {self.dsem_strides}")
        if not 0 <= self.grl_warmup_frac <= 1:
            raise ValueError("grl_warmup_frac must lie in [0, 1]")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ValueError(f"grad_clip_norm must be > 0 or None, got {self.grad_clip_norm}")


@dataclass
class RunMetrics:
    records: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def append(self, rec: dict) -> None:
        if self.records and rec["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("metric iterations must increase")
        for k, v in rec.items():
            if isinstance(v, float) and not math.isfinite(v) and not (k in ("mask_miou",) and math.isnan(v)):
                raise FloatingPointError(f"non-finite {k}={v} at iteration {rec['iteration']}")
        self.records.append(rec)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in self.records:
            w.writerow(["" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in METRIC_FIELDS])
        return buf.getvalue()

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.records], dtype=np.float64)


class BatchStream:
    """Endless epoch-shuffled index stream from a named PRNG stream."""

    def __init__(self, n: int, seed: int, name: str):
        if n == 0:
            raise ValueError(f"cannot draw batches from an empty dataset ({name})")
        self.n = n
        self.rng = rng_stream(seed, f"data/{name}")
        self._buf: list[int] = []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self._buf:
                self._buf = list(self.rng.permutation(self.n))
            out.append(int(self._buf.pop(0)))
        return out


def _images(items: Sequence[Sample | UnlabeledImage]) -> Tensor:
    return Tensor(np.stack([s.image for s in items]).astype(np.float32))


class TargetCache:
    def __init__(self, anchors: np.ndarray, samples: Sequence[Sample]):
        self.targets = [match_anchors(anchors, list(zip(s.boxes, s.labels))) for s in samples]

    def __getitem__(self, idx: Sequence[int]) -> list[MatchTargets]:
        return [self.targets[i] for i in idx]


def detector_params(det: Detector) -> list[Parameter]:
    return det.parameters()


def pretrain_source(
    det_config: DetectorConfig,
    source_train: Sequence[Sample],
    config: AdaptConfig,
    detector: Detector | None = None,
) -> tuple[Checkpoint, RunMetrics]:
    """Minimize L_det on labeled source data with momentum SGD."""
    if not source_train:
        raise ValueError("pretrain_source: empty source dataset")
    det = detector or Detector(det_config, seed=config.seed)
    params = det.parameters()
    anchors = generate_anchors(det_config).all
    cache = TargetCache(anchors, source_train)
    stream = BatchStream(len(source_train), config.seed, "pretrain/source")
    metrics = RunMetrics()
    for it in range(config.pretrain_iters):
        idx = stream.take(config.batch_size)
        out = det(_images([source_train[i] for i in idx]))
        l_cls, l_loc = detection_loss(out.cls_logits, out.loc, cache[idx])
        loss = l_cls + l_loc
        loss.backward()
        sgd_step(params, config.pretrain_lr, config.momentum, config.weight_decay)
        metrics.append({"iteration": it, "l_det": float(loss.data)})
    return {n: p.data.copy() for n, p in det.named_parameters()}, metrics


def _dsem_channels(det: Detector, stride: int) -> int:
    return det.feature_channels(stride)


def build_dsems(det: Detector, dsem_config: DsemConfig, strides: Sequence[int], seed: int) -> dict[int, DSEM]:
    cfg = det.config
    out = {}
    for s in strides:
        if s not in cfg.head_strides:
            raise ValueError(f"cannot align stride {s}: detector taps {cfg.head_strides}")
        out[s] = DSEM(_dsem_channels(det, s), cfg.feature_size(s), dsem_config, seed=seed, name=f"dsem{s}")
    return out


def dsem_state(dsems: dict[int, DSEM]) -> Checkpoint:
    return {n: p.data.copy() for s, m in dsems.items() for n, p in m.named_parameters(f"dsem{s}.")}


def grl_schedule(it: int, config: AdaptConfig, base: float) -> float:
    warm = config.grl_warmup_frac * config.adapt_iters
    if warm <= 0:
        return base
    return base * min(1.0, it / warm)


def _as_unlabeled(target: Sequence[Sample | UnlabeledImage]) -> list[UnlabeledImage]:
    if any(isinstance(t, Sample) and (t.boxes or t.labels) for t in target):
        log.warning("target annotations were supplied to adapt(); they are ignored")
    return [t if isinstance(t, UnlabeledImage) else strip_annotations([t])[0] for t in target]


def adapt(
    pretrained: Checkpoint,
    source_train: Sequence[Sample],
    target_train: Sequence[Sample | UnlabeledImage],
    config: AdaptConfig,
    det_config: DetectorConfig,
    dsem_config: DsemConfig,
    dsem_enabled: bool = True,
) -> tuple[Checkpoint, RunMetrics]:
    """Fine-tune on labeled source + unlabeled target with DSEMs attached.

    Minimized scalar: L_det(source) + Σ_j [L_seg + L_seg^adv + λ·L_j^adv].
    With ``dsem_enabled=False`` the same loop (same batches) fine-tunes on the
    source detection loss alone.
    """
    if not source_train:
        raise ValueError("adapt: empty source dataset")
    target = _as_unlabeled(target_train)
    if dsem_enabled and not target:
        raise ValueError("adapt: empty target dataset")
    if dsem_enabled and not config.dsem_strides:
        raise ValueError("adapt: dsem_strides must be nonempty")
    det = Detector(det_config, seed=config.seed)
    det.load_state_dict(_detector_subset(pretrained, det))
    det_params = det.parameters()
    dsems = build_dsems(det, dsem_config, config.dsem_strides, config.seed) if dsem_enabled else {}
    anchors = generate_anchors(det_config).all
    cache = TargetCache(anchors, source_train)
    half = config.batch_size // 2
    src_stream = BatchStream(len(source_train), config.seed, "adapt/source")
    tgt_stream = BatchStream(len(target), config.seed, "adapt/target") if target else None
    dsem_lr = config.base_lr * config.dsem_lr_multiplier
    metrics = RunMetrics()
    domains = np.array([SOURCE] * half + [TARGET] * half)
    for it in range(config.adapt_iters):
        s_idx = src_stream.take(half)
        t_idx = tgt_stream.take(half) if tgt_stream else []
        src = [source_train[i] for i in s_idx]
        feats_s = det.backbone_forward(_images(src))
        cls_logits, loc = det.heads_forward(feats_s)
        l_cls, l_loc = detection_loss(cls_logits, loc, cache[s_idx])
        total = l_cls + l_loc
        rec = {"iteration": it, "l_det": float(total.data)}
        if dsems:
            feats_t = det.backbone_forward(_images([target[i] for i in t_idx]))
            coeff = grl_schedule(it, config, dsem_config.grl_coeff)
            boxes = [s.boxes for s in src] + [None] * half
            accs = []
            for s, m in dsems.items():
                out = m(T.concat([feats_s[s], feats_t[s]], axis=0), domains, boxes, grl_coeff=coeff)
                extra = out.total(config.lam)
                if extra is not None:
                    total = total + extra
                rec[f"l_adv_{s}"] = float(out.adv_loss.data)
                accs.append(out.diagnostics["domain_acc"])
                if s == min(dsems):
                    rec["l_seg"] = None if out.seg_loss is None else float(out.seg_loss.data)
                    rec["l_seg_adv"] = None if out.seg_adv_loss is None else float(out.seg_adv_loss.data)
                    if "seg_targets" in out.diagnostics:
                        rec["mask_miou"] = compute_seg_miou(
                            [out.diagnostics["seg_logits"][out.diagnostics["seg_source_index"]]],
                            [out.diagnostics["seg_targets"]],
                        )
            rec["domain_acc"] = float(np.mean(accs))
        total.backward()
        # with lambda = 0 the encoder/classifier are outside the graph
        groups = [det_params] + [[p for p in m.parameters() if p.grad is not None] for m in dsems.values()]
        if config.grad_clip_norm is not None:
            for g in groups:
                clip_grad_norm(g, config.grad_clip_norm)
        sgd_step(groups[0], config.base_lr, config.momentum, config.weight_decay)
        for g in groups[1:]:
            sgd_step(g, dsem_lr, config.momentum, config.weight_decay)
        metrics.append(rec)
    state = {n: p.data.copy() for n, p in det.named_parameters()}
    state.update(dsem_state(dsems))
    return state, metrics


def _detector_subset(state: Checkpoint, det: Detector) -> Checkpoint:
    own = {n for n, _ in det.named_parameters()}
    return {k: v for k, v in state.items() if k in own}


def load_detector(state: Checkpoint, det_config: DetectorConfig) -> Detector:
    det = Detector(det_config, seed=0)
    det.load_state_dict(_detector_subset(state, det))
    return det


def predict(det: Detector, samples: Sequence[Sample], batch: int = 50, **nms_kwargs) -> dict[str, list[Detection]]:
    anchors = generate_anchors(det.config).all
    out: dict[str, list[Detection]] = {}
    with T.no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i : i + batch]
            res = det(_images(chunk))
            for j, s in enumerate(chunk):
                out[s.image_id] = decode_and_nms(res.cls_logits.data[j], res.loc.data[j], anchors, **nms_kwargs)
    return out


def evaluate(state: Checkpoint, det_config: DetectorConfig, samples: Sequence[Sample]) -> dict:
    det = load_detector(state, det_config)
    dets = predict(det, samples)
    per_class, mean_ap = evaluate_map(dets, ground_truth_of(samples))
    return {"mAP": mean_ap, "per_class_ap": {str(k): v for k, v in per_class.items()}, "detections": dets}


def seg_miou(state: Checkpoint, det_config: DetectorConfig, dsem_config: DsemConfig, samples: Sequence[Sample], stride: int = 8) -> float:
    """Foreground/background mIoU of a checkpoint's seg branch on annotated samples."""
    det = load_detector(state, det_config)
    m = DSEM(det.feature_channels(stride), det_config.feature_size(stride), dsem_config, name=f"dsem{stride}")
    prefix = f"dsem{stride}."
    m.load_state_dict({k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)}, strict=False)
    logits, grids = [], []
    with T.no_grad():
        for i in range(0, len(samples), 50):
            chunk = samples[i : i + 50]
            f = det.backbone_forward(_images(chunk))[stride]
            logits.append(m.seg(f).seg_logits.data)
            grids.append(np.stack([rasterize_boxes(s.boxes, f.shape[2], f.shape[3]) for s in chunk]))
    return compute_seg_miou(logits, grids)


def probe_domain_accuracy(
    state: Checkpoint,
    det_config: DetectorConfig,
    dsem_config: DsemConfig,
    source_train: Sequence[Sample],
    target_train: Sequence[Sample | UnlabeledImage],
    source_eval: Sequence[Sample],
    target_eval: Sequence[Sample | UnlabeledImage],
    iters: int = 300,
    lr: float = 1e-2,
    seed: int = 0,
    stride: int = 8,
    batch_size: int = 8,
) -> float:
    """Train a fresh per-location domain classifier on frozen backbone features
    and report its held-out accuracy (chance = 0.5)."""
    det = load_detector(state, det_config)
    probe_cfg = DsemConfig(**{**asdict(dsem_config), "foreground_enhance": False, "mask_adversary": False})
    probe = DSEM(det.feature_channels(stride), det_config.feature_size(stride), probe_cfg, seed=seed, name="probe")
    params = probe.parameter_groups()

    def feats(items) -> np.ndarray:
        with T.no_grad():
            return np.concatenate(
                [det.backbone_forward(_images(items[i : i + 50]))[stride].data for i in range(0, len(items), 50)]
            )

    fs, ft = feats(list(source_train)), feats(list(target_train))
    half = batch_size // 2
    s_stream = BatchStream(len(fs), seed, "probe/source")
    t_stream = BatchStream(len(ft), seed, "probe/target")
    domains = np.array([SOURCE] * half + [TARGET] * half)
    for _ in range(iters):
        x = Tensor(np.concatenate([fs[s_stream.take(half)], ft[t_stream.take(half)]]))
        out = probe(x, domains, grl_coeff=0.0)
        out.adv_loss.backward()
        sgd_step(params, lr, 0.9, 5e-4)
    es, et = feats(list(source_eval)), feats(list(target_eval))
    with T.no_grad():
        x = np.concatenate([es, et])
        prob = probe.classifier(probe.encode(Tensor(x), None, 0.0)).data
    return domain_accuracy(prob, np.array([SOURCE] * len(es) + [TARGET] * len(et)))


def config_dict(*configs) -> dict:
    out = {}
    for c in configs:
        d = asdict(c)
        if isinstance(c, AdaptConfig):
            d["lambda"] = d.pop("lam")
        out[type(c).__name__] = d
    return out


def config_fields(cls) -> set[str]:
    names = {f.name for f in fields(cls)}
    if cls is AdaptConfig:
        names = (names - {"lam"}) | {"lambda"}
    return names
