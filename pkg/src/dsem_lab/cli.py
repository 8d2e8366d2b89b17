"""``dsem-lab`` command line: dataset generation, training, evaluation, probing, sweeps, heatmaps."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from dsem_lab import __version__
from dsem_lab import tensor as T
from dsem_lab.ablation import AblationSpec, SplitData, run_ablation_suite
from dsem_lab.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dsem_lab.data import (
    CLASSES,
    SOURCE,
    TARGET,
    DatasetError,
    Sample,
    ShiftSpec,
    by_domain,
    few_shot_subset,
    gen_domain_pair,
    genspec_dict,
    load_dataset,
    save_dataset,
    strip_annotations,
    summarize,
)
from dsem_lab.detector import Detection, Detector, DetectorConfig, evaluate_map, ground_truth_of, write_detection_dump
from dsem_lab.dsem import DSEM, DsemConfig, export_domain_evidence, write_heatmap
from dsem_lab.training import (
    AdaptConfig,
    adapt,
    config_dict,
    config_fields,
    load_detector,
    predict,
    pretrain_source,
    probe_domain_accuracy,
    seg_miou,
)

log = logging.getLogger("dsem_lab")

REPORT_SCHEMA = "dsem-lab.report/1"
SECTIONS = {"DetectorConfig": DetectorConfig, "DsemConfig": DsemConfig, "AdaptConfig": AdaptConfig}


class CliError(Exception):
    """A user-facing failure: printed as one line, exit status 1."""


# ---------------------------------------------------------------------------
# configuration


def load_config_file(path: str | None) -> dict[str, dict]:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError(f"config {path}: top level must be an object with sections {', '.join(SECTIONS)}")
    for section, body in raw.items():
        if section not in SECTIONS:
            raise CliError(f"config {path}: unknown section {section!r} (known: {', '.join(SECTIONS)})")
        if not isinstance(body, dict):
            raise CliError(f"config {path}: section {section} must be an object")
        unknown = set(body) - config_fields(SECTIONS[section])
        if unknown:
            raise CliError(f"config {path}: unknown key(s) in {section}: {', '.join(sorted(unknown))}")
    return raw


def _build(cls, values: dict):
    kw = dict(values)
    if cls is AdaptConfig and "lambda" in kw:
        kw["lam"] = kw.pop("lambda")
    for f in fields(cls):
        if f.name in kw and isinstance(kw[f.name], list):
            kw[f.name] = tuple(kw[f.name])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid {cls.__name__}: {exc}") from exc


def resolve_configs(file_cfg: dict[str, dict], flags: dict[str, dict]) -> tuple[DetectorConfig, DsemConfig, AdaptConfig]:
    """defaults < config file < command-line flags."""
    out = []
    for name, cls in SECTIONS.items():
        merged = {**file_cfg.get(name, {}), **{k: v for k, v in flags.get(name, {}).items() if v is not None}}
        out.append(_build(cls, merged))
    return tuple(out)  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# run directory


class RunDir:
    def __init__(self, path: str):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.artifacts: dict[str, str] = {}

    def sub(self, name: str) -> Path:
        p = self.path / name
        p.mkdir(parents=True, exist_ok=True)
        return p

    def write_text(self, rel: str, text: str, key: str | None = None) -> Path:
        p = self.path / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        self.artifacts[key or rel] = rel
        return p

    def write_resolved(self, command: str, seed: int, configs: Sequence, extra: dict) -> None:
        doc = {"command": command, "seed": seed, "version": __version__, **config_dict(*configs), **extra}
        self.write_text("resolved-config.json", json.dumps(doc, indent=1, sort_keys=True) + "\n", "resolved_config")

    def save_checkpoint(self, name: str, state: dict) -> Path:
        p = save_checkpoint(state, self.sub("checkpoints") / name)
        self.artifacts[f"checkpoint_{name}"] = str(p.relative_to(self.path))
        return p

    def write_report(self, command: str, body: dict) -> dict:
        report = {"schema": REPORT_SCHEMA, "command": command, **body, "artifacts": dict(sorted(self.artifacts.items()))}
        (self.path / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return report


# ---------------------------------------------------------------------------
# data helpers


def _load(path: str | None, flag: str = "--data") -> list[Sample]:
    if path is None:
        raise CliError(f"{flag} is required")
    try:
        return load_dataset(path)
    except DatasetError as exc:
        raise CliError(str(exc)) from exc


def _check_classes(samples: Sequence[Sample], det_cfg: DetectorConfig, where: str) -> None:
    top = max((c for s in samples for c in s.labels), default=-1)
    if top >= det_cfg.num_classes:
        raise CliError(f"{where}: dataset uses class {top} but the model has num_classes={det_cfg.num_classes}")


def _load_state(path: str | None, det_cfg: DetectorConfig, flag: str) -> dict:
    if path is None:
        raise CliError(f"{flag} is required")
    try:
        state = load_checkpoint(path)
        # shape validation against the configured detector
        det = Detector(det_cfg, seed=0)
        own = dict((n, p.shape) for n, p in det.named_parameters())
        for n, arr in state.items():
            if n in own and arr.shape != own[n]:
                raise CheckpointError(f"{path}: parameter {n} has shape {arr.shape}, model expects {own[n]}")
        missing = [n for n in own if n not in state]
        if missing:
            raise CheckpointError(f"{path}: missing detector parameter(s) {', '.join(missing[:3])}")
    except CheckpointError as exc:
        raise CliError(str(exc)) from exc
    return state


def _parse_shift(text: str) -> ShiftSpec:
    try:
        if text.lstrip().startswith("{"):
            return ShiftSpec.from_dict(json.loads(text))
        if Path(text).is_file():
            return ShiftSpec.from_dict(json.loads(Path(text).read_text(encoding="utf-8")))
        return ShiftSpec.preset(text)
    except (ValueError, TypeError) as exc:
        raise CliError(f"--shift: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> dict:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} exists and is not empty (use --force to overwrite)")
    if args.n_source < 0 or args.n_target < 0:
        raise CliError("--n-source and --n-target must be >= 0")
    shift = _parse_shift(args.shift)
    src, tgt = gen_domain_pair(args.n_source, args.n_target, shift, args.seed, args.split)
    if out.exists() and args.force:
        for f in (out / "images").glob("*.ppm") if (out / "images").is_dir() else []:
            f.unlink()
    save_dataset(out, src + tgt, genspec_dict(shift, args.seed, args.n_source, args.n_target, args.split))
    summary = summarize(src + tgt)
    print(json.dumps(summary, sort_keys=True))
    return summary


def _common_configs(args) -> tuple[DetectorConfig, DsemConfig, AdaptConfig]:
    flags = {"AdaptConfig": {"seed": args.seed}}
    for attr, key in (("lam", "lambda"), ("iters", None), ("lr", None), ("few_shot", "few_shot_target_per_class")):
        if getattr(args, attr, None) is None:
            continue
        if attr == "iters":
            key = "pretrain_iters" if args.command == "pretrain" else "adapt_iters"
        if attr == "lr":
            key = "pretrain_lr" if args.command == "pretrain" else "base_lr"
        flags["AdaptConfig"][key] = getattr(args, attr)
    return resolve_configs(load_config_file(args.config), flags)


def cmd_pretrain(args) -> dict:
    det_cfg, dsem_cfg, adapt_cfg = _common_configs(args)
    run = RunDir(args.run_dir)
    samples = _load(args.data)
    source = by_domain(samples, SOURCE)
    if not source:
        raise CliError(f"{args.data}: no source-domain images to pretrain on")
    _check_classes(source, det_cfg, args.data)
    run.write_resolved("pretrain", args.seed, (det_cfg, dsem_cfg, adapt_cfg), {"data": str(args.data)})
    state, metrics = pretrain_source(det_cfg, source, adapt_cfg)
    run.save_checkpoint("pretrain", state)
    run.write_text("metrics.csv", metrics.to_csv(), "metrics")
    return run.write_report("pretrain", {"iterations": len(metrics.records), "final_l_det": metrics.records[-1]["l_det"] if metrics.records else None})


def cmd_adapt(args) -> dict:
    det_cfg, dsem_cfg, adapt_cfg = _common_configs(args)
    run = RunDir(args.run_dir)
    samples = _load(args.data)
    source, target = by_domain(samples, SOURCE), by_domain(samples, TARGET)
    _check_classes(source, det_cfg, args.data)
    pre = _load_state(getattr(args, "from"), det_cfg, "--from")
    if adapt_cfg.few_shot_target_per_class is not None:
        try:
            target = few_shot_subset(target, adapt_cfg.few_shot_target_per_class, args.seed)
        except ValueError as exc:
            raise CliError(f"few-shot subset: {exc}") from exc
    unlabeled = strip_annotations(target)
    run.write_resolved(
        "adapt",
        args.seed,
        (det_cfg, dsem_cfg, adapt_cfg),
        {"data": str(args.data), "from": str(getattr(args, "from")), "dsem_enabled": not args.no_dsem, "n_target": len(unlabeled)},
    )
    try:
        state, metrics = adapt(pre, source, unlabeled, adapt_cfg, det_cfg, dsem_cfg, dsem_enabled=not args.no_dsem)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    run.save_checkpoint("adapted", state)
    run.write_text("metrics.csv", metrics.to_csv(), "metrics")
    acc = metrics.column("domain_acc")
    return run.write_report(
        "adapt",
        {"iterations": len(metrics.records), "final_domain_acc": None if not np.isfinite(acc).any() else float(np.nanmean(acc[-max(1, len(acc) // 10) :]))},
    )


def _oracle_detections(samples: Sequence[Sample]) -> dict[str, list[Detection]]:
    return {s.image_id: [Detection(b, c, 1.0) for b, c in zip(s.boxes, s.labels)] for s in samples}


def cmd_eval(args) -> dict:
    det_cfg, dsem_cfg, adapt_cfg = _common_configs(args)
    run = RunDir(args.run_dir)
    domain = SOURCE if args.split == "source-test" else TARGET
    samples = by_domain(_load(args.data), domain)
    if not samples:
        raise CliError(f"{args.data}: no {args.split.split('-')[0]}-domain images")
    _check_classes(samples, det_cfg, args.data)
    run.write_resolved("eval", args.seed, (det_cfg, dsem_cfg, adapt_cfg), {"data": str(args.data), "split": args.split, "checkpoint": args.checkpoint})
    miou = None
    if args.oracle_detections:
        dets = _oracle_detections(samples)
    else:
        state = _load_state(args.checkpoint, det_cfg, "--checkpoint")
        dets = predict(load_detector(state, det_cfg), samples)
        if any(k.startswith("dsem8.seg.") for k in state):
            miou = seg_miou(state, det_cfg, dsem_cfg, samples)
    per_class, mean_ap = evaluate_map(dets, ground_truth_of(samples))
    dump = run.sub("detections") / f"{args.split}.txt"
    write_detection_dump(dump, dets)
    run.artifacts["detections"] = str(dump.relative_to(run.path))
    body = {
        "split": args.split,
        "mAP": mean_ap,
        "per_class_ap": {CLASSES[k]: v for k, v in per_class.items()},
        "seg_miou": None if miou is None or np.isnan(miou) else miou,
        "domain_acc": None,
    }
    return run.write_report("eval", body)


def cmd_probe(args) -> dict:
    det_cfg, dsem_cfg, adapt_cfg = _common_configs(args)
    run = RunDir(args.run_dir)
    train = _load(args.data)
    held = _load(args.eval_data, "--eval-data")
    state = _load_state(args.checkpoint, det_cfg, "--checkpoint")
    parts = [by_domain(train, SOURCE), by_domain(train, TARGET), by_domain(held, SOURCE), by_domain(held, TARGET)]
    if not all(parts):
        raise CliError("probe needs source and target images in both --data and --eval-data")
    run.write_resolved("probe", args.seed, (det_cfg, dsem_cfg, adapt_cfg), {"data": str(args.data), "eval_data": str(args.eval_data), "checkpoint": args.checkpoint})
    acc = probe_domain_accuracy(
        state,
        det_cfg,
        dsem_cfg,
        parts[0],
        strip_annotations(parts[1]),
        parts[2],
        strip_annotations(parts[3]),
        iters=adapt_cfg.probe_iters,
        seed=args.seed,
    )
    return run.write_report("probe", {"mAP": None, "per_class_ap": None, "seg_miou": None, "domain_acc": acc})


def _parse_axis(text: str) -> tuple[str, list]:
    name, sep, values = text.partition("=")
    if not sep:
        raise CliError(f"--axis {text!r}: expected NAME=JSON_LIST")
    try:
        parsed = json.loads(values)
    except json.JSONDecodeError as exc:
        raise CliError(f"--axis {name}: values must be a JSON list ({exc})") from exc
    if not isinstance(parsed, list) or not parsed:
        raise CliError(f"--axis {name}: values must be a nonempty JSON list")
    return name.strip(), parsed


def cmd_ablate(args) -> dict:
    det_cfg, dsem_cfg, adapt_cfg = _common_configs(args)
    run = RunDir(args.run_dir)
    train, held = _load(args.data), _load(args.eval_data, "--eval-data")
    _check_classes(train + held, det_cfg, args.data)
    axes = dict(_parse_axis(a) for a in args.axis or [])
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    try:
        spec = AblationSpec(axes=axes, seeds=seeds, det_config=det_cfg, dsem_config=dsem_cfg, adapt_config=adapt_cfg)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    split = SplitData(
        by_domain(train, SOURCE),
        strip_annotations(by_domain(train, TARGET)),
        by_domain(held, SOURCE),
        by_domain(held, TARGET),
    )
    pre_state = _load_state(getattr(args, "from"), det_cfg, "--from") if getattr(args, "from") else None
    run.write_resolved(
        "ablate",
        args.seed,
        (det_cfg, dsem_cfg, adapt_cfg),
        {"data": str(args.data), "eval_data": str(args.eval_data), "axes": axes, "seeds": seeds, "from": getattr(args, "from")},
    )
    report = run_ablation_suite(
        spec,
        lambda s: split,
        (lambda s: pre_state) if pre_state is not None else None,
        jobs=args.jobs,
    )
    run.write_text("ablation_runs.csv", report.runs_csv(), "ablation_runs")
    run.write_text("ablation_summary.csv", report.summary_csv(), "ablation_summary")
    # one row per run also doubles as the run's metrics table
    run.write_text("metrics.csv", report.runs_csv(), "metrics")
    return run.write_report("ablate", {"cells": len(spec.grid()), "seeds": seeds, "summary": report.summary})


def cmd_export_saliency(args) -> dict:
    det_cfg, dsem_cfg, adapt_cfg = _common_configs(args)
    run = RunDir(args.run_dir)
    samples = _load(args.data)[: args.limit]
    state = _load_state(args.checkpoint, det_cfg, "--checkpoint")
    prefix = f"dsem{args.stride}."
    sub = {k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)}
    if not sub:
        raise CliError(f"{args.checkpoint}: no DSEM parameters for stride {args.stride}")
    run.write_resolved("export-saliency", args.seed, (det_cfg, dsem_cfg, adapt_cfg), {"data": str(args.data), "checkpoint": args.checkpoint, "stride": args.stride})
    det = load_detector(state, det_cfg)
    m = DSEM(det.feature_channels(args.stride), det_cfg.feature_size(args.stride), dsem_cfg, name=prefix[:-1])
    try:
        m.load_state_dict(sub, strict=False)
    except ValueError as exc:
        raise CliError(f"{args.checkpoint}: {exc}") from exc
    out_dir = run.sub("heatmaps")
    written = []
    for s in samples:
        with T.no_grad():
            f = det.backbone_forward(_as_batch(s))[args.stride]
            mask = m.seg(f).mask if dsem_cfg.foreground_enhance else None
            encoded = m.encode(f, mask, 0.0)
        heat, raw = export_domain_evidence(encoded, m.classifier)
        pgm, _ = write_heatmap(out_dir / s.image_id, heat, raw)
        written.append(pgm.name)
    run.artifacts["heatmaps"] = str(out_dir.relative_to(run.path))
    return run.write_report("export-saliency", {"heatmaps": written})


def _as_batch(sample: Sample) -> T.Tensor:
    return T.Tensor(sample.image[None].astype(np.float32))


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsem-lab", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic two-domain dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--n-source", type=int, default=200)
    g.add_argument("--n-target", type=int, default=200)
    g.add_argument("--shift", default="default", help="preset name, inline JSON or a JSON file")
    g.add_argument("--split", default="train", help="split name mixed into every image's seed (default: train)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty --out")
    g.set_defaults(func=cmd_gen_data)

    def common(name: str, func, help_: str) -> argparse.ArgumentParser:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON with optional DetectorConfig/DsemConfig/AdaptConfig sections")
        s.add_argument("--data", help="dataset directory")
        s.add_argument("--run-dir", required=True)
        s.add_argument("--seed", type=int, default=0)
        s.set_defaults(func=func)
        return s

    s = common("pretrain", cmd_pretrain, "train the detector on labeled source images")
    s.add_argument("--iters", type=int)
    s.add_argument("--lr", type=float)

    s = common("adapt", cmd_adapt, "adversarial adaptation from a pretrained checkpoint")
    s.add_argument("--from", required=True, help="pretrained checkpoint directory")
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--iters", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--few-shot", type=int, help="keep this many target images per class")
    s.add_argument("--no-dsem", action="store_true", help="same loop on source detection loss only (baseline)")

    s = common("eval", cmd_eval, "mAP@0.5 of a checkpoint on one domain")
    s.add_argument("--checkpoint")
    s.add_argument("--split", choices=("source-test", "target-test"), required=True)
    s.add_argument("--oracle-detections", action="store_true", help="score the ground truth itself (harness check)")

    s = common("probe", cmd_probe, "held-out accuracy of a domain classifier on frozen features")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--eval-data", help="held-out dataset directory")

    s = common("ablate", cmd_ablate, "sweep DSEM switches / lambda over seeds")
    s.add_argument("--eval-data", help="held-out dataset directory")
    s.add_argument("--from", help="shared pretrained checkpoint (default: pretrain per seed)")
    s.add_argument("--axis", action="append", help='NAME=JSON_LIST, e.g. lambda=[0,0.5,1]; repeatable')
    s.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--iters", type=int)
    s.add_argument("--jobs", type=int, default=1)

    s = common("export-saliency", cmd_export_saliency, "domain-evidence heatmaps from an adapted checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--stride", type=int, choices=(8, 32), default=8)
    s.add_argument("--limit", type=int, default=8)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, DatasetError, CheckpointError, FloatingPointError) as exc:
        print(f"dsem-lab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
