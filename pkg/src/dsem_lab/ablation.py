"""Grid sweeps over DSEM switches and adaptation settings, one adapt run per (cell, seed)."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from dsem_lab.data import Sample
from dsem_lab.detector import DetectorConfig
from dsem_lab.dsem import DsemConfig
from dsem_lab.training import AdaptConfig, Checkpoint, adapt, evaluate, pretrain_source

log = logging.getLogger(__name__)

# axis name -> (config it overrides, field name)
AXES = {
    "foreground_enhance": ("dsem", "foreground_enhance"),
    "mask_adversary": ("dsem", "mask_adversary"),
    "dense_depth_l": ("dsem", "dense_depth_l"),
    "pool_bins": ("dsem", "pool_bins"),
    "dsem_strides": ("adapt", "dsem_strides"),
    "lambda": ("adapt", "lam"),
}
RUN_FIELDS = ("cell", "seed", "source_map", "target_map", "final_domain_acc")
SUMMARY_FIELDS = ("cell", "n_seeds", "target_map_mean", "target_map_sd", "source_map_mean", "source_map_sd")


@dataclass
class SplitData:
    source_train: list[Sample]
    target_train: list
    source_test: list[Sample]
    target_test: list[Sample]


@dataclass
class AblationSpec:
    """A grid of cells; each listed axis takes every value given, all others stay at base."""

    axes: dict[str, list] = field(default_factory=dict)
    seeds: Sequence[int] = (0,)
    det_config: DetectorConfig = field(default_factory=DetectorConfig)
    dsem_config: DsemConfig = field(default_factory=DsemConfig)
    adapt_config: AdaptConfig = field(default_factory=AdaptConfig)
    # cells given explicitly (list of axis->value dicts) replace the cartesian product
    cells: list[dict] | None = None

    def __post_init__(self):
        unknown = set(self.axes) - set(AXES)
        for c in self.cells or []:
            unknown |= set(c) - set(AXES)
        if unknown:
            raise ValueError(f"unknown ablation axis/axes: {', '.join(sorted(unknown))}; known: {', '.join(AXES)}")
        if not self.seeds:
            raise ValueError("ablation needs at least one seed")

    def grid(self) -> list[dict]:
        if self.cells is not None:
            return [dict(c) for c in self.cells]
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]

    def configs_for(self, cell: dict, seed: int) -> tuple[DsemConfig, AdaptConfig]:
        dsem_kw, adapt_kw = {}, {"seed": seed}
        for name, value in cell.items():
            target, attr = AXES[name]
            if isinstance(value, list):
                value = tuple(value)
            (dsem_kw if target == "dsem" else adapt_kw)[attr] = value
        return replace(self.dsem_config, **dsem_kw), replace(self.adapt_config, **adapt_kw)


def cell_label(cell: dict) -> str:
    def fmt(v):
        if isinstance(v, (list, tuple)):
            return "[" + " ".join(str(x) for x in v) + "]"
        return str(v)

    return ";".join(f"{k}={fmt(v)}" for k, v in cell.items()) or "base"


@dataclass
class AblationReport:
    runs: list[dict]
    summary: list[dict]

    def runs_csv(self) -> str:
        return _csv(RUN_FIELDS, self.runs)

    def summary_csv(self) -> str:
        return _csv(SUMMARY_FIELDS, self.summary)

    def mean_target_map(self, label: str) -> float:
        for row in self.summary:
            if row["cell"] == label:
                return row["target_map_mean"]
        raise KeyError(label)


def _csv(header: Sequence[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in header])
    return buf.getvalue()


@dataclass(frozen=True)
class CellTask:
    label: str
    seed: int
    det_config: DetectorConfig
    dsem_config: DsemConfig
    adapt_config: AdaptConfig
    data: SplitData
    pretrained: Checkpoint


def run_cell(task: CellTask) -> dict:
    """Adapt one (cell, seed) pair and score it on both test domains."""
    det_cfg, dsem_cfg, adapt_cfg, data = task.det_config, task.dsem_config, task.adapt_config, task.data
    pretrained = task.pretrained
    label, seed = task.label, task.seed
    state, metrics = adapt(pretrained, data.source_train, data.target_train, adapt_cfg, det_cfg, dsem_cfg)
    acc = metrics.column("domain_acc")
    tail = acc[-max(1, len(acc) // 10) :] if len(acc) else acc
    tail = tail[np.isfinite(tail)]
    return {
        "cell": label,
        "seed": seed,
        "source_map": float(evaluate(state, det_cfg, data.source_test)["mAP"]),
        "target_map": float(evaluate(state, det_cfg, data.target_test)["mAP"]),
        "final_domain_acc": float(tail.mean()) if len(tail) else math.nan,
    }


def run_ablation_suite(
    spec: AblationSpec,
    data_for_seed: Callable[[int], SplitData],
    pretrained_for_seed: Callable[[int], Checkpoint] | None = None,
    jobs: int = 1,
    runner: Callable[[CellTask], dict] = run_cell,
) -> AblationReport:
    """Train every (cell, seed) pair and tabulate per-run and per-cell target mAP.

    Rows come out in grid order, seeds innermost, regardless of ``jobs``.
    Without ``pretrained_for_seed`` each seed is pretrained once and the
    checkpoint is shared by all cells. ``runner`` must be picklable when
    ``jobs > 1``.
    """
    cells = spec.grid()
    datas = {s: data_for_seed(s) for s in spec.seeds}
    if pretrained_for_seed is None:

        def pretrained_for_seed(s: int) -> Checkpoint:
            cfg = replace(spec.adapt_config, seed=s)
            return pretrain_source(spec.det_config, datas[s].source_train, cfg)[0]

    pre = {s: pretrained_for_seed(s) for s in spec.seeds}
    tasks = []
    for cell in cells:
        for s in spec.seeds:
            dsem_cfg, adapt_cfg = spec.configs_for(cell, s)
            tasks.append(CellTask(cell_label(cell), s, spec.det_config, dsem_cfg, adapt_cfg, datas[s], pre[s]))
    log.info("ablation: %d cells x %d seeds", len(cells), len(spec.seeds))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(runner, tasks))
    else:
        runs = [runner(t) for t in tasks]
    return AblationReport(runs, summarize_runs(runs))


def summarize_runs(runs: list[dict]) -> list[dict]:
    order: list[str] = []
    by_cell: dict[str, list[dict]] = {}
    for r in runs:
        if r["cell"] not in by_cell:
            order.append(r["cell"])
        by_cell.setdefault(r["cell"], []).append(r)
    out = []
    for label in order:
        rows = by_cell[label]
        t = np.array([r["target_map"] for r in rows])
        s = np.array([r["source_map"] for r in rows])
        out.append(
            {
                "cell": label,
                "n_seeds": len(rows),
                "target_map_mean": float(t.mean()),
                "target_map_sd": _sd(t),
                "source_map_mean": float(s.mean()),
                "source_map_sd": _sd(s),
            }
        )
    return out


def _sd(a: np.ndarray) -> float:
    # sample sd; a single seed has no spread estimate
    return float(a.std(ddof=1)) if len(a) > 1 else 0.0
