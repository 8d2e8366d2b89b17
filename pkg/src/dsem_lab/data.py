"""Synthetic two-domain shape-detection benchmark and dataset I/O.

Images are 3×S×S float32 in [0, 1], always quantized to k/255 so that a
PPM round trip is bitwise exact. Every image draws from its own PRNG stream
keyed by (seed, split, domain, index), so generation is order-independent.
"""

from __future__ import annotations

import json
import zlib
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dsem_lab.detector.boxes import Box, iou

log = logging.getLogger(__name__)

CLASSES = ("circle", "square", "triangle")
IMAGE_SIZE = 64
SOURCE, TARGET = 1, 0
DOMAIN_NAMES = {SOURCE: "source", TARGET: "target"}

# warm object colours; a channel rotation maps them onto cool colours none of which occur
# in the source. Each object picks its colour independently of its class, so shape is the
# only class cue and colour is pure domain style.
PALETTE = np.array(
    [
        [0.95, 0.30, 0.10],
        [0.90, 0.80, 0.15],
        [0.85, 0.20, 0.60],
    ]
)
PLAIN_BACKGROUND = 0.12
MIN_SIDE, MAX_SIDE = 0.2, 0.5
MAX_OVERLAP_IOU = 0.3
MAX_ATTEMPTS = 100


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftSpec:
    palette_swap: bool = False
    noise_sigma: float = 0.0
    background_texture: str = "plain"
    brightness_shift: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.background_texture not in ("plain", "stripes", "speckle"):
            raise ValueError(f"unknown background_texture {self.background_texture!r}")
        if not -0.5 <= self.brightness_shift <= 0.5:
            raise ValueError(f"brightness_shift must lie in [-0.5, 0.5], got {self.brightness_shift}")

    @classmethod
    def preset(cls, name: str) -> ShiftSpec:
        try:
            return SHIFT_PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown shift preset {name!r}; known: {', '.join(SHIFT_PRESETS)}") from None

    @classmethod
    def from_dict(cls, d: dict) -> ShiftSpec:
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown ShiftSpec key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


SHIFT_PRESETS = {
    "null": ShiftSpec(),
    "default": ShiftSpec(palette_swap=True, noise_sigma=0.05, background_texture="speckle"),
    "stripes": ShiftSpec(background_texture="stripes", noise_sigma=0.05),
    "dim": ShiftSpec(brightness_shift=-0.3),
}


@dataclass
class Sample:
    image: np.ndarray  # 3×S×S float32
    boxes: list[Box]
    labels: list[int]
    domain: int
    image_id: str
    # generation-time class presence; read by few_shot_subset, never by training
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.boxes) != len(self.labels):
            raise ValueError(f"{self.image_id}: {len(self.boxes)} boxes but {len(self.labels)} labels")


@dataclass(frozen=True)
class UnlabeledImage:
    """What the adaptation loop sees of a target image: pixels and an id, nothing else."""

    image: np.ndarray
    image_id: str


def strip_annotations(samples: Iterable[Sample]) -> list[UnlabeledImage]:
    return [UnlabeledImage(s.image, s.image_id) for s in samples]


def _rng(seed: int, split: str, domain: int, index: int) -> np.random.Generator:
    key = zlib.crc32(split.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, domain, index]))


def _pixel_centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size
    return c[None, :], c[:, None]  # x (row vector), y (column vector)


def shape_mask(cls: int, box: Sequence[float], size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean S×S mask of a shape whose tight bounding box is ``box``."""
    x, y = _pixel_centers(size)
    x0, y0, x1, y1 = box
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    side = x1 - x0
    if CLASSES[cls] == "circle":
        return (x - cx) ** 2 + (y - cy) ** 2 <= (0.5 * side) ** 2
    if CLASSES[cls] == "square":
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
    # apex up, base on the bottom edge, height equal to the base
    return (y >= y0) & (y <= y1) & (np.abs(x - cx) <= 0.5 * (y - y0) * (x1 - x0) / (y1 - y0))


def _background(texture: str, rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.full((3, size, size), PLAIN_BACKGROUND)
    if texture == "stripes":
        x, y = _pixel_centers(size)
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(0.08, 0.2)
        phase = np.cos(theta) * x + np.sin(theta) * y
        stripe = (np.sin(2 * np.pi * phase / period) > 0).astype(np.float64)
        tint = rng.uniform(0.2, 0.6, size=3)
        img = img + stripe[None] * tint[:, None, None]
    elif texture == "speckle":
        # coarse colour blotches plus fine grain
        coarse = rng.uniform(0.0, 0.7, size=(3, size // 4, size // 4))
        img = img + np.repeat(np.repeat(coarse, 4, axis=1), 4, axis=2) * 0.6
        img = img + rng.uniform(0.0, 0.25, size=(1, size, size))
    return img


def _place_objects(rng: np.random.Generator) -> tuple[list[list[float]], list[int]]:
    n_obj = int(rng.integers(1, 4))
    boxes: list[list[float]] = []
    labels: list[int] = []
    attempts = 0
    while len(boxes) < n_obj and attempts < MAX_ATTEMPTS:
        attempts += 1
        cls = int(rng.integers(0, len(CLASSES)))
        side = float(rng.uniform(MIN_SIDE, MAX_SIDE))
        x0 = float(rng.uniform(0.0, 1.0 - side))
        y0 = float(rng.uniform(0.0, 1.0 - side))
        cand = Box(x0, y0, x0 + side, y0 + side)
        if any(iou(cand, Box(*b)) > MAX_OVERLAP_IOU for b in boxes):
            continue
        boxes.append([x0, y0, x0 + side, y0 + side])
        labels.append(cls)
    return boxes, labels


def render_sample(seed: int, split: str, domain: int, index: int, shift: ShiftSpec, size: int = IMAGE_SIZE) -> Sample:
    rng = _rng(seed, split, domain, index)
    boxes, labels = _place_objects(rng)
    apply_shift = domain == TARGET
    texture = shift.background_texture if apply_shift else "plain"
    img = _background(texture, rng, size)
    palette = PALETTE[:, [1, 2, 0]] if (apply_shift and shift.palette_swap) else PALETTE
    colours = rng.integers(0, len(palette), size=len(boxes))
    for b, c, k in zip(boxes, labels, colours):
        m = shape_mask(c, b, size)
        img[:, m] = palette[k][:, None]
    if apply_shift:
        img = img + shift.brightness_shift
        if shift.noise_sigma > 0:
            img = img + rng.normal(0.0, shift.noise_sigma, size=img.shape)
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    prefix = "s" if domain == SOURCE else "t"
    return Sample(
        image=(q.astype(np.float32) / np.float32(255.0)),
        boxes=[Box(*b) for b in boxes],
        labels=labels,
        domain=domain,
        image_id=f"{split}-{prefix}{index:05d}",
        meta={"classes": sorted(set(labels))},
    )


def gen_domain_pair(
    n_source: int, n_target: int, shift: ShiftSpec, seed: int, split: str = "train"
) -> tuple[list[Sample], list[Sample]]:
    """Labeled source samples and target samples drawn with ``shift`` applied."""
    source = [render_sample(seed, split, SOURCE, i, shift) for i in range(n_source)]
    target = [render_sample(seed, split, TARGET, i, shift) for i in range(n_target)]
    return source, target


# ---------------------------------------------------------------------------
# PPM / PGM


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a 3×H×W float image in [0, 1] as binary P6, maxval 255."""
    q = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = q.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes())


def write_pgm(path: str | os.PathLike, gray: np.ndarray) -> None:
    """Write an H×W uint8 array as binary P5."""
    g = np.asarray(gray, dtype=np.uint8)
    h, w = g.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(g).tobytes())


def _read_netpbm(path: Path) -> tuple[str, np.ndarray]:
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    magic = tokens[0].decode("ascii", "replace")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed header {b' '.join(tokens)!r}") from None
    if magic not in ("P5", "P6") or maxval != 255:
        raise DatasetError(f"{path}: unsupported format {magic} maxval {maxval}")
    ch = 3 if magic == "P6" else 1
    body = raw[pos : pos + w * h * ch]
    if len(body) != w * h * ch:
        raise DatasetError(f"{path}: expected {w * h * ch} pixel bytes, found {len(body)}")
    return magic, np.frombuffer(body, dtype=np.uint8).reshape(h, w, ch)


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read a P6 (or P5, replicated to 3 channels) image as 3×H×W float32 in [0, 1]."""
    try:
        _, arr = _read_netpbm(Path(path))
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# dataset directories


def save_dataset(
    path: str | os.PathLike,
    samples: Sequence[Sample],
    genspec: dict | None = None,
) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        fname = f"images/{s.image_id}.ppm"
        write_ppm(root / fname, s.image)
        records.append(
            {
                "file": fname,
                "image_id": s.image_id,
                "boxes": [b.as_list() for b in s.boxes],
                "labels": list(s.labels),
                "domain": DOMAIN_NAMES[s.domain],
            }
        )
    (root / "manifest.json").write_text(json.dumps(records, indent=1) + "\n", encoding="utf-8")
    if genspec is not None:
        (root / "genspec.json").write_text(json.dumps(genspec, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return root


def load_dataset(path: str | os.PathLike) -> list[Sample]:
    root = Path(path)
    mpath = root / "manifest.json"
    try:
        records = json.loads(mpath.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{mpath}: cannot parse manifest: {exc}") from exc
    if not isinstance(records, list):
        raise DatasetError(f"{mpath}: manifest must be a JSON list")
    samples = []
    for i, rec in enumerate(records):
        where = f"{mpath} record {i}"
        try:
            fname = rec["file"]
            domain = {"source": SOURCE, "target": TARGET}[rec["domain"]]
            raw_boxes = rec.get("boxes", [])
            labels = [int(c) for c in rec.get("labels", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: malformed record ({exc!r})") from exc
        if len(raw_boxes) != len(labels):
            raise DatasetError(f"{where} ({fname}): {len(raw_boxes)} boxes but {len(labels)} labels")
        boxes = []
        for j, b in enumerate(raw_boxes):
            try:
                if len(b) != 4:
                    raise ValueError(f"expected 4 coordinates, got {len(b)}")
                boxes.append(Box.from_seq(b))
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{where} ({fname}) box {j}: {exc}") from exc
        for j, c in enumerate(labels):
            if not 0 <= c < len(CLASSES):
                raise DatasetError(f"{where} ({fname}) label {j}: class {c} out of range")
        image = read_image(root / fname)
        samples.append(
            Sample(
                image=image,
                boxes=boxes,
                labels=labels,
                domain=domain,
                image_id=str(rec.get("image_id", Path(fname).stem)),
                meta={"classes": sorted(set(labels))},
            )
        )
    return samples


def by_domain(samples: Iterable[Sample], domain: int) -> list[Sample]:
    return [s for s in samples if s.domain == domain]


def few_shot_subset(target: Sequence[Sample], per_class: int, seed: int) -> list[Sample]:
    """Deterministic subset with ``per_class`` images containing each class.

    An image counts toward every class it contains; classes are filled in
    index order from a seeded shuffle, so the subset never exceeds
    ``per_class * n_classes`` images.
    """
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    classes = sorted({c for s in target for c in s.meta.get("classes", [])})
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    order = rng.permutation(len(target))
    chosen: list[int] = []
    counts = {c: 0 for c in classes}
    for c in classes:
        for i in order:
            if counts[c] >= per_class:
                break
            if c in target[i].meta.get("classes", []) and i not in chosen:
                chosen.append(int(i))
                for k in target[i].meta["classes"]:
                    counts[k] += 1
        if counts[c] < per_class:
            raise ValueError(f"class {c} ({CLASSES[c]}) has only {counts[c]} images, need {per_class}")
    return [target[i] for i in sorted(chosen)]


def genspec_dict(shift: ShiftSpec, seed: int, n_source: int, n_target: int, split: str) -> dict:
    return {"shift": asdict(shift), "seed": seed, "n_source": n_source, "n_target": n_target, "split": split}


def summarize(samples: Sequence[Sample]) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    for name in ("source", "target"):
        dom = SOURCE if name == "source" else TARGET
        counts = {c: 0 for c in CLASSES}
        n = 0
        for s in samples:
            if s.domain != dom:
                continue
            n += 1
            for c in s.labels:
                counts[CLASSES[c]] += 1
        out[name] = {"images": n, **counts}
    return out
