"""
PSMT — Synthetic shapes dataset

Each image is a flat background with 0..k coloured shapes; the mask assigns
every pixel the class of the top-most shape covering its centre:

    0 background   1 disk   2 rectangle   3 triangle

Per-class colour families (red / green / blue, jittered) keep the task
learnable by a toy network.  Image i draws its shapes from its own RNG
substream (seed, stream, i), so files are byte-identical across runs and
independent of generation order.  The shape kind of image i's top-most
("anchor") shape cycles through the vocabulary, which keeps every shape class
present in roughly 1/|vocabulary| of the images.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from data_loader.dataset import DatasetIndex
from src.config import (
    NUM_CLASSES,
    SEED,
    SYNTH_HEIGHT,
    SYNTH_NOISE,
    SYNTH_SHAPES,
    SYNTH_SHAPES_PER_IMAGE,
    SYNTH_TRAIN_SIZE,
    SYNTH_VAL_SIZE,
    SYNTH_WIDTH,
)
from src.errors import ConfigError, DataError

log = logging.getLogger(__name__)

CLASS_OF_SHAPE = {"disk": 1, "rectangle": 2, "triangle": 3}

# Channel centres of each class's colour family; jittered per shape
_CLASS_COLOURS = {
    1: (0.85, 0.20, 0.20),
    2: (0.20, 0.80, 0.25),
    3: (0.20, 0.30, 0.90),
}
_COLOUR_JITTER = 0.12
_BACKGROUND_RANGE = (0.35, 0.55)

# Stream ids for the per-image RNG substreams
TRAIN_STREAM = 0
VAL_STREAM = 1


@dataclass
class SyntheticSpec:
    height: int = SYNTH_HEIGHT
    width: int = SYNTH_WIDTH
    shapes: tuple[str, ...] = SYNTH_SHAPES
    shapes_per_image: tuple[int, int] = SYNTH_SHAPES_PER_IMAGE
    noise: float = SYNTH_NOISE
    seed: int = SEED

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"synthetic canvas must be at least 16×16, got {self.height}×{self.width}")
        unknown = [s for s in self.shapes if s not in CLASS_OF_SHAPE]
        if unknown or not self.shapes:
            raise ConfigError(f"synthetic shapes must be drawn from {sorted(CLASS_OF_SHAPE)}, got {self.shapes}")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ConfigError(f"shapes_per_image must satisfy 0 <= min <= max, got {self.shapes_per_image}")
        if self.noise < 0:
            raise ConfigError(f"synthetic noise must be >= 0, got {self.noise}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        d["shapes_per_image"] = list(self.shapes_per_image)
        return d


@dataclass
class ShapeRecord:
    kind: str
    label: int
    params: dict = field(default_factory=dict)


@dataclass
class SyntheticSample:
    image: np.ndarray      # H×W×3 float in [0, 1]
    mask: np.ndarray       # H×W uint8 class indices
    shapes: list[ShapeRecord]


# ---------------------------------------------------------------------------
# Rasterisation (pixel centres)
# ---------------------------------------------------------------------------

def _pixel_centres(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:height, 0:width]
    return yy + 0.5, xx + 0.5


def _disk(rng: np.random.Generator, height: int, width: int) -> tuple[np.ndarray, dict]:
    side = min(height, width)
    r = rng.uniform(0.1, 0.25) * side
    cy = rng.uniform(r, height - r)
    cx = rng.uniform(r, width - r)
    yy, xx = _pixel_centres(height, width)
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return inside, {"cy": cy, "cx": cx, "r": r}


def _rectangle(rng: np.random.Generator, height: int, width: int) -> tuple[np.ndarray, dict]:
    bh = max(2, int(round(rng.uniform(0.2, 0.5) * height)))
    bw = max(2, int(round(rng.uniform(0.2, 0.5) * width)))
    top = int(rng.integers(0, height - bh + 1))
    left = int(rng.integers(0, width - bw + 1))
    inside = np.zeros((height, width), dtype=bool)
    inside[top:top + bh, left:left + bw] = True
    return inside, {"top": top, "left": left, "height": bh, "width": bw}


def _triangle(rng: np.random.Generator, height: int, width: int) -> tuple[np.ndarray, dict]:
    side = rng.uniform(0.25, 0.5) * min(height, width)
    oy = rng.uniform(0, height - side)
    ox = rng.uniform(0, width - side)
    while True:
        pts = rng.uniform(0, side, size=(3, 2)) + (oy, ox)
        (y0, x0), (y1, x1), (y2, x2) = pts
        area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area2) >= 0.1 * side * side:
            break
    yy, xx = _pixel_centres(height, width)

    def edge(ax, ay, bx, by):
        return (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)

    e0, e1, e2 = edge(x0, y0, x1, y1), edge(x1, y1, x2, y2), edge(x2, y2, x0, y0)
    inside = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    return inside, {"vertices": pts.tolist()}


_RASTERISERS = {"disk": _disk, "rectangle": _rectangle, "triangle": _triangle}


def _colour(rng: np.random.Generator, label: int) -> np.ndarray:
    base = np.asarray(_CLASS_COLOURS[label])
    return np.clip(base + rng.uniform(-_COLOUR_JITTER, _COLOUR_JITTER, size=3), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_sample(spec: SyntheticSpec, rng: np.random.Generator, anchor: str | None = None) -> SyntheticSample:
    """Render one image/mask pair; `anchor` (if any shapes are drawn) is the top-most kind."""
    h, w = spec.height, spec.width
    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = rng.uniform(*_BACKGROUND_RANGE, size=3)
    mask = np.zeros((h, w), dtype=np.uint8)

    lo, hi = spec.shapes_per_image
    count = int(rng.integers(lo, hi + 1))
    kinds = [str(k) for k in rng.choice(np.asarray(spec.shapes), size=count)] if count else []
    if kinds and anchor is not None:
        kinds[-1] = anchor

    records: list[ShapeRecord] = []
    for kind in kinds:
        label = CLASS_OF_SHAPE[kind]
        inside, params = _RASTERISERS[kind](rng, h, w)
        image[inside] = _colour(rng, label)
        mask[inside] = label
        records.append(ShapeRecord(kind=kind, label=label, params=params))

    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    return SyntheticSample(image=np.clip(image, 0.0, 1.0), mask=mask, shapes=records)


def _write_png(array: np.ndarray, path: Path) -> None:
    try:
        Image.fromarray(array).save(path, format="PNG")
    except OSError as exc:
        raise DataError(path, f"cannot write PNG ({exc})") from exc


def generate_synthetic(
    spec: SyntheticSpec,
    n: int,
    out_dir: str | Path,
    prefix: str = "train",
    stream: int = TRAIN_STREAM,
) -> DatasetIndex:
    """Write `n` image/mask PNG pairs under `out_dir` and return their (fully labelled) index."""
    spec.validate()
    if n < 1:
        raise ConfigError(f"number of synthetic images must be >= 1, got {n}")
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(root, f"output directory is not writable ({exc})") from exc

    width = max(4, len(str(n - 1)))
    ids: list[str] = []
    for i in range(n):
        rng = np.random.default_rng([spec.seed, stream, i])
        sample = render_sample(spec, rng, anchor=spec.shapes[i % len(spec.shapes)])
        item_id = f"{prefix}_{i:0{width}d}"
        _write_png((np.round(sample.image * 255.0)).astype(np.uint8), root / "images" / f"{item_id}.png")
        _write_png(sample.mask, root / "masks" / f"{item_id}.png")
        ids.append(item_id)

    log.info("Generated %d synthetic %s images in %s", n, prefix, root)
    return DatasetIndex(root=root, labelled=ids, num_classes=NUM_CLASSES, name="full")


def generate_dataset(
    spec: SyntheticSpec,
    root: str | Path,
    n_train: int = SYNTH_TRAIN_SIZE,
    n_val: int = SYNTH_VAL_SIZE,
) -> tuple[DatasetIndex, DatasetIndex | None]:
    """Train set (manifest splits/full.json) plus an optional validation set (splits/val.json)."""
    train = generate_synthetic(spec, n_train, root, prefix="train", stream=TRAIN_STREAM)
    train.save()
    val = None
    if n_val > 0:
        val = generate_synthetic(spec, n_val, root, prefix="val", stream=VAL_STREAM)
        val.name = "val"
        val.save()
    return train, val
