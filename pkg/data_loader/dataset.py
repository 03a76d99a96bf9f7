"""
PSMT — Dataset index, split manifests and batch loading

On-disk layout of a dataset root:

    images/<id>.png     8-bit RGB
    masks/<id>.png      8-bit single channel, class indices, IGNORE = 255
    splits/<name>.json  manifest (schema "psmt-split-1")

In memory, images are float32 N×3×H×W in [0, 1] and masks int64 N×H×W with
IGNORE mapped to num_classes.  Unlabelled loads never expose masks, even if
the file exists on disk.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from src.config import IGNORE_MASK_VALUE, SPLIT_SCHEMA
from src.errors import ConfigError, DataError

log = logging.getLogger(__name__)

LOAD_MODES = ("labelled", "unlabelled")


# ---------------------------------------------------------------------------
# DatasetIndex
# ---------------------------------------------------------------------------

@dataclass
class DatasetIndex:
    """Labelled / unlabelled item ids of one dataset root."""

    root: Path
    labelled: list[str]
    num_classes: int
    unlabelled: list[str] = field(default_factory=list)
    name: str = "full"
    ratio: str | None = None
    split_seed: int | None = None

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        overlap = set(self.labelled) & set(self.unlabelled)
        if overlap:
            raise ConfigError(f"labelled and unlabelled sets overlap on {len(overlap)} ids, e.g. {sorted(overlap)[0]!r}")

    def __len__(self) -> int:
        return len(self.labelled) + len(self.unlabelled)

    # -- paths ---------------------------------------------------------------

    def image_path(self, item_id: str) -> Path:
        return self.root / "images" / f"{item_id}.png"

    def mask_path(self, item_id: str) -> Path:
        return self.root / "masks" / f"{item_id}.png"

    @property
    def labelled_pairs(self) -> list[tuple[Path, Path]]:
        return [(self.image_path(i), self.mask_path(i)) for i in self.labelled]

    @property
    def all_ids(self) -> list[str]:
        return list(self.labelled) + list(self.unlabelled)

    # -- manifest ------------------------------------------------------------

    def to_manifest(self) -> dict:
        return {
            "schema": SPLIT_SCHEMA,
            "name": self.name,
            "ratio": self.ratio,
            "seed": self.split_seed,
            "num_classes": self.num_classes,
            "labelled": list(self.labelled),
            "unlabelled": list(self.unlabelled),
        }

    def manifest_path(self) -> Path:
        return self.root / "splits" / f"{self.name}.json"

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path is not None else self.manifest_path()
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.to_manifest(), indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            raise DataError(path, f"cannot write split manifest ({exc})") from exc
        log.info("Wrote split manifest %s (%d labelled, %d unlabelled)", path, len(self.labelled), len(self.unlabelled))
        return path

    @classmethod
    def load(cls, path: str | Path, root: str | Path | None = None) -> "DatasetIndex":
        """Read a manifest; the dataset root defaults to the manifest's grandparent."""
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DataError(path, "split manifest not found") from exc
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(path, f"unreadable split manifest ({exc})") from exc
        if data.get("schema") != SPLIT_SCHEMA:
            raise DataError(path, f"unsupported manifest schema {data.get('schema')!r} (expected {SPLIT_SCHEMA!r})")
        return cls(
            root=Path(root) if root is not None else path.parent.parent,
            labelled=list(data["labelled"]),
            unlabelled=list(data.get("unlabelled", [])),
            num_classes=int(data["num_classes"]),
            name=data.get("name", path.stem),
            ratio=data.get("ratio"),
            split_seed=data.get("seed"),
        )

    def manifest_hash(self) -> str:
        canonical = json.dumps(self.to_manifest(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    images: torch.Tensor
    masks: torch.Tensor | None
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def read_image(path: Path) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError as exc:
        raise DataError(path, "image file not found") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(path, f"corrupt image file ({exc})") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def read_mask(path: Path, num_classes: int) -> torch.Tensor:
    """Class-index mask with on-disk IGNORE (255) mapped to `num_classes`."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img, dtype=np.int64)
    except FileNotFoundError as exc:
        raise DataError(path, "mask file not found") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(path, f"corrupt mask file ({exc})") from exc
    if arr.ndim != 2:
        raise DataError(path, f"mask must be single-channel, got shape {arr.shape}")
    bad = (arr >= num_classes) & (arr != IGNORE_MASK_VALUE)
    if bad.any():
        raise DataError(path, f"mask holds class {int(arr[bad][0])} outside 0..{num_classes - 1}")
    arr = np.where(arr == IGNORE_MASK_VALUE, num_classes, arr)
    return torch.from_numpy(arr)


def load_batch(index: DatasetIndex, ids: Sequence[str], mode: str) -> Batch:
    """
    Load the items `ids` in the given order.

    Parameters
    ----------
    index : DatasetIndex
        Dataset whose root the ids resolve against.
    ids : sequence of str
        Item ids; labelled mode requires them to be labelled in `index`.
    mode : "labelled" | "unlabelled"
        Unlabelled mode never reads or returns masks.

    Returns
    -------
    Batch
        images N×3×H×W in [0, 1]; masks N×H×W int64 or None.
    """
    if mode not in LOAD_MODES:
        raise ConfigError(f"load mode must be one of {LOAD_MODES}, got {mode!r}")
    if not ids:
        raise ConfigError("load_batch needs at least one id")
    known = set(index.labelled) if mode == "labelled" else set(index.all_ids)
    unknown = [i for i in ids if i not in known]
    if unknown:
        raise ConfigError(f"ids not in the {mode} set of split {index.name!r}: {unknown[:3]}")

    images = torch.stack([read_image(index.image_path(i)) for i in ids])
    masks = None
    if mode == "labelled":
        masks = torch.stack([read_mask(index.mask_path(i), index.num_classes) for i in ids])
    return Batch(images=images, masks=masks, ids=list(ids))


def load_pseudo_labels(pseudo_dir: str | Path, ids: Sequence[str], num_classes: int) -> torch.Tensor:
    """External pseudo-labels `<pseudo_dir>/<id>.png` (same encoding as masks)."""
    pseudo_dir = Path(pseudo_dir)
    return torch.stack([read_mask(pseudo_dir / f"{i}.png", num_classes) for i in ids])


def check_pseudo_labels(pseudo_dir: str | Path, ids: Sequence[str]) -> None:
    """Startup check: every id must have a pseudo-label file."""
    pseudo_dir = Path(pseudo_dir)
    for i in ids:
        path = pseudo_dir / f"{i}.png"
        if not path.is_file():
            raise DataError(path, "pseudo-label file missing (required when the CAM loss is enabled)")


# ---------------------------------------------------------------------------
# Cycling sampler
# ---------------------------------------------------------------------------

class CyclicSampler:
    """
    Endless batches over `ids`, reshuffled (seeded) at every pass.

    Labelled and unlabelled subsets each get their own sampler; the state
    (RNG + position) is checkpointed so a resumed run draws the same batches.
    """

    def __init__(self, ids: Sequence[str], batch_size: int, seed: int) -> None:
        if not ids:
            raise ConfigError("cannot sample from an empty id list")
        if batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {batch_size}")
        self.ids = list(ids)
        self.batch_size = int(batch_size)
        self.rng = np.random.default_rng(seed)
        self._order: list[int] = []
        self._pos = 0

    def _refill(self) -> None:
        self._order = [int(i) for i in self.rng.permutation(len(self.ids))]
        self._pos = 0

    def next_ids(self) -> list[str]:
        out: list[str] = []
        while len(out) < self.batch_size:
            if self._pos >= len(self._order):
                self._refill()
            take = min(self.batch_size - len(out), len(self._order) - self._pos)
            out.extend(self.ids[j] for j in self._order[self._pos:self._pos + take])
            self._pos += take
        return out

    def state_dict(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": list(self._order), "pos": self._pos}

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._order = list(state["order"])
        self._pos = int(state["pos"])
