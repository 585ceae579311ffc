"""Dataset ingestion, class statistics, geometric augmentation, NovelCutMix."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from segland.core import IGNORE_ID, ClassTaxonomy, LabelMap, Tile
from segland.errors import (
    BadValueError,
    CropTooLargeError,
    EmptyError,
    IgnoreInSupportError,
    MissingLabelError,
    ShapeError,
    ZeroFrequencyError,
)

SPLITS = ("base-train", "support", "query", "test")
_RASTER_EXTS = (".png", ".tif", ".tiff")

WEIGHT_MODES = ("inverse", "inverse-sqrt")


@dataclass(frozen=True)
class TileSet:
    """Ordered tile collection for one split."""

    tiles: tuple[Tile, ...]
    root: str = ""
    split: str = "base-train"

    def __post_init__(self):
        object.__setattr__(self, "tiles", tuple(self.tiles))
        ids = [t.id for t in self.tiles]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate tile ids in split {self.split}")

    def __len__(self):
        return len(self.tiles)

    def __iter__(self):
        return iter(self.tiles)


@dataclass(frozen=True)
class FrequencyTable:
    """Pixel counts and normalized frequencies over observed class ids."""

    pixel_counts: dict[int, int]
    frequencies: dict[int, float]

    def to_json_dict(self):
        return {
            "pixel_counts": {str(k): int(v) for k, v in sorted(self.pixel_counts.items())},
            "frequencies": {str(k): float(v) for k, v in sorted(self.frequencies.items())},
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            pixel_counts={int(k): int(v) for k, v in d["pixel_counts"].items()},
            frequencies={int(k): float(v) for k, v in d["frequencies"].items()},
        )


@dataclass(frozen=True)
class WeightVector:
    """Per-class loss weights, mean-normalized to 1."""

    weights: dict[int, float]
    mode: str = "inverse-sqrt"

    def to_json_dict(self):
        return {
            "weights": {str(k): float(v) for k, v in sorted(self.weights.items())},
            "mode": self.mode,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            weights={int(k): float(v) for k, v in d["weights"].items()},
            mode=d["mode"],
        )

    @classmethod
    def uniform(cls, ids):
        return cls(weights={int(i): 1.0 for i in ids}, mode="none")


def _read_raster(path):
    with Image.open(path) as img:
        return np.asarray(img)


def _find_raster(directory, stem):
    for ext in _RASTER_EXTS:
        candidate = directory / f"{stem}{ext}"
        if candidate.exists():
            return candidate
    return None


def load_dataset(root, split: str, taxonomy: ClassTaxonomy,
                 with_labels: bool = True) -> TileSet:
    """Load paired image/label rasters from `<root>/images` and `<root>/labels`.

    Pairs are matched by filename stem. Labeled splits require every image
    to have a label; the test split tolerates missing labels. Label values
    must be taxonomy ids or the ignore value 255. `with_labels=False` reads
    images only (prediction mode).
    """
    root = Path(root)
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    images_dir = root / "images"
    labels_dir = root / "labels"
    if not images_dir.is_dir():
        raise MissingLabelError(f"{images_dir} does not exist")
    valid_ids = set(taxonomy.class_ids) | {IGNORE_ID}
    tiles = []
    paths = sorted(p for p in images_dir.iterdir() if p.suffix.lower() in _RASTER_EXTS)
    for img_path in paths:
        image = _read_raster(img_path)
        if image.ndim == 2:
            image = np.stack([image] * 3, axis=2)
        label = None
        label_path = (_find_raster(labels_dir, img_path.stem)
                      if with_labels and labels_dir.is_dir() else None)
        if label_path is None:
            if with_labels and split != "test":
                raise MissingLabelError(f"no label raster for {img_path.stem} in {labels_dir}")
        else:
            label = _read_raster(label_path)
            if label.ndim != 2:
                raise ShapeError(f"{label_path}: labels must be single-channel")
            if label.shape != image.shape[:2]:
                raise ShapeError(
                    f"{img_path.stem}: image {image.shape[:2]} vs label {label.shape}"
                )
            present = set(np.unique(label).tolist())
            foreign = present - valid_ids
            if foreign:
                raise BadValueError(
                    f"{label_path}: label ids {sorted(foreign)} outside taxonomy"
                )
        tiles.append(Tile(image=image, label=label, id=img_path.stem))
    return TileSet(tiles=tuple(tiles), root=str(root), split=split)


def compute_class_frequencies(tiles: TileSet, taxonomy: ClassTaxonomy) -> FrequencyTable:
    """Count non-ignore pixels over all tiles; frequencies normalize to sum 1."""
    counts = np.zeros(taxonomy.num_classes, dtype=np.int64)
    for tile in tiles:
        if tile.label is None:
            raise MissingLabelError(f"tile {tile.id} is unlabeled")
        lab = tile.label
        valid = lab != IGNORE_ID
        counts += np.bincount(lab[valid].astype(np.int64), minlength=taxonomy.num_classes)[
            : taxonomy.num_classes
        ]
    total = int(counts.sum())
    if total == 0:
        raise EmptyError("no labeled pixels to count")
    pixel_counts = {int(i): int(c) for i, c in enumerate(counts) if c > 0}
    frequencies = {i: c / total for i, c in pixel_counts.items()}
    return FrequencyTable(pixel_counts=pixel_counts, frequencies=frequencies)


def compute_class_weights(freqs: FrequencyTable, mode: str) -> WeightVector:
    """Invert (or sqrt-invert) frequencies, then rescale so the mean weight is 1."""
    if mode not in WEIGHT_MODES:
        raise ValueError(f"mode must be one of {WEIGHT_MODES}, got {mode!r}")
    ids = sorted(freqs.frequencies)
    if not ids:
        raise EmptyError("frequency table is empty")
    raw = {}
    for i in ids:
        f = freqs.frequencies[i]
        if f <= 0:
            raise ZeroFrequencyError(f"class {i} has zero frequency")
        raw[i] = 1.0 / f if mode == "inverse" else 1.0 / np.sqrt(f)
    mean = sum(raw.values()) / len(raw)
    return WeightVector(weights={i: raw[i] / mean for i in ids}, mode=mode)


def augment_geometric(tile: Tile, rng: np.random.Generator, crop, flip_prob: float) -> Tile:
    """Random crop plus horizontal/vertical flips, identical on image and label.

    Draw order is fixed (crop row, crop col, h-flip, v-flip) so a replayed
    seed reproduces the exact output.
    """
    crop_h, crop_w = (crop, crop) if np.isscalar(crop) else crop
    h, w = tile.image.shape[:2]
    if crop_h > h or crop_w > w:
        raise CropTooLargeError(f"crop {crop_h}x{crop_w} exceeds tile {h}x{w}")
    top = int(rng.integers(0, h - crop_h + 1))
    left = int(rng.integers(0, w - crop_w + 1))
    image = tile.image[top : top + crop_h, left : left + crop_w]
    label = None
    if tile.label is not None:
        label = tile.label[top : top + crop_h, left : left + crop_w]
    if rng.random() < flip_prob:
        image = image[:, ::-1]
        label = label[:, ::-1] if label is not None else None
    if rng.random() < flip_prob:
        image = image[::-1, :]
        label = label[::-1, :] if label is not None else None
    return Tile(image=np.ascontiguousarray(image),
                label=np.ascontiguousarray(label) if label is not None else None,
                id=tile.id)


def build_novel_mask(support_label: LabelMap) -> np.ndarray:
    """Binary mask of pixels carrying a novel class (label value > 0)."""
    lab = support_label.labels
    if np.any(lab == IGNORE_ID):
        raise IgnoreInSupportError("support label contains the ignore value 255")
    return (lab > 0).astype(np.uint8)


def _shift_with_padding(arr, dy, dx, fill=0):
    """Translate a raster by (dy, dx), padding vacated cells with `fill`."""
    out = np.full_like(arr, fill)
    h, w = arr.shape[:2]
    src_y = slice(max(0, -dy), min(h, h - dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_y = slice(max(0, dy), min(h, h + dy))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = arr[src_y, src_x]
    return out


def novel_cutmix(
    train: Tile,
    support: Tile,
    placement: str = "aligned",
    rng: np.random.Generator | None = None,
) -> Tile:
    """Paste the support tile's novel regions onto the train image.

    Output image takes support pixels where the novel mask is set and train
    pixels elsewhere; the output label is the (possibly shifted) support
    label in full. `random-shift` translates the pasted content by a random
    offset, padding vacated regions with background.
    """
    if support.label is None:
        raise MissingLabelError(f"support tile {support.id} lacks a label")
    if train.image.shape != support.image.shape:
        raise ShapeError(
            f"train {train.image.shape} and support {support.image.shape} differ"
        )
    support_image = support.image
    support_label = support.label
    if placement == "random-shift":
        if rng is None:
            raise ValueError("random-shift placement needs a random stream")
        h, w = support_label.shape
        dy = int(rng.integers(-h // 2, h // 2 + 1))
        dx = int(rng.integers(-w // 2, w // 2 + 1))
        support_label = _shift_with_padding(support_label, dy, dx, fill=0)
        support_image = _shift_with_padding(support_image, dy, dx, fill=0)
    elif placement != "aligned":
        raise ValueError(f"unknown placement {placement!r}")
    mask = build_novel_mask(LabelMap(labels=support_label))
    mixed = np.where(mask[:, :, None] == 1, support_image, train.image)
    return Tile(image=mixed, label=support_label, id=f"{train.id}+{support.id}")
