"""Procedural land-cover tiles at desk scale: large-area base classes and
small-object novel classes, with the disjoint support/test protocol."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from segland.core import ClassTaxonomy
from segland.errors import PathError

# (name, RGB) for area classes; background first, base classes follow
AREA_CLASS_DEFS = [
    ("background", (126, 112, 94)),
    ("tree", (34, 102, 51)),
    ("cropland", (198, 182, 86)),
    ("water", (52, 86, 164)),
    ("rangeland", (142, 190, 92)),
    ("road", (92, 92, 98)),
    ("building", (170, 78, 62)),
    ("wetland", (86, 150, 134)),
]

# (name, RGB, shape) for small-object novel classes
NOVEL_CLASS_DEFS = [
    ("vehicle", (232, 40, 40), "rect"),
    ("boat", (242, 242, 250), "ellipse"),
    ("sports-field", (40, 220, 220), "rect"),
    ("greenhouse", (248, 140, 216), "ellipse"),
]


def make_taxonomy(n_base: int, n_novel: int, phase: str = "base-only") -> ClassTaxonomy:
    if n_base > len(AREA_CLASS_DEFS) - 1:
        raise ValueError(f"at most {len(AREA_CLASS_DEFS) - 1} base classes available")
    if n_novel > len(NOVEL_CLASS_DEFS):
        raise ValueError(f"at most {len(NOVEL_CLASS_DEFS)} novel classes available")
    names = {0: AREA_CLASS_DEFS[0][0]}
    base_ids = tuple(range(1, n_base + 1))
    for cid in base_ids:
        names[cid] = AREA_CLASS_DEFS[cid][0]
    novel_ids = tuple(range(n_base + 1, n_base + 1 + n_novel)) if phase != "base-only" else ()
    for k, cid in enumerate(novel_ids):
        names[cid] = NOVEL_CLASS_DEFS[k][0]
    return ClassTaxonomy(
        background_id=0, base_ids=base_ids, novel_ids=novel_ids,
        names=names, phase=phase,
    )


def _area_label(rng, size, n_area):
    """Smooth random fields whose argmax yields blobby area-class regions."""
    h, w = size
    sigma = max(h, w) / 6.0
    fields = np.stack([
        ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=sigma)
        for _ in range(n_area)
    ])
    return np.argmax(fields, axis=0).astype(np.uint8)


def _object_mask(rng, size, shape, span):
    """One small axis-aligned object footprint somewhere inside the tile."""
    h, w = size
    oh = int(rng.integers(span[0], span[1] + 1))
    ow = int(rng.integers(span[0], span[1] + 1))
    top = int(rng.integers(0, max(1, h - oh)))
    left = int(rng.integers(0, max(1, w - ow)))
    mask = np.zeros(size, dtype=bool)
    if shape == "rect":
        mask[top : top + oh, left : left + ow] = True
    else:
        yy, xx = np.ogrid[:h, :w]
        cy, cx = top + oh / 2.0, left + ow / 2.0
        mask |= ((yy - cy) / (oh / 2.0)) ** 2 + ((xx - cx) / (ow / 2.0)) ** 2 <= 1.0
    return mask


def _place_novel_objects(rng, size, novel_cid, novel_idx, n_objects):
    """Union of object footprints for one novel class.

    Objects span roughly a fifth to a third of the tile so their interiors
    survive the extractor's receptive-field smearing.
    """
    h, w = size
    span = (max(6, h // 5), max(10, h // 3))
    shape = NOVEL_CLASS_DEFS[novel_idx][2]
    mask = np.zeros(size, dtype=bool)
    for _ in range(n_objects):
        mask |= _object_mask(rng, size, shape, span)
    return mask


def _render(full_label, taxonomy, rng):
    """Class palette plus brightness texture and per-pixel sensor noise."""
    h, w = full_label.shape
    palette = np.zeros((256, 3), dtype=np.float64)
    palette[0] = AREA_CLASS_DEFS[0][1]
    for cid in taxonomy.base_ids:
        palette[cid] = AREA_CLASS_DEFS[cid][1]
    for k, cid in enumerate(taxonomy.novel_ids):
        palette[cid] = NOVEL_CLASS_DEFS[k][1]
    image = palette[full_label]
    texture = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=max(h, w) / 10.0)
    image = image * (1.0 + 0.25 * texture)[:, :, None]
    image = image + rng.normal(scale=13.0, size=(h, w, 3))
    return np.clip(image, 0, 255).astype(np.uint8)


def _write_pair(root, tile_id, image, label):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(root / "images" / f"{tile_id}.png")
    Image.fromarray(label).save(root / "labels" / f"{tile_id}.png")


def generate_dataset(out, n_tiles: int, size, taxonomy: ClassTaxonomy, seed: int,
                     shots: int = 5, n_test: int = 10, n_query: int = 10) -> dict:
    """Write a synthetic dataset with base-train / support / query / test splits.

    base-train tiles carry background+base labels only. Support tiles show
    base scenery in the image but are labeled with one novel class each
    (everything else background), `shots` tiles per novel class. Query tiles
    are held-out base-only scenes; test tiles carry full labels including
    novel objects.
    """
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise PathError(f"{out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    size = (size, size) if np.isscalar(size) else tuple(size)
    rng = np.random.default_rng(seed)
    n_area = 1 + len(taxonomy.base_ids)
    base_taxonomy = ClassTaxonomy(
        background_id=0, base_ids=taxonomy.base_ids, novel_ids=(),
        names={k: v for k, v in taxonomy.names.items()
               if k == 0 or k in taxonomy.base_ids},
        phase="base-only",
    )

    counters = {"base_train": 0, "support": 0, "query": 0, "test": 0}
    for i in range(n_tiles):
        label = _area_label(rng, size, n_area)
        image = _render(label, base_taxonomy, rng)
        _write_pair(out / "base_train", f"base_{i:04d}", image, label)
        counters["base_train"] += 1

    for k, cid in enumerate(taxonomy.novel_ids):
        for s in range(shots):
            area = _area_label(rng, size, n_area)
            objects = _place_novel_objects(rng, size, cid, k,
                                           n_objects=int(rng.integers(2, 5)))
            full = area.copy()
            full[objects] = cid
            image = _render(full, taxonomy, rng)
            support_label = np.zeros(size, dtype=np.uint8)
            support_label[objects] = cid
            _write_pair(out / "support", f"support_{cid:02d}_{s:02d}", image, support_label)
            counters["support"] += 1

    for i in range(n_query):
        label = _area_label(rng, size, n_area)
        image = _render(label, base_taxonomy, rng)
        _write_pair(out / "query", f"query_{i:04d}", image, label)
        counters["query"] += 1

    for i in range(n_test):
        area = _area_label(rng, size, n_area)
        full = area.copy()
        for k, cid in enumerate(taxonomy.novel_ids):
            objects = _place_novel_objects(rng, size, cid, k,
                                           n_objects=int(rng.integers(1, 4)))
            full[objects] = cid
        image = _render(full, taxonomy, rng)
        _write_pair(out / "test", f"test_{i:04d}", image, full)
        counters["test"] += 1

    return {
        "splits": counters,
        "size": list(size),
        "seed": seed,
        "taxonomy": taxonomy.to_json_dict(),
        "base_taxonomy": base_taxonomy.to_json_dict(),
    }
