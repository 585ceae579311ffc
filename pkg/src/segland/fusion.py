"""Decision-level fusion: the ensemble base map constrains the prototype
network's base predictions; morphology cleans retained novel regions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from segland.core import ClassTaxonomy, LabelMap
from segland.errors import ForeignIdError, ShapeError

FUSION_MODES = ("replace-base", "intersect-base")

# 4-connectivity: conservative region counting for speckle removal
_CONNECTIVITY = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class FusionConfig:
    kernel: int = 3
    min_region: int = 16
    mode: str = "replace-base"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.min_region < 0:
            raise ValueError("min_region must be >= 0")
        if self.mode not in FUSION_MODES:
            raise ValueError(f"mode must be one of {FUSION_MODES}")

    def to_json_dict(self):
        return {"kernel": self.kernel, "min_region": self.min_region, "mode": self.mode}

    @classmethod
    def from_json_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _square(kernel):
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    return np.ones((kernel, kernel), dtype=bool)


def morphological_open(mask: np.ndarray, kernel: int) -> np.ndarray:
    """Erosion then dilation with a square element; outside the raster is
    treated as empty. Removes components thinner than the kernel."""
    mask = np.asarray(mask, dtype=bool)
    if kernel == 1:
        return mask.astype(np.uint8)
    structure = _square(kernel)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return ndimage.binary_dilation(eroded, structure=structure, border_value=0).astype(np.uint8)


def morphological_close(mask: np.ndarray, kernel: int) -> np.ndarray:
    """Dilation then erosion with a square element; fills holes smaller
    than the kernel.

    The raster is padded so dilation can spill past the frame and erosion
    sees it, matching the unbounded-domain operator (and its idempotence)
    for content near the border.
    """
    mask = np.asarray(mask, dtype=bool)
    if kernel == 1:
        return mask.astype(np.uint8)
    pad = kernel // 2
    structure = _square(kernel)
    padded = np.pad(mask, pad)
    dilated = ndimage.binary_dilation(padded, structure=structure, border_value=0)
    eroded = ndimage.binary_erosion(dilated, structure=structure, border_value=0)
    return eroded[pad:-pad, pad:-pad].astype(np.uint8)


def _drop_small_regions(mask: np.ndarray, min_region: int) -> np.ndarray:
    """Remove 4-connected components with fewer than min_region pixels."""
    if min_region <= 1:
        return mask.astype(bool)
    labeled, count = ndimage.label(mask, structure=_CONNECTIVITY)
    if count == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labeled.ravel(), minlength=count + 1)
    keep = sizes >= min_region
    keep[0] = False
    return keep[labeled]


def ultimate_fuse(ensemble_map: LabelMap, pop_labels: LabelMap,
                  taxonomy: ClassTaxonomy, config: FusionConfig) -> LabelMap:
    """Fuse the ensemble base map with the prototype network's labels.

    Base and background pixels take the ensemble label. Novel predictions
    survive only where per-class opening and the minimum-region filter keep
    them; pruned pixels fall back to the ensemble label. A final per-class
    closing smooths the retained novel regions. When two novel classes'
    closings claim the same pixel the higher id wins (ascending pass order).
    """
    ens = ensemble_map.labels
    pop = pop_labels.labels
    if ens.shape != pop.shape:
        raise ShapeError(f"ensemble {ens.shape} vs prototype map {pop.shape}")
    base_ok = {taxonomy.background_id} | set(taxonomy.base_ids)
    present = set(np.unique(ens).tolist())
    foreign = present - base_ok
    if foreign:
        raise ForeignIdError(f"ensemble map carries non-base ids {sorted(foreign)}")

    # replace-base and intersect-base coincide: on agreement the shared label
    # stands, on disagreement the ensemble label stands either way.
    out = ens.copy()
    retained = {}
    for cid in sorted(taxonomy.novel_ids):
        mask = morphological_open(pop == cid, config.kernel).astype(bool)
        mask = _drop_small_regions(mask, config.min_region)
        retained[cid] = mask
    any_retained = np.zeros_like(ens, dtype=bool)
    for mask in retained.values():
        any_retained |= mask
    for cid in sorted(taxonomy.novel_ids):
        closed = morphological_close(retained[cid], config.kernel).astype(bool)
        grab = closed & ~(any_retained & ~retained[cid])
        out[grab] = cid
    return LabelMap(labels=out)
