"""Confusion-matrix bookkeeping, per-class IoU, split means, total score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from segland.core import IGNORE_ID, ClassTaxonomy, LabelMap
from segland.errors import BadIdError, NoDefinedIoUError, RangeError, ShapeError


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K pixel counts, rows = truth, columns = prediction."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeError(f"confusion matrix must be KxK, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self):
        return self.counts.shape[0]

    def merged(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different K")
        return ConfusionMatrix(counts=self.counts + other.counts)

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(counts=np.zeros((num_classes, num_classes), dtype=np.int64))


def accumulate_confusion(pred: LabelMap, truth: LabelMap, num_classes: int,
                         ignore: int = IGNORE_ID) -> ConfusionMatrix:
    """Count (truth, prediction) pairs over non-ignore pixels of one tile."""
    p = pred.labels
    t = truth.labels
    if p.shape != t.shape:
        raise ShapeError(f"pred {p.shape} vs truth {t.shape}")
    valid = t != ignore
    pv = p[valid].astype(np.int64)
    tv = t[valid].astype(np.int64)
    if pv.size:
        if pv.max() >= num_classes or tv.max() >= num_classes:
            raise BadIdError(f"label id outside [0, {num_classes}) encountered")
    flat = tv * num_classes + pv
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts=counts.reshape(num_classes, num_classes))


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU_k = diag / (row + col - diag); NaN when the class is absent from
    both truth and prediction."""
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    denom = counts.sum(axis=1) + counts.sum(axis=0) - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        ious = np.where(denom > 0, diag / denom, np.nan)
    return ious


def miou(ious: np.ndarray, subset) -> float:
    """Arithmetic mean of defined IoUs over the given class ids."""
    subset = list(subset)
    if not subset:
        raise NoDefinedIoUError("empty class subset")
    picked = [ious[i] for i in subset if not np.isnan(ious[i])]
    if not picked:
        raise NoDefinedIoUError("no class in the subset has a defined IoU")
    return float(np.mean(picked))


def challenge_score(base_miou: float, novel_miou: float) -> float:
    """Weighted total: 0.4 x base mIoU + 0.6 x novel mIoU, in percent."""
    for name, value in (("base", base_miou), ("novel", novel_miou)):
        if not 0.0 <= value <= 100.0:
            raise RangeError(f"{name} mIoU {value} outside [0, 100]")
    return 0.4 * base_miou + 0.6 * novel_miou


def evaluation_report(cm: ConfusionMatrix, taxonomy: ClassTaxonomy) -> dict:
    """Serializable summary: per-class IoU, split means, total score.

    Absent classes carry null IoU and drop out of the means; score fields
    are null when a split has no defined IoU at all.
    """
    ious = iou_per_class(cm)
    per_class = {}
    for cid in taxonomy.class_ids:
        value = ious[cid]
        per_class[str(cid)] = None if np.isnan(value) else float(value)

    def _try_miou(ids):
        try:
            return miou(ious, ids)
        except NoDefinedIoUError:
            return None

    base = _try_miou(taxonomy.base_ids) if taxonomy.base_ids else None
    novel = _try_miou(taxonomy.novel_ids) if taxonomy.novel_ids else None
    total = None
    if base is not None and novel is not None:
        total = challenge_score(base * 100.0, novel * 100.0)
    return {
        "per_class_iou": per_class,
        "class_names": {str(c): taxonomy.name_of(c) for c in taxonomy.class_ids},
        "base_miou": base,
        "novel_miou": novel,
        "total_score_percent": total,
        "confusion": cm.counts.tolist(),
        "taxonomy_digest": taxonomy.digest(),
    }


def plot_report(report: dict, out_dir) -> list:
    """Render the per-class IoU bar chart and confusion heatmap as PNGs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    ids = sorted(report["per_class_iou"], key=int)
    names = [report["class_names"].get(i, f"class-{i}") for i in ids]
    values = [report["per_class_iou"][i] if report["per_class_iou"][i] is not None else 0.0
              for i in ids]
    fig, ax = plt.subplots(figsize=(max(4, len(ids)), 3.5))
    ax.bar(range(len(ids)), values, color="tab:blue")
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    bar_path = out_dir / "iou_per_class.png"
    fig.savefig(bar_path)
    plt.close(fig)
    written.append(bar_path)

    cm = np.array(report["confusion"], dtype=np.float64)
    row_sums = cm.sum(axis=1, keepdims=True)
    normed = np.divide(cm, row_sums, out=np.zeros_like(cm), where=row_sums > 0)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(normed, cmap="viridis", vmin=0, vmax=1)
    ax.set_xlabel("prediction")
    ax.set_ylabel("truth")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    heat_path = out_dir / "confusion.png"
    fig.savefig(heat_path)
    plt.close(fig)
    written.append(heat_path)
    return written
