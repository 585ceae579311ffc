"""Generalized few-shot land-cover segmentation toolkit."""

from segland.core import (
    IGNORE_ID,
    Checkpoint,
    ClassTaxonomy,
    LabelMap,
    ProbabilityMap,
    PrototypeBank,
    Tile,
    load_checkpoint,
    save_checkpoint,
    validate_taxonomy,
)

__version__ = "0.1.0"

__all__ = [
    "IGNORE_ID",
    "Checkpoint",
    "ClassTaxonomy",
    "LabelMap",
    "ProbabilityMap",
    "PrototypeBank",
    "Tile",
    "load_checkpoint",
    "save_checkpoint",
    "validate_taxonomy",
    "__version__",
]
