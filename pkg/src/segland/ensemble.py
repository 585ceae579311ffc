"""Independent base learners and decision-soft probability averaging."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from segland.core import Checkpoint, ClassTaxonomy, ProbabilityMap, canonical_json
from segland.errors import EmptyListError, ShapeError, UnknownArchError
from segland.model import ENCODER_REGISTRY
from segland.training import TrainConfig, train_base_phase


@dataclass(frozen=True)
class LearnerSpec:
    """One base learner: encoder architecture, training config, artifact path."""

    arch_id: str
    config: TrainConfig
    checkpoint_path: str = ""


def train_base_learner(spec: LearnerSpec, train_set, taxonomy: ClassTaxonomy) -> Checkpoint:
    """One independent base-phase run with the spec's encoder."""
    if spec.arch_id not in ENCODER_REGISTRY:
        raise UnknownArchError(f"arch {spec.arch_id!r} not registered")
    config = replace(spec.config, arch_id=spec.arch_id)
    return train_base_phase(train_set, taxonomy, config)


def check_ensemble_specs(specs: list[LearnerSpec]) -> None:
    """Distinct learners must differ in (arch_id, seed)."""
    seen = set()
    for spec in specs:
        key = (spec.arch_id, spec.config.seed)
        if key in seen:
            raise ValueError(f"duplicate learner (arch, seed) pair {key}")
        seen.add(key)


def average_fusion(maps: list[ProbabilityMap]) -> ProbabilityMap:
    """Elementwise arithmetic mean of per-pixel posteriors."""
    if not maps:
        raise EmptyListError("average_fusion needs at least one probability map")
    shape = maps[0].probs.shape
    for m in maps[1:]:
        if m.probs.shape != shape:
            raise ShapeError(f"probability map shapes differ: {m.probs.shape} vs {shape}")
    stacked = np.stack([m.probs.astype(np.float64) for m in maps])
    return ProbabilityMap(probs=stacked.mean(axis=0).astype(np.float32))


def save_probability_map(pmap: ProbabilityMap, path, taxonomy: ClassTaxonomy) -> None:
    """Persist as a channel-planar float32 raster plus a taxonomy sidecar."""
    path = Path(path)
    planar = np.ascontiguousarray(pmap.probs.transpose(2, 0, 1), dtype="<f4")
    np.save(path.with_suffix(".npy"), planar)
    sidecar = {
        "taxonomy": taxonomy.to_json_dict(),
        "taxonomy_digest": taxonomy.digest(),
        "layout": "channel-planar",
        "shape": list(planar.shape),
    }
    path.with_suffix(".json").write_text(canonical_json(sidecar) + "\n", encoding="utf-8")


def load_probability_map(path) -> tuple[ProbabilityMap, ClassTaxonomy]:
    path = Path(path)
    planar = np.load(path.with_suffix(".npy"))
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    taxonomy = ClassTaxonomy.from_json_dict(sidecar["taxonomy"])
    return ProbabilityMap(probs=planar.transpose(1, 2, 0)), taxonomy
