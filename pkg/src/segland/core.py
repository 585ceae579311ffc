"""Shared domain types: tiles, taxonomies, prototype banks, maps, checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from segland.errors import (
    BackgroundError,
    GapError,
    OverlapError,
    ShapeError,
)

IGNORE_ID = 255

PHASES = ("base-only", "phase1", "phase2")
CHECKPOINT_PHASES = ("base", "novel")

_TENSOR_MAGIC = b"SLTENS01"


def _frozen_array(arr, dtype=None):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Tile:
    """One image raster with an optional per-pixel label map."""

    image: np.ndarray  # H x W x 3 uint8
    label: np.ndarray | None  # H x W class ids, 255 = ignore
    id: str

    def __post_init__(self):
        img = _frozen_array(self.image, dtype=np.uint8)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ShapeError(f"tile {self.id}: image must be HxWx3, got {img.shape}")
        object.__setattr__(self, "image", img)
        if self.label is not None:
            lab = _frozen_array(self.label, dtype=np.uint8)
            if lab.shape != img.shape[:2]:
                raise ShapeError(
                    f"tile {self.id}: label {lab.shape} does not match image {img.shape[:2]}"
                )
            object.__setattr__(self, "label", lab)

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


@dataclass(frozen=True)
class ClassTaxonomy:
    """Background/base/novel class partition for one challenge phase.

    Row order of every PrototypeBank and channel order of every
    ProbabilityMap follows [background] + base_ids + novel_ids.
    """

    background_id: int = 0
    base_ids: tuple[int, ...] = ()
    novel_ids: tuple[int, ...] = ()
    names: dict[int, str] = field(default_factory=dict)
    phase: str = "base-only"

    def __post_init__(self):
        object.__setattr__(self, "base_ids", tuple(int(i) for i in self.base_ids))
        object.__setattr__(self, "novel_ids", tuple(int(i) for i in self.novel_ids))
        object.__setattr__(self, "names", dict(self.names))

    @property
    def class_ids(self):
        """All valid ids in bank/channel order."""
        return (self.background_id,) + self.base_ids + self.novel_ids

    @property
    def num_classes(self):
        return 1 + len(self.base_ids) + len(self.novel_ids)

    def name_of(self, cid):
        return self.names.get(cid, f"class-{cid}")

    def to_json_dict(self):
        return {
            "background_id": self.background_id,
            "base_ids": list(self.base_ids),
            "novel_ids": list(self.novel_ids),
            "names": {str(k): v for k, v in sorted(self.names.items())},
            "phase": self.phase,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            background_id=int(d.get("background_id", 0)),
            base_ids=tuple(d.get("base_ids", ())),
            novel_ids=tuple(d.get("novel_ids", ())),
            names={int(k): v for k, v in d.get("names", {}).items()},
            phase=d.get("phase", "base-only"),
        )

    def digest(self):
        """SHA-256 of the canonical JSON form; pins taxonomy across pipeline stages."""
        return sha256_of_json(self.to_json_dict())


def validate_taxonomy(taxonomy: ClassTaxonomy) -> None:
    """Raise unless the background/base/novel partition is well formed.

    Ids must be dense from 0 over background+base, with novel ids appended
    directly after the base block.
    """
    bg = taxonomy.background_id
    base = taxonomy.base_ids
    novel = taxonomy.novel_ids
    if bg != 0:
        raise BackgroundError(f"background id must be 0, got {bg}")
    if bg in base or bg in novel:
        raise BackgroundError(f"background id {bg} reused as a class id")
    overlap = set(base) & set(novel)
    if overlap:
        raise OverlapError(f"base/novel ids intersect: {sorted(overlap)}")
    if len(set(base)) != len(base) or len(set(novel)) != len(novel):
        raise OverlapError("duplicate id within base or novel list")
    n_base = len(base)
    if sorted(base) != list(range(1, n_base + 1)):
        raise GapError(f"base ids must be contiguous 1..{n_base}, got {sorted(base)}")
    n_novel = len(novel)
    if sorted(novel) != list(range(n_base + 1, n_base + 1 + n_novel)):
        raise GapError(
            f"novel ids must continue after base as {n_base + 1}..{n_base + n_novel}, "
            f"got {sorted(novel)}"
        )
    if any(i >= IGNORE_ID for i in (bg,) + base + novel):
        raise GapError(f"class ids must stay below the ignore value {IGNORE_ID}")


@dataclass(frozen=True)
class PrototypeBank:
    """Per-class prototype vectors in taxonomy row order."""

    prototypes: np.ndarray  # K x D float32
    frozen_mask: np.ndarray  # K bools, True = row is frozen
    temperature: float = 0.1

    def __post_init__(self):
        protos = _frozen_array(self.prototypes, dtype=np.float32)
        if protos.ndim != 2:
            raise ShapeError(f"prototypes must be KxD, got {protos.shape}")
        if not np.all(np.isfinite(protos)):
            raise ValueError("prototype bank contains non-finite entries")
        mask = _frozen_array(self.frozen_mask, dtype=bool)
        if mask.shape != (protos.shape[0],):
            raise ShapeError("frozen_mask length must equal the prototype row count")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "frozen_mask", mask)

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    @property
    def dim(self):
        return self.prototypes.shape[1]


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-pixel class posteriors; every pixel lies on the K-simplex."""

    probs: np.ndarray  # H x W x K

    def __post_init__(self):
        p = _frozen_array(self.probs, dtype=np.float32)
        if p.ndim != 3:
            raise ShapeError(f"probs must be HxWxK, got {p.shape}")
        if p.min() < -1e-6 or p.max() > 1 + 1e-5:
            raise ValueError("probabilities outside [0, 1]")
        sums = p.sum(axis=2)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ValueError("per-pixel probabilities do not sum to 1 within 1e-5")
        object.__setattr__(self, "probs", p)

    @property
    def num_classes(self):
        return self.probs.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel hard class assignments; 255 marks ignored pixels."""

    labels: np.ndarray  # H x W

    def __post_init__(self):
        lab = _frozen_array(self.labels, dtype=np.uint8)
        if lab.ndim != 2:
            raise ShapeError(f"labels must be HxW, got {lab.shape}")
        object.__setattr__(self, "labels", lab)


@dataclass(frozen=True)
class Checkpoint:
    """Serialized model state at the boundary between training phases."""

    encoder_params: dict[str, np.ndarray]
    decoder_params: dict[str, np.ndarray]
    bank: PrototypeBank
    taxonomy: ClassTaxonomy
    config_digest: str
    phase: str  # "base" or "novel"
    arch: dict = field(default_factory=dict)
    derived_from: str | None = None  # phase-1 digest a novel checkpoint builds on

    def __post_init__(self):
        if self.phase not in CHECKPOINT_PHASES:
            raise ValueError(f"unknown checkpoint phase {self.phase!r}")


def canonical_json(obj) -> str:
    """Deterministic JSON used for digests and byte-stable files."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_of_json(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors as one little-endian float32 archive.

    Layout: magic, u64 header length, canonical JSON header, raw data in
    sorted-name order. The writer is deterministic: identical tensors
    produce identical bytes.
    """
    names = sorted(tensors)
    entries = {}
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        offset += len(blob)
        blobs.append(blob)
    header = canonical_json({"dtype": "<f4", "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_TENSOR_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_TENSOR_MAGIC))
        if magic != _TENSOR_MAGIC:
            raise ValueError(f"{path}: not a tensor archive")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        data = fh.read()
    out = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        out[name] = arr.reshape(shape).astype(np.float32)
    return out


def save_checkpoint(ckpt: Checkpoint, directory) -> None:
    """Persist a checkpoint as tensors.bin + meta.json inside `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, arr in ckpt.encoder_params.items():
        tensors[f"encoder.{name}"] = arr
    for name, arr in ckpt.decoder_params.items():
        tensors[f"decoder.{name}"] = arr
    tensors["bank.prototypes"] = ckpt.bank.prototypes
    save_tensors(directory / "tensors.bin", tensors)
    meta = {
        "phase": ckpt.phase,
        "config_digest": ckpt.config_digest,
        "derived_from": ckpt.derived_from,
        "taxonomy": ckpt.taxonomy.to_json_dict(),
        "embed_dim": ckpt.bank.dim,
        "temperature": ckpt.bank.temperature,
        "frozen_mask": [bool(b) for b in ckpt.bank.frozen_mask],
        "arch": ckpt.arch,
    }
    (directory / "meta.json").write_text(canonical_json(meta) + "\n", encoding="utf-8")


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    tensors = load_tensors(directory / "tensors.bin")
    encoder = {}
    decoder = {}
    protos = None
    for name, arr in tensors.items():
        if name.startswith("encoder."):
            encoder[name[len("encoder."):]] = arr
        elif name.startswith("decoder."):
            decoder[name[len("decoder."):]] = arr
        elif name == "bank.prototypes":
            protos = arr
    if protos is None:
        raise ValueError(f"{directory}: archive lacks bank.prototypes")
    bank = PrototypeBank(
        prototypes=protos,
        frozen_mask=np.array(meta["frozen_mask"], dtype=bool),
        temperature=float(meta["temperature"]),
    )
    return Checkpoint(
        encoder_params=encoder,
        decoder_params=decoder,
        bank=bank,
        taxonomy=ClassTaxonomy.from_json_dict(meta["taxonomy"]),
        config_digest=meta["config_digest"],
        phase=meta["phase"],
        arch=meta.get("arch", {}),
        derived_from=meta.get("derived_from"),
    )
