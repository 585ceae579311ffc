"""Two-phase optimization: base-class learning, then novel-class updating
with a frozen extractor and frozen base prototypes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from segland.core import (
    IGNORE_ID,
    Checkpoint,
    ClassTaxonomy,
    LabelMap,
    PrototypeBank,
    sha256_of_json,
    validate_taxonomy,
)
from segland.data import (
    TileSet,
    WeightVector,
    augment_geometric,
    compute_class_frequencies,
    compute_class_weights,
    novel_cutmix,
)
from segland.errors import (
    AllIgnoredError,
    EmptyDatasetError,
    EmptySupportError,
    NovelIdInBaseSetError,
    PhaseError,
    ShapeError,
    UnknownNovelIdError,
)
from segland.model import (
    LogitMap,
    build_extractor,
    cosine_logits_torch,
    load_numpy_params,
    orthogonality_loss_torch,
    orthonormalize,
    params_to_numpy,
    project_residual_torch,
)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training phase; the digest of its canonical
    JSON form pins checkpoints to the configuration that produced them."""

    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.1
    ortho_weight: float = 1.0
    weight_mode: str = "inverse-sqrt"  # inverse | inverse-sqrt | none
    seed: int = 0
    crop: int = 64
    flip_prob: float = 0.5
    cutmix_copies: int = 4
    cutmix_placement: str = "aligned"
    arch_id: str = "ref-small"
    embed_dim: int = 64
    temperature: float = 0.1
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.ortho_weight < 0:
            raise ValueError("ortho_weight must be >= 0")

    def to_json_dict(self):
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "ortho_weight": self.ortho_weight,
            "weight_mode": self.weight_mode,
            "seed": self.seed,
            "crop": self.crop,
            "flip_prob": self.flip_prob,
            "cutmix_copies": self.cutmix_copies,
            "cutmix_placement": self.cutmix_placement,
            "arch_id": self.arch_id,
            "embed_dim": self.embed_dim,
            "temperature": self.temperature,
            "momentum": self.momentum,
        }

    @classmethod
    def from_json_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def digest(self):
        return sha256_of_json(self.to_json_dict())


def _weight_lut(weights: WeightVector | None, num_classes: int) -> torch.Tensor:
    lut = torch.ones(num_classes, dtype=torch.float32)
    if weights is not None:
        for cid, w in weights.weights.items():
            if 0 <= cid < num_classes:
                lut[cid] = float(w)
    return lut


def segmentation_loss_torch(logits: torch.Tensor, truth: torch.Tensor,
                            weight_lut: torch.Tensor,
                            ignore: int = IGNORE_ID) -> torch.Tensor:
    """Class-weighted cross entropy, averaged over non-ignore pixels.

    logits are [B,K,H,W], truth is [B,H,W]; the denominator is the valid
    pixel count, not the weight sum.
    """
    valid = truth != ignore
    if not bool(valid.any()):
        raise AllIgnoredError("every pixel carries the ignore value")
    safe = torch.where(valid, truth, torch.zeros_like(truth))
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, safe.unsqueeze(1)).squeeze(1)
    weighted = nll * weight_lut[safe]
    return weighted[valid].mean()


def segmentation_loss(logits: LogitMap, truth: LabelMap,
                      weights: WeightVector | None = None,
                      ignore: int = IGNORE_ID) -> float:
    """Scalar loss over one tile; ignored pixels contribute nothing."""
    raw = logits.logits.astype(np.float64)
    lab = truth.labels
    if raw.shape[:2] != lab.shape:
        raise ShapeError(f"logits {raw.shape[:2]} vs truth {lab.shape}")
    valid = lab != ignore
    if not valid.any():
        raise AllIgnoredError("every pixel carries the ignore value")
    shifted = raw - raw.max(axis=2, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=2, keepdims=True))
    safe = np.where(valid, lab, 0).astype(np.int64)
    nll = -np.take_along_axis(logp, safe[:, :, None], axis=2)[:, :, 0]
    lut = np.ones(raw.shape[2])
    if weights is not None:
        for cid, w in weights.weights.items():
            if 0 <= cid < raw.shape[2]:
                lut[cid] = w
    return float((nll * lut[safe])[valid].mean())


def _batch_tensors(tiles):
    images = np.stack([t.image for t in tiles]).astype(np.float32) / 255.0
    labels = np.stack([t.label for t in tiles]).astype(np.int64)
    x = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(labels)
    return x, y


def _orthonormal_rows(num_rows: int, dim: int) -> torch.Tensor:
    if num_rows <= dim:
        a = torch.randn(dim, dim)
        q, _ = torch.linalg.qr(a)
        return q[:, :num_rows].t().contiguous()
    rows = torch.randn(num_rows, dim)
    return rows / rows.norm(dim=1, keepdim=True)


def _phase_weights(mode: str, train_set: TileSet, taxonomy: ClassTaxonomy):
    if mode == "none":
        return None
    freqs = compute_class_frequencies(train_set, taxonomy)
    return compute_class_weights(freqs, mode)


def train_base_phase(train_set: TileSet, taxonomy: ClassTaxonomy,
                     config: TrainConfig) -> Checkpoint:
    """Optimize encoder, decoder, and background+base prototypes jointly.

    Loss is class-weighted cross entropy plus the orthogonality penalty.
    A fixed seed yields a bit-identical checkpoint on replay.
    """
    validate_taxonomy(taxonomy)
    if taxonomy.novel_ids:
        raise PhaseError("base-phase training requires a base-only taxonomy")
    if len(train_set) == 0:
        raise EmptyDatasetError("base training set is empty")
    allowed = set(taxonomy.class_ids) | {IGNORE_ID}
    for tile in train_set:
        present = set(np.unique(tile.label).tolist())
        if present - allowed:
            raise NovelIdInBaseSetError(
                f"tile {tile.id} carries ids {sorted(present - allowed)} outside the base taxonomy"
            )
    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        return _run_base_phase(train_set, taxonomy, config)
    finally:
        torch.set_num_threads(old_threads)


def _run_base_phase(train_set, taxonomy, config):
    torch.manual_seed(config.seed)
    extractor = build_extractor(config.arch_id, config.embed_dim)
    num_classes = taxonomy.num_classes
    prototypes = nn.Parameter(_orthonormal_rows(num_classes, config.embed_dim))
    weights = _phase_weights(config.weight_mode, train_set, taxonomy)
    lut = _weight_lut(weights, num_classes)

    params = list(extractor.parameters()) + [prototypes]
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
    rng = np.random.default_rng(config.seed)

    extractor.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            tiles = [
                augment_geometric(train_set.tiles[i], rng, config.crop, config.flip_prob)
                for i in chunk
            ]
            x, y = _batch_tensors(tiles)
            feats = extractor(x)
            logits = cosine_logits_torch(feats, prototypes, config.temperature)
            loss = segmentation_loss_torch(logits, y, lut)
            loss = loss + config.ortho_weight * orthogonality_loss_torch(prototypes)
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()

    bank = PrototypeBank(
        prototypes=prototypes.detach().numpy().astype(np.float32),
        frozen_mask=np.array([False] + [True] * len(taxonomy.base_ids)),
        temperature=config.temperature,
    )
    return Checkpoint(
        encoder_params=params_to_numpy(extractor.encoder),
        decoder_params=params_to_numpy(extractor.decoder),
        bank=bank,
        taxonomy=taxonomy,
        config_digest=config.digest(),
        phase="base",
        arch={
            "arch_id": config.arch_id,
            "embed_dim": config.embed_dim,
            "widths": list(extractor.encoder.channels),
        },
    )


def extractor_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the feature extractor of a checkpoint with its stored weights."""
    extractor = build_extractor(ckpt.arch["arch_id"], ckpt.arch["embed_dim"])
    load_numpy_params(extractor.encoder, ckpt.encoder_params)
    load_numpy_params(extractor.decoder, ckpt.decoder_params)
    return extractor


def _support_class_weights(mode, support, novel_ids):
    """Class-balanced weights from the support label histogram over novel ids."""
    if mode == "none":
        return None
    counts = {}
    for tile in support:
        lab = tile.label
        for cid in novel_ids:
            n = int((lab == cid).sum())
            if n:
                counts[cid] = counts.get(cid, 0) + n
    total = sum(counts.values())
    if total == 0:
        raise EmptySupportError("support tiles contain no novel pixels")
    from segland.data import FrequencyTable

    freqs = FrequencyTable(
        pixel_counts=counts, frequencies={c: n / total for c, n in counts.items()}
    )
    return compute_class_weights(freqs, mode)


def _init_novel_rows(extractor, basis_t, support, novel_ids, embed_dim):
    """Masked average of residual-projected support features per novel class,
    L2-normalized; random residual direction when a class mask is empty."""
    sums = {c: torch.zeros(embed_dim) for c in novel_ids}
    counts = {c: 0 for c in novel_ids}
    extractor.eval()
    with torch.no_grad():
        for tile in support:
            x, _ = _batch_tensors([tile])
            feats = extractor(x)
            resid = project_residual_torch(feats, basis_t)[0]  # D,H,W
            lab = torch.from_numpy(tile.label.astype(np.int64))
            for c in novel_ids:
                mask = lab == c
                if bool(mask.any()):
                    sums[c] += resid[:, mask].sum(dim=1)
                    counts[c] += int(mask.sum())
    rows = []
    for c in novel_ids:
        if counts[c] > 0:
            v = sums[c] / counts[c]
        else:
            v = torch.randn(embed_dim)
            v = v - torch.einsum("nd,d->n", basis_t, v) @ basis_t
        norm = float(v.norm())
        if norm < 1e-8:
            v = torch.randn(embed_dim)
            v = v - torch.einsum("nd,d->n", basis_t, v) @ basis_t
            norm = float(v.norm())
        rows.append(v / norm)
    return torch.stack(rows)


def _build_phase2_pool(support, mix_pool, config, rng):
    """Raw support tiles plus NovelCutMix copies pasted onto pool tiles."""
    pool = list(support.tiles)
    targets = list(mix_pool.tiles) if mix_pool is not None and len(mix_pool) else pool
    for tile in support.tiles:
        if np.any(tile.label == IGNORE_ID):
            continue
        for _ in range(config.cutmix_copies):
            target = targets[int(rng.integers(0, len(targets)))]
            pool.append(
                novel_cutmix(target, tile, placement=config.cutmix_placement, rng=rng)
            )
    return pool


def update_novel_phase(base_ckpt: Checkpoint, support: TileSet,
                       taxonomy: ClassTaxonomy, config: TrainConfig,
                       mix_pool: TileSet | None = None) -> Checkpoint:
    """Append novel prototype rows and train them on residual-projected
    features; extractor and base prototypes stay bit-identical.

    Support background pixels are remapped to the ignore value before the
    loss, so they contribute no gradient. `mix_pool` supplies backgrounds
    for NovelCutMix copies; support tiles back each other when absent.
    """
    if base_ckpt.phase != "base":
        raise PhaseError(f"expected a base-phase checkpoint, got {base_ckpt.phase!r}")
    validate_taxonomy(taxonomy)
    if not taxonomy.novel_ids:
        raise PhaseError("taxonomy declares no novel classes to learn")
    if taxonomy.base_ids != base_ckpt.taxonomy.base_ids:
        raise PhaseError("taxonomy base ids differ from the checkpoint's")
    if len(support) == 0:
        raise EmptySupportError("support set is empty")
    allowed = {taxonomy.background_id, IGNORE_ID} | set(taxonomy.novel_ids)
    for tile in support:
        present = set(np.unique(tile.label).tolist())
        if present - allowed:
            raise UnknownNovelIdError(
                f"support tile {tile.id} carries ids {sorted(present - allowed)}; "
                "expected background + novel ids only"
            )
    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        return _run_novel_phase(base_ckpt, support, taxonomy, config, mix_pool)
    finally:
        torch.set_num_threads(old_threads)


def _run_novel_phase(base_ckpt, support, taxonomy, config, mix_pool):
    torch.manual_seed(config.seed)
    extractor = extractor_from_checkpoint(base_ckpt)
    extractor.eval()
    for p in extractor.parameters():
        p.requires_grad_(False)

    base_bank = base_ckpt.bank
    embed_dim = base_bank.dim
    temperature = base_bank.temperature
    n_base = len(taxonomy.base_ids)
    novel_ids = list(taxonomy.novel_ids)

    base_rows_np = base_bank.prototypes[1 : 1 + n_base]
    basis_t = torch.from_numpy(orthonormalize(base_rows_np).astype(np.float32))
    bg_row = nn.Parameter(torch.from_numpy(base_bank.prototypes[0:1].copy()))
    base_rows_t = torch.from_numpy(base_rows_np.copy())
    novel_rows = nn.Parameter(
        _init_novel_rows(extractor, basis_t, support, novel_ids, embed_dim)
    )

    weights = _support_class_weights(config.weight_mode, support, novel_ids)
    lut = _weight_lut(weights, taxonomy.num_classes)

    opt = torch.optim.SGD([bg_row, novel_rows], lr=config.learning_rate,
                          momentum=config.momentum)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
    rng = np.random.default_rng(config.seed)
    pool = _build_phase2_pool(support, mix_pool, config, rng)

    for _ in range(config.epochs):
        order = rng.permutation(len(pool))
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            tiles = [
                augment_geometric(pool[i], rng, config.crop, config.flip_prob)
                for i in chunk
            ]
            x, y = _batch_tensors(tiles)
            y = torch.where(y == taxonomy.background_id,
                            torch.full_like(y, IGNORE_ID), y)
            if not bool((y != IGNORE_ID).any()):
                continue  # crop may have cut away every novel pixel
            with torch.no_grad():
                feats = extractor(x)
            logits = cosine_logits_torch(
                feats, torch.cat([bg_row, base_rows_t, novel_rows]), temperature
            )
            loss = segmentation_loss_torch(logits, y, lut)
            full = torch.cat([bg_row, base_rows_t, novel_rows])
            loss = loss + config.ortho_weight * orthogonality_loss_torch(full)
            opt.zero_grad()
            loss.backward()
            opt.step()
            # projected step: novel rows live in the orthogonal complement of
            # the base span, so only the residual part of a feature can train
            # them and base scoring stays untouched
            with torch.no_grad():
                coeffs = novel_rows @ basis_t.t()
                novel_rows.sub_(coeffs @ basis_t)
                novel_rows.div_(novel_rows.norm(dim=1, keepdim=True).clamp_min(1e-8))
        sched.step()

    prototypes = np.concatenate(
        [
            bg_row.detach().numpy().astype(np.float32),
            base_rows_np,  # the checkpoint's own rows, untouched
            novel_rows.detach().numpy().astype(np.float32),
        ]
    )
    bank = PrototypeBank(
        prototypes=prototypes,
        frozen_mask=np.array([False] + [True] * n_base + [False] * len(novel_ids)),
        temperature=temperature,
    )
    return Checkpoint(
        encoder_params={k: v.copy() for k, v in base_ckpt.encoder_params.items()},
        decoder_params={k: v.copy() for k, v in base_ckpt.decoder_params.items()},
        bank=bank,
        taxonomy=taxonomy,
        config_digest=config.digest(),
        phase="novel",
        arch=dict(base_ckpt.arch),
        derived_from=base_ckpt.config_digest,
    )
