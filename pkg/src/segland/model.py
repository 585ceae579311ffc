"""Feature extraction (pluggable encoder + UperNetPlus decoder) and the
orthogonal-prototype classifier: cosine scoring, residual projection,
orthogonality penalty, posterior prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from segland.core import LabelMap, ProbabilityMap, PrototypeBank
from segland.errors import (
    DegenerateBasisError,
    DegenerateError,
    DimensionMismatchError,
    ShapeError,
    UnknownArchError,
)

_EPS = 1e-12

PYRAMID_STRIDES = (4, 8, 16, 32)
DEFAULT_PPM_GRID = (1, 2, 3, 6)
DEFAULT_EMBED_DIM = 64


@dataclass(frozen=True)
class FeaturePyramid:
    """Four feature levels at strides 4/8/16/32 of the input."""

    levels: tuple[np.ndarray, ...]  # each H_l x W_l x C_l

    def __post_init__(self):
        levels = tuple(np.asarray(l, dtype=np.float32) for l in self.levels)
        if len(levels) != 4:
            raise ShapeError(f"pyramid needs 4 levels, got {len(levels)}")
        for coarse, fine in zip(levels[1:], levels[:-1]):
            if coarse.shape[0] * 2 != fine.shape[0] or coarse.shape[1] * 2 != fine.shape[1]:
                raise ShapeError("pyramid levels must halve spatially level-to-level")
        object.__setattr__(self, "levels", levels)


@dataclass(frozen=True)
class FeatureMap:
    """Dense per-pixel embeddings at full input resolution."""

    features: np.ndarray  # H x W x D

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 3:
            raise ShapeError(f"features must be HxWxD, got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("feature map contains non-finite entries")
        object.__setattr__(self, "features", feats)

    @property
    def dim(self):
        return self.features.shape[2]


@dataclass(frozen=True)
class LogitMap:
    """Per-pixel class scores before the softmax."""

    logits: np.ndarray  # H x W x K

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float32)
        if logits.ndim != 3:
            raise ShapeError(f"logits must be HxWxK, got {logits.shape}")
        object.__setattr__(self, "logits", logits)


def _conv(in_ch, out_ch, kernel=3, stride=1):
    return nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)


def _group_norm(channels):
    return nn.GroupNorm(8 if channels % 8 == 0 else 1, channels)


def _conv_block(in_ch, out_ch, kernel=3, stride=1):
    # GroupNorm keeps activations bounded without batch statistics, so
    # forward passes stay deterministic and batch-size independent
    return nn.Sequential(
        _conv(in_ch, out_ch, kernel, stride),
        _group_norm(out_ch),
        nn.ReLU(inplace=True),
    )


class ReferenceEncoder(nn.Module):
    """Small 4-stage convolutional pyramid; stand-in for heavyweight backbones.

    Stage outputs sit at strides 4/8/16/32 of the input with the configured
    channel widths.
    """

    def __init__(self, widths=(32, 64, 128, 256)):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("encoder needs exactly 4 stage widths")
        self.channels = tuple(widths)
        w0, w1, w2, w3 = widths
        self.stage1 = nn.Sequential(
            _conv_block(3, w0, stride=2), _conv_block(w0, w0, stride=2)
        )
        self.stage2 = nn.Sequential(
            _conv_block(w0, w1, stride=2), _conv_block(w1, w1)
        )
        self.stage3 = nn.Sequential(
            _conv_block(w1, w2, stride=2), _conv_block(w2, w2)
        )
        self.stage4 = nn.Sequential(
            _conv_block(w2, w3, stride=2), _conv_block(w3, w3)
        )

    def forward(self, x):
        c2 = self.stage1(x)
        c3 = self.stage2(c2)
        c4 = self.stage3(c3)
        c5 = self.stage4(c4)
        return [c2, c3, c4, c5]


ENCODER_REGISTRY: dict[str, "callable"] = {}


def register_encoder(arch_id, factory):
    """Register an encoder factory; the module it builds must expose `.channels`."""
    ENCODER_REGISTRY[arch_id] = factory


def build_encoder(arch_id) -> nn.Module:
    try:
        factory = ENCODER_REGISTRY[arch_id]
    except KeyError:
        raise UnknownArchError(
            f"arch {arch_id!r} not registered; known: {sorted(ENCODER_REGISTRY)}"
        ) from None
    return factory()


register_encoder("ref-tiny", lambda: ReferenceEncoder((16, 32, 64, 128)))
register_encoder("ref-small", lambda: ReferenceEncoder((32, 64, 128, 256)))
register_encoder("ref-mid", lambda: ReferenceEncoder((24, 48, 96, 192)))
register_encoder("ref-wide", lambda: ReferenceEncoder((48, 96, 192, 384)))


class PyramidPooling(nn.Module):
    """Multi-grid average pooling with per-branch projection and refusion."""

    def __init__(self, in_ch, out_ch, grid=DEFAULT_PPM_GRID):
        super().__init__()
        self.grid = tuple(grid)
        self.branches = nn.ModuleList(
            nn.Sequential(nn.AdaptiveAvgPool2d(s), _conv_block(in_ch, out_ch, kernel=1))
            for s in self.grid
        )
        self.fuse = _conv_block(in_ch + len(self.grid) * out_ch, out_ch)

    def forward(self, x):
        size = x.shape[2:]
        pooled = [x]
        for branch in self.branches:
            pooled.append(F.interpolate(branch(x), size=size, mode="bilinear", align_corners=False))
        return self.fuse(torch.cat(pooled, dim=1))


class UperNetPlusDecoder(nn.Module):
    """Panoptic-FPN lateral/top-down merge over a PPM-refined top level,
    then progressive 2x upsampling of the stride-4 map to full resolution."""

    def __init__(self, in_channels, embed_dim=DEFAULT_EMBED_DIM, ppm_grid=DEFAULT_PPM_GRID):
        super().__init__()
        if len(in_channels) != 4:
            raise ValueError("decoder expects a 4-level pyramid")
        self.embed_dim = embed_dim
        self.ppm = PyramidPooling(in_channels[-1], embed_dim, grid=ppm_grid)
        self.laterals = nn.ModuleList(_conv(c, embed_dim, kernel=1) for c in in_channels[:-1])
        self.refine1 = _conv_block(embed_dim, embed_dim)
        self.refine2 = _conv(embed_dim, embed_dim)  # linear head, signed embeddings

    def forward(self, levels):
        top = self.ppm(levels[-1])
        merged = top
        for i in reversed(range(3)):
            lateral = self.laterals[i](levels[i])
            merged = lateral + F.interpolate(
                merged, size=lateral.shape[2:], mode="bilinear", align_corners=False
            )
        x = F.interpolate(merged, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.refine1(x)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.refine2(x)


class FeatureExtractor(nn.Module):
    """Encoder + decoder producing full-resolution pixel embeddings."""

    def __init__(self, encoder, embed_dim=DEFAULT_EMBED_DIM, ppm_grid=DEFAULT_PPM_GRID):
        super().__init__()
        self.encoder = encoder
        self.decoder = UperNetPlusDecoder(encoder.channels, embed_dim, ppm_grid)
        self.embed_dim = embed_dim

    def forward(self, images):
        return self.decoder(self.encoder(images))


def build_extractor(arch_id="ref-small", embed_dim=DEFAULT_EMBED_DIM,
                    ppm_grid=DEFAULT_PPM_GRID, seed=None) -> FeatureExtractor:
    """Construct a feature extractor with deterministic parameter init."""
    if seed is not None:
        torch.manual_seed(seed)
    encoder = build_encoder(arch_id)
    return FeatureExtractor(encoder, embed_dim=embed_dim, ppm_grid=ppm_grid)


def params_to_numpy(module: nn.Module) -> dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in module.state_dict().items()
    }


def load_numpy_params(module: nn.Module, tree: dict[str, np.ndarray]) -> None:
    state = {name: torch.from_numpy(np.array(arr, dtype=np.float32)) for name, arr in tree.items()}
    module.load_state_dict(state)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 HxWx3 raster to a [1,3,H,W] float tensor in [0,1]."""
    arr = np.asarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)


def extract_features(image: np.ndarray, extractor: FeatureExtractor) -> FeatureMap:
    """Run encoder + decoder on one raster; output is HxWxD at input resolution."""
    h, w = image.shape[:2]
    if h % 32 or w % 32:
        raise ShapeError(f"image size {h}x{w} must be divisible by 32")
    extractor.eval()
    with torch.no_grad():
        feats = extractor(image_to_tensor(image))
    return FeatureMap(features=feats[0].permute(1, 2, 0).numpy())


def encoder_pyramid(image: np.ndarray, extractor: FeatureExtractor) -> FeaturePyramid:
    h, w = image.shape[:2]
    if h % 32 or w % 32:
        raise ShapeError(f"image size {h}x{w} must be divisible by 32")
    extractor.eval()
    with torch.no_grad():
        levels = extractor.encoder(image_to_tensor(image))
    return FeaturePyramid(levels=tuple(l[0].permute(1, 2, 0).numpy() for l in levels))


def upernetplus_decode(pyramid: FeaturePyramid, decoder: UperNetPlusDecoder) -> FeatureMap:
    """Decode a 4-level pyramid to a full-resolution feature map."""
    decoder.eval()
    with torch.no_grad():
        levels = [
            torch.from_numpy(np.ascontiguousarray(l)).permute(2, 0, 1).unsqueeze(0)
            for l in pyramid.levels
        ]
        out = decoder(levels)
    return FeatureMap(features=out[0].permute(1, 2, 0).numpy())


def cosine_logits_torch(feats: torch.Tensor, protos: torch.Tensor, temperature: float) -> torch.Tensor:
    """Temperature-scaled cosine between pixels [B,D,H,W] and prototypes [K,D].

    Zero vectors normalize to zero, so they score 0 against everything.
    """
    f = feats / feats.norm(dim=1, keepdim=True).clamp_min(_EPS)
    p = protos / protos.norm(dim=1, keepdim=True).clamp_min(_EPS)
    return torch.einsum("bdhw,kd->bkhw", f, p) / temperature


def score_classes(fmap: FeatureMap, bank: PrototypeBank) -> LogitMap:
    """Cosine similarity of every pixel against every prototype row, over
    the bank temperature."""
    feats = fmap.features
    if feats.shape[2] != bank.dim:
        raise DimensionMismatchError(
            f"feature width {feats.shape[2]} vs prototype width {bank.dim}"
        )
    f = feats / np.maximum(np.linalg.norm(feats, axis=2, keepdims=True), _EPS)
    p = bank.prototypes / np.maximum(
        np.linalg.norm(bank.prototypes, axis=1, keepdims=True), _EPS
    )
    logits = np.einsum("hwd,kd->hwk", f, p) / bank.temperature
    return LogitMap(logits=logits.astype(np.float32))


def orthonormalize(base_prototypes: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Gram-Schmidt orthonormal basis of the base-prototype span.

    Rows that are linearly dependent on earlier rows are dropped; a row with
    (near-)zero input norm is rejected outright.
    """
    protos = np.asarray(base_prototypes, dtype=np.float64)
    if protos.ndim != 2:
        raise ShapeError(f"base prototypes must be BxD, got {protos.shape}")
    norms = np.linalg.norm(protos, axis=1)
    if np.any(norms < tol):
        raise DegenerateBasisError("a base prototype has near-zero norm")
    basis = []
    for row in protos:
        v = row.copy()
        for b in basis:
            v -= np.dot(v, b) * b
        n = np.linalg.norm(v)
        if n > tol * max(1.0, np.linalg.norm(row)):
            basis.append(v / n)
    return np.array(basis, dtype=np.float64)


def project_residual(fmap: FeatureMap, base_prototypes: np.ndarray) -> FeatureMap:
    """Remove the base-prototype span from every pixel embedding.

    The residual is orthogonal to every base prototype; features already in
    the span map to zero.
    """
    feats = fmap.features.astype(np.float64)
    if feats.shape[2] != np.asarray(base_prototypes).shape[1]:
        raise DimensionMismatchError("feature and prototype widths differ")
    basis = orthonormalize(base_prototypes)
    coeffs = np.einsum("hwd,bd->hwb", feats, basis)
    residual = feats - np.einsum("hwb,bd->hwd", coeffs, basis)
    return FeatureMap(features=residual.astype(np.float32))


def project_residual_torch(feats: torch.Tensor, basis: torch.Tensor) -> torch.Tensor:
    """Torch twin of project_residual for [B,D,H,W] features and an
    orthonormal basis [Nb,D]."""
    coeffs = torch.einsum("bdhw,nd->bnhw", feats, basis)
    return feats - torch.einsum("bnhw,nd->bdhw", coeffs, basis)


def orthogonality_loss_torch(protos: torch.Tensor) -> torch.Tensor:
    """Sum of squared pairwise cosines over unordered prototype pairs."""
    p = protos / protos.norm(dim=1, keepdim=True).clamp_min(_EPS)
    gram = p @ p.t()
    k = protos.shape[0]
    off = gram - torch.eye(k, dtype=gram.dtype)
    return (off ** 2).sum() / 2.0


def orthogonality_loss(bank: PrototypeBank) -> float:
    """Orthogonality penalty of the bank; 0 iff rows are pairwise orthogonal."""
    protos = bank.prototypes.astype(np.float64)
    if protos.shape[0] < 2:
        raise ValueError("orthogonality needs at least 2 prototypes")
    norms = np.linalg.norm(protos, axis=1)
    if np.any(norms < _EPS):
        raise DegenerateError("zero-norm prototype row")
    p = protos / norms[:, None]
    gram = p @ p.T
    off = gram - np.eye(protos.shape[0])
    return float((off ** 2).sum() / 2.0)


def predict(logits: LogitMap) -> tuple[ProbabilityMap, LabelMap]:
    """Per-pixel softmax and argmax; ties resolve to the lowest class id."""
    raw = logits.logits.astype(np.float64)
    shifted = raw - raw.max(axis=2, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=2, keepdims=True)
    labels = np.argmax(probs, axis=2).astype(np.uint8)
    return ProbabilityMap(probs=probs.astype(np.float32)), LabelMap(labels=labels)


def run_inference(extractor: FeatureExtractor, bank: PrototypeBank,
                  image: np.ndarray) -> tuple[ProbabilityMap, LabelMap]:
    """Full single-tile forward: features, prototype scores, posterior."""
    fmap = extract_features(image, extractor)
    return predict(score_classes(fmap, bank))
