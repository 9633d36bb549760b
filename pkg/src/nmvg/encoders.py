"""Stand-in backbones for the three input branches.

The fusion and head modules only care about the interface: four image and
radar stages at 1/4, 1/8, 1/16 and 1/32 of the input resolution with a
configured channel count per stage, and a (embed_dim, L) text feature with
a fixed token budget.  The encoders here are deliberately small: separable
convolutions for the image branch, depthwise residual blocks for radar and
a plain embedding lookup for text.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import (
    BNParams,
    ConvParams,
    FeatureMap,
    ShapeError,
    activation,
    batchnorm_inference,
    conv2d,
)

#: Total downsampling factor across the stage pyramid; inputs must divide it.
STRIDE_TOTAL = 32


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 96)
    text_vocab: int = 26
    text_len: int = 50
    embed_dim: int = 64

    def __post_init__(self):
        ch = tuple(int(c) for c in self.stage_channels)
        if len(ch) != 4:
            raise ValueError(f"exactly four stage channel counts required, got {len(ch)}")
        if any(c < 1 for c in ch):
            raise ValueError(f"stage channels must be positive, got {ch}")
        if any(ch[i + 1] < ch[i] for i in range(3)):
            raise ValueError(f"stage channels must be non-decreasing, got {ch}")
        object.__setattr__(self, "stage_channels", ch)
        if self.text_vocab < 1:
            raise ValueError("text_vocab must be positive")
        if self.text_len < 1:
            raise ValueError("text_len must be positive")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Fixed-length token ids plus a mask flagging the padded tail."""

    ids: np.ndarray
    padding_mask: np.ndarray

    def __post_init__(self):
        ids = np.ascontiguousarray(np.asarray(self.ids, dtype=np.int64))
        mask = np.ascontiguousarray(np.asarray(self.padding_mask, dtype=bool))
        if ids.ndim != 1 or mask.ndim != 1 or ids.shape != mask.shape:
            raise ShapeError(
                f"ids and padding_mask must be equal-length 1-D, got {ids.shape} and {mask.shape}"
            )
        if (ids < 0).any():
            raise ValueError("token ids must be non-negative")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "padding_mask", mask)

    def __len__(self) -> int:
        return self.ids.shape[0]


def load_vocab(path: str | Path) -> list[str]:
    """Read a vocabulary file: one token per line, line index is the id."""
    tokens = Path(path).read_text(encoding="utf-8").splitlines()
    if not tokens:
        raise ValueError(f"vocabulary file {path} is empty")
    return tokens


def tokenize(text: str, vocab: Sequence[str], length: int = 50) -> TokenSequence:
    """Whitespace-split, lowercase, look up ids, pad or truncate to length.

    Id 0 is reserved for padding.  Words missing from the vocabulary are
    rejected rather than silently remapped.
    """
    index = {tok: i for i, tok in enumerate(vocab)}
    ids = []
    for word in text.lower().split():
        if word not in index:
            raise ValueError(f"word {word!r} is not in the vocabulary")
        ids.append(index[word])
    ids = ids[:length]
    pad = length - len(ids)
    full = np.array(ids + [0] * pad, dtype=np.int64)
    mask = np.zeros(length, dtype=bool)
    if pad:
        mask[len(ids):] = True
    return TokenSequence(ids=full, padding_mask=mask)


@dataclass(frozen=True, eq=False)
class SeparableDown:
    """Depthwise stride-2 conv, pointwise projection, then BN (+ ReLU)."""

    dw: ConvParams
    pw: ConvParams
    bn: BNParams


def _separable_down(x: FeatureMap, block: SeparableDown) -> FeatureMap:
    x = conv2d(x, block.dw)
    x = conv2d(x, block.pw)
    return activation(batchnorm_inference(x, block.bn), "relu")


@dataclass(frozen=True, eq=False)
class ImageEncoderParams:
    stem: SeparableDown
    stages: tuple[SeparableDown, SeparableDown, SeparableDown, SeparableDown]


def _check_raster_input(x, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"{what} must be (N, 3, H, W), got shape {x.shape}")
    if x.shape[2] % STRIDE_TOTAL or x.shape[3] % STRIDE_TOTAL:
        raise ShapeError(
            f"{what} spatial dims {x.shape[2:]} must be divisible by {STRIDE_TOTAL}"
        )
    return x


def image_encoder(rgb: FeatureMap, p: ImageEncoderParams) -> list[FeatureMap]:
    """Four separable downsampling stages at 1/4, 1/8, 1/16, 1/32 resolution."""
    x = _check_raster_input(rgb, "image input")
    x = _separable_down(x, p.stem)
    outs = []
    for stage in p.stages:
        x = _separable_down(x, stage)
        outs.append(x)
    return outs


@dataclass(frozen=True, eq=False)
class RadarStage:
    """Two depthwise 3x3 blocks with a residual, then a stride-2 projection.

    The residual bridge is a 1x1 conv and is only needed when the block
    path changes the channel count; with the default layout the widths
    match and the bridge stays None (identity).
    """

    block1_dw: ConvParams
    block1_bn: BNParams
    block2_dw: ConvParams
    block2_bn: BNParams
    down: SeparableDown
    bridge: ConvParams | None = None


@dataclass(frozen=True, eq=False)
class RadarEncoderParams:
    stem_dw: ConvParams
    stem_bn: BNParams
    stages: tuple[RadarStage, RadarStage, RadarStage, RadarStage]


def radar_encoder(radar: FeatureMap, p: RadarEncoderParams) -> list[FeatureMap]:
    """Mirror of image_encoder over the range/velocity/power planes."""
    x = _check_raster_input(radar, "radar input")
    x = conv2d(x, p.stem_dw)
    x = activation(batchnorm_inference(x, p.stem_bn), "relu")
    outs = []
    for stage in p.stages:
        h = activation(batchnorm_inference(conv2d(x, stage.block1_dw), stage.block1_bn), "relu")
        h = activation(batchnorm_inference(conv2d(h, stage.block2_dw), stage.block2_bn), "relu")
        shortcut = conv2d(x, stage.bridge) if stage.bridge is not None else x
        x = h + shortcut
        x = _separable_down(x, stage.down)
        outs.append(x)
    return outs


@dataclass(frozen=True, eq=False)
class TextEncoderParams:
    """Embedding table of shape (vocab, embed_dim); row 0 is the pad vector."""

    embedding: np.ndarray

    def __post_init__(self):
        e = np.ascontiguousarray(np.asarray(self.embedding, dtype=np.float32))
        if e.ndim != 2:
            raise ShapeError(f"embedding table must be 2-D, got shape {e.shape}")
        object.__setattr__(self, "embedding", e)

    @property
    def vocab(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]


def text_encoder(tokens: TokenSequence, p: TextEncoderParams) -> np.ndarray:
    """Pure embedding lookup returning (embed_dim, L); padded slots emit row 0."""
    ids = tokens.ids
    if (ids >= p.vocab).any():
        bad = int(ids[ids >= p.vocab][0])
        raise ValueError(f"token id {bad} is outside the embedding table ({p.vocab} rows)")
    return np.ascontiguousarray(p.embedding[ids].T)
