"""Frozen multi-scale convolutional feature extractor."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

NUM_SCALES = 3


@dataclass
class EncoderConfig:
    input_size: int = 32
    channels_per_scale: Tuple[int, int, int] = (8, 16, 32)
    pretrained_weights_path: Optional[str] = None
    seed: int = 0
    init_std: float = 0.05
    normalize_input: bool = False
    mean: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: Tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self) -> None:
        self.channels_per_scale = tuple(int(c) for c in self.channels_per_scale)
        self.validate()

    def validate(self) -> None:
        if self.input_size <= 0 or self.input_size % 32 != 0:
            raise ValueError(
                f"input_size must be a positive multiple of 32, got {self.input_size}"
            )
        chans = self.channels_per_scale
        if len(chans) != NUM_SCALES:
            raise ValueError(f"expected {NUM_SCALES} channel counts, got {len(chans)}")
        if any(c < 1 for c in chans) or not all(a < b for a, b in zip(chans, chans[1:])):
            raise ValueError(f"channels must be positive and strictly increasing: {chans}")

    def scale_shapes(self) -> List[Tuple[int, int, int]]:
        """(c, h, w) of every scale; scale j (1-based) is input_size / 2**(j+1)."""
        return [
            (c, self.input_size // 2 ** (j + 2), self.input_size // 2 ** (j + 2))
            for j, c in enumerate(self.channels_per_scale)
        ]


@dataclass
class FeaturePyramid:
    maps: List[np.ndarray]
    source_id: str = ""

    def __post_init__(self) -> None:
        if len(self.maps) != NUM_SCALES:
            raise ValueError(f"a pyramid has exactly {NUM_SCALES} scales")
        for lo, hi in zip(self.maps, self.maps[1:]):
            if lo.shape[1] != lo.shape[2] or hi.shape[1] * 2 != lo.shape[1]:
                raise ValueError(f"inconsistent pyramid shapes {[m.shape for m in self.maps]}")


class WeightLoadError(RuntimeError):
    pass


def _conv_norm_relu(in_ch: int, out_ch: int, stride: int) -> List[nn.Module]:
    # GroupNorm without affine keeps the block parameter-free apart from the conv
    # and has no running statistics that a train() call could mutate.
    return [
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1),
        nn.GroupNorm(min(4, out_ch), out_ch, affine=False),
        nn.ReLU(inplace=True),
    ]


class Encoder(nn.Module):
    """Stem plus three strided blocks, each block emitting one pyramid scale.

    The stem halves the resolution and every block enters with a stride-2
    convolution, so block j outputs ``input_size / 2**(j+1)`` pixels per side.
    All parameters have ``requires_grad=False``.
    """

    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        self.config = config
        c1, c2, c3 = config.channels_per_scale
        stem_ch = max(c1 // 2, 4)
        self.stem = nn.Sequential(*_conv_norm_relu(3, stem_ch, stride=2))
        self.blocks = nn.ModuleList()
        prev = stem_ch
        for ch in (c1, c2, c3):
            self.blocks.append(
                nn.Sequential(*_conv_norm_relu(prev, ch, 2), *_conv_norm_relu(ch, ch, 1))
            )
            prev = ch
        self.register_buffer("mean", torch.tensor(config.mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(config.std).view(1, 3, 1, 1))
        self._init_weights(config.seed, config.init_std)
        self.freeze()

    def _init_weights(self, seed: int, std: float) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("weight"):
                    p.copy_(torch.randn(p.shape, generator=gen) * std)
                else:
                    p.zero_()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True) -> "Encoder":
        # frozen: nothing mode-dependent, keep eval semantics regardless
        return super().train(False)

    def forward(self, x: Tensor) -> List[Tensor]:
        size = self.config.input_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
            raise ValueError(f"expected images (B, 3, {size}, {size}), got {tuple(x.shape)}")
        if self.config.normalize_input:
            x = (x - self.mean) / self.std
        out = self.stem(x)
        feats = []
        for block in self.blocks:
            out = block(out)
            feats.append(out)
        return feats


def build_encoder(config: EncoderConfig) -> Encoder:
    """Build the frozen encoder; optionally overwrite weights from a checkpoint container.

    Only arrays named ``encoder.stem.*`` and ``encoder.blocks.{0,1,2}.*`` are read
    from the container, anything else in it is ignored.
    """
    config.validate()
    encoder = Encoder(config)
    if config.pretrained_weights_path:
        path = Path(config.pretrained_weights_path)
        if not path.exists():
            raise FileNotFoundError(f"pretrained weights not found: {path}")
        from .checkpoint import read_container

        arrays, _ = read_container(path)
        load_encoder_arrays(encoder, arrays)
    return encoder


def load_encoder_arrays(encoder: Encoder, arrays: dict) -> None:
    own = dict(encoder.named_parameters())
    prefix = "encoder."
    with torch.no_grad():
        for name, param in own.items():
            key = prefix + name
            if key not in arrays:
                raise WeightLoadError(f"missing weights for layer {name!r}")
            value = np.asarray(arrays[key])
            if tuple(value.shape) != tuple(param.shape):
                raise WeightLoadError(
                    f"shape mismatch for layer {name!r}: "
                    f"expected {tuple(param.shape)}, got {tuple(value.shape)}"
                )
            param.copy_(torch.from_numpy(value.astype(np.float32)))


def extract_features(encoder: Encoder, image: np.ndarray, source_id: str = "") -> FeaturePyramid:
    """Feature pyramid of a single (3, H, W) image with values in [0, 1]."""
    image = np.asarray(image)
    size = encoder.config.input_size
    if image.shape != (3, size, size):
        raise ValueError(f"expected image of shape (3, {size}, {size}), got {image.shape}")
    with torch.no_grad():
        maps = encoder(torch.from_numpy(image.astype(np.float32))[None])
    return FeaturePyramid([m[0].numpy().copy() for m in maps], source_id=source_id)


def extract_batch(encoder: Encoder, images: Sequence[np.ndarray], batch_size: int = 64) -> List[FeaturePyramid]:
    pyramids: List[FeaturePyramid] = []
    for start in range(0, len(images), batch_size):
        chunk = np.stack([np.asarray(im, dtype=np.float32) for im in images[start:start + batch_size]])
        with torch.no_grad():
            maps = encoder(torch.from_numpy(chunk))
        for i in range(chunk.shape[0]):
            pyramids.append(FeaturePyramid([m[i].numpy().copy() for m in maps]))
    return pyramids
