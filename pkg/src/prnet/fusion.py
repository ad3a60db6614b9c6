"""Multi-scale fusion: every output scale sums transformed copies of all input scales."""

from __future__ import annotations

from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor


def downsample_geometry(r: int, j: int) -> Tuple[int, int, int]:
    """(stride, kernel, padding) of the scale-r to scale-j path, r < j (1-based)."""
    if not r < j:
        raise ValueError(f"downsampling needs r < j, got r={r}, j={j}")
    s = 2 ** (j - r)
    return s, s + 1, s // 2


class Downsample(nn.Module):
    """Depthwise strided conv followed by a pointwise channel projection."""

    def __init__(self, in_ch: int, out_ch: int, r: int, j: int) -> None:
        super().__init__()
        stride, kernel, padding = downsample_geometry(r, j)
        self.depthwise = nn.Conv2d(
            in_ch, in_ch, kernel_size=kernel, stride=stride, padding=padding, groups=in_ch
        )
        self.pointwise = nn.Conv2d(in_ch, out_ch, kernel_size=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class Upsample(nn.Module):
    """Bilinear upsampling (half-pixel centers by default) then a 1x1 conv."""

    def __init__(self, in_ch: int, out_ch: int, factor: int, align_corners: bool = False) -> None:
        super().__init__()
        self.factor = factor
        self.align_corners = align_corners
        self.proj = nn.Conv2d(in_ch, out_ch, kernel_size=1)

    def forward(self, x: Tensor) -> Tensor:
        x = F.interpolate(
            x, scale_factor=self.factor, mode="bilinear", align_corners=self.align_corners
        )
        return self.proj(x)


class MultiScaleFusion(nn.Module):
    """Three-scale exchange block.

    ``out_j = sum_r f_rj(in_r)`` where ``f_jj`` is the identity, ``f_rj`` for
    r < j downsamples by ``2**(j-r)`` and for r > j upsamples by ``2**(r-j)``.
    No normalization or nonlinearity is applied, so the block is affine in its
    inputs.

    Args:
        channels: channel count of each of the three scales.
        align_corners: bilinear sampling convention of the upsampling paths.
    """

    def __init__(self, channels: Sequence[int], align_corners: bool = False) -> None:
        super().__init__()
        self.channels = tuple(channels)
        self.paths = nn.ModuleDict()
        for r in (1, 2, 3):
            for j in (1, 2, 3):
                if r < j:
                    self.paths[f"{r}{j}"] = Downsample(self.channels[r - 1], self.channels[j - 1], r, j)
                elif r > j:
                    self.paths[f"{r}{j}"] = Upsample(
                        self.channels[r - 1], self.channels[j - 1], 2 ** (r - j), align_corners
                    )

    def transform(self, x: Tensor, r: int, j: int) -> Tensor:
        if r == j:
            return x
        return self.paths[f"{r}{j}"](x)

    def _check(self, maps: Sequence[Tensor]) -> None:
        if len(maps) != 3:
            raise ValueError(f"fusion expects 3 scales, got {len(maps)}")
        for j, m in enumerate(maps):
            if m.dim() != 4 or m.shape[1] != self.channels[j]:
                raise ValueError(
                    f"scale {j + 1}: expected {self.channels[j]} channels, got shape {tuple(m.shape)}"
                )
        for lo, hi in zip(maps, maps[1:]):
            if lo.shape[2] != 2 * hi.shape[2] or lo.shape[3] != 2 * hi.shape[3]:
                raise ValueError(f"scale sizes must halve: {[tuple(m.shape) for m in maps]}")

    def forward(self, maps: Sequence[Tensor]) -> List[Tensor]:
        self._check(maps)
        out = []
        for j in (1, 2, 3):
            acc = maps[j - 1]
            for r in (1, 2, 3):
                if r != j:
                    acc = acc + self.transform(maps[r - 1], r, j)
            out.append(acc)
        return out

    def zero_cross_weights(self) -> None:
        with torch.no_grad():
            for p in self.paths.parameters():
                p.zero_()


def fuse(block: MultiScaleFusion, maps: Sequence[Tensor]) -> List[Tensor]:
    return block(maps)


def fuse_and_concat(
    feature_block: MultiScaleFusion,
    residual_block: MultiScaleFusion,
    feature_maps: Sequence[Tensor],
    residual_maps: Sequence[Tensor],
) -> List[Tensor]:
    """Fuse features and residuals with their own blocks, concat along channels."""
    fused_f = feature_block(feature_maps)
    fused_d = residual_block(residual_maps)
    return [torch.cat([f, d], dim=1) for f, d in zip(fused_f, fused_d)]
