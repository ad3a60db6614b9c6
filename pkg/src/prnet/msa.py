"""Multi-size self-attention over non-overlapping patches of four sizes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from torch import Tensor

PATCH_DIVISORS = (1, 2, 4, 8)


@dataclass
class MsaConfig:
    """Multi-size attention settings.

    Attributes:
        patch_size_divisors: head s uses patches of side ``h // divisor``.
        stack_depth: number of stacked attention blocks per scale.
        embed_dim_cap: upper bound on the query/key/value width; wider patch
            vectors are embedded into this width and projected back.
        attention_scale: ``"paper"`` divides logits by the patch vector length,
            ``"sqrt"`` by its square root.
        strict_patch_sizes: if true, maps whose side is not divisible by every
            divisor are rejected; otherwise too-small patch sides clamp to 1.
    """

    patch_size_divisors: Tuple[int, ...] = PATCH_DIVISORS
    stack_depth: int = 3
    embed_dim_cap: Optional[int] = 256
    attention_scale: str = "paper"
    strict_patch_sizes: bool = False

    def __post_init__(self) -> None:
        if self.stack_depth < 1:
            raise ValueError("stack_depth must be >= 1")
        if self.attention_scale not in ("paper", "sqrt"):
            raise ValueError(f"attention_scale must be 'paper' or 'sqrt', got {self.attention_scale!r}")
        if self.embed_dim_cap is not None and self.embed_dim_cap < 1:
            raise ValueError("embed_dim_cap must be >= 1")

    def patch_sizes(self, h: int) -> List[int]:
        if self.strict_patch_sizes:
            bad = [d for d in self.patch_size_divisors if h % d != 0]
            if bad:
                raise ValueError(f"map side {h} is not divisible by patch divisors {bad}")
        return [max(1, h // d) for d in self.patch_size_divisors]


def patchify(x: Tensor, p: int) -> Tensor:
    """Split ``(..., C, h, w)`` into ``(..., N, C*p*p)`` row-major patches."""
    *lead, c, h, w = x.shape
    if p < 1 or h % p or w % p:
        raise ValueError(f"patch size {p} does not divide map of size {h}x{w}")
    x = x.reshape(-1, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 1, 3, 5).reshape(-1, (h // p) * (w // p), c * p * p)
    return x.reshape(*lead, x.shape[1], x.shape[2])


def unpatchify(patches: Tensor, c: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    *lead, n, dim = patches.shape
    p = int(round(math.sqrt(dim // c)))
    if c * p * p != dim or n != (h // p) * (w // p):
        raise ValueError(f"cannot fold {tuple(patches.shape)} into ({c}, {h}, {w})")
    x = patches.reshape(-1, h // p, w // p, c, p, p).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(*lead, c, h, w)


class AttentionHead(nn.Module):
    """Self-attention over the patch vectors of one patch size."""

    def __init__(self, patch_dim: int, embed_dim_cap: Optional[int] = None, attention_scale: str = "paper") -> None:
        super().__init__()
        self.patch_dim = patch_dim
        self.embed_dim = min(patch_dim, embed_dim_cap) if embed_dim_cap else patch_dim
        self.query = nn.Linear(patch_dim, self.embed_dim)
        self.key = nn.Linear(patch_dim, self.embed_dim)
        self.value = nn.Linear(patch_dim, self.embed_dim)
        self.out = nn.Linear(self.embed_dim, patch_dim) if self.embed_dim < patch_dim else None
        self.divisor = float(patch_dim) if attention_scale == "paper" else math.sqrt(patch_dim)

    def attention_weights(self, patches: Tensor) -> Tensor:
        q = self.query(patches)
        k = self.key(patches)
        return torch.softmax(q @ k.transpose(-2, -1) / self.divisor, dim=-1)

    def forward(self, patches: Tensor, return_weights: bool = False):
        if patches.shape[-2] < 1 or patches.shape[-1] != self.patch_dim:
            raise ValueError(f"expected (.., N>=1, {self.patch_dim}) patches, got {tuple(patches.shape)}")
        weights = self.attention_weights(patches)
        out = weights @ self.value(patches)
        if self.out is not None:
            out = self.out(out)
        return (out, weights) if return_weights else out


def attend(head: AttentionHead, patches: Tensor) -> Tensor:
    return head(patches)


class ResidualBlock2d(nn.Module):
    """conv3x3-BN-ReLU-conv3x3-BN plus a 1x1 projected skip, then ReLU."""

    def __init__(self, in_ch: int, out_ch: int) -> None:
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
        )
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.body(x) + self.skip(x))


class MsaBlock(nn.Module):
    """One attention head per patch size; head outputs concat into a residual block.

    Input and output are ``(B, C, h, h)`` with ``C = 2 * c_j``.
    """

    def __init__(self, channels: int, size: int, config: MsaConfig) -> None:
        super().__init__()
        self.channels = channels
        self.size = size
        self.patch_sizes = config.patch_sizes(size)
        self.heads = nn.ModuleList(
            AttentionHead(channels * p * p, config.embed_dim_cap, config.attention_scale)
            for p in self.patch_sizes
        )
        self.merge = ResidualBlock2d(channels * len(self.patch_sizes), channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1:] != (self.channels, self.size, self.size):
            raise ValueError(
                f"expected (B, {self.channels}, {self.size}, {self.size}), got {tuple(x.shape)}"
            )
        outs = []
        for p, head in zip(self.patch_sizes, self.heads):
            outs.append(unpatchify(head(patchify(x, p)), self.channels, self.size, self.size))
        return self.merge(torch.cat(outs, dim=1))


def msa_block(block: MsaBlock, x: Tensor) -> Tensor:
    return block(x)


class MsaStack(nn.Sequential):
    """``stack_depth`` blocks with independent parameters."""

    def __init__(self, channels: int, size: int, config: MsaConfig) -> None:
        super().__init__(*[MsaBlock(channels, size, config) for _ in range(config.stack_depth)])


class MultiSizeSelfAttention(nn.Module):
    """Per-scale attention stacks; no parameters are shared between scales."""

    def __init__(self, channels: Sequence[int], sizes: Sequence[int], config: MsaConfig) -> None:
        super().__init__()
        self.stacks = nn.ModuleList(MsaStack(c, s, config) for c, s in zip(channels, sizes))

    def forward(self, maps: Sequence[Tensor]) -> List[Tensor]:
        return [stack(m) for stack, m in zip(self.stacks, maps)]
