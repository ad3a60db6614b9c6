"""Full network: frozen encoder and prototype bank, fusion, attention, U-Net style decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .encoder import Encoder, EncoderConfig, build_encoder
from .fusion import MultiScaleFusion, fuse_and_concat
from .msa import MsaConfig, MultiSizeSelfAttention
from .prototypes import PrototypeBank


def default_top_k(height: int, width: int) -> int:
    """Keep the top-100-of-256x256 pixel fraction at any resolution."""
    return max(1, int(round(100 * height * width / 256 ** 2)))


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    msa: MsaConfig = field(default_factory=MsaConfig)
    decoder_widths: Optional[Tuple[int, int, int]] = None
    use_mp: bool = True
    use_msa: bool = True
    use_mf: bool = True
    align_corners: bool = False
    top_k: Optional[int] = None
    output_prior: Optional[float] = 0.05

    @property
    def image_top_k(self) -> int:
        size = self.encoder.input_size
        return self.top_k if self.top_k else default_top_k(size, size)

    def widths(self) -> Tuple[int, int, int]:
        if self.decoder_widths:
            return tuple(self.decoder_widths)
        c3 = self.encoder.channels_per_scale[2]
        return (c3, max(c3 // 2, 1), max(c3 // 4, 1))

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        msa_d = dict(d.pop("msa", {}))
        if "patch_size_divisors" in msa_d:
            msa_d["patch_size_divisors"] = tuple(msa_d["patch_size_divisors"])
        if d.get("decoder_widths") is not None:
            d["decoder_widths"] = tuple(d["decoder_widths"])
        return cls(encoder=enc, msa=MsaConfig(**msa_d), **d)


@dataclass
class ScoreMap:
    scores: np.ndarray
    image_score: float
    source_id: str = ""


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class Decoder(nn.Module):
    """Consumes the deepest skip, merges the two shallower ones, outputs logits.

    Stage 0 works at scale 3; stages 1 and 2 upsample x2 and concatenate the
    scale-2 and scale-1 skips. The head upsamples x4 to the input resolution and
    maps to one channel with a 1x1 conv.
    """

    def __init__(
        self,
        skip_channels: Sequence[int],
        widths: Sequence[int],
        align_corners: bool = False,
        prior: Optional[float] = None,
    ) -> None:
        super().__init__()
        s1, s2, s3 = skip_channels
        w0, w1, w2 = widths
        self.align_corners = align_corners
        self.stage0 = _conv_block(s3, w0)
        self.stage1 = _conv_block(w0 + s2, w1)
        self.stage2 = _conv_block(w1 + s1, w2)
        self.head = nn.Conv2d(w2, 1, kernel_size=1)
        if prior is not None:
            nn.init.constant_(self.head.bias, float(np.log(prior / (1 - prior))))

    def _up(self, x: Tensor, factor: int) -> Tensor:
        return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=self.align_corners)

    def forward(self, skips: Sequence[Tensor]) -> Tensor:
        t1, t2, t3 = skips
        x = self.stage0(t3)
        x = self.stage1(torch.cat([self._up(x, 2), t2], dim=1))
        x = self.stage2(torch.cat([self._up(x, 2), t1], dim=1))
        return self.head(self._up(x, 4))


class PrnModel(nn.Module):
    """Prototypical residual network.

    ``forward`` maps images ``(B, 3, H, W)`` in [0, 1] to per-pixel anomaly
    probabilities ``(B, 1, H, W)``. The encoder and the prototype buffers are
    frozen; everything else trains.
    """

    def __init__(self, config: ModelConfig, encoder: Optional[Encoder] = None) -> None:
        super().__init__()
        self.config = config
        self.encoder = encoder if encoder is not None else build_encoder(config.encoder)
        shapes = config.encoder.scale_shapes()
        chans = [s[0] for s in shapes]
        sizes = [s[1] for s in shapes]
        wide = [2 * c for c in chans]
        for j, (c, h, w) in enumerate(shapes, start=1):
            self.register_buffer(f"prototypes_{j}", torch.zeros(1, c, h, w))
        self.bank: Optional[PrototypeBank] = None
        if config.use_mf:
            self.feature_fusion = MultiScaleFusion(chans, config.align_corners)
            self.residual_fusion = MultiScaleFusion(chans, config.align_corners)
            self.post_fusion = MultiScaleFusion(wide, config.align_corners)
        else:
            self.feature_fusion = self.residual_fusion = self.post_fusion = None
        self.msa = MultiSizeSelfAttention(wide, sizes, config.msa) if config.use_msa else None
        self.decoder = Decoder(wide, config.widths(), config.align_corners, config.output_prior)

    # -- prototypes -----------------------------------------------------
    def set_bank(self, bank: PrototypeBank) -> None:
        for j, (proto, (c, h, w)) in enumerate(zip(bank.prototypes, self.config.encoder.scale_shapes()), start=1):
            if proto.shape[1:] != (c, h, w):
                raise ValueError(f"scale {j}: bank shape {proto.shape[1:]} != model shape {(c, h, w)}")
            setattr(self, f"prototypes_{j}", torch.from_numpy(np.array(proto, dtype=np.float32)))
        self.bank = bank

    def prototype_arrays(self) -> List[Tensor]:
        return [getattr(self, f"prototypes_{j}") for j in (1, 2, 3)]

    def residuals(self, feats: Sequence[Tensor]) -> Tuple[List[Tensor], List[Tensor]]:
        """Elementwise |F - P*| per scale, P* the L2-nearest prototype per sample."""
        out, chosen = [], []
        for f, protos in zip(feats, self.prototype_arrays()):
            flat_f = f.detach().flatten(1).double()
            flat_p = protos.flatten(1).double()
            d = ((flat_f[:, None, :] - flat_p[None, :, :]) ** 2).sum(-1)
            idx = d.argmin(dim=1)
            nearest = protos[idx]
            diff = f - nearest
            out.append(diff.abs() if (self.bank is None or self.bank.distance == "abs") else diff * diff)
            chosen.append(idx)
        return out, chosen

    # -- forward --------------------------------------------------------
    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def skips(self, x: Tensor) -> List[Tensor]:
        with torch.no_grad():
            feats = self.encoder(x)
            if self.config.use_mp:
                res, _ = self.residuals(feats)
            else:
                res = [torch.zeros_like(f) for f in feats]
        if self.config.use_mf:
            maps = fuse_and_concat(self.feature_fusion, self.residual_fusion, feats, res)
        else:
            maps = [torch.cat([f, d], dim=1) for f, d in zip(feats, res)]
        if self.msa is not None:
            maps = self.msa(maps)
        if self.post_fusion is not None:
            maps = self.post_fusion(maps)
        return maps

    def logits(self, x: Tensor) -> Tensor:
        return self.decoder(self.skips(x))

    def forward(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.logits(x))

    def score_images(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Eval-mode probability maps ``(N, H, W)`` for images ``(N, 3, H, W)``."""
        was_training = self.training
        self.eval()
        out = []
        try:
            with torch.no_grad():
                for start in range(0, len(images), batch_size):
                    chunk = torch.from_numpy(np.asarray(images[start:start + batch_size], dtype=np.float32))
                    out.append(self(chunk)[:, 0].numpy())
        finally:
            self.train(was_training)
        return np.concatenate(out, axis=0) if out else np.zeros((0,) * 3, dtype=np.float32)


def build_model(config: ModelConfig, bank: Optional[PrototypeBank] = None, seed: int = 0) -> PrnModel:
    """Deterministic construction: trainable weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PrnModel(config)
    if bank is not None:
        model.set_bank(bank)
    return model


def image_score(score_map: np.ndarray, top_k: int = 100) -> float:
    """Mean of the ``top_k`` largest pixel scores (all pixels if fewer)."""
    flat = np.asarray(score_map, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("empty score map")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    k = min(top_k, flat.size)
    return float(np.partition(flat, flat.size - k)[flat.size - k:].mean())


def forward(model: PrnModel, image: np.ndarray, source_id: str = "", top_k: Optional[int] = None) -> ScoreMap:
    image = np.asarray(image, dtype=np.float32)
    size = model.config.encoder.input_size
    if image.shape != (3, size, size):
        raise ValueError(f"expected image of shape (3, {size}, {size}), got {image.shape}")
    scores = model.score_images(image[None])[0]
    k = top_k if top_k is not None else model.config.image_top_k
    return ScoreMap(scores, image_score(scores, k), source_id)
