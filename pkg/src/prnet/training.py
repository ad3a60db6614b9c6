"""Loss, batch assembly and the optimisation loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .encoder import extract_batch
from .model import ModelConfig, PrnModel, build_model
from .prototypes import fit_prototypes
from .synth import GenerationError, SynthConfig, estimate_foreground, extended_anomaly, simulated_anomaly

log = logging.getLogger("prnet.train")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    steps: int = 200
    batch_size: int = 16
    focal_alpha: float = 0.5
    focal_gamma: float = 4.0
    loss_lambda: float = 5.0
    seed: int = 0
    mp: bool = True
    msa: bool = True
    mf: bool = True
    ea: bool = True
    hea: bool = True
    hoa: bool = True
    ta: bool = True
    n_seen_anomalies: int = 10
    prototype_ratio: float = 0.1
    kmeans_max_iter: int = 300
    checkpoint_every: int = 0
    dataset_kind: str = "texture"
    beta_range: Tuple[float, float] = (0.2, 0.9)

    def __post_init__(self) -> None:
        if min(self.loss_lambda, self.focal_alpha, self.focal_gamma) <= 0:
            raise ValueError("loss_lambda, focal_alpha and focal_gamma must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        self.beta_range = tuple(self.beta_range)

    def composition(self) -> Dict[str, int]:
        """Per-batch sample counts by kind; 2:1:1 normal/EA/SA by default.

        A disabled strategy hands its slots to the other anomaly family.
        Simulated slots split HEA first, then HOA.
        """
        b = self.batch_size
        n_normal = b // 2
        n_anom = b - n_normal
        sa_on = self.hea or self.hoa
        if not (self.ea or sa_on):
            raise ValueError("at least one anomaly generation strategy must be enabled")
        if self.ea and sa_on:
            n_ea = n_anom // 2
        else:
            n_ea = n_anom if self.ea else 0
        n_sa = n_anom - n_ea
        if self.hea and self.hoa:
            n_hea = (n_sa + 1) // 2
        else:
            n_hea = n_sa if self.hea else 0
        counts = {"normal": n_normal, "EA": n_ea, "HEA": n_hea, "HOA": n_sa - n_hea}
        for kind, flag in (("EA", self.ea), ("HEA", self.hea), ("HOA", self.hoa)):
            if flag and counts[kind] < 1:
                raise ValueError(f"batch_size {b} leaves no slot for enabled strategy {kind}")
        return counts

    def model_config(self, base: Optional[ModelConfig] = None) -> ModelConfig:
        cfg = ModelConfig.from_dict(base.to_dict()) if base else ModelConfig()
        cfg.use_mp, cfg.use_msa, cfg.use_mf = self.mp, self.msa, self.mf
        return cfg

    def synth_config(self) -> SynthConfig:
        return SynthConfig(beta_range=self.beta_range, dataset_kind=self.dataset_kind, use_target_area=self.ta)


# -- loss -----------------------------------------------------------------------

def focal_loss(pred: Tensor, target: Tensor, alpha: float = 0.5, gamma: float = 4.0, eps: float = 1e-6) -> Tensor:
    """Pixel-mean binary focal loss on probabilities; alpha weights the anomalous class."""
    p = pred.clamp(eps, 1 - eps)
    pos = -alpha * target * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha) * (1 - target) * p ** gamma * torch.log(1 - p)
    return (pos + neg).mean()


def total_loss(
    pred: Tensor, target: Tensor, alpha: float = 0.5, gamma: float = 4.0, lam: float = 5.0
) -> Tuple[Tensor, Tensor, Tensor]:
    """SmoothL1 (transition 1) plus ``lam`` times focal loss. Returns (total, smooth_l1, focal)."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and mask {tuple(target.shape)} differ in shape")
    target = target.to(pred.dtype)
    sl1 = F.smooth_l1_loss(pred, target, beta=1.0)
    fl = focal_loss(pred, target, alpha, gamma)
    return sl1 + lam * fl, sl1, fl


# -- batches --------------------------------------------------------------------

@dataclass
class TrainData:
    normals: np.ndarray
    seen: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    textures: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 1, 1), np.float32))
    foregrounds: Optional[List[Optional[np.ndarray]]] = None


@dataclass
class Batch:
    images: np.ndarray
    masks: np.ndarray
    kinds: List[str]
    seeds: List[int]
    betas: List[Optional[float]]

    def manifest(self) -> List[dict]:
        return [{"kind": k, "seed": s, "beta": b} for k, s, b in zip(self.kinds, self.seeds, self.betas)]


def assemble_batch(
    normal_pool: np.ndarray,
    seen_anomaly_pool: Sequence[Tuple[np.ndarray, np.ndarray]],
    texture_pool: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    synth: Optional[SynthConfig] = None,
    foregrounds: Optional[Sequence[Optional[np.ndarray]]] = None,
    max_seen_retries: int = 10,
) -> Batch:
    """Build one batch with the composition of ``config.composition()``.

    Every sample gets its own seed drawn from ``rng``; its generator is
    seeded from that value so samples can be regenerated individually.
    """
    counts = config.composition()
    synth = synth or config.synth_config()
    if len(normal_pool) == 0:
        raise ValueError("normal pool is empty")
    if counts["EA"] and len(seen_anomaly_pool) == 0:
        raise ValueError("extended anomalies requested but the seen-anomaly pool is empty")
    if counts["HEA"] and len(texture_pool) == 0:
        raise ValueError("heterologous anomalies requested but the texture pool is empty")

    images, masks, kinds, seeds, betas = [], [], [], [], []
    h, w = normal_pool.shape[2:]
    for kind in ("normal", "EA", "HEA", "HOA"):
        for _ in range(counts[kind]):
            seed = int(rng.integers(2 ** 32))
            srng = np.random.default_rng(seed)
            i = int(srng.integers(len(normal_pool)))
            normal = normal_pool[i]
            fg = foregrounds[i] if foregrounds is not None else None
            if kind == "normal":
                images.append(normal)
                masks.append(np.zeros((h, w), dtype=np.float32))
                betas.append(None)
            else:
                sample = None
                for _ in range(max_seen_retries):
                    try:
                        if kind == "EA":
                            seen = seen_anomaly_pool[int(srng.integers(len(seen_anomaly_pool)))]
                            sample = extended_anomaly(normal, seen, srng, config=synth, foreground=fg)
                        else:
                            sample = simulated_anomaly(normal, kind, texture_pool, srng, config=synth, foreground=fg)
                        break
                    except GenerationError:
                        continue
                if sample is None:
                    raise GenerationError(f"could not generate a {kind} sample after {max_seen_retries} attempts")
                images.append(sample.image)
                masks.append(sample.mask.astype(np.float32))
                betas.append(sample.beta)
            kinds.append(kind)
            seeds.append(seed)
    return Batch(np.stack(images).astype(np.float32), np.stack(masks), kinds, seeds, betas)


# -- training loop --------------------------------------------------------------

@dataclass
class StepLog:
    step: int
    loss: float
    smoothl1: float
    focal: float
    wall_ms: float

    def line(self) -> str:
        return (
            f"step={self.step} loss={self.loss:.6f} smoothl1={self.smoothl1:.6f} "
            f"focal={self.focal:.6f} wall_ms={self.wall_ms:.1f}"
        )


@dataclass
class TrainResult:
    model: PrnModel
    history: List[StepLog]
    checkpoint: Optional[Path] = None
    config_hash: Optional[str] = None


def _param_groups(model: nn.Module, weight_decay: float) -> List[dict]:
    norm_types = (nn.BatchNorm2d, nn.GroupNorm, nn.LayerNorm)
    no_decay = {id(p) for m in model.modules() if isinstance(m, norm_types) for p in m.parameters(recurse=False)}
    decay = [p for p in model.parameters() if p.requires_grad and id(p) not in no_decay]
    rest = [p for p in model.parameters() if p.requires_grad and id(p) in no_decay]
    return [{"params": decay, "weight_decay": weight_decay}, {"params": rest, "weight_decay": 0.0}]


def prepare_model(config: TrainConfig, data: TrainData, model_config: Optional[ModelConfig] = None) -> PrnModel:
    """Build the model and, with prototypes enabled, fit and freeze the bank."""
    init_seed = int(np.random.SeedSequence([config.seed, 0]).generate_state(1)[0])
    model = build_model(config.model_config(model_config), seed=init_seed)
    if config.mp:
        feats = extract_batch(model.encoder, list(data.normals))
        bank = fit_prototypes(feats, config.prototype_ratio, config.kmeans_max_iter, seed=config.seed)
        model.set_bank(bank)
        log.info("prototypes: K=%s, kmeans iterations per scale %s", bank.sizes, bank.n_iter)
    return model


def train(
    config: TrainConfig,
    data: TrainData,
    model_config: Optional[ModelConfig] = None,
    out_path=None,
    extra_config: Optional[dict] = None,
) -> TrainResult:
    """Fit prototypes once, then run ``config.steps`` Adam steps on generated batches.

    Raises:
        TrainingError: on a non-finite loss, with the step and batch manifest.
    """
    from .checkpoint import save_checkpoint

    if config.ea and len(data.seen) == 0:
        log.warning("no seen anomalies available: extended anomalies disabled")
        config = TrainConfig(**{**asdict(config), "ea": False})
    model = prepare_model(config, data, model_config)
    batch_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    synth = config.synth_config()
    foregrounds = data.foregrounds
    if foregrounds is None and config.dataset_kind == "object":
        foregrounds = [estimate_foreground(im) for im in data.normals]

    optimizer = torch.optim.Adam(_param_groups(model, config.weight_decay), lr=config.lr)
    history: List[StepLog] = []
    snapshot = {"train": asdict(config)}
    if extra_config:
        snapshot.update(extra_config)
    cfg_hash = None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model.train()
        for step in range(1, config.steps + 1):
            t0 = time.perf_counter()
            batch = assemble_batch(data.normals, data.seen, data.textures, config, batch_rng, synth, foregrounds)
            images = torch.from_numpy(batch.images)
            masks = torch.from_numpy(batch.masks)[:, None]
            pred = model(images)
            loss, sl1, fl = total_loss(pred, masks, config.focal_alpha, config.focal_gamma, config.loss_lambda)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at step {step}; batch: {batch.manifest()}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            entry = StepLog(step, loss.item(), sl1.item(), fl.item(), (time.perf_counter() - t0) * 1000)
            history.append(entry)
            log.info(entry.line())
            if out_path and config.checkpoint_every and step % config.checkpoint_every == 0 and step < config.steps:
                save_checkpoint(model, Path(out_path).with_suffix(f".step{step}.ckpt"), snapshot)
    model.eval()
    out = None
    if out_path:
        out = Path(out_path)
        cfg_hash = save_checkpoint(model, out, snapshot, {"final_loss": history[-1].loss if history else None})
    return TrainResult(model, history, out, cfg_hash)


def window_means(losses: Sequence[float], window: int = 10) -> List[float]:
    losses = list(losses)
    return [float(np.mean(losses[i:i + window])) for i in range(0, len(losses) - window + 1, window)]
