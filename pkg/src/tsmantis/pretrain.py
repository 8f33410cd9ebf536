"""Contrastive pre-training with RandomCropResize views and an InfoNCE objective."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .autograd import AdamW, LrSchedule, Tensor, as_tensor, cross_entropy, l2_norm, lr_at
from .model import MantisEncoder, Projector
from .preprocessing import resize_linear

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-8


@dataclass
class AugmentConfig:
    crop_min: float = 0.0
    crop_max: float = 0.20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.crop_min <= self.crop_max < 1.0:
            raise ValueError(f"need 0 <= crop_min <= crop_max < 1, got "
                             f"{self.crop_min}, {self.crop_max}")


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    batch_size: int = 64
    epochs: int = 100
    lr: float = 2e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("contrastive batches need at least 2 samples")


def random_crop_resize(x: np.ndarray, crop: float, rng: np.random.Generator) -> np.ndarray:
    """Keep a contiguous ``round((1 - crop) * L)`` window at a random start, resize back to L."""
    if not 0.0 <= crop < 1.0:
        raise ValueError(f"crop fraction must lie in [0, 1), got {crop}")
    x = np.asarray(x, dtype=np.float64)
    length = x.shape[-1]
    keep = max(2, int(round((1.0 - crop) * length)))
    start = int(rng.integers(0, length - keep + 1))
    return resize_linear(x[..., start:start + keep], length)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / ((np.linalg.norm(a) + COSINE_EPS) * (np.linalg.norm(b) + COSINE_EPS)))


def pairwise_similarities(view1, view2) -> Tensor:
    """``(b, b)`` cosine similarities between rows of ``view1`` and rows of ``view2``."""
    view1, view2 = as_tensor(view1), as_tensor(view2)
    if view1.shape != view2.shape or view1.ndim != 2:
        raise ValueError(f"views must be matching (b, q) matrices, got {view1.shape} "
                         f"and {view2.shape}")
    u = view1 / (l2_norm(view1, axis=1) + COSINE_EPS)
    v = view2 / (l2_norm(view2, axis=1) + COSINE_EPS)
    return u @ v.T


def info_nce_loss(sims, temperature: float = 0.1) -> Tensor:
    """Mean cross-entropy of each similarity row (scaled by 1/T) against its own index."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    sims = as_tensor(sims)
    return cross_entropy(sims * (1.0 / temperature), np.arange(sims.shape[0]))


def _sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    # one stream per (run, epoch, sample) so draws do not depend on batching
    return np.random.default_rng([seed, epoch, index])


def augment_pair(x: np.ndarray, indices: np.ndarray, epoch: int,
                 augment: AugmentConfig) -> tuple:
    view1 = np.empty_like(x, dtype=np.float64)
    view2 = np.empty_like(x, dtype=np.float64)
    for row, idx in enumerate(indices):
        rng = _sample_rng(augment.seed, epoch, int(idx))
        c1, c2 = rng.uniform(augment.crop_min, augment.crop_max, size=2)
        view1[row] = random_crop_resize(x[row], c1, rng)
        view2[row] = random_crop_resize(x[row], c2, rng)
    return view1, view2


def pretrain_epoch(model: MantisEncoder, projector: Projector, series: np.ndarray,
                   config: ContrastiveConfig, optimizer: AdamW, epoch: int = 0,
                   augment: Optional[AugmentConfig] = None) -> float:
    """One pass over ``series`` (``(n, seq_len)`` univariate channels); returns mean batch loss."""
    augment = augment or AugmentConfig(seed=config.seed)
    n = len(series)
    if n == 0:
        raise ValueError("empty pre-training set")
    order = np.random.default_rng([config.seed, epoch]).permutation(n)
    dropout_rng = np.random.default_rng([config.seed, epoch, 1 << 30])
    dtype = model.tokenizer.fusion.weight.dtype
    losses: List[float] = []
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        if len(idx) < 2:
            logger.warning("skipping a batch of size %d: contrastive loss is degenerate", len(idx))
            continue
        v1, v2 = augment_pair(series[idx], idx, epoch, augment)
        optimizer.zero_grad()
        both = model(Tensor(np.concatenate([v1, v2]), dtype=dtype), train=True, rng=dropout_rng)
        proj = projector(both)
        b = len(idx)
        loss = info_nce_loss(pairwise_similarities(proj[:b], proj[b:]), config.temperature)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.data))
    return float(np.mean(losses)) if losses else float("nan")


def pretrain(model: MantisEncoder, series: np.ndarray, config: ContrastiveConfig,
             projector: Optional[Projector] = None, augment: Optional[AugmentConfig] = None,
             callback: Optional[Callable[[int, float], None]] = None):
    """Run ``config.epochs`` epochs under AdamW and the warm-up cosine schedule.

    ``series`` is ``(n, seq_len)``; multichannel data should be flattened to
    independent channels first.  Returns ``(projector, losses)``.
    """
    cfg = model.config
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise ValueError(f"expected (n, length) channels, got {series.shape}")
    if series.shape[1] != cfg.seq_len:
        series = resize_linear(series, cfg.seq_len)
    projector = projector or Projector(cfg.dim, cfg.proj_dim, seed=config.seed + 1)
    if projector.parameters()[0].dtype != model.parameters()[0].dtype:
        projector.astype(model.parameters()[0].dtype)
    optimizer = AdamW(model.parameters() + projector.parameters(), lr=config.lr,
                      weight_decay=config.weight_decay)
    schedule = LrSchedule(config.lr, config.epochs, min(config.warmup_epochs,
                                                         max(config.epochs - 1, 0)))
    losses = []
    for epoch in range(config.epochs):
        optimizer.lr = lr_at(schedule, epoch)
        loss = pretrain_epoch(model, projector, series, config, optimizer, epoch, augment)
        losses.append(loss)
        logger.info("pretrain epoch %d loss %.6f lr %.3g", epoch, loss, optimizer.lr)
        if callback is not None:
            callback(epoch, loss)
    return projector, losses
