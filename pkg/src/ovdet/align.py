"""Region-text and image-text contrastive objectives for pre-training."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class AlignConfig:
    tau: float = 0.07
    image_loss_weight: float = 1.0
    negatives: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ValueError(f"tau must be finite and positive, got {self.tau}")
        if self.image_loss_weight < 0:
            raise ValueError("image_loss_weight must be >= 0")


@dataclass
class AlignBatch:
    region_features: torch.Tensor  # (N, d)
    positives: torch.Tensor  # (N,) indices into candidates
    candidates: torch.Tensor  # (L, d), frozen text side
    image_features: torch.Tensor | None = None  # (B, d)
    text_features: torch.Tensor | None = None  # (B, d)

    def __post_init__(self):
        self.positives = torch.as_tensor(self.positives, dtype=torch.long)
        if self.region_features.ndim != 2 or self.region_features.shape[0] < 1:
            raise ValueError("region_features must be (N, d) with N >= 1")
        if self.candidates.ndim != 2 or self.candidates.shape[0] < 1:
            raise ValueError("candidates must be (L, d) with L >= 1")
        if self.positives.shape != (self.region_features.shape[0],):
            raise ValueError("need one positive index per region")
        L = self.candidates.shape[0]
        if self.positives.numel() and (self.positives.min() < 0 or self.positives.max() >= L):
            raise ValueError(f"positive indices must lie in [0, {L})")


def _check_finite(*tensors):
    for t in tensors:
        if t is not None and not torch.isfinite(t).all():
            raise ValueError("non-finite values in contrastive loss inputs")


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).T


def region_contrastive_loss(batch: AlignBatch, config: AlignConfig) -> torch.Tensor:
    """Mean over regions of -log softmax_l(S(v_i, t_l) / tau) at the positive.

    The candidate side is detached: text prototypes never receive gradient.
    """
    _check_finite(batch.region_features, batch.candidates)
    logits = cosine_matrix(batch.region_features, batch.candidates.detach()) / config.tau
    return F.cross_entropy(logits, batch.positives, reduction="mean")


def image_contrastive_loss(image_features: torch.Tensor, text_features: torch.Tensor, config: AlignConfig) -> torch.Tensor:
    """Symmetric in-batch InfoNCE (image->text and text->image, averaged)."""
    if image_features.ndim != 2 or image_features.shape[0] == 0:
        raise ValueError("image_features must be (B, d) with B >= 1")
    if image_features.shape != text_features.shape:
        raise ValueError("image and text features must have matching shapes")
    _check_finite(image_features, text_features)
    logits = cosine_matrix(image_features, text_features.detach()) / config.tau
    target = torch.arange(logits.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def pretrain_loss(batch: AlignBatch, config: AlignConfig) -> dict[str, torch.Tensor]:
    """Region term plus weighted image term; returns the components and ``total``."""
    region = region_contrastive_loss(batch, config)
    if batch.image_features is None or batch.text_features is None:
        raise ValueError("pretrain_loss needs image and text features")
    image = image_contrastive_loss(batch.image_features, batch.text_features, config)
    return {"region": region, "image": image, "total": region + config.image_loss_weight * image}


def sample_candidates(
    positive_rows: torch.Tensor,
    vocabulary: torch.Tensor,
    negatives: int,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Candidate set = the distinct positive rows plus sampled vocabulary rows.

    ``positive_rows`` are integer row ids into ``vocabulary``. With
    ``negatives`` <= 0 the whole vocabulary is used. Returns (candidates,
    positive indices into candidates).
    """
    V = vocabulary.shape[0]
    if negatives <= 0 or negatives >= V:
        return vocabulary, positive_rows.clone()
    present = torch.unique(positive_rows, sorted=True)
    pool = torch.ones(V, dtype=torch.bool)
    pool[present] = False
    others = torch.nonzero(pool).squeeze(1)
    k = min(negatives, others.numel())
    pick = others[torch.randperm(others.numel(), generator=generator)[:k]]
    rows = torch.cat([present, torch.sort(pick).values])
    remap = {int(r): i for i, r in enumerate(rows)}
    pos = torch.tensor([remap[int(r)] for r in positive_rows], dtype=torch.long)
    return vocabulary[rows], pos
