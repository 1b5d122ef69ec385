"""Scalar training objectives and the running class-center state.

All probability logs are clamped at EPS = 1e-8. Losses accept either a single
item or a leading batch dimension and are invariant to batch order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core_types import CPMNConfig, Phase

EPS = 1e-8
_ROW_SUM_TOL = 1e-5


@dataclass(frozen=True)
class ClassCenters:
    """Per-pathway running centroids of dense decoder features, one per class."""

    centers: torch.Tensor  # (2, C)
    center_lr: float = 0.5
    pathway: Phase = Phase.NCT

    def __post_init__(self) -> None:
        if self.centers.ndim != 2 or self.centers.shape[0] != 2:
            raise ValueError(f"centers must have shape (2, C), got {tuple(self.centers.shape)}")
        if not torch.isfinite(self.centers).all():
            raise ValueError("centers must be finite")
        if not 0.0 < self.center_lr <= 1.0:
            raise ValueError("center_lr must lie in (0, 1]")


def zero_centers(
    num_channels: int, pathway: Phase, center_lr: float = 0.5, dtype: torch.dtype = torch.float32
) -> ClassCenters:
    return ClassCenters(
        centers=torch.zeros(2, num_channels, dtype=dtype), center_lr=center_lr, pathway=pathway
    )


@dataclass(frozen=True)
class LossBreakdown:
    """One training step's components; total = clas + seg + l1*kl + l2*alig + l3*disc."""

    clas: float
    seg: float
    kl: float
    alig: float
    disc: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "clas": self.clas,
            "seg": self.seg,
            "kl": self.kl,
            "alig": self.alig,
            "disc": self.disc,
            "total": self.total,
        }


def _as_prob_batch(p: torch.Tensor, name: str) -> torch.Tensor:
    if p.ndim == 1:
        p = p.unsqueeze(0)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ValueError(f"{name} must be a batch of 2-class probability rows, got {tuple(p.shape)}")
    sums = p.sum(dim=1)
    if not torch.all((sums - 1.0).abs() <= _ROW_SUM_TOL):
        raise ValueError(f"{name} rows must sum to 1 within {_ROW_SUM_TOL}")
    return p


def kl_mutual_loss(p2: torch.Tensor, p1: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of sum_m p2^m log(p2^m / p1^m).

    p1 is treated as a constant: only p2's source parameters receive gradient.
    """
    p2 = _as_prob_batch(p2, "p2")
    p1 = _as_prob_batch(p1, "p1").detach()
    p2c = p2.clamp_min(EPS)
    p1c = p1.clamp_min(EPS)
    return (p2c * (p2c.log() - p1c.log())).sum(dim=1).mean()


def bce_class_loss(class_probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy on probability rows: mean of -log p[label]."""
    probs = _as_prob_batch(class_probs, "class_probs")
    labels = labels.reshape(-1).long()
    if labels.shape[0] != probs.shape[0]:
        raise ValueError("labels and class_probs batch sizes differ")
    if not torch.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    picked = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    return -(picked.clamp_min(EPS).log()).mean()


def _as_dense_batch(
    seg_input: torch.Tensor, mask: torch.Tensor, channels_first_name: str
) -> tuple[torch.Tensor, torch.Tensor]:
    if seg_input.ndim == 4:
        seg_input = seg_input.unsqueeze(0)
    if mask.ndim == 3:
        mask = mask.unsqueeze(0)
    if seg_input.ndim != 5 or mask.ndim != 4:
        raise ValueError(
            f"{channels_first_name} must be (B, C, D, H, W) with mask (B, D, H, W); "
            f"got {tuple(seg_input.shape)} and {tuple(mask.shape)}"
        )
    if seg_input.shape[0] != mask.shape[0] or seg_input.shape[2:] != mask.shape[1:]:
        raise ValueError(
            f"extent mismatch: {channels_first_name} {tuple(seg_input.shape)} vs mask {tuple(mask.shape)}"
        )
    mask = mask.long()
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("mask values must be 0 or 1")
    return seg_input, mask


def focal_loss(
    seg_logits: torch.Tensor, mask: torch.Tensor, gamma: float, alpha_f: float
) -> torch.Tensor:
    """Voxel-mean focal loss: -alpha_t (1 - p_t)^gamma log p_t.

    alpha_t is ``alpha_f`` on foreground voxels and ``1 - alpha_f`` on
    background; at gamma = 0 this reduces to alpha-weighted cross-entropy.
    """
    seg_logits, mask = _as_dense_batch(seg_logits, mask, "seg_logits")
    if seg_logits.shape[1] != 2:
        raise ValueError(f"seg_logits must have 2 channels, got {seg_logits.shape[1]}")
    probs = torch.softmax(seg_logits, dim=1)
    p_t = probs.gather(1, mask.unsqueeze(1)).squeeze(1).clamp_min(EPS)
    alpha_t = torch.where(mask == 1, torch.as_tensor(alpha_f, dtype=p_t.dtype), 1.0 - alpha_f)
    return (-alpha_t * (1.0 - p_t) ** gamma * p_t.log()).mean()


def dense_center_loss(
    seg_feature: torch.Tensor, mask: torch.Tensor, centers: ClassCenters
) -> torch.Tensor:
    """Half the sum over classes of the mean squared voxel-to-center distance.

    Per voxel of class k the gradient w.r.t. its feature is (x - c_k) / N_k.
    A class absent from the batch contributes zero. Centers are constants
    here; they move only through :func:`update_centers`.
    """
    seg_feature, mask = _as_dense_batch(seg_feature, mask, "seg_feature")
    c = seg_feature.shape[1]
    if centers.centers.shape[1] != c:
        raise ValueError(
            f"channel mismatch: feature has {c} channels, centers have {centers.centers.shape[1]}"
        )
    feats = seg_feature.permute(0, 2, 3, 4, 1).reshape(-1, c)
    flat_mask = mask.reshape(-1)
    total = feats.new_zeros(())
    for k in (0, 1):
        sel = flat_mask == k
        if not bool(sel.any()):
            continue
        center_k = centers.centers[k].detach().to(feats.dtype)
        diff = feats[sel] - center_k
        total = total + (diff**2).sum(dim=1).mean()
    return 0.5 * total


def update_centers(
    centers: ClassCenters, seg_feature: torch.Tensor, mask: torch.Tensor
) -> ClassCenters:
    """Moving-average center update, outside gradient propagation.

    For each class k present in the batch:
        delta_k = sum_{voxels j of class k} (c_k - x_j) / (1 + N_k)
        c_k    <- c_k - center_lr * delta_k
    Classes with no voxels in the batch are left unchanged.
    """
    seg_feature, mask = _as_dense_batch(seg_feature, mask, "seg_feature")
    c = seg_feature.shape[1]
    if centers.centers.shape[1] != c:
        raise ValueError(
            f"channel mismatch: feature has {c} channels, centers have {centers.centers.shape[1]}"
        )
    with torch.no_grad():
        feats = seg_feature.detach().permute(0, 2, 3, 4, 1).reshape(-1, c)
        flat_mask = mask.reshape(-1)
        new = centers.centers.clone()
        for k in (0, 1):
            sel = flat_mask == k
            n_k = int(sel.sum())
            if n_k == 0:
                continue
            c_k = centers.centers[k].to(feats.dtype)
            delta = (n_k * c_k - feats[sel].sum(dim=0)) / (1.0 + n_k)
            new[k] = (c_k - centers.center_lr * delta).to(new.dtype)
    return ClassCenters(centers=new, center_lr=centers.center_lr, pathway=centers.pathway)


def total_loss(
    clas: float, seg: float, kl: float, alig: float, disc: float, config: CPMNConfig
) -> LossBreakdown:
    """Weighted total; rejects NaN components by name."""
    parts = {"clas": clas, "seg": seg, "kl": kl, "alig": alig, "disc": disc}
    for name, value in parts.items():
        if math.isnan(float(value)):
            raise ValueError(f"NaN in loss component '{name}'")
    total = (
        float(clas)
        + float(seg)
        + config.lambda1 * float(kl)
        + config.lambda2 * float(alig)
        + config.lambda3 * float(disc)
    )
    return LossBreakdown(
        clas=float(clas), seg=float(seg), kl=float(kl), alig=float(alig), disc=float(disc), total=total
    )
