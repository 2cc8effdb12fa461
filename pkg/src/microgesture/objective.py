"""Training objective: cross-entropy plus a weighted semantic embedding loss.

total = class_loss + alpha * emb_loss, where class_loss is the standard
cross-entropy on the classifier logits and emb_loss is the squared distance
between the projected embedding and the label's word embedding. The squared
norm is a sum over dimensions by default ("sum"); "mean" divides by the
dimension instead. Both reduce over the batch by averaging.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .pose_io import ValidationError

EMB_REDUCTIONS = ("sum", "mean")

DEFAULT_ALPHA = 20.0


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss values for one step; total == class_loss + alpha * emb_loss."""

    class_loss: float
    emb_loss: float
    alpha: float
    total: float

    @classmethod
    def compose(cls, class_loss: float, emb_loss: float, alpha: float) -> "LossBreakdown":
        class_loss, emb_loss, alpha = float(class_loss), float(emb_loss), float(alpha)
        return cls(class_loss=class_loss, emb_loss=emb_loss, alpha=alpha,
                   total=class_loss + alpha * emb_loss)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 1 else x


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean -log softmax(logits)[label], via log-sum-exp for stability."""
    logits = _as_batch(logits)
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device).reshape(-1)
    n_classes = logits.shape[-1]
    if labels.numel() != logits.shape[0]:
        raise ValidationError(f"got {labels.numel()} labels for {logits.shape[0]} logit rows")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError(f"label out of range for {n_classes} classes")
    lse = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return (lse - picked).mean()


def embedding_loss(z_emb: torch.Tensor, e_emb: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Squared distance ||z_emb - e_emb||^2 per sample, averaged over the batch."""
    if reduction not in EMB_REDUCTIONS:
        raise ValidationError(f"reduction must be one of {EMB_REDUCTIONS}, got {reduction!r}")
    z_emb, e_emb = _as_batch(z_emb), _as_batch(e_emb)
    if z_emb.shape != e_emb.shape:
        raise ValidationError(f"embedding shape mismatch: {tuple(z_emb.shape)} vs {tuple(e_emb.shape)}")
    sq = (z_emb - e_emb).pow(2)
    per_sample = sq.sum(dim=-1) if reduction == "sum" else sq.mean(dim=-1)
    return per_sample.mean()


def total_loss(
    logits: torch.Tensor,
    labels,
    z_emb: torch.Tensor,
    e_matrix: torch.Tensor,
    alpha: float = DEFAULT_ALPHA,
    reduction: str = "sum",
) -> tuple[torch.Tensor, LossBreakdown]:
    """Combined objective; returns the differentiable scalar and its breakdown.

    e_matrix is the (n_classes, dim) label embedding matrix; the target row
    for each sample is selected by its label.
    """
    if alpha < 0:
        raise ValidationError(f"alpha must be >= 0, got {alpha}")
    labels_t = torch.as_tensor(labels, dtype=torch.long, device=logits.device).reshape(-1)
    class_term = cross_entropy(logits, labels_t)
    if labels_t.numel() and labels_t.max() >= e_matrix.shape[0]:
        raise ValidationError(f"label out of range for embedding matrix with {e_matrix.shape[0]} rows")
    emb_term = embedding_loss(_as_batch(z_emb), e_matrix[labels_t], reduction=reduction)
    total = class_term + alpha * emb_term
    return total, LossBreakdown.compose(class_term.item(), emb_term.item(), alpha)
