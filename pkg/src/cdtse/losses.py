"""Multi-task training objective: negative SiSDR plus weighted speaker
cross-entropy over the embedding classifier.

    loss = -SiSDR(target, estimate) + alpha * CE(label, softmax(W @ emb))

Both terms are reduced by the mean over the batch so alpha is independent
of batch size. The classifier head is bias-free and only evaluated during
training; inference never touches it.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .metrics import sisdr_tensor


@dataclass(frozen=True)
class LossBreakdown:
    """Total loss and its two components (0-dim tensors; alpha a float)."""

    total: torch.Tensor
    neg_sisdr: torch.Tensor
    ce: torch.Tensor
    alpha: float


def speaker_logits(emb: torch.Tensor, classifier_weight: torch.Tensor) -> torch.Tensor:
    """Bias-free affine map of embeddings to per-speaker logits.

    Args:
        emb (torch.Tensor): Speaker embedding(s), shape (..., N).
        classifier_weight (torch.Tensor): Weight matrix, (num_speakers, N).

    Returns:
        torch.Tensor: Logits of shape (..., num_speakers). The softmax is
        applied inside the cross-entropy, not here.
    """
    if classifier_weight.dim() != 2 or classifier_weight.shape[1] != emb.shape[-1]:
        raise ValueError(
            f"classifier weight {tuple(classifier_weight.shape)} does not match "
            f"embedding length {emb.shape[-1]}"
        )
    return emb @ classifier_weight.T


def multitask_loss(
    target: torch.Tensor,
    estimate: torch.Tensor,
    emb: torch.Tensor,
    labels: torch.Tensor,
    classifier_weight: torch.Tensor,
    alpha: float,
) -> LossBreakdown:
    """Reconstruction + speaker-identification loss for a batch.

    Args:
        target (torch.Tensor): Ground truth waveforms, (batch, samples).
        estimate (torch.Tensor): Estimated waveforms, same shape.
        emb (torch.Tensor): Speaker embeddings, (batch, N).
        labels (torch.Tensor): Integer speaker indices, (batch,).
        classifier_weight (torch.Tensor): (num_speakers, N) weight matrix.
        alpha (float): Weight of the cross-entropy term.

    Returns:
        LossBreakdown: total = neg_sisdr + alpha * ce.
    """
    if target.shape != estimate.shape:
        raise ValueError(
            f"length mismatch: target {tuple(target.shape)} vs "
            f"estimate {tuple(estimate.shape)}"
        )
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    labels = torch.as_tensor(labels, dtype=torch.long)
    num_speakers = classifier_weight.shape[0]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_speakers):
        raise ValueError(
            f"invalid speaker label: expected range [0, {num_speakers}), "
            f"got {labels.min().item()}..{labels.max().item()}"
        )
    neg_sisdr = -sisdr_tensor(target, estimate).mean()
    ce = F.cross_entropy(speaker_logits(emb, classifier_weight), labels)
    total = neg_sisdr + alpha * ce
    return LossBreakdown(total=total, neg_sisdr=neg_sisdr, ce=ce, alpha=float(alpha))
