"""Multi-channel fusion of encoded representations.

Given the per-channel encoder outputs W1 (reference) and W2 (auxiliary),
the channel-decorrelation path computes, per latent dimension j:

    phi[j] = <w1[j], w2[j]> / (||w1[j]|| * ||w2[j]||)   rows zero-meaned
    p[j]   = exp(phi[j]) / (e + exp(phi[j]))
    s[j]   = 1 - p[j]
    Wcd    = W2 * s (s broadcast across frames)

so the auxiliary channel is reweighted toward what it does NOT share with
the reference channel. The correlation variant keeps p instead of s. All
functions are differentiable and accept an optional leading batch axis.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ConvBlock

# Guards the cosine denominator so an all-constant (silent) row gives
# phi = 0 instead of NaN; applied under the square root so both the
# forward value and the gradient stay finite.
COSINE_EPS = 1e-8


def row_cosine(w1: torch.Tensor, w2: torch.Tensor) -> torch.Tensor:
    """Per-row cosine similarity of two encoded representations.

    Rows are zero-meaned before the inner product. Input shape (..., N, T),
    output (..., N) with entries in [-1, 1].
    """
    if w1.shape != w2.shape:
        raise ValueError(f"shape mismatch: {tuple(w1.shape)} vs {tuple(w2.shape)}")
    if w1.shape[-1] < 2:
        raise ValueError("need at least 2 frames per row")
    a = w1 - w1.mean(dim=-1, keepdim=True)
    b = w2 - w2.mean(dim=-1, keepdim=True)
    dot = (a * b).sum(dim=-1)
    energy = (a * a).sum(dim=-1) * (b * b).sum(dim=-1)
    return dot / torch.sqrt(energy + COSINE_EPS**2)


def pairwise_softmax(phi: torch.Tensor) -> torch.Tensor:
    """Similarity probabilities p = exp(phi) / (e + exp(phi)).

    The denominator constant e comes from softmax against an all-ones
    auxiliary vector (the self-similarity of the reference channel), so
    phi = 1 maps to exactly 0.5.
    """
    if torch.isnan(phi).any():
        raise ValueError("similarity vector contains NaN")
    # exp(phi) / (e + exp(phi)) == sigmoid(phi - 1), computed stably
    return torch.sigmoid(phi - 1.0)


def decorrelation_scores(p: torch.Tensor, frames: int) -> torch.Tensor:
    """Complement scores s = 1 - p, repeated across `frames` columns."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    s = 1.0 - p
    return s.unsqueeze(-1).expand(*p.shape, frames)


def channel_decorrelate(w1: torch.Tensor, w2: torch.Tensor) -> torch.Tensor:
    """Inter-channel differential representation Wcd = W2 * (1 - p)."""
    p = pairwise_softmax(row_cosine(w1, w2))
    return w2 * (1.0 - p).unsqueeze(-1)


def channel_correlate(w1: torch.Tensor, w2: torch.Tensor) -> torch.Tensor:
    """Correlation-weighted variant Wcc = W2 * p (the CC ablation)."""
    p = pairwise_softmax(row_cosine(w1, w2))
    return w2 * p.unsqueeze(-1)


def adapt(rep: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
    """Multiplicative speaker adaptation: scale row j of rep by emb[j]."""
    if emb.shape[-1] != rep.shape[-2]:
        raise ValueError(
            f"embedding length {emb.shape[-1]} != representation rows {rep.shape[-2]}"
        )
    return rep * emb.unsqueeze(-1)


def parallel_fuse(reps, emb: torch.Tensor | None = None) -> torch.Tensor:
    """Sum per-channel encoder outputs, optionally speaker-adapted.

    `reps` is a sequence of >= 2 equally-shaped representations. When an
    embedding is given the summed representation passes through `adapt`.
    """
    reps = list(reps)
    if len(reps) < 2:
        raise ValueError("parallel fusion needs at least 2 representations")
    shape = reps[0].shape
    for r in reps[1:]:
        if r.shape != shape:
            raise ValueError("all representations must share one shape")
    fused = torch.stack(reps, dim=0).sum(dim=0)
    if emb is not None:
        fused = adapt(fused, emb)
    return fused


def cd_fuse(
    w1: torch.Tensor,
    w2: torch.Tensor,
    emb: torch.Tensor | None = None,
) -> torch.Tensor:
    """Reference representation plus (optionally adapted) decorrelation.

    Returns W1 + adapt(Wcd, emb) when an embedding is given, else
    W1 + Wcd. This sum is the fused representation fed to the mask
    estimator.
    """
    wcd = channel_decorrelate(w1, w2)
    if emb is not None:
        wcd = adapt(wcd, emb)
    return w1 + wcd


class IpdFusion(nn.Module):
    """Fuses hand-crafted phase-difference features into the masking path.

    The feature matrix runs through a 1-d conv encoder, nearest-neighbor
    frame upsampling to the target frame count, and one conv block; the
    result is concatenated channel-wise with the adapted representation
    and projected back to `channels` rows by a 1x1 conv.
    """

    def __init__(self, num_bins: int, channels: int, hidden: int, kernel: int = 3):
        super().__init__()
        self.encoder = nn.Conv1d(num_bins, channels, 3, padding=1, bias=False)
        self.block = ConvBlock(channels, hidden, kernel, dilation=1)
        self.project = nn.Conv1d(2 * channels, channels, 1, bias=False)

    def forward(self, adapted_rep: torch.Tensor, ipd: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.encoder(ipd))
        frames = adapted_rep.shape[-1]
        idx = (
            torch.arange(frames, device=x.device) * x.shape[-1]
        ) // frames
        x = self.block(x[..., idx])
        if x.shape[-1] != adapted_rep.shape[-1]:
            raise ValueError(
                f"frame misalignment after upsampling: {x.shape[-1]} vs "
                f"{adapted_rep.shape[-1]}"
            )
        return self.project(torch.cat([adapted_rep, x], dim=-2))
