"""Speaker-independent global accent model (utterance-level accent embedding).

Also home of the gradient reversal layer and the cross-entropy primitive
shared with the local accent model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .layers import ConvBlock, l2_normalize, lengths_to_mask, masked_mean

logger = logging.getLogger(__name__)

CE_CLAMP = 1e-12


@dataclass(frozen=True)
class GRLSpec:
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("GRL lambda must be non-negative")


class GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grl(x: torch.Tensor, spec: GRLSpec = GRLSpec()) -> torch.Tensor:
    """Identity on the forward pass; multiplies gradients by ``-lam`` on the way back."""
    return GradientReversal.apply(x, spec.lam)


def cross_entropy(probabilities, target, reduction: str = "sum"):
    """``-log p[target]`` from explicit probabilities.

    ``probabilities`` is ``(N,)`` or ``(B, N)``; batched losses are summed by
    default.  Probabilities below 1e-12 at the target are clamped and logged.
    """
    p = torch.as_tensor(probabilities)
    target = torch.as_tensor(target)
    if p.dim() == 1:
        p = p.unsqueeze(0)
        target = target.reshape(1)
    sums = p.sum(-1)
    if torch.any((sums - 1).abs() > 1e-5):
        raise ValueError("probabilities must sum to 1")
    if torch.any(target < 0) or torch.any(target >= p.shape[-1]):
        raise ValueError("target class out of range")
    picked = p.gather(-1, target.long().unsqueeze(-1)).squeeze(-1)
    if torch.any(picked < CE_CLAMP):
        logger.warning("cross_entropy: target probability below %g clamped", CE_CLAMP)
    losses = -torch.log(picked.clamp_min(CE_CLAMP))
    if reduction == "sum":
        return losses.sum()
    if reduction == "mean":
        return losses.mean()
    if reduction == "none":
        return losses
    raise ValueError(f"unknown reduction {reduction!r}")


def logits_cross_entropy(logits, target, reduction: str = "mean"):
    """Cross-entropy of ``softmax(logits)`` with the same 1e-12 probability floor."""
    log_p = torch.log_softmax(logits, dim=-1).clamp_min(torch.log(torch.tensor(CE_CLAMP)).item())
    return F.nll_loss(log_p, target, reduction=reduction)


@dataclass(frozen=True)
class GlobalAccentConfig:
    n_mels: int = 80
    channels: int = 128
    kernel_size: int = 3
    dropout: float = 0.2
    hidden_dim: int = 128
    embedding_dim: int = 64  # D_G
    n_accents: int = 6
    n_speakers: int = 24
    grl_lambda: float = 1.0


class GlobalAccentEncoder(nn.Module):
    """Two conv blocks -> masked time average -> two FC layers -> L2 norm."""

    def __init__(self, cfg: GlobalAccentConfig):
        super().__init__()
        self.conv1 = ConvBlock(cfg.n_mels, cfg.channels, cfg.kernel_size, cfg.dropout)
        self.conv2 = ConvBlock(cfg.channels, cfg.channels, cfg.kernel_size, cfg.dropout)
        self.fc1 = nn.Linear(cfg.channels, cfg.hidden_dim)
        self.fc2 = nn.Linear(cfg.hidden_dim, cfg.embedding_dim)

    def frame_features(self, mel, mask):
        return self.conv2(self.conv1(mel, mask), mask)

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        if mel.dim() == 2:
            mel = mel.unsqueeze(0)
        if mel.shape[1] < 1:
            raise ValueError("empty mel")
        if lengths is None:
            lengths = torch.full((mel.shape[0],), mel.shape[1], dtype=torch.long)
        mask = lengths_to_mask(lengths, mel.shape[1])
        pooled = masked_mean(self.frame_features(mel, mask), mask)
        return l2_normalize(self.fc2(torch.relu(self.fc1(pooled))))


class SIGAM(nn.Module):
    """Global accent encoder + accent classifier + adversarial speaker classifier."""

    def __init__(self, cfg: GlobalAccentConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = GlobalAccentEncoder(cfg)
        self.accent_classifier = nn.Linear(cfg.embedding_dim, cfg.n_accents)
        self.speaker_classifier = nn.Linear(cfg.embedding_dim, cfg.n_speakers)
        self.grl_spec = GRLSpec(cfg.grl_lambda)

    def encode(self, mel, lengths=None):
        return self.encoder(mel, lengths)

    def accent_logits(self, global_emb):
        return self.accent_classifier(global_emb)

    def classify_accent(self, global_emb):
        return torch.softmax(self.accent_logits(global_emb), dim=-1)

    def speaker_logits(self, global_emb, reverse: bool = True):
        x = grl(global_emb, self.grl_spec) if reverse else global_emb
        return self.speaker_classifier(x)

    def accent_loss(self, global_emb, accent):
        return logits_cross_entropy(self.accent_logits(global_emb), accent)

    def adversarial_speaker_loss(self, global_emb, speaker, reverse: bool = True):
        """Speaker CE through the GRL; the forward value is the plain CE."""
        return logits_cross_entropy(self.speaker_logits(global_emb, reverse), speaker)
