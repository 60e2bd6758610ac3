"""Speaker-independent local accent model: one unit-norm accent vector per phoneme."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .accent_global import GRLSpec, grl, logits_cross_entropy
from .layers import ConvBlock, l2_normalize, lengths_to_mask, run_rnn

Boundaries = Sequence[tuple[int, int]]


def pooling_matrix(boundaries: Boundaries, n_frames: int, dtype=torch.float32) -> torch.Tensor:
    """``(P, n_frames)`` matrix whose row ``p`` averages frames ``[start_p, end_p)``."""
    mat = torch.zeros(len(boundaries), n_frames, dtype=dtype)
    for p, (start, end) in enumerate(boundaries):
        if end <= start:
            raise ValueError(f"empty segment ({start}, {end}) at phoneme {p}")
        if start < 0 or end > n_frames:
            raise ValueError(f"segment ({start}, {end}) outside {n_frames} frames")
        mat[p, start:end] = 1.0 / (end - start)
    return mat


def pool_by_boundaries(frames: torch.Tensor, boundaries: Boundaries) -> torch.Tensor:
    """Average ``frames`` (T, C) within each boundary interval -> (P, C)."""
    frames = torch.as_tensor(frames)
    return pooling_matrix(boundaries, frames.shape[0], frames.dtype) @ frames


def batch_pooling_matrix(boundaries: Sequence[Boundaries], max_phonemes: int, max_frames: int,
                         dtype=torch.float32) -> torch.Tensor:
    out = torch.zeros(len(boundaries), max_phonemes, max_frames, dtype=dtype)
    for b, bounds in enumerate(boundaries):
        m = pooling_matrix(bounds, max_frames, dtype)
        out[b, : m.shape[0]] = m
    return out


@dataclass(frozen=True)
class LocalAccentConfig:
    n_mels: int = 80
    channels: int = 128
    kernel_size: int = 3
    dropout: float = 0.2
    rnn_dim: int = 128
    embedding_dim: int = 8  # D_L
    classifier_dim: int = 64
    n_accents: int = 6
    n_speakers: int = 24
    grl_lambda: float = 1.0
    identity_recurrence: bool = False


class LocalAccentEncoder(nn.Module):
    """Conv blocks -> GRU over frames -> boundary pooling -> FC -> per-row L2 norm."""

    def __init__(self, cfg: LocalAccentConfig):
        super().__init__()
        self.cfg = cfg
        self.conv1 = ConvBlock(cfg.n_mels, cfg.channels, cfg.kernel_size, cfg.dropout)
        self.conv2 = ConvBlock(cfg.channels, cfg.channels, cfg.kernel_size, cfg.dropout)
        if cfg.identity_recurrence:
            self.rnn = None
            proj_in = cfg.channels
        else:
            self.rnn = nn.GRU(cfg.channels, cfg.rnn_dim, batch_first=True)
            proj_in = cfg.rnn_dim
        self.proj = nn.Linear(proj_in, cfg.embedding_dim)

    def forward(self, mel, boundaries, lengths=None, pool=None):
        """``mel`` is (T, 80) with one boundary list, or (B, T, 80) with a list per item.

        Returns (P, D_L) or (B, P_max, D_L); padded phoneme rows are zero.
        """
        single = mel.dim() == 2
        if single:
            mel = mel.unsqueeze(0)
            boundaries = [boundaries]
        B, T, _ = mel.shape
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        for b, bounds in enumerate(boundaries):
            if not bounds or bounds[-1][1] != int(lengths[b]):
                raise ValueError(
                    f"boundaries end at {bounds[-1][1] if bounds else 0} but mel has "
                    f"{int(lengths[b])} frames"
                )
        mask = lengths_to_mask(lengths, T)
        x = self.conv2(self.conv1(mel, mask), mask)
        if self.rnn is not None:
            x, _ = run_rnn(self.rnn, x, lengths)
        n_ph = torch.tensor([len(bd) for bd in boundaries])
        if pool is None:
            pool = batch_pooling_matrix(boundaries, int(n_ph.max()), T, x.dtype)
        rows = l2_normalize(self.proj(torch.bmm(pool, x)))
        rows = rows * lengths_to_mask(n_ph, rows.shape[1]).unsqueeze(-1).to(rows.dtype)
        return rows[0] if single else rows


class SequenceAccentClassifier(nn.Module):
    """LSTM over the phoneme-level embeddings; final state -> FC -> accent logits."""

    def __init__(self, cfg: LocalAccentConfig):
        super().__init__()
        self.lstm = nn.LSTM(cfg.embedding_dim, cfg.classifier_dim, batch_first=True)
        self.fc = nn.Linear(cfg.classifier_dim, cfg.n_accents)

    def forward(self, local_emb, n_phonemes=None):
        if local_emb.dim() == 2:
            local_emb = local_emb.unsqueeze(0)
        if local_emb.shape[1] < 1:
            raise ValueError("empty phoneme-level sequence")
        if n_phonemes is None:
            n_phonemes = torch.full((local_emb.shape[0],), local_emb.shape[1], dtype=torch.long)
        _, (h, _) = run_rnn(self.lstm, local_emb, n_phonemes)
        return self.fc(h[-1])


class SILAM(nn.Module):
    def __init__(self, cfg: LocalAccentConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = LocalAccentEncoder(cfg)
        self.accent_classifier = SequenceAccentClassifier(cfg)
        self.speaker_classifier = nn.Linear(cfg.embedding_dim, cfg.n_speakers)
        self.grl_spec = GRLSpec(cfg.grl_lambda)

    def encode(self, mel, boundaries, lengths=None, pool=None):
        return self.encoder(mel, boundaries, lengths, pool)

    def accent_logits(self, local_emb, n_phonemes=None):
        return self.accent_classifier(local_emb, n_phonemes)

    def classify_accent_sequence(self, local_emb, n_phonemes=None):
        return torch.softmax(self.accent_logits(local_emb, n_phonemes), dim=-1)

    def accent_loss(self, local_emb, accent, n_phonemes=None):
        return logits_cross_entropy(self.accent_logits(local_emb, n_phonemes), accent)

    def adversarial_speaker_loss(self, local_emb, speaker, n_phonemes=None, reverse: bool = True):
        """Per-phoneme speaker CE through the GRL, averaged over each utterance's
        phonemes and then over the batch."""
        if local_emb.dim() == 2:
            local_emb = local_emb.unsqueeze(0)
            speaker = torch.as_tensor(speaker).reshape(1)
        B, P, _ = local_emb.shape
        if n_phonemes is None:
            n_phonemes = torch.full((B,), P, dtype=torch.long)
        x = grl(local_emb, self.grl_spec) if reverse else local_emb
        logits = self.speaker_classifier(x)
        ce = logits_cross_entropy(
            logits.reshape(B * P, -1), speaker.repeat_interleave(P), reduction="none"
        ).reshape(B, P)
        m = lengths_to_mask(n_phonemes, P).to(ce.dtype)
        return ((ce * m).sum(1) / m.sum(1)).mean()
