"""Tacotron 2 style acoustic model with accent conditioning and speaker injection.

The speaker embedding enters the decoder only after the attention network:
its Softsign projection is concatenated to the input and to the output of
the second decoder LSTM, so attention energies never depend on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .layers import ConvBlock, lengths_to_mask, run_rnn

N_MELS = 80


@dataclass(frozen=True)
class AMConfig:
    n_symbols: int = 43
    embedding_dim: int = 256
    text_dim: int = 256  # D_T
    encoder_kernel: int = 5
    encoder_dropout: float = 0.1
    prenet_dim: int = 128
    prenet_dropout: float = 0.5
    attention_rnn_dim: int = 512
    decoder_rnn_dim: int = 512
    attention_dim: int = 128
    location_filters: int = 32
    location_kernel: int = 31
    speaker_dim: int = 256
    speaker_proj_dim: int = 64
    global_dim: int = 64  # D_G
    local_dim: int = 8  # D_L
    postnet_channels: int = 256
    postnet_kernel: int = 5
    postnet_dropout: float = 0.1
    reduction_factor: int = 1
    stop_threshold: float = 0.5
    max_decoder_steps: int = 1000
    stop_pos_weight: float = 1.0

    def __post_init__(self):
        dims = (self.n_symbols, self.embedding_dim, self.text_dim, self.prenet_dim,
                self.attention_rnn_dim, self.decoder_rnn_dim, self.attention_dim,
                self.speaker_dim, self.speaker_proj_dim, self.global_dim, self.local_dim,
                self.postnet_channels, self.max_decoder_steps)
        if min(dims) <= 0:
            raise ValueError("AMConfig dimensions must be positive")
        if self.reduction_factor != 1:
            raise ValueError("only reduction_factor = 1 is supported")
        if self.text_dim % 2:
            raise ValueError("text_dim must be even (bidirectional LSTM halves)")


@dataclass
class AMOutput:
    mel_before: torch.Tensor  # (B, T, 80)
    mel_after: torch.Tensor  # (B, T, 80)
    stop_logits: torch.Tensor  # (B, T)
    alignments: torch.Tensor  # (B, T, P)
    lengths: torch.Tensor | None = None
    max_steps_reached: bool = False


class TextEncoder(nn.Module):
    """Phoneme embedding -> three conv blocks -> bidirectional LSTM."""

    def __init__(self, cfg: AMConfig):
        super().__init__()
        self.embedding = nn.Embedding(cfg.n_symbols, cfg.embedding_dim, padding_idx=0)
        dims = [cfg.embedding_dim] + [cfg.text_dim] * 3
        self.convs = nn.ModuleList(
            ConvBlock(dims[i], dims[i + 1], cfg.encoder_kernel, cfg.encoder_dropout)
            for i in range(3)
        )
        self.lstm = nn.LSTM(cfg.text_dim, cfg.text_dim // 2, batch_first=True, bidirectional=True)
        self.n_symbols = cfg.n_symbols

    def forward(self, phonemes: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if phonemes.numel() == 0 or int(lengths.min()) < 1:
            raise ValueError("empty phoneme sequence")
        if int(phonemes.max()) >= self.n_symbols or int(phonemes.min()) < 0:
            raise ValueError("unknown phoneme index")
        mask = lengths_to_mask(lengths, phonemes.shape[1])
        x = self.embedding(phonemes)
        for conv in self.convs:
            x = conv(x, mask)
        out, _ = run_rnn(self.lstm, x, lengths)
        return out


class AccentConditioner(nn.Module):
    """``H_T + FC(H_G)`` broadcast over phonemes ``+ FC(H_L)`` row-wise."""

    def __init__(self, cfg: AMConfig, bias: bool = True):
        super().__init__()
        self.global_proj = nn.Linear(cfg.global_dim, cfg.text_dim, bias=bias)
        self.local_proj = nn.Linear(cfg.local_dim, cfg.text_dim, bias=bias)

    def forward(self, text_hidden, global_emb, local_emb):
        if local_emb.shape[:2] != text_hidden.shape[:2]:
            raise ValueError(
                f"H_L has {local_emb.shape[1]} rows but H_T has {text_hidden.shape[1]}"
            )
        return text_hidden + self.global_proj(global_emb).unsqueeze(1) + self.local_proj(local_emb)


class Prenet(nn.Module):
    def __init__(self, cfg: AMConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            [nn.Linear(N_MELS, cfg.prenet_dim), nn.Linear(cfg.prenet_dim, cfg.prenet_dim)]
        )
        self.p = cfg.prenet_dropout

    def forward(self, x):
        for layer in self.layers:
            x = F.dropout(F.relu(layer(x)), self.p, self.training)
        return x


class LocationSensitiveAttention(nn.Module):
    def __init__(self, cfg: AMConfig):
        super().__init__()
        self.query = nn.Linear(cfg.attention_rnn_dim, cfg.attention_dim, bias=False)
        self.memory = nn.Linear(cfg.text_dim, cfg.attention_dim, bias=False)
        self.location_conv = nn.Conv1d(2, cfg.location_filters, cfg.location_kernel,
                                       padding=cfg.location_kernel // 2, bias=False)
        self.location_dense = nn.Linear(cfg.location_filters, cfg.attention_dim, bias=False)
        self.v = nn.Linear(cfg.attention_dim, 1, bias=False)

    def energies(self, query, processed_memory, weights_cat):
        loc = self.location_dense(self.location_conv(weights_cat).transpose(1, 2))
        return self.v(torch.tanh(self.query(query).unsqueeze(1) + loc + processed_memory)).squeeze(-1)

    def forward(self, query, memory, processed_memory, weights_cat, mask):
        e = self.energies(query, processed_memory, weights_cat).masked_fill(~mask, float("-inf"))
        weights = torch.softmax(e, dim=1)
        context = torch.bmm(weights.unsqueeze(1), memory).squeeze(1)
        return context, weights, e


class Postnet(nn.Module):
    def __init__(self, cfg: AMConfig):
        super().__init__()
        c, k = cfg.postnet_channels, cfg.postnet_kernel
        self.convs = nn.ModuleList([
            nn.Conv1d(N_MELS, c, k, padding=k // 2),
            nn.Conv1d(c, c, k, padding=k // 2),
            nn.Conv1d(c, N_MELS, k, padding=k // 2),
        ])
        self.p = cfg.postnet_dropout

    def forward(self, mel, mask):
        m = mask.unsqueeze(1).to(mel.dtype)
        x = mel.transpose(1, 2) * m
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = torch.tanh(x)
            x = F.dropout(x, self.p, self.training) * m
        return x.transpose(1, 2)


class Decoder(nn.Module):
    """Autoregressive attention decoder with post-attention speaker injection."""

    def __init__(self, cfg: AMConfig):
        super().__init__()
        self.cfg = cfg
        self.prenet = Prenet(cfg)
        self.attention_rnn = nn.LSTMCell(cfg.prenet_dim + cfg.text_dim, cfg.attention_rnn_dim)
        self.attention = LocationSensitiveAttention(cfg)
        self.speaker_proj = nn.Linear(cfg.speaker_dim, cfg.speaker_proj_dim)
        self.decoder_rnn = nn.LSTMCell(
            cfg.attention_rnn_dim + cfg.text_dim + cfg.speaker_proj_dim, cfg.decoder_rnn_dim
        )
        out_dim = cfg.decoder_rnn_dim + cfg.text_dim + cfg.speaker_proj_dim
        self.mel_proj = nn.Linear(out_dim, N_MELS)
        self.stop_proj = nn.Linear(out_dim, 1)

    def _init_state(self, memory):
        B, P, _ = memory.shape
        z = memory.new_zeros
        # alignment starts on the first phoneme so the location features have an anchor
        start = z(B, P)
        start[:, 0] = 1.0
        return {
            "att_h": z(B, self.cfg.attention_rnn_dim), "att_c": z(B, self.cfg.attention_rnn_dim),
            "dec_h": z(B, self.cfg.decoder_rnn_dim), "dec_c": z(B, self.cfg.decoder_rnn_dim),
            "weights": start, "cum_weights": start.clone(), "context": z(B, self.cfg.text_dim),
        }

    def step(self, prenet_out, state, memory, processed_memory, mask, speaker):
        att_h, att_c = self.attention_rnn(
            torch.cat([prenet_out, state["context"]], -1), (state["att_h"], state["att_c"])
        )
        weights_cat = torch.stack([state["weights"], state["cum_weights"]], 1)
        context, weights, energies = self.attention(
            att_h, memory, processed_memory, weights_cat, mask
        )
        dec_h, dec_c = self.decoder_rnn(
            torch.cat([att_h, context, speaker], -1), (state["dec_h"], state["dec_c"])
        )
        out = torch.cat([dec_h, context, speaker], -1)
        new_state = {
            "att_h": att_h, "att_c": att_c, "dec_h": dec_h, "dec_c": dec_c,
            "weights": weights, "cum_weights": state["cum_weights"] + weights, "context": context,
        }
        return self.mel_proj(out), self.stop_proj(out).squeeze(-1), new_state, energies

    def speaker_features(self, speaker_emb):
        if speaker_emb.shape[-1] != self.cfg.speaker_dim:
            raise ValueError(
                f"speaker embedding has {speaker_emb.shape[-1]} dims, expected {self.cfg.speaker_dim}"
            )
        return F.softsign(self.speaker_proj(speaker_emb))

    def forward(self, memory, memory_lengths, speaker_emb, targets=None, max_steps=None):
        """Teacher-forced when ``targets`` (B, T, 80) is given, free-running otherwise.

        Returns ``(mel, stop_logits, alignments, max_steps_reached)``.
        """
        speaker = self.speaker_features(speaker_emb)
        mask = lengths_to_mask(memory_lengths, memory.shape[1])
        processed = self.attention.memory(memory)
        state = self._init_state(memory)
        mels, stops, aligns = [], [], []
        if targets is not None:
            if targets.shape[1] < 1:
                raise ValueError("teacher forcing needs at least one target frame")
            go = targets.new_zeros(targets.shape[0], 1, N_MELS)
            prev = self.prenet(torch.cat([go, targets[:, :-1]], 1))
            for t in range(targets.shape[1]):
                mel, stop, state, _ = self.step(prev[:, t], state, memory, processed, mask, speaker)
                mels.append(mel)
                stops.append(stop)
                aligns.append(state["weights"])
            return torch.stack(mels, 1), torch.stack(stops, 1), torch.stack(aligns, 1), False

        if memory.shape[0] != 1:
            raise ValueError("free-running decoding supports batch size 1")
        max_steps = max_steps or self.cfg.max_decoder_steps
        frame = memory.new_zeros(1, N_MELS)
        reached = True
        for _ in range(max_steps):
            mel, stop, state, _ = self.step(self.prenet(frame), state, memory, processed, mask,
                                            speaker)
            mels.append(mel)
            stops.append(stop)
            aligns.append(state["weights"])
            frame = mel
            if torch.sigmoid(stop).item() > self.cfg.stop_threshold:
                reached = False
                break
        return torch.stack(mels, 1), torch.stack(stops, 1), torch.stack(aligns, 1), reached


class AcousticModel(nn.Module):
    def __init__(self, cfg: AMConfig):
        super().__init__()
        self.cfg = cfg
        self.text_encoder = TextEncoder(cfg)
        self.conditioner = AccentConditioner(cfg)
        self.decoder = Decoder(cfg)
        self.postnet = Postnet(cfg)
        # the decoder works on per-bin standardised frames; outputs are mapped back
        self.register_buffer("mel_mean", torch.zeros(N_MELS))
        self.register_buffer("mel_std", torch.ones(N_MELS))

    @torch.no_grad()
    def set_mel_stats(self, mean, std, floor: float = 1e-2):
        self.mel_mean.copy_(torch.as_tensor(mean, dtype=self.mel_mean.dtype))
        self.mel_std.copy_(torch.as_tensor(std, dtype=self.mel_std.dtype).clamp_min(floor))

    def encode_text(self, phonemes, lengths):
        return self.text_encoder(phonemes, lengths)

    def condition(self, text_hidden, global_emb, local_emb):
        return self.conditioner(text_hidden, global_emb, local_emb)

    def decode(self, conditioned, text_lengths, speaker_emb, targets=None, target_lengths=None,
               max_steps=None) -> AMOutput:
        if targets is not None:
            targets = (targets - self.mel_mean) / self.mel_std
        mel, stop, align, reached = self.decoder(
            conditioned, text_lengths, speaker_emb, targets, max_steps
        )
        if target_lengths is None:
            target_lengths = torch.full((mel.shape[0],), mel.shape[1], dtype=torch.long)
        mask = lengths_to_mask(target_lengths, mel.shape[1])
        after = mel + self.postnet(mel, mask)
        return AMOutput(mel * self.mel_std + self.mel_mean, after * self.mel_std + self.mel_mean,
                        stop, align, target_lengths, reached)

    def forward(self, phonemes, text_lengths, global_emb, local_emb, speaker_emb,
                targets=None, target_lengths=None, max_steps=None) -> AMOutput:
        hidden = self.encode_text(phonemes, text_lengths)
        conditioned = self.condition(hidden, global_emb, local_emb)
        return self.decode(conditioned, text_lengths, speaker_emb, targets, target_lengths,
                           max_steps)


def stop_targets(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """1.0 on each sequence's final frame, 0.0 elsewhere."""
    t = torch.zeros(len(lengths), max_len)
    t[torch.arange(len(lengths)), lengths - 1] = 1.0
    return t


def am_loss(output: AMOutput, target_mel: torch.Tensor, target_stops: torch.Tensor,
            lengths: torch.Tensor | None = None, stop_pos_weight: float = 1.0):
    """MSE(mel_before) + MSE(mel_after) + BCE(stop), each averaged over valid frames."""
    if output.mel_before.shape != target_mel.shape or output.mel_after.shape != target_mel.shape:
        raise ValueError(
            f"mel shape mismatch: prediction {tuple(output.mel_before.shape)} vs "
            f"target {tuple(target_mel.shape)}"
        )
    if output.stop_logits.shape != target_stops.shape:
        raise ValueError("stop logits and stop targets differ in shape")
    if lengths is None:
        mask = torch.ones(target_stops.shape, dtype=torch.bool)
    else:
        mask = lengths_to_mask(lengths, target_mel.shape[1])
    m = mask.to(target_mel.dtype)
    n_cells = m.sum() * target_mel.shape[-1]
    before = (((output.mel_before - target_mel) ** 2) * m.unsqueeze(-1)).sum() / n_cells
    after = (((output.mel_after - target_mel) ** 2) * m.unsqueeze(-1)).sum() / n_cells
    pos_weight = None
    if stop_pos_weight != 1.0:
        pos_weight = torch.tensor(stop_pos_weight, dtype=target_mel.dtype)
    bce = F.binary_cross_entropy_with_logits(
        output.stop_logits, target_stops.to(target_mel.dtype), reduction="none",
        pos_weight=pos_weight,
    )
    stop = (bce * m).sum() / m.sum()
    return before + after + stop


def guided_attention_loss(alignments: torch.Tensor, text_lengths: torch.Tensor,
                          mel_lengths: torch.Tensor, width: float = 0.2) -> torch.Tensor:
    """Mean attention mass far from the diagonal (a near-diagonal alignment prior).

    Each weight ``a[t, n]`` is penalised by ``1 - exp(-(n/N - t/T)^2 / (2 width^2))``
    and the penalty is averaged over the valid (frame, phoneme) cells.
    """
    B, T, P = alignments.shape
    t = torch.arange(T, dtype=alignments.dtype)[None, :, None] / mel_lengths[:, None, None]
    n = torch.arange(P, dtype=alignments.dtype)[None, None, :] / text_lengths[:, None, None]
    penalty = 1.0 - torch.exp(-((n - t) ** 2) / (2 * width ** 2))
    valid = (lengths_to_mask(mel_lengths, T)[:, :, None]
             & lengths_to_mask(text_lengths, P)[:, None, :]).to(alignments.dtype)
    return (alignments * penalty * valid).sum() / valid.sum()
