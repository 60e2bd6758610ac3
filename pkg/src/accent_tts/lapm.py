"""Local accent prediction from phonemes plus a global accent vector."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
from torch import nn

from .acoustic_model import TextEncoder
from .layers import ConvBlock, lengths_to_mask, run_rnn


@dataclass(frozen=True)
class LAPMConfig:
    text_dim: int = 256
    global_dim: int = 64
    channels: int = 128
    kernel_size: int = 3
    dropout: float = 0.1
    rnn_dim: int = 128
    output_dim: int = 8  # must equal the local encoder's D_L
    text_encoder_fingerprint: str = ""


def module_fingerprint(module: nn.Module) -> str:
    """SHA-256 over parameter names, shapes and raw bytes, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        t = tensor.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


class LocalAccentPredictor(nn.Module):
    """``(H_T + lift(H_G))`` -> two conv blocks -> ``+ lift(H_G)`` -> GRU -> FC."""

    def __init__(self, cfg: LAPMConfig):
        super().__init__()
        self.cfg = cfg
        self.text_lift = nn.Linear(cfg.global_dim, cfg.text_dim, bias=False)
        self.rnn_lift = nn.Linear(cfg.global_dim, cfg.channels, bias=False)
        self.conv1 = ConvBlock(cfg.text_dim, cfg.channels, cfg.kernel_size, cfg.dropout)
        self.conv2 = ConvBlock(cfg.channels, cfg.channels, cfg.kernel_size, cfg.dropout)
        self.rnn = nn.GRU(cfg.channels, cfg.rnn_dim, batch_first=True)
        self.out = nn.Linear(cfg.rnn_dim, cfg.output_dim)

    def forward(self, text_hidden, global_emb, lengths):
        if global_emb.shape[-1] != self.cfg.global_dim:
            raise ValueError(
                f"global accent vector has {global_emb.shape[-1]} dims, expected {self.cfg.global_dim}"
            )
        mask = lengths_to_mask(lengths, text_hidden.shape[1])
        x = text_hidden + self.text_lift(global_emb).unsqueeze(1)
        x = self.conv2(self.conv1(x, mask), mask)
        x = x + self.rnn_lift(global_emb).unsqueeze(1)
        x, _ = run_rnn(self.rnn, x, lengths)
        y = self.out(x)
        return y * mask.unsqueeze(-1).to(y.dtype)


class LAPM(nn.Module):
    """Frozen stage-1 text encoder followed by a trainable local accent predictor."""

    def __init__(self, text_encoder: TextEncoder, cfg: LAPMConfig):
        super().__init__()
        fp = module_fingerprint(text_encoder)
        if cfg.text_encoder_fingerprint and cfg.text_encoder_fingerprint != fp:
            raise ValueError("text encoder fingerprint does not match the stage-1 checkpoint")
        self.cfg = cfg
        self.expected_fingerprint = cfg.text_encoder_fingerprint or fp
        self.text_encoder = text_encoder
        for p in self.text_encoder.parameters():
            p.requires_grad_(False)
        self.predictor = LocalAccentPredictor(cfg)

    def train(self, mode: bool = True):
        super().train(mode)
        self.text_encoder.eval()  # frozen: dropout stays off
        return self

    def verify_text_encoder(self) -> str:
        fp = module_fingerprint(self.text_encoder)
        if fp != self.expected_fingerprint:
            raise ValueError("frozen text encoder was modified")
        return fp

    def forward(self, phonemes, global_emb, lengths=None):
        single = phonemes.dim() == 1
        if single:
            phonemes = phonemes.unsqueeze(0)
            global_emb = global_emb.reshape(1, -1)
        if lengths is None:
            lengths = torch.full((phonemes.shape[0],), phonemes.shape[1], dtype=torch.long)
        with torch.no_grad():
            hidden = self.text_encoder(phonemes, lengths)
        out = self.predictor(hidden, global_emb, lengths)
        return out[0] if single else out

    predict_local = forward


def lapm_loss(predicted, target, lengths=None):
    """Mean squared error over all valid ``P x D_L`` elements."""
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    if lengths is None:
        return ((predicted - target) ** 2).mean()
    m = lengths_to_mask(lengths, predicted.shape[1]).unsqueeze(-1).to(predicted.dtype)
    return (((predicted - target) ** 2) * m).sum() / (m.sum() * predicted.shape[-1])
