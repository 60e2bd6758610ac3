"""Small building blocks shared by the acoustic model and the accent models."""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F


def lengths_to_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    """Boolean ``(B, max_len)`` mask, True on valid positions."""
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True).clamp_min(eps)


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over the time axis of ``x`` (B, T, C) restricted to ``mask`` (B, T)."""
    m = mask.to(x.dtype).unsqueeze(-1)
    return (x * m).sum(1) / m.sum(1).clamp_min(1.0)


class ConvBlock(nn.Module):
    """Conv1d -> ReLU -> LayerNorm -> dropout over (B, T, C) inputs.

    Padded positions are zeroed before and after the convolution so that a
    batched utterance sees exactly the zero padding it would see alone.
    """

    def __init__(self, in_dim: int, out_dim: int, kernel_size: int = 3, dropout: float = 0.0):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        self.conv = nn.Conv1d(in_dim, out_dim, kernel_size, padding=kernel_size // 2)
        self.norm = nn.LayerNorm(out_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if mask is not None:
            x = x * mask.unsqueeze(-1).to(x.dtype)
        y = self.conv(x.transpose(1, 2)).transpose(1, 2)
        y = self.dropout(self.norm(F.relu(y)))
        if mask is not None:
            y = y * mask.unsqueeze(-1).to(y.dtype)
        return y


def run_rnn(rnn: nn.RNNBase, x: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, object]:
    """Run ``rnn`` (batch_first) over padded ``x`` honouring ``lengths``."""
    packed = nn.utils.rnn.pack_padded_sequence(
        x, lengths.cpu(), batch_first=True, enforce_sorted=False
    )
    out, state = rnn(packed)
    out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
    return out, state
