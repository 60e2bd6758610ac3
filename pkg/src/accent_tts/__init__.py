"""Accent-controllable multi-speaker Tacotron-style TTS with disentangled accent embeddings."""

__version__ = "0.1.0"
