"""Inference: accent centroids, LAPM-driven synthesis and reference-speech synthesis."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import Manifest, SpeakerEmbeddingTable, read_matrix, write_matrix
from .layers import l2_normalize
from .signal import griffin_lim
from .training import (Checkpoint, Stage1Model, embed_utterance, lapm_from_checkpoints,
                       stage1_from_checkpoint)


class SynthesisError(ValueError):
    pass


@dataclass(frozen=True)
class AccentCentroidTable:
    centroids: dict[str, np.ndarray]

    def __post_init__(self):
        for accent, vec in self.centroids.items():
            if not np.all(np.isfinite(vec)):
                raise SynthesisError(f"non-finite centroid for accent {accent}")

    def __getitem__(self, accent: str) -> np.ndarray:
        try:
            return self.centroids[accent]
        except KeyError:
            raise SynthesisError(f"unknown accent {accent!r}") from None

    def __contains__(self, accent) -> bool:
        return accent in self.centroids

    def save(self, path) -> Path:
        """MEL1-style matrix (one row per accent) plus a ``.labels`` sidecar."""
        path = Path(path)
        accents = sorted(self.centroids)
        write_matrix(path, np.stack([self.centroids[a] for a in accents]))
        path.with_suffix(path.suffix + ".labels").write_text("\n".join(accents) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "AccentCentroidTable":
        path = Path(path)
        rows = read_matrix(path)
        accents = path.with_suffix(path.suffix + ".labels").read_text().split()
        return cls({a: rows[i] for i, a in enumerate(accents)})


def centroids_from_vectors(vectors: dict[str, Sequence[np.ndarray]],
                           renormalize: bool = False) -> AccentCentroidTable:
    """Arithmetic mean per accent; optionally rescaled to unit norm."""
    out = {}
    for accent, vecs in vectors.items():
        if len(vecs) == 0:
            raise SynthesisError(f"accent {accent} has no training utterances")
        mean = np.mean(np.stack(vecs).astype(np.float64), axis=0)
        if renormalize:
            mean = mean / np.linalg.norm(mean)
        out[accent] = mean.astype(np.float32)
    return AccentCentroidTable(out)


def compute_accent_centroids(stage1: Checkpoint, manifest: Manifest,
                             renormalize: bool = False) -> AccentCentroidTable:
    """Mean training-split H_G per accent (not re-normalised by default)."""
    model = stage1_from_checkpoint(stage1)
    vectors: dict[str, list] = {a: [] for a in manifest.accents}
    for u in manifest.subset("train"):
        vectors[u.accent].append(embed_utterance(model, u)[0])
    empty = [a for a, v in vectors.items() if not v]
    if empty:
        raise SynthesisError(f"accent(s) with zero training utterances: {', '.join(empty)}")
    return centroids_from_vectors(vectors, renormalize)


@dataclass
class SynthesisResult:
    mel: np.ndarray
    max_steps_reached: bool
    alignments: np.ndarray
    waveform: np.ndarray | None = None


class Synthesizer:
    """Loaded stage-1/stage-2 models plus the lookup tables needed at inference."""

    def __init__(self, stage1: Checkpoint, speaker_table: SpeakerEmbeddingTable,
                 stage2: Checkpoint | None = None,
                 centroids: AccentCentroidTable | None = None):
        self.stage1 = stage1_from_checkpoint(stage1)
        self.lapm = lapm_from_checkpoints(stage1, stage2) if stage2 is not None else None
        self.speakers = speaker_table
        self.centroids = centroids
        self.n_symbols = self.stage1.cfg.am.n_symbols

    def _check_phonemes(self, phonemes) -> torch.Tensor:
        ph = torch.as_tensor(list(phonemes), dtype=torch.long)
        if ph.numel() == 0:
            raise SynthesisError("empty phoneme sequence")
        if int(ph.min()) < 2 or int(ph.max()) >= self.n_symbols:
            raise SynthesisError("phoneme index outside the inventory")
        return ph

    def _speaker(self, speaker_id: str) -> torch.Tensor:
        if speaker_id not in self.speakers:
            raise SynthesisError(f"unknown speaker {speaker_id!r}")
        return torch.from_numpy(np.asarray(self.speakers[speaker_id], dtype=np.float32))[None]

    @torch.no_grad()
    def _decode(self, ph, hg, hl, speaker, max_steps, seed, gl_iterations) -> SynthesisResult:
        torch.manual_seed(seed)
        am = self.stage1.am
        lengths = torch.tensor([len(ph)])
        hidden = am.encode_text(ph[None], lengths)
        conditioned = am.condition(hidden, hg, hl)
        out = am.decode(conditioned, lengths, speaker, max_steps=max_steps)
        mel = out.mel_after[0].numpy().astype(np.float32)
        wav = griffin_lim(mel, gl_iterations, seed) if gl_iterations else None
        return SynthesisResult(mel, out.max_steps_reached, out.alignments[0].numpy(), wav)

    @torch.no_grad()
    def synthesize(self, phonemes, accent_id: str, speaker_id: str, max_steps: int = 200,
                   seed: int = 0, gl_iterations: int = 0) -> SynthesisResult:
        """Centroid H_G -> LAPM-predicted H_L -> free-running decode."""
        if self.lapm is None or self.centroids is None:
            raise SynthesisError("LAPM synthesis needs a stage-2 checkpoint and centroids")
        hg = torch.from_numpy(np.asarray(self.centroids[accent_id], dtype=np.float32))[None]
        speaker = self._speaker(speaker_id)
        ph = self._check_phonemes(phonemes)
        hl = self.lapm(ph[None], hg, torch.tensor([len(ph)]))
        return self._decode(ph, hg, hl, speaker, max_steps, seed, gl_iterations)

    @torch.no_grad()
    def synthesize_with_reference(self, phonemes, reference_mel, boundaries, speaker_id: str,
                                  max_steps: int = 200, seed: int = 0,
                                  gl_iterations: int = 0) -> SynthesisResult:
        """H_G and H_L come from a reference utterance instead of centroid + LAPM."""
        ph = self._check_phonemes(phonemes)
        if len(boundaries) != len(ph):
            raise SynthesisError(
                f"{len(boundaries)} reference boundaries for {len(ph)} phonemes"
            )
        speaker = self._speaker(speaker_id)
        mel = torch.from_numpy(np.asarray(reference_mel, dtype=np.float32))
        hg = self.stage1.sigam.encode(mel)
        hl = self.stage1.silam.encode(mel, list(boundaries))[None]
        return self._decode(ph, hg, hl, speaker, max_steps, seed, gl_iterations)

    @torch.no_grad()
    def classify_local(self, local_emb) -> np.ndarray:
        """Stage-1 sequence accent classifier applied to an H_L matrix."""
        hl = torch.as_tensor(np.asarray(local_emb, dtype=np.float32))
        return self.stage1.silam.classify_accent_sequence(hl)[0].numpy()

    @torch.no_grad()
    def predict_local(self, phonemes, global_emb) -> np.ndarray:
        ph = self._check_phonemes(phonemes)
        hg = torch.as_tensor(np.asarray(global_emb, dtype=np.float32)).reshape(1, -1)
        return self.lapm(ph[None], hg, torch.tensor([len(ph)]))[0].numpy()


def synthesize(phonemes, accent_id, speaker_id, stage1: Checkpoint, stage2: Checkpoint,
               centroids: AccentCentroidTable, speaker_table: SpeakerEmbeddingTable,
               max_steps: int = 200, seed: int = 0, gl_iterations: int = 0) -> SynthesisResult:
    return Synthesizer(stage1, speaker_table, stage2, centroids).synthesize(
        phonemes, accent_id, speaker_id, max_steps, seed, gl_iterations
    )


def synthesize_with_reference(phonemes, reference_mel, boundaries, speaker_id,
                              stage1: Checkpoint, speaker_table: SpeakerEmbeddingTable,
                              max_steps: int = 200, seed: int = 0,
                              gl_iterations: int = 0) -> SynthesisResult:
    return Synthesizer(stage1, speaker_table).synthesize_with_reference(
        phonemes, reference_mel, boundaries, speaker_id, max_steps, seed, gl_iterations
    )
