"""Two-stage training: joint AM + SIGAM + SILAM, then the local accent predictor.

Checkpoint files are ``torch.save`` archives of a plain dict::

    format       "accent-tts-checkpoint-v1"
    kind         "stage1" | "stage2"
    config       ModelConfig as a nested dict
    fingerprint  stable hash of the serialised ModelConfig
    step         number of optimiser updates applied
    model        named-parameter state dict (shapes carried by the tensors)
    optimizer    Adam state dict
    rng          torch and batch-sampler RNG states (for exact resumption)
    meta         symbols, accents, speakers, speaker_dim, text-encoder hash
    losses       per-step loss records
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .accent_global import SIGAM, GlobalAccentConfig
from .accent_local import SILAM, LocalAccentConfig, pooling_matrix
from .acoustic_model import AcousticModel, AMConfig, am_loss, guided_attention_loss, stop_targets
from .corpus import (Manifest, PhonemeInventory, SpeakerEmbeddingTable, Utterance, read_matrix,
                     write_matrix)
from .lapm import LAPM, LAPMConfig, lapm_loss, module_fingerprint
from .structio import fingerprint, from_dict, to_dict

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "accent-tts-checkpoint-v1"
LOSS_NAMES = ("taco2", "g_ac", "g_adv_sc", "l_ac", "l_adv_sc")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.02
    delta: float = 1.0
    epsilon: float = 0.02

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.delta, self.epsilon) < 0:
            raise ValueError("loss weights must be non-negative")

    def effective(self, adversarial_enabled: bool) -> "LossWeights":
        return self if adversarial_enabled else replace(self, gamma=0.0, epsilon=0.0)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8  # full scale: 32
    stage1_steps: int = 5000  # full scale: 600k
    stage2_steps: int = 2000  # full scale: 200k
    lr_initial: float = 1e-3
    lr_final: float = 1e-5
    grad_clip: float = 1.0
    seed: int = 0
    adversarial_enabled: bool = True
    checkpoint_every: int = 0
    # diagonal alignment prior added to the stage-1 objective; 0 disables it
    guided_attention_weight: float = 0.0
    guided_attention_width: float = 0.2
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.stage1_steps < 1 or self.stage2_steps < 1:
            raise ValueError("step counts must be >= 1")
        if not 0 < self.lr_final <= self.lr_initial:
            raise ValueError("need 0 < lr_final <= lr_initial")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.guided_attention_weight < 0 or self.guided_attention_width <= 0:
            raise ValueError("guided attention needs weight >= 0 and width > 0")


@dataclass(frozen=True)
class ModelConfig:
    am: AMConfig = field(default_factory=AMConfig)
    global_accent: GlobalAccentConfig = field(default_factory=GlobalAccentConfig)
    local_accent: LocalAccentConfig = field(default_factory=LocalAccentConfig)
    lapm: LAPMConfig = field(default_factory=LAPMConfig)

    def __post_init__(self):
        checks = [
            (self.am.global_dim, self.global_accent.embedding_dim, "am.global_dim", "D_G"),
            (self.am.local_dim, self.local_accent.embedding_dim, "am.local_dim", "D_L"),
            (self.lapm.output_dim, self.local_accent.embedding_dim, "lapm.output_dim", "D_L"),
            (self.lapm.global_dim, self.global_accent.embedding_dim, "lapm.global_dim", "D_G"),
            (self.lapm.text_dim, self.am.text_dim, "lapm.text_dim", "am.text_dim"),
        ]
        for a, b, name_a, name_b in checks:
            if a != b:
                raise ValueError(f"{name_a}={a} disagrees with {name_b}={b}")

    @classmethod
    def from_dims(cls, text_dim=256, global_dim=64, local_dim=8, **am_overrides) -> "ModelConfig":
        return cls(
            am=AMConfig(text_dim=text_dim, global_dim=global_dim, local_dim=local_dim,
                        **am_overrides),
            global_accent=GlobalAccentConfig(embedding_dim=global_dim),
            local_accent=LocalAccentConfig(embedding_dim=local_dim),
            lapm=LAPMConfig(text_dim=text_dim, global_dim=global_dim, output_dim=local_dim),
        )

    def for_corpus(self, n_symbols: int, n_accents: int, n_speakers: int,
                   speaker_dim: int) -> "ModelConfig":
        return replace(
            self,
            am=replace(self.am, n_symbols=n_symbols, speaker_dim=speaker_dim),
            global_accent=replace(self.global_accent, n_accents=n_accents, n_speakers=n_speakers),
            local_accent=replace(self.local_accent, n_accents=n_accents, n_speakers=n_speakers),
        )


# ---------------------------------------------------------------------------
# loss arithmetic and schedule


def total_tts_loss(l_taco2, l_g_ac, l_g_adv_sc, l_l_ac, l_l_adv_sc,
                   weights: LossWeights = LossWeights()):
    """alpha*L_Taco2 + beta*L_G_ac + gamma*L_G_adv_sc + delta*L_L_ac + epsilon*L_L_adv_sc."""
    parts = dict(zip(LOSS_NAMES, (l_taco2, l_g_ac, l_g_adv_sc, l_l_ac, l_l_adv_sc)))
    for name, value in parts.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise TrainingError(f"non-finite loss component {name}: {v}")
    return (weights.alpha * l_taco2 + weights.beta * l_g_ac + weights.gamma * l_g_adv_sc
            + weights.delta * l_l_ac + weights.epsilon * l_l_adv_sc)


def lr_at(step: int, total_steps: int, lr_initial: float = 1e-3, lr_final: float = 1e-5) -> float:
    """Exponential decay from ``lr_initial`` at step 0 to ``lr_final`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return lr_final
    return lr_initial * (lr_final / lr_initial) ** (step / total_steps)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    ids: list[str]
    phonemes: torch.Tensor
    text_lengths: torch.Tensor
    mel: torch.Tensor
    mel_lengths: torch.Tensor
    boundaries: list
    pool: torch.Tensor
    accents: torch.Tensor
    speakers: torch.Tensor
    speaker_emb: torch.Tensor
    stops: torch.Tensor


def collate(utts: list[Utterance], manifest: Manifest, speaker_table: SpeakerEmbeddingTable,
            dtype=torch.float32) -> Batch:
    B = len(utts)
    P = max(len(u.phonemes) for u in utts)
    T = max(u.n_frames for u in utts)
    phonemes = torch.zeros(B, P, dtype=torch.long)
    mel = torch.zeros(B, T, utts[0].mel.shape[1], dtype=dtype)
    pool = torch.zeros(B, P, T, dtype=dtype)
    for b, u in enumerate(utts):
        phonemes[b, : len(u.phonemes)] = torch.tensor(u.phonemes)
        mel[b, : u.n_frames] = torch.from_numpy(np.asarray(u.mel)).to(dtype)
        pool[b, : len(u.phonemes)] = pooling_matrix(u.boundaries, T, dtype)
    mel_lengths = torch.tensor([u.n_frames for u in utts])
    return Batch(
        ids=[u.id for u in utts],
        phonemes=phonemes,
        text_lengths=torch.tensor([len(u.phonemes) for u in utts]),
        mel=mel,
        mel_lengths=mel_lengths,
        boundaries=[u.boundaries for u in utts],
        pool=pool,
        accents=torch.tensor([manifest.accent_index(u.accent) for u in utts]),
        speakers=torch.tensor([manifest.speaker_index(u.speaker) for u in utts]),
        speaker_emb=torch.from_numpy(
            np.stack([np.asarray(speaker_table[u.speaker]) for u in utts])
        ).to(dtype),
        stops=stop_targets(mel_lengths, T).to(dtype),
    )


class BatchSampler:
    """Seeded length-bucketed batch order; batch composition is independent of timing."""

    def __init__(self, lengths: list[int], batch_size: int, seed: int):
        self.lengths = np.asarray(lengths)
        self.batch_size = min(batch_size, len(lengths))
        self.rng = np.random.default_rng([seed, 7])
        self.queue: list[list[int]] = []

    def _refill(self):
        order = self.rng.permutation(len(self.lengths))
        chunk = self.batch_size * 4
        batches = []
        for i in range(0, len(order), chunk):
            part = sorted(order[i:i + chunk], key=lambda k: (self.lengths[k], k))
            batches += [part[j:j + self.batch_size] for j in range(0, len(part), self.batch_size)]
        batches = [b for b in batches if len(b) == self.batch_size] or batches
        self.queue = [batches[k] for k in self.rng.permutation(len(batches))]

    def next(self) -> list[int]:
        if not self.queue:
            self._refill()
        return [int(i) for i in self.queue.pop()]

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "queue": [list(b) for b in self.queue]}

    def load_state(self, state: dict):
        self.rng.bit_generator.state = state["rng"]
        self.queue = [list(b) for b in state["queue"]]


# ---------------------------------------------------------------------------
# stage-1 model


class Stage1Model(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.am = AcousticModel(cfg.am)
        self.sigam = SIGAM(cfg.global_accent)
        self.silam = SILAM(cfg.local_accent)

    def embeddings(self, batch: Batch):
        hg = self.sigam.encode(batch.mel, batch.mel_lengths)
        hl = self.silam.encode(batch.mel, batch.boundaries, batch.mel_lengths, batch.pool)
        return hg, hl

    def losses(self, batch: Batch, reverse: bool = True, guide_width: float | None = None) -> dict:
        hg, hl = self.embeddings(batch)
        out = self.am(batch.phonemes, batch.text_lengths, hg, hl, batch.speaker_emb,
                      targets=batch.mel, target_lengths=batch.mel_lengths)
        extra = {}
        if guide_width is not None:
            extra["guide"] = guided_attention_loss(out.alignments, batch.text_lengths,
                                                   batch.mel_lengths, guide_width)
        return {
            "taco2": am_loss(out, batch.mel, batch.stops, batch.mel_lengths,
                             self.cfg.am.stop_pos_weight),
            "g_ac": self.sigam.accent_loss(hg, batch.accents),
            "g_adv_sc": self.sigam.adversarial_speaker_loss(hg, batch.speakers, reverse),
            "l_ac": self.silam.accent_loss(hl, batch.accents, batch.text_lengths),
            "l_adv_sc": self.silam.adversarial_speaker_loss(hl, batch.speakers,
                                                            batch.text_lengths, reverse),
            **extra,
        }

    def total_loss(self, batch: Batch, weights: LossWeights, reverse: bool = True,
                   guide_weight: float = 0.0, guide_width: float = 0.2):
        parts = self.losses(batch, reverse, guide_width if guide_weight > 0 else None)
        total = total_tts_loss(*(parts[k] for k in LOSS_NAMES), weights=weights)
        if guide_weight > 0:
            total = total + guide_weight * parts["guide"]
        return total, parts


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    kind: str
    config: dict
    fingerprint: str
    step: int
    model: dict
    optimizer: dict | None = None
    rng: dict | None = None
    meta: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)

    @property
    def model_config(self) -> ModelConfig:
        return from_dict(ModelConfig, self.config)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"format": CHECKPOINT_FORMAT, **self.__dict__}, path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = torch.load(path, map_location="cpu", weights_only=False)
        if data.pop("format", None) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an accent-tts checkpoint")
        return cls(**data)


def _meta(manifest: Manifest, speaker_table: SpeakerEmbeddingTable) -> dict:
    return {
        "symbols": list(manifest.inventory.symbols),
        "accents": list(manifest.accents),
        "speakers": list(manifest.speakers),
        "speaker_dim": speaker_table.dim,
    }


def stage1_from_checkpoint(ckpt: Checkpoint) -> Stage1Model:
    if ckpt.kind != "stage1":
        raise ValueError(f"expected a stage1 checkpoint, got {ckpt.kind}")
    model = Stage1Model(ckpt.model_config)
    model.load_state_dict(ckpt.model)
    return model.eval()


def lapm_from_checkpoints(stage1: Checkpoint, stage2: Checkpoint) -> LAPM:
    if stage2.kind != "stage2":
        raise ValueError(f"expected a stage2 checkpoint, got {stage2.kind}")
    am = stage1_from_checkpoint(stage1).am
    cfg = replace(stage1.model_config.lapm,
                  text_encoder_fingerprint=stage2.meta["text_encoder_fingerprint"])
    lapm = LAPM(am.text_encoder, cfg)
    lapm.predictor.load_state_dict(stage2.model)
    return lapm.eval()


def _write_loss_log(path, records):
    cols = ["step", "total", *LOSS_NAMES, "lr"]
    if records and "guide" in records[0]:
        cols.insert(-1, "guide")
    lines = ["\t".join(cols)]
    for r in records:
        lines.append("\t".join(str(r[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


def smoothed(values, window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=float)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------------------
# stage 1


def train_stage1(
    manifest: Manifest,
    speaker_table: SpeakerEmbeddingTable,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> Checkpoint:
    """Jointly optimise AM, SIGAM and SILAM on the train split.

    ``max_steps`` stops early (used for resumption tests) without changing the
    learning-rate schedule, which is always laid out over ``stage1_steps``.
    """
    train = manifest.subset("train")
    if not train:
        raise TrainingError("empty train split")
    missing = sorted({u.speaker for u in train if u.speaker not in speaker_table})
    if missing:
        raise TrainingError(f"no speaker embedding for {', '.join(missing)}")
    cfg = model_cfg.for_corpus(len(manifest.inventory), len(manifest.accents),
                               len(manifest.speakers), speaker_table.dim)
    weights = train_cfg.weights.effective(train_cfg.adversarial_enabled)

    torch.manual_seed(train_cfg.seed)
    model = Stage1Model(cfg)
    frames = np.concatenate([np.asarray(u.mel, dtype=np.float64) for u in train])
    model.am.set_mel_stats(frames.mean(0), frames.std(0))
    optim = torch.optim.Adam(model.parameters(), lr=train_cfg.lr_initial)
    sampler = BatchSampler([u.n_frames for u in train], train_cfg.batch_size, train_cfg.seed)
    records: list[dict] = []
    start = 0
    if resume is not None:
        model.load_state_dict(resume.model)
        optim.load_state_dict(resume.optimizer)
        sampler.load_state(resume.rng["sampler"])
        torch.set_rng_state(resume.rng["torch"])
        records = list(resume.losses)
        start = resume.step

    out_dir = Path(out_dir) if out_dir is not None else None
    total = train_cfg.stage1_steps
    end = total if max_steps is None else min(total, max_steps)
    model.train()

    def snapshot(step):
        return Checkpoint(
            kind="stage1", config=to_dict(cfg), fingerprint=fingerprint(cfg), step=step,
            model={k: v.clone() for k, v in model.state_dict().items()},
            optimizer=optim.state_dict(),
            rng={"torch": torch.get_rng_state(), "sampler": sampler.state()},
            meta={**_meta(manifest, speaker_table),
                  "adversarial_enabled": train_cfg.adversarial_enabled},
            losses=list(records),
        )

    for step in range(start, end):
        lr = lr_at(step, total, train_cfg.lr_initial, train_cfg.lr_final)
        for g in optim.param_groups:
            g["lr"] = lr
        batch = collate([train[i] for i in sampler.next()], manifest, speaker_table)
        try:
            loss, parts = model.total_loss(batch, weights, guide_weight=train_cfg.guided_attention_weight,
                                           guide_width=train_cfg.guided_attention_width)
        except TrainingError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        if not torch.isfinite(loss):
            raise TrainingError(f"step {step}: non-finite total loss")
        optim.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        optim.step()
        rec = {"step": step, "total": float(loss.detach()), "lr": lr,
               **{k: float(v.detach()) for k, v in parts.items()}}
        records.append(rec)
        if callback is not None:
            callback(step, rec)
        if out_dir is not None and train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
            snapshot(step + 1).save(out_dir / f"stage1_step{step + 1}.pt")

    ckpt = snapshot(end)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt.save(out_dir / "stage1.pt")
        _write_loss_log(out_dir / "stage1_loss.tsv", records)
    model.eval()
    return ckpt


def stage1_loss_for(ckpt: Checkpoint, manifest: Manifest, speaker_table: SpeakerEmbeddingTable,
                    train_cfg: TrainConfig) -> float:
    """Loss of the next batch a resumed run would see, without updating anything."""
    model = Stage1Model(ckpt.model_config)
    model.load_state_dict(ckpt.model)
    model.train()
    train = manifest.subset("train")
    sampler = BatchSampler([u.n_frames for u in train], train_cfg.batch_size, train_cfg.seed)
    sampler.load_state(ckpt.rng["sampler"])
    torch.set_rng_state(ckpt.rng["torch"])
    batch = collate([train[i] for i in sampler.next()], manifest, speaker_table)
    weights = train_cfg.weights.effective(train_cfg.adversarial_enabled)
    with torch.no_grad():
        loss, _ = model.total_loss(batch, weights, guide_weight=train_cfg.guided_attention_weight,
                                   guide_width=train_cfg.guided_attention_width)
    return float(loss)


# ---------------------------------------------------------------------------
# target extraction


@dataclass
class Targets:
    """Per-utterance stage-1 embeddings: ``global_[id]`` (D_G,), ``local[id]`` (P, D_L)."""

    global_: dict[str, np.ndarray]
    local: dict[str, np.ndarray]

    def __len__(self):
        return len(self.global_)

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        ids = sorted(self.global_)
        write_matrix(out_dir / "global.f32", np.stack([self.global_[i] for i in ids]))
        lines = []
        for row, uid in enumerate(ids):
            rel = f"local/{uid}.f32"
            write_matrix(out_dir / rel, self.local[uid])
            lines.append(f"{uid}\t{row}\t{rel}")
        (out_dir / "index.tsv").write_text("\n".join(lines) + "\n")
        return out_dir

    @classmethod
    def load(cls, out_dir) -> "Targets":
        out_dir = Path(out_dir)
        glob = read_matrix(out_dir / "global.f32")
        g, l = {}, {}
        for line in (out_dir / "index.tsv").read_text().splitlines():
            uid, row, rel = line.split("\t")
            g[uid] = glob[int(row)]
            l[uid] = read_matrix(out_dir / rel)
        return cls(g, l)


@torch.no_grad()
def embed_utterance(model: Stage1Model, u: Utterance) -> tuple[np.ndarray, np.ndarray]:
    mel = torch.from_numpy(np.asarray(u.mel, dtype=np.float32))
    hg = model.sigam.encode(mel)[0]
    hl = model.silam.encode(mel, u.boundaries)
    return hg.numpy().astype(np.float32), hl.numpy().astype(np.float32)


def extract_targets(ckpt: Checkpoint, manifest: Manifest, split: str = "train",
                    out_dir=None) -> Targets:
    model = stage1_from_checkpoint(ckpt)
    utts = manifest.subset(split) if split else list(manifest)
    if not utts:
        raise TrainingError(f"no utterances in split {split!r}")
    g, l = {}, {}
    for u in utts:
        if u.mel is None or len(u.boundaries) == 0:
            raise TrainingError(f"{u.id}: missing mel or boundaries")
        g[u.id], l[u.id] = embed_utterance(model, u)
    targets = Targets(g, l)
    if out_dir is not None:
        targets.save(out_dir)
    return targets


# ---------------------------------------------------------------------------
# stage 2


def train_stage2(
    stage1: Checkpoint,
    targets: Targets,
    manifest: Manifest,
    train_cfg: TrainConfig,
    out_dir=None,
    callback: Callable[[int, dict], None] | None = None,
) -> Checkpoint:
    """Fit the local accent predictor to extracted targets; the text encoder stays frozen."""
    train = manifest.subset("train")
    missing = [u.id for u in train if u.id not in targets.local]
    if missing:
        raise TrainingError(f"missing targets for {len(missing)} utterances, e.g. {missing[0]}")
    cfg = stage1.model_config
    am = stage1_from_checkpoint(stage1).am
    fp_before = module_fingerprint(am.text_encoder)
    if stage1.meta.get("text_encoder_fingerprint", fp_before) != fp_before:
        raise TrainingError("text encoder fingerprint mismatch with stage-1 checkpoint")

    torch.manual_seed(train_cfg.seed)
    lapm = LAPM(am.text_encoder, replace(cfg.lapm, text_encoder_fingerprint=fp_before))
    optim = torch.optim.Adam(lapm.predictor.parameters(), lr=train_cfg.lr_initial)
    sampler = BatchSampler([len(u.phonemes) for u in train], train_cfg.batch_size,
                           train_cfg.seed + 1)
    total = train_cfg.stage2_steps
    records = []
    lapm.train()
    for step in range(total):
        lr = lr_at(step, total, train_cfg.lr_initial, train_cfg.lr_final)
        for g in optim.param_groups:
            g["lr"] = lr
        utts = [train[i] for i in sampler.next()]
        P = max(len(u.phonemes) for u in utts)
        phon = torch.zeros(len(utts), P, dtype=torch.long)
        tgt = torch.zeros(len(utts), P, cfg.lapm.output_dim)
        for b, u in enumerate(utts):
            phon[b, : len(u.phonemes)] = torch.tensor(u.phonemes)
            tgt[b, : len(u.phonemes)] = torch.from_numpy(targets.local[u.id])
        lengths = torch.tensor([len(u.phonemes) for u in utts])
        hg = torch.from_numpy(np.stack([targets.global_[u.id] for u in utts]))
        loss = lapm_loss(lapm(phon, hg, lengths), tgt, lengths)
        if not torch.isfinite(loss):
            raise TrainingError(f"step {step}: non-finite LAPM loss")
        optim.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(lapm.predictor.parameters(), train_cfg.grad_clip)
        optim.step()
        rec = {"step": step, "lapm": float(loss.detach()), "lr": lr}
        records.append(rec)
        if callback is not None:
            callback(step, rec)

    fp_after = lapm.verify_text_encoder()
    if fp_after != fp_before:
        raise TrainingError("frozen text encoder changed during stage 2")
    ckpt = Checkpoint(
        kind="stage2", config=to_dict(cfg), fingerprint=fingerprint(cfg), step=total,
        model={k: v.clone() for k, v in lapm.predictor.state_dict().items()},
        optimizer=optim.state_dict(),
        meta={**stage1.meta, "text_encoder_fingerprint": fp_after,
              "stage1_fingerprint": stage1.fingerprint},
        losses=records,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt.save(out_dir / "stage2.pt")
        lines = ["step\tlapm\tlr"] + [f"{r['step']}\t{r['lapm']}\t{r['lr']}" for r in records]
        (out_dir / "stage2_loss.tsv").write_text("\n".join(lines) + "\n")
    lapm.eval()
    return ckpt


def inventory_of(ckpt: Checkpoint) -> PhonemeInventory:
    return PhonemeInventory(tuple(ckpt.meta["symbols"]))
