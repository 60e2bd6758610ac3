"""Run configuration: one YAML document holding every hyperparameter of a run.

The document is validated strictly (unknown keys are errors) before any work
starts. ``--set a.b=value`` overrides are applied to the parsed mapping, so an
override goes through exactly the same validation as the file itself.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .corpus import SyntheticCorpusSpec
from .signal import MelParams
from .structio import fingerprint, from_dict, to_dict
from .training import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSection:
    """Where the corpus lives. Empty paths mean "inside the run directory"."""

    manifest: str = ""
    speaker_embeddings: str = ""
    source: str = ""  # input manifest for ``prepare``
    val_per_speaker: int = 0
    test_per_speaker: int = 5
    split_seed: int = 0
    trim_db: float = 0.0  # 0 disables silence trimming in ``prepare``

    def __post_init__(self):
        if self.val_per_speaker < 0 or self.test_per_speaker < 0:
            raise ValueError("split counts must be >= 0")


@dataclass(frozen=True)
class SyntheticSection:
    n_accents: int = 4
    n_speakers_per_accent: int = 3
    n_utterances_per_speaker: int = 40
    phoneme_count: int = 8
    seed: int = 0
    noise_scale: float = 0.05
    band_amplitude: float = 6.0
    min_phonemes: int = 4
    max_phonemes: int = 8

    def spec(self) -> SyntheticCorpusSpec:
        return SyntheticCorpusSpec.build(
            self.n_accents, self.n_speakers_per_accent, self.n_utterances_per_speaker,
            self.phoneme_count, seed=self.seed, noise_scale=self.noise_scale,
            band_amplitude=self.band_amplitude, min_phonemes=self.min_phonemes,
            max_phonemes=self.max_phonemes,
        )


@dataclass(frozen=True)
class RequestSection:
    """Inputs of the inference commands; not part of the run fingerprint."""

    phonemes: str = ""  # space-separated symbols
    accent: str = ""
    speaker: str = ""
    reference: str = ""  # utterance id used by synth-ref
    output: str = ""  # output file name inside the run directory
    max_steps: int = 200
    griffin_lim_iterations: int = 0
    embedding: str = "global"  # export-emb: global | local-mean
    eval_split: str = "test"
    eval_gl_iterations: int = 16  # vocoder passes used to get waveforms for F0 in evaluate
    voiced_only: bool = False

    def __post_init__(self):
        if self.embedding not in ("global", "local-mean"):
            raise ValueError("request.embedding must be 'global' or 'local-mean'")
        if self.max_steps < 1:
            raise ValueError("request.max_steps must be >= 1")


def _desk_model() -> ModelConfig:
    """Small model sizes that train in minutes on one CPU core."""
    cfg = ModelConfig.from_dims(
        text_dim=64, global_dim=64, local_dim=8, embedding_dim=64, prenet_dim=64,
        attention_rnn_dim=128, decoder_rnn_dim=128, attention_dim=64, postnet_channels=64,
        speaker_proj_dim=32, stop_pos_weight=5.0,
    )
    return dataclasses.replace(
        cfg,
        global_accent=dataclasses.replace(cfg.global_accent, channels=64, hidden_dim=64),
        local_accent=dataclasses.replace(cfg.local_accent, channels=64, rnn_dim=64,
                                         classifier_dim=32),
        lapm=dataclasses.replace(cfg.lapm, channels=64, rnn_dim=64),
    )


def _desk_training() -> TrainConfig:
    return TrainConfig(stage1_steps=2000, stage2_steps=1000, guided_attention_weight=1.0)


@dataclass(frozen=True)
class RunConfig:
    run_root: str = "runs"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    mel: MelParams = field(default_factory=MelParams)
    model: ModelConfig = field(default_factory=_desk_model)
    training: TrainConfig = field(default_factory=_desk_training)
    request: RequestSection = field(default_factory=RequestSection)

    @property
    def fingerprint(self) -> str:
        """Hash of everything that determines trained artifacts."""
        data = to_dict(self)
        data.pop("request")
        data.pop("run_root")
        return fingerprint(data)

    @property
    def run_dir(self) -> Path:
        return Path(self.run_root) / self.fingerprint


def _parse_value(text: str):
    return yaml.safe_load(text) if text.strip() else ""


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key.path=value`` strings (values parsed as YAML scalars)."""
    data = dict(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"override {item!r} has an empty key")
        node = data
        for p in parts[:-1]:
            child = node.get(p)
            if child is None:
                child = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {p} is not a section")
            node[p] = dict(child)
            node = node[p]
        node[parts[-1]] = _parse_value(value)
    return data


def _merge(base: dict, patch: dict) -> dict:
    out = dict(base)
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_config(data: dict | None = None, overrides=(), seed: int | None = None) -> RunConfig:
    """Defaults <- ``data`` <- overrides <- ``seed``, then strict validation."""
    patch = apply_overrides(data or {}, overrides)
    if seed is not None:
        patch = apply_overrides(patch, [f"training.seed={int(seed)}"])
    # merging onto the defaults keeps partially specified sections valid
    merged = _merge(to_dict(RunConfig()), patch)
    try:
        return from_dict(RunConfig, merged)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(data, overrides, seed)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
