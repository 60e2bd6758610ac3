import dataclasses
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent))

from accent_tts.corpus import SyntheticCorpusSpec, generate_synthetic_corpus, split_dataset  # noqa: E402
from accent_tts.training import ModelConfig  # noqa: E402


def tiny_model_config(text_dim=16, global_dim=8, local_dim=4, **am) -> ModelConfig:
    """A model small enough for sub-second unit tests."""
    base = dict(embedding_dim=16, prenet_dim=16, attention_rnn_dim=16, decoder_rnn_dim=16,
                attention_dim=8, location_filters=4, location_kernel=5, speaker_proj_dim=8,
                postnet_channels=8)
    base.update(am)
    cfg = ModelConfig.from_dims(text_dim=text_dim, global_dim=global_dim, local_dim=local_dim,
                                **base)
    return dataclasses.replace(
        cfg,
        global_accent=dataclasses.replace(cfg.global_accent, channels=8, hidden_dim=8),
        local_accent=dataclasses.replace(cfg.local_accent, channels=8, rnn_dim=8,
                                         classifier_dim=8),
        lapm=dataclasses.replace(cfg.lapm, channels=8, rnn_dim=8),
    )


def desk_model_config() -> ModelConfig:
    """The CLI's default desk-scale model."""
    from accent_tts.config import RunConfig

    return RunConfig().model


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def small_corpus():
    """2 accents x 2 speakers x 6 utterances, 2 test utterances per speaker."""
    spec = SyntheticCorpusSpec.build(2, 2, 6, 6, seed=3)
    manifest, table = generate_synthetic_corpus(spec)
    return split_dataset(manifest, 0, 2, seed=0), table, spec


@pytest.fixture(scope="session")
def tiny_pipeline(small_corpus):
    """Barely trained stage-1 and stage-2 checkpoints on ``small_corpus``."""
    from accent_tts.training import TrainConfig, extract_targets, train_stage1, train_stage2

    manifest, table, _ = small_corpus
    cfg = TrainConfig(batch_size=2, stage1_steps=3, stage2_steps=3, seed=1)
    s1 = train_stage1(manifest, table, tiny_model_config(), cfg)
    s2 = train_stage2(s1, extract_targets(s1, manifest), manifest, cfg)
    return s1, s2


def write_tiny_cli_config(directory: Path, **sections) -> Path:
    """A YAML run config whose whole CLI chain runs in seconds."""
    import yaml

    from accent_tts.structio import to_dict

    data = {
        "run_root": str(directory / "runs"),
        "synthetic": {"n_accents": 2, "n_speakers_per_accent": 2, "n_utterances_per_speaker": 6,
                      "phoneme_count": 6},
        "corpus": {"test_per_speaker": 2},
        "model": to_dict(tiny_model_config()),
        "training": {"batch_size": 4, "stage1_steps": 6, "stage2_steps": 6},
        "request": {"phonemes": "p0 p1 p2", "accent": "ZH", "speaker": "AR0", "max_steps": 15,
                    "reference": "ZH1_0000",
                    "eval_gl_iterations": 2},
    }
    for key, patch in sections.items():
        data[key] = {**data.get(key, {}), **patch}
    path = directory / "tiny.yaml"
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path
