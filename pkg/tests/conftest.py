import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)

from storygen.config import default_config
from storygen.data import DatasetSpec, Vocabulary, generate_dataset, save_dataset
from storygen.encoders import (
    AutoencoderConfig,
    EncoderConfig,
    load_encoders,
    pretrain_all,
    save_encoders,
)

# Small dataset used by unit tests; the acceptance suite builds its own.
UNIT_SPEC = DatasetSpec(num_characters=8, num_scenes=4, num_train=96, num_test=24, seed=11)

# Deterministic artifacts are cached here across pytest sessions.
CACHE_DIR = Path(__file__).parent.parent / ".testcache"


def unit_config(spec: DatasetSpec = UNIT_SPEC) -> dict:
    cfg = default_config()
    cfg["data"].update(
        {
            "num_characters": str(spec.num_characters),
            "num_scenes": str(spec.num_scenes),
            "num_train": str(spec.num_train),
            "num_test": str(spec.num_test),
            "seed": str(spec.seed),
        }
    )
    return cfg


@pytest.fixture(scope="session")
def unit_dataset():
    return generate_dataset(UNIT_SPEC, "train"), generate_dataset(UNIT_SPEC, "test"), UNIT_SPEC


@pytest.fixture(scope="session")
def trained_encoders(unit_dataset):
    """Pretrained frozen encoders on the unit dataset, cached on disk."""
    train, test, spec = unit_dataset
    cached = CACHE_DIR / "unit_encoders_v1.ckpt"
    if cached.exists():
        encoder, ae, fixtures, header = load_encoders(cached)
        return encoder, ae, fixtures, header["stats"]
    enc_cfg = EncoderConfig(
        vocab_size=len(spec.vocabulary()),
        caption_length=spec.caption_length,
        image_size=spec.image_size,
    )
    ae_cfg = AutoencoderConfig(image_size=spec.image_size)
    encoder, ae, fixtures, stats = pretrain_all(
        train, test, enc_cfg, ae_cfg, seed=0, clip_iterations=700, ae_iterations=1800
    )
    save_encoders(cached, encoder, ae, fixtures, spec.vocabulary().id_to_word[1:], stats)
    return encoder, ae, fixtures, stats


@pytest.fixture(scope="session")
def unit_workspace(tmp_path_factory, unit_dataset, trained_encoders):
    """On-disk dataset plus encoders checkpoint for runtime/CLI tests."""
    train, test, spec = unit_dataset
    encoder, ae, fixtures, stats = trained_encoders
    root = tmp_path_factory.mktemp("workspace")
    data_dir = root / "data"
    save_dataset(train, spec, data_dir, "train")
    save_dataset(test, spec, data_dir, "test")
    enc_path = root / "encoders.ckpt"
    vocab_words = spec.vocabulary().id_to_word[1:]
    save_encoders(enc_path, encoder, ae, fixtures, vocab_words, stats)
    return {"root": root, "data": data_dir, "encoders": enc_path, "spec": spec}
