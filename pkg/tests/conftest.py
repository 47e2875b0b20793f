import numpy as np
import pytest
import torch

from advasr.asr_model import AsrConfig, AsrModel
from advasr.corpus import NUM_RESERVED, CorpusConfig, generate_corpus


@pytest.fixture(scope="session")
def tiny_corpus_config():
    return CorpusConfig(
        num_content_tokens=4,
        feature_dim=8,
        min_transcript_len=2,
        max_transcript_len=3,
        min_frames_per_token=6,
        max_frames_per_token=8,
        noise_std=0.2,
        seed=11,
        train_size=8,
        dev_size=4,
        test_size=4,
    )


@pytest.fixture(scope="session")
def tiny_splits(tiny_corpus_config):
    return generate_corpus(tiny_corpus_config)


@pytest.fixture
def tiny_asr_config(tiny_corpus_config):
    return AsrConfig(
        encoder_layers=1,
        decoder_layers=1,
        d_att=16,
        d_ff=32,
        heads=2,
        vocab_size=NUM_RESERVED + tiny_corpus_config.num_content_tokens,
        dropout=0.0,
        label_smoothing=0.1,
    )


@pytest.fixture
def tiny_model(tiny_asr_config, tiny_corpus_config):
    torch.manual_seed(7)
    return AsrModel(tiny_asr_config, tiny_corpus_config.feature_dim)


def random_simplex_rows(rng: np.random.Generator, n: int, v: int) -> np.ndarray:
    raw = rng.random((n, v)) + 1e-3
    return raw / raw.sum(axis=1, keepdims=True)
