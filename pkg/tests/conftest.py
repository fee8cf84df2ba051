import numpy as np
import pytest
import torch

from sparsekd.core import HyperParams, ModelConfig
from sparsekd.synthdata import SynthConfig, generate_corpus, sample_sparse_labels

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_synth_config() -> SynthConfig:
    return SynthConfig(
        num_sequences=4,
        frames_per_sequence=40,
        num_aus=3,
        image_size=24,
        co_occurrence=((0, 1, 1.0),),
        smoothness=5,
        noise_std=0.02,
        glitch_prob=0.05,
        seed=11,
    )


@pytest.fixture(scope="session")
def tiny_corpus(tiny_synth_config):
    return generate_corpus(tiny_synth_config)


@pytest.fixture(scope="session")
def tiny_sparse_corpus(tiny_corpus):
    return sample_sparse_labels(tiny_corpus, 0.2, "strided")


@pytest.fixture(scope="session")
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        num_aus=3,
        clip_len=4,
        image_size=24,
        image_channels=1,
        feature_width=16,
        attn_channels=2,
        head_dim=8,
        encoder_layers=1,
        backbone_channels=(4, 8),
        student_dropout=0.25,
    )


@pytest.fixture(scope="session")
def tiny_hyper_params() -> HyperParams:
    return HyperParams(epochs=2, batch_size=4, clip_len=4)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
