import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsekd.core import (
    SEED_ENV_VAR,
    ClipSample,
    ConfigError,
    FrameRecord,
    HyperParams,
    ModelConfig,
    config_from_dict,
    config_to_dict,
    key_frame_position,
    load_config,
    positive_class_weights,
    resolve_seed,
    save_config,
    validate_label_vector,
)


def _frame(label=None, index=0):
    return FrameRecord(image=np.zeros((4, 4, 1), dtype=np.float32), label=label, frame_index=index)


class TestLabelVector:
    def test_accepts_binary(self):
        out = validate_label_vector(np.array([0, 1, 1]), 3)
        assert out.dtype == np.int8

    def test_rejects_nonbinary(self):
        with pytest.raises(ValueError):
            validate_label_vector(np.array([0.5, 1, 0]), 3)

    def test_rejects_wrong_length(self):
        with pytest.raises(ValueError):
            validate_label_vector(np.array([0, 1]), 3)


class TestClipSample:
    def test_key_frame_must_be_labeled(self):
        frames = (_frame(), _frame(), _frame())
        with pytest.raises(ValueError, match="key frame"):
            ClipSample(frames=frames, key_pos=1, clip_id=0)

    def test_non_key_labels_rejected(self):
        label = np.array([1, 0], dtype=np.int8)
        frames = (_frame(label), _frame(label), _frame())
        with pytest.raises(ValueError, match="non-key"):
            ClipSample(frames=frames, key_pos=0, clip_id=0)

    def test_valid_clip(self):
        label = np.array([1, 0], dtype=np.int8)
        frames = (_frame(), _frame(label, 5), _frame())
        clip = ClipSample(frames=frames, key_pos=1, clip_id=3)
        assert clip.clip_len == 3
        assert clip.key_label() is label
        assert clip.images().shape == (3, 4, 4, 1)


class TestPositiveClassWeights:
    def test_balanced_gives_ones(self):
        labels = np.array([[1, 0], [0, 1], [1, 0], [0, 1]])
        np.testing.assert_allclose(positive_class_weights(labels), [1.0, 1.0])

    def test_hand_counts(self):
        # U=2 over 10 samples: pos=[1,4] -> w=[9.0, 1.5]
        labels = np.zeros((10, 2), dtype=np.int8)
        labels[0, 0] = 1
        labels[:4, 1] = 1
        np.testing.assert_allclose(positive_class_weights(labels), [9.0, 1.5])

    def test_zero_positives_clamped(self):
        # 5 samples, no positives: neg/max(pos,1) = 5 <= 10 so w = 5
        labels = np.zeros((5, 2), dtype=np.int8)
        np.testing.assert_allclose(positive_class_weights(labels), [5.0, 5.0])
        # 20 samples, clamp kicks in at 10
        labels = np.zeros((20, 2), dtype=np.int8)
        np.testing.assert_allclose(positive_class_weights(labels), [10.0, 10.0])

    def test_empty_raises(self):
        with pytest.raises(ConfigError):
            positive_class_weights(np.zeros((0, 3)))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=(12, 4))
        shuffled = labels[rng.permutation(12)]
        np.testing.assert_allclose(
            positive_class_weights(labels), positive_class_weights(shuffled)
        )


class TestKeyFramePosition:
    def test_identity(self):
        assert key_frame_position(0, 5) == 0

    def test_arithmetic(self):
        assert key_frame_position(7, 5) == 2

    def test_two_full_rotations(self):
        positions = [key_frame_position(b, 5) for b in range(10)]
        assert sorted(positions[:5]) == [0, 1, 2, 3, 4]
        assert positions[:5] == positions[5:]

    def test_bad_clip_len(self):
        with pytest.raises(ConfigError):
            key_frame_position(3, 0)

    @given(st.integers(0, 10**6), st.integers(1, 50))
    @settings(max_examples=50, deadline=None)
    def test_rotation_fairness(self, start, n):
        window = [key_frame_position(b, n) for b in range(start, start + n)]
        assert sorted(window) == list(range(n))


class TestHyperParams:
    def test_reference_defaults(self):
        hp = HyperParams()
        assert (hp.lambda1, hp.lambda2, hp.lambda3, hp.lambda4) == (0.5, 0.5, 0.2, 0.25)
        assert hp.alpha == 0.5
        assert hp.temperature == 1.0
        assert (hp.ramp_omega, hp.ramp_mu, hp.ramp_sigma) == (2.0, 0.0, 5.0)
        assert hp.warmup_epochs == 5
        assert hp.clip_len == 5
        assert hp.z == 2
        assert hp.lr == 0.01
        assert hp.epochs == 50
        assert hp.tpl_start_epoch == 3

    def test_validation(self):
        with pytest.raises(ConfigError):
            HyperParams(lambda1=-0.1)
        with pytest.raises(ConfigError):
            HyperParams(temperature=0.0)
        with pytest.raises(ConfigError):
            HyperParams(clip_len=1)
        with pytest.raises(ConfigError):
            HyperParams(z=3)
        with pytest.raises(ConfigError):
            HyperParams(kl_direction="sideways")


class TestModelConfig:
    def test_width_consistency(self):
        with pytest.raises(ConfigError):
            ModelConfig(feature_width=30, attn_channels=4, head_dim=8)

    def test_bounds(self):
        with pytest.raises(ConfigError):
            ModelConfig(num_aus=1)
        with pytest.raises(ConfigError):
            ModelConfig(head_dim=0, feature_width=0)


class TestConfigRoundTrip:
    def test_defaults_bit_exact(self, tmp_path):
        hp, mc = HyperParams(), ModelConfig()
        path = tmp_path / "config.yaml"
        save_config(path, hp, mc)
        hp2, mc2 = load_config(path)
        assert hp == hp2
        assert mc == mc2

    def test_nondefault_values_survive(self, tmp_path):
        hp = HyperParams(lambda3=0.17, lr=0.003, kl_direction="student_to_ensemble")
        mc = ModelConfig(feature_width=64, attn_channels=8, head_dim=8)
        path = tmp_path / "config.yaml"
        save_config(path, hp, mc)
        hp2, mc2 = load_config(path)
        assert hp == hp2 and mc == mc2

    def test_unknown_key_rejected(self):
        data = config_to_dict(HyperParams(), ModelConfig())
        data["hyper"]["bogus"] = 1
        with pytest.raises(ConfigError):
            config_from_dict(data)

    def test_missing_section_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"hyper": {}})


class TestSeedResolution:
    def test_env_overrides(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, "99")
        assert resolve_seed(5) == 99

    def test_request_used_without_env(self, monkeypatch):
        monkeypatch.delenv(SEED_ENV_VAR, raising=False)
        assert resolve_seed(5) == 5
        assert resolve_seed(None) == 0

    def test_bad_env_value(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, "not-a-seed")
        with pytest.raises(ConfigError):
            resolve_seed(1)
