import dataclasses

import numpy as np
import pytest
import torch

from sparsekd.core import ModelConfig, RunState
from sparsekd.models import (
    DualBranchModel,
    MlpSpatialTeacher,
    MlpTemporalTeacher,
    PerturbationHead,
    SpatialTokenTeacher,
    TemporalTokenTeacher,
    flatten_attention,
    load_checkpoint,
    save_checkpoint,
)


@pytest.fixture()
def model(tiny_model_config):
    torch.manual_seed(7)
    return DualBranchModel(tiny_model_config)


def _images(batch, cfg, seed=0):
    rng = np.random.default_rng(seed)
    arr = rng.random((batch, cfg.image_channels, cfg.image_size, cfg.image_size))
    return torch.from_numpy(arr.astype(np.float32))


def _clips(batch, cfg, seed=0):
    rng = np.random.default_rng(seed)
    arr = rng.random(
        (batch, cfg.clip_len, cfg.image_channels, cfg.image_size, cfg.image_size)
    )
    return torch.from_numpy(arr.astype(np.float32))


class TestBackbone:
    def test_zero_image_finite(self, model, tiny_model_config):
        logits, _ = model.spatial_branch(torch.zeros(2, 1, 24, 24))
        assert torch.isfinite(logits).all()

    def test_identical_frames_identical_features(self, model, tiny_model_config):
        clip = _clips(1, tiny_model_config)
        clip[0] = clip[0, 0]  # all frames equal
        feats = model.frame_features(clip)
        for q in range(1, tiny_model_config.clip_len):
            torch.testing.assert_close(feats[0, q], feats[0, 0])

    def test_frame_perturbation_is_local(self, model, tiny_model_config):
        clip = _clips(1, tiny_model_config)
        base = model.frame_features(clip)
        perturbed = clip.clone()
        perturbed[0, 2] += 0.05
        feats = model.frame_features(perturbed)
        assert not torch.allclose(feats[0, 2], base[0, 2])
        for q in (0, 1, 3):
            torch.testing.assert_close(feats[0, q], base[0, q])

    def test_shape_mismatch_rejected(self, model):
        with pytest.raises(RuntimeError):
            model.spatial_branch(torch.zeros(1, 3, 24, 24))


class TestSpatialTeacher:
    def test_attention_rows_sum_to_one(self, model, tiny_model_config):
        _, attn = model.spatial_branch(_images(3, tiny_model_config))
        slices = flatten_attention(attn)
        u = tiny_model_config.num_aus
        assert slices.shape[-2:] == (u, u)
        torch.testing.assert_close(
            slices.sum(dim=-1), torch.ones(slices.shape[:-1]), atol=1e-5, rtol=0
        )

    def test_degenerate_encoder_equals_linear_readout(self, tiny_model_config):
        torch.manual_seed(3)
        teacher = SpatialTokenTeacher(tiny_model_config)
        with torch.no_grad():
            for layer in teacher.encoder.layers:
                layer.attn.out_proj.weight.zero_()
                layer.attn.out_proj.bias.zero_()
                layer.fc2.weight.zero_()
                layer.fc2.bias.zero_()
        tokens = torch.randn(2, tiny_model_config.num_aus, tiny_model_config.feature_width)
        logits, _ = teacher(tokens)
        expected = teacher.readout(tokens + teacher.pos_embed).squeeze(-1)
        torch.testing.assert_close(logits, expected, atol=1e-6, rtol=0)

    def test_permutation_equivariance(self, tiny_model_config):
        torch.manual_seed(4)
        teacher = SpatialTokenTeacher(tiny_model_config)
        tokens = torch.randn(2, tiny_model_config.num_aus, tiny_model_config.feature_width)
        perm = torch.tensor([2, 0, 1])
        logits, _ = teacher(tokens)
        with torch.no_grad():
            teacher.pos_embed.copy_(teacher.pos_embed[perm])
        permuted_logits, _ = teacher(tokens[:, perm])
        torch.testing.assert_close(permuted_logits, logits[:, perm], atol=1e-5, rtol=1e-5)

    def test_token_count_validated(self, tiny_model_config):
        teacher = SpatialTokenTeacher(tiny_model_config)
        with pytest.raises(ValueError, match="AU tokens"):
            teacher(torch.zeros(1, 5, tiny_model_config.feature_width))


class TestStudentHeads:
    def test_eval_mode_deterministic(self, model):
        x = torch.randn(3, 16)
        a, fa = model.student(0, x, training=False)
        b, fb = model.student(0, x, training=False)
        torch.testing.assert_close(a, b)
        torch.testing.assert_close(fa, fb)

    def test_full_dropout_bias_only(self, tiny_model_config):
        cfg = dataclasses.replace(tiny_model_config, student_dropout=1.0)
        torch.manual_seed(0)
        model = DualBranchModel(cfg)
        x = torch.randn(4, 16)
        logits, _ = model.student(1, x, training=True)
        expected = model.students[1].classifier.bias.expand_as(logits)
        torch.testing.assert_close(logits, expected)

    def test_heads_have_isolated_parameters(self, model):
        x = torch.randn(2, 16)
        before_other, _ = model.student(1, x, training=False)
        with torch.no_grad():
            model.students[0].fc1.weight += 1.0
            model.students[0].classifier.bias += 0.5
        after_changed, _ = model.student(0, x, training=False)
        after_other, _ = model.student(1, x, training=False)
        torch.testing.assert_close(after_other, before_other)
        assert not torch.allclose(after_changed, before_other)

    def test_identical_initialization(self, model):
        s0 = model.students[0].state_dict()
        for head in list(model.students)[1:]:
            for key, value in head.state_dict().items():
                torch.testing.assert_close(value, s0[key])


class TestTemporalTeacher:
    def test_attention_rows_and_token_count(self, model, tiny_model_config):
        tokens = torch.randn(2, tiny_model_config.clip_len, tiny_model_config.feature_width)
        au, ssl, attn = model.temporal_branch(tokens, key_pos=0)
        assert au.shape == (2, tiny_model_config.num_aus)
        assert ssl.shape == (2,)
        slices = flatten_attention(attn)
        torch.testing.assert_close(
            slices.sum(dim=-1), torch.ones(slices.shape[:-1]), atol=1e-5, rtol=0
        )
        with pytest.raises(ValueError, match="frame tokens"):
            model.temporal_branch(tokens[:, :3], key_pos=0)

    def test_constant_tokens_permutation_invariant_ssl(self, model, tiny_model_config):
        token = torch.randn(1, 1, tiny_model_config.feature_width)
        tokens = token.repeat(1, tiny_model_config.clip_len, 1)
        _, ssl_a, _ = model.temporal_branch(tokens, key_pos=0)
        perm = torch.randperm(tiny_model_config.clip_len)
        _, ssl_b, _ = model.temporal_branch(tokens[:, perm], key_pos=0)
        torch.testing.assert_close(ssl_a, ssl_b)

    def test_key_pooling_switch(self, tiny_model_config):
        cfg = dataclasses.replace(tiny_model_config, temporal_pool="key")
        torch.manual_seed(0)
        teacher = TemporalTokenTeacher(cfg)
        tokens = torch.randn(2, cfg.clip_len, cfg.feature_width)
        au0, _, _ = teacher(tokens, key_pos=0)
        au1, _, _ = teacher(tokens, key_pos=1)
        assert not torch.allclose(au0, au1)
        with pytest.raises(ValueError, match="key_pos"):
            teacher(tokens)

    def test_perturbation_head_scale_invariant(self, tiny_model_config):
        torch.manual_seed(1)
        head = PerturbationHead(4, 16)
        tokens = torch.randn(3, 4, 16)
        torch.testing.assert_close(head(tokens), head(tokens * 7.5), atol=1e-5, rtol=1e-4)


class TestMlpVariants:
    def test_spatial_mlp_shapes(self, tiny_model_config):
        teacher = MlpSpatialTeacher(tiny_model_config)
        logits, attn = teacher(torch.randn(2, 3, 16))
        assert logits.shape == (2, 3) and attn is None

    def test_temporal_mlp_order_sensitive(self, tiny_model_config):
        torch.manual_seed(2)
        teacher = MlpTemporalTeacher(tiny_model_config)
        tokens = torch.randn(1, 4, 16)
        au_a, _, _ = teacher(tokens)
        au_b, _, _ = teacher(tokens[:, [1, 0, 2, 3]])
        assert not torch.allclose(au_a, au_b)

    def test_model_builds_without_transformer(self, tiny_model_config):
        cfg = dataclasses.replace(tiny_model_config, use_transformer=False)
        model = DualBranchModel(cfg)
        logits, attn = model.spatial_branch(_images(2, cfg))
        assert logits.shape == (2, cfg.num_aus) and attn is None


class TestModelInvariants:
    def test_branches_parameter_disjoint(self, model):
        a, b = model.branch_parameter_ids()
        assert not (a & b)
        assert len(a | b) == sum(1 for _ in model.parameters())

    def test_parameter_budget(self):
        model = DualBranchModel(ModelConfig())
        assert model.num_parameters() < 30_000_000

    def test_forward_finite_on_random_inputs(self, model, tiny_model_config):
        torch.manual_seed(0)
        rng = np.random.default_rng(0)
        batch = 50
        for trial in range(20):  # 20 x 50 = 1000 random inputs
            images = torch.from_numpy(
                rng.standard_normal((batch, 1, 24, 24)).astype(np.float32)
            ).clamp(0, 1)
            logits, _ = model.spatial_branch(images)
            assert torch.isfinite(logits).all()
            tokens = torch.from_numpy(
                rng.standard_normal((batch, 4, 16)).astype(np.float32)
            )
            au, ssl, _ = model.temporal_branch(tokens, key_pos=0)
            assert torch.isfinite(au).all() and torch.isfinite(ssl).all()


class TestGradientChecks:
    """Autograd vs central finite differences at random parameter coordinates."""

    @staticmethod
    def _fd_check(model, forward, n_probes=10, h=1e-6, seed=0):
        rng = np.random.default_rng(seed)
        params = [p for p in model.parameters() if p.requires_grad]
        model.zero_grad()
        out = forward()
        proj = torch.from_numpy(rng.standard_normal(out.numel())).to(out.dtype)
        (out.flatten() @ proj).backward()
        checked = 0
        while checked < n_probes:
            p = params[int(rng.integers(len(params)))]
            if p.grad is None:
                continue
            idx = int(rng.integers(p.numel()))
            grad = p.grad.flatten()[idx].item()
            with torch.no_grad():
                orig = p.flatten()[idx].item()
                p.flatten()[idx] = orig + h
                up = float(forward().flatten() @ proj)
                p.flatten()[idx] = orig - h
                down = float(forward().flatten() @ proj)
                p.flatten()[idx] = orig
            fd = (up - down) / (2 * h)
            scale = max(abs(grad), abs(fd), 1e-6)
            assert abs(grad - fd) / scale <= 1e-3, (grad, fd)
            checked += 1

    def test_spatial_branch_gradients(self, tiny_model_config):
        torch.manual_seed(11)
        model = DualBranchModel(tiny_model_config).double()
        images = _images(2, tiny_model_config).double()
        self._fd_check(model, lambda: model.spatial_branch(images)[0])

    def test_frame_and_student_gradients(self, tiny_model_config):
        torch.manual_seed(12)
        model = DualBranchModel(tiny_model_config).double()
        clips = _clips(2, tiny_model_config).double()

        def forward():
            feats = model.frame_features(clips)
            logits, _ = model.student(1, feats[:, 1], training=False)
            return logits

        self._fd_check(model, forward)

    def test_temporal_branch_gradients(self, tiny_model_config):
        torch.manual_seed(13)
        model = DualBranchModel(tiny_model_config).double()
        tokens = torch.randn(2, 4, 16, dtype=torch.float64)

        def forward():
            au, ssl, _ = model.temporal_branch(tokens, key_pos=2)
            return torch.cat([au.flatten(), ssl.flatten()])

        self._fd_check(model, forward)


class TestCheckpoint:
    def test_round_trip(self, model, tiny_model_config, tmp_path):
        state = RunState(epoch=4, batch_counter=17, rng_seed=9, pos_weights=np.array([1.0, 2.0, 0.5]))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, state)
        loaded, restored, hp = load_checkpoint(path)
        assert hp is None
        assert restored.epoch == 4 and restored.batch_counter == 17 and restored.rng_seed == 9
        np.testing.assert_allclose(restored.pos_weights, [1.0, 2.0, 0.5])
        assert loaded.cfg == tiny_model_config
        images = _images(2, tiny_model_config)
        torch.testing.assert_close(
            loaded.spatial_branch(images)[0], model.spatial_branch(images)[0]
        )
