"""Learnable components: two non-weight-sharing convolutional branches,
an AU-token transformer teacher on the image branch, per-position noisy
MLP student heads on the clip branch, and a frame-token transformer teacher
hosting both the AU classifier and the order-perturbation binary head.

The token encoders are pre-norm: residual streams stay untouched when the
attention/MLP output projections are zero, and every attention softmax is
recorded for inspection.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import ConfigError, HyperParams, ModelConfig, RunState

CHECKPOINT_FORMAT_VERSION = 1


def _norm_groups(channels: int) -> int:
    return 4 if channels % 4 == 0 else 1


class ConvBackbone(nn.Module):
    """Stride-2 conv stack producing a spatial feature map.

    GroupNorm keeps samples independent, so per-frame features never mix
    across a batch or a clip.
    """

    def __init__(self, in_channels: int, widths: tuple[int, ...]):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_channels
        for width in widths:
            layers += [
                nn.Conv2d(prev, width, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(_norm_groups(width), width),
                nn.ReLU(),
            ]
            prev = width
        self.blocks = nn.Sequential(*layers)
        self.out_channels = prev

    def forward(self, x: Tensor) -> Tensor:
        return self.blocks(x)


class SelfAttention(nn.Module):
    """Multi-head self-attention that keeps its last softmax matrix."""

    def __init__(self, width: int, heads: int, head_dim: int):
        super().__init__()
        if heads * head_dim != width:
            raise ConfigError("width must equal heads * head_dim")
        self.heads = heads
        self.head_dim = head_dim
        self.qkv = nn.Linear(width, 3 * width)
        self.out_proj = nn.Linear(width, width)
        self.last_attention: Optional[Tensor] = None

    def forward(self, x: Tensor) -> Tensor:
        batch, tokens, width = x.shape
        qkv = self.qkv(x).reshape(batch, tokens, 3, self.heads, self.head_dim)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))  # (B, H, T, d)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)
        self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(batch, tokens, width)
        return self.out_proj(out)


class EncoderLayer(nn.Module):
    """Pre-norm transformer block: x += attn(LN(x)); x += mlp(LN(x))."""

    def __init__(self, width: int, heads: int, head_dim: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads, head_dim)
        self.norm2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, mlp_ratio * width)
        self.fc2 = nn.Linear(mlp_ratio * width, width)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


class TokenEncoder(nn.Module):
    """Stack of encoder layers; returns tokens plus stacked attention maps."""

    def __init__(self, width: int, heads: int, head_dim: int, depth: int):
        super().__init__()
        self.layers = nn.ModuleList(
            EncoderLayer(width, heads, head_dim) for _ in range(depth)
        )

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        for layer in self.layers:
            x = layer(x)
        attn = torch.stack([layer.attn.last_attention for layer in self.layers])
        return x, attn  # attn: (L, B, heads, T, T)


def flatten_attention(attn: Tensor) -> Tensor:
    """(L, B, heads, T, T) -> (C, T, T) channel-major attention slices."""
    tokens = attn.shape[-1]
    return attn.reshape(-1, tokens, tokens)


@dataclass
class AttentionMatrices:
    """Recorded softmax slices from the two token encoders, rows sum to 1."""

    au: Optional[Tensor] = None  # (C, U, U)
    frame: Optional[Tensor] = None  # (C, N, N)


class SpatialTokenTeacher(nn.Module):
    """Transformer over U per-AU tokens with learnable AU position embeddings.

    No classification token: each encoded token is read out to one logit.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_aus, cfg.feature_width))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.encoder = TokenEncoder(
            cfg.feature_width, cfg.attn_channels, cfg.head_dim, cfg.encoder_layers
        )
        self.readout = nn.Linear(cfg.feature_width, 1)

    def forward(self, au_tokens: Tensor) -> tuple[Tensor, Tensor]:
        if au_tokens.shape[1] != self.pos_embed.shape[0]:
            raise ValueError(
                f"expected {self.pos_embed.shape[0]} AU tokens, got {au_tokens.shape[1]}"
            )
        x, attn = self.encoder(au_tokens + self.pos_embed)
        return self.readout(x).squeeze(-1), attn


class MlpSpatialTeacher(nn.Module):
    """Flat-MLP replacement for the AU-token transformer (ablation)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        width = cfg.num_aus * cfg.feature_width
        self.fc1 = nn.Linear(width, 2 * cfg.feature_width)
        self.fc2 = nn.Linear(2 * cfg.feature_width, cfg.num_aus)

    def forward(self, au_tokens: Tensor) -> tuple[Tensor, None]:
        flat = au_tokens.reshape(au_tokens.shape[0], -1)
        return self.fc2(F.relu(self.fc1(flat))), None


class StudentHead(nn.Module):
    """Small noisy MLP head for one clip position.

    Dropout is driven by the explicit ``training`` flag, not module mode, so
    teacher-side inference stays deterministic regardless of train()/eval().
    The returned token feature is the pre-dropout hidden state: the noise
    perturbs the classification path only, keeping the frame-token sequence
    temporally smooth for the perturbation filter.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.feature_width, cfg.feature_width)
        self.classifier = nn.Linear(cfg.feature_width, cfg.num_aus)
        self.dropout = cfg.student_dropout

    def forward(self, x: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        hidden = F.relu(self.fc1(x))
        noisy = F.dropout(hidden, p=self.dropout, training=training)
        return self.classifier(noisy), hidden


class PerturbationHead(nn.Module):
    """Binary order-perturbation logit from adjacent-token differences.

    Timeline shuffling manifests as large jumps between neighbouring tokens.
    The jumps are measured relative to the clip's own token scale, so the
    statistic is O(1) regardless of how feature magnitudes drift during
    training; that keeps this small head learnable in tens of steps even
    under the down-weighted self-supervised loss.
    """

    # spreads relative jumps over ~[0, 8]: big enough that the down-weighted
    # BCE moves this head within the gate's two warm-up epochs
    GAIN = 16.0

    def __init__(self, clip_len: int, width: int):
        super().__init__()
        self.fc1 = nn.Linear((clip_len - 1) * width, 2 * width)
        self.fc2 = nn.Linear(2 * width, 1)

    def forward(self, tokens: Tensor) -> Tensor:
        # jump direction is arbitrary; magnitude carries the order signal
        diffs = (tokens[:, 1:] - tokens[:, :-1]).abs()
        scale = tokens.abs().mean(dim=(1, 2), keepdim=True) + 1e-6
        hidden = F.relu(self.fc1((self.GAIN * diffs / scale).flatten(1)))
        return self.fc2(hidden).squeeze(-1)


class TemporalTokenTeacher(nn.Module):
    """Transformer over n frame tokens with two heads: AU logits and a
    single order-perturbation logit."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.clip_len = cfg.clip_len
        self.pool = cfg.temporal_pool
        self.pos_embed = nn.Parameter(torch.zeros(cfg.clip_len, cfg.feature_width))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.encoder = TokenEncoder(
            cfg.feature_width, cfg.attn_channels, cfg.head_dim, cfg.encoder_layers
        )
        self.au_head = nn.Linear(cfg.feature_width, cfg.num_aus)
        self.ssl_head = PerturbationHead(cfg.clip_len, cfg.feature_width)

    def forward(
        self, frame_tokens: Tensor, key_pos: Optional[int] = None
    ) -> tuple[Tensor, Tensor, Tensor]:
        if frame_tokens.shape[1] != self.clip_len:
            raise ValueError(
                f"expected {self.clip_len} frame tokens, got {frame_tokens.shape[1]}"
            )
        x, attn = self.encoder(frame_tokens + self.pos_embed)
        if self.pool == "key":
            if key_pos is None:
                raise ValueError("temporal_pool='key' requires key_pos")
            pooled = x[:, key_pos]
        else:
            pooled = x.mean(dim=1)
        # the perturbation head reads the raw token sequence: encoder mixing
        # dilutes adjacent-token jumps, the order cue it depends on
        return self.au_head(pooled), self.ssl_head(frame_tokens), attn


class MlpTemporalTeacher(nn.Module):
    """Flat-MLP replacement for the frame-token transformer (ablation).

    Flattening keeps order sensitivity, so the perturbation head still works.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.clip_len = cfg.clip_len
        width = cfg.clip_len * cfg.feature_width
        self.fc1 = nn.Linear(width, 2 * cfg.feature_width)
        self.au_head = nn.Linear(2 * cfg.feature_width, cfg.num_aus)
        self.ssl_head = PerturbationHead(cfg.clip_len, cfg.feature_width)

    def forward(
        self, frame_tokens: Tensor, key_pos: Optional[int] = None
    ) -> tuple[Tensor, Tensor, None]:
        if frame_tokens.shape[1] != self.clip_len:
            raise ValueError(
                f"expected {self.clip_len} frame tokens, got {frame_tokens.shape[1]}"
            )
        hidden = F.relu(self.fc1(frame_tokens.reshape(frame_tokens.shape[0], -1)))
        return self.au_head(hidden), self.ssl_head(frame_tokens), None


class DualBranchModel(nn.Module):
    """Everything learnable, wired as two weight-disjoint branches.

    Branch A: backbone -> U parallel 1x1-projection + pooling heads -> AU
    tokens -> spatial teacher. Branch B: backbone per frame -> per-frame
    features -> n student heads -> frame tokens -> temporal teacher.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        width = cfg.feature_width
        self.backbone_a = ConvBackbone(cfg.image_channels, cfg.backbone_channels)
        self.au_projection = nn.Conv2d(
            self.backbone_a.out_channels, cfg.num_aus * width, kernel_size=1
        )
        self.backbone_b = ConvBackbone(cfg.image_channels, cfg.backbone_channels)
        # per-frame reduction keeps the spatial layout (flatten, not pool):
        # frame tokens must see object positions for motion to be encodable
        map_side = cfg.image_size
        for _ in cfg.backbone_channels:
            map_side = (map_side + 1) // 2
        self.frame_projection = nn.Linear(
            self.backbone_b.out_channels * map_side * map_side, width
        )
        self.students = nn.ModuleList(StudentHead(cfg) for _ in range(cfg.clip_len))
        # identical starting point for all position heads: early shuffle
        # detection then reflects frame content rather than head identity
        head0_state = self.students[0].state_dict()
        for head in list(self.students)[1:]:
            head.load_state_dict(head0_state)
        if cfg.use_transformer:
            self.spatial_teacher = SpatialTokenTeacher(cfg)
            self.temporal_teacher = TemporalTokenTeacher(cfg)
        else:
            self.spatial_teacher = MlpSpatialTeacher(cfg)
            self.temporal_teacher = MlpTemporalTeacher(cfg)

    # -- branch A ----------------------------------------------------------

    def spatial_features(self, images: Tensor) -> Tensor:
        """Images (B, C, H, W) -> decoupled AU tokens (B, U, W)."""
        fmap = self.backbone_a(images)
        proj = self.au_projection(fmap)
        batch = proj.shape[0]
        per_au = proj.reshape(batch, self.cfg.num_aus, self.cfg.feature_width, -1)
        return per_au.mean(dim=-1)

    def spatial_branch(self, images: Tensor) -> tuple[Tensor, Optional[Tensor]]:
        """Images -> (AU logits (B, U), recorded attention or None)."""
        return self.spatial_teacher(self.spatial_features(images))

    # -- branch B ----------------------------------------------------------

    def frame_features(self, clips: Tensor) -> Tensor:
        """Clips (B, n, C, H, W) -> per-frame features (B, n, W)."""
        batch, n = clips.shape[:2]
        flat = clips.reshape(batch * n, *clips.shape[2:])
        fmap = self.backbone_b(flat)
        return self.frame_projection(fmap.flatten(1)).reshape(batch, n, -1)

    def student(self, position: int, feats: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        """Run the head owned by one clip position: (logits, token feature)."""
        return self.students[position](feats, training)

    def temporal_branch(
        self, frame_tokens: Tensor, key_pos: Optional[int] = None
    ) -> tuple[Tensor, Tensor, Optional[Tensor]]:
        return self.temporal_teacher(frame_tokens, key_pos)

    # -- bookkeeping ---------------------------------------------------------

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def branch_parameter_ids(self) -> tuple[set[int], set[int]]:
        """Parameter identity sets for branch A and branch B (must be disjoint)."""
        branch_a = {id(p) for m in (self.backbone_a, self.au_projection, self.spatial_teacher) for p in m.parameters()}
        branch_b = {
            id(p)
            for m in (self.backbone_b, self.frame_projection, self.students, self.temporal_teacher)
            for p in m.parameters()
        }
        return branch_a, branch_b


def save_checkpoint(
    path: str | Path,
    model: DualBranchModel,
    run_state: RunState,
    hp: Optional[HyperParams] = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": dataclasses.asdict(model.cfg),
        "state_dict": model.state_dict(),
        "run_state": {
            "epoch": run_state.epoch,
            "batch_counter": run_state.batch_counter,
            "rng_seed": run_state.rng_seed,
            "pos_weights": None
            if run_state.pos_weights is None
            else [float(v) for v in run_state.pos_weights],
        },
        "hyper": None if hp is None else dataclasses.asdict(hp),
    }
    torch.save(payload, path)


def load_checkpoint(
    path: str | Path,
) -> tuple[DualBranchModel, RunState, Optional[HyperParams]]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {payload.get('format_version')}")
    cfg_dict = dict(payload["model_config"])
    cfg_dict["backbone_channels"] = tuple(cfg_dict["backbone_channels"])
    cfg = ModelConfig(**cfg_dict)
    model = DualBranchModel(cfg)
    model.load_state_dict(payload["state_dict"])
    rs = payload["run_state"]
    run_state = RunState(
        epoch=rs["epoch"],
        batch_counter=rs["batch_counter"],
        rng_seed=rs["rng_seed"],
        pos_weights=None if rs["pos_weights"] is None else np.asarray(rs["pos_weights"]),
    )
    hp = None if payload.get("hyper") is None else HyperParams(**payload["hyper"])
    return model, run_state, hp
