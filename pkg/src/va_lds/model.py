"""Two-stream valence/arousal regressor.

Spatial stream: image backbone -> MLP. Temporal stream: a single
convolution block over phase-difference images. Both per-frame feature
sequences are concatenated and run through a GRU over the window; a linear
head with tanh gives (valence, arousal) in [-1, 1] for every frame.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Tuple

import torch
from torch import nn

from .errors import ConfigError, ValidationError

MODES = ("two_stream", "spatial_only")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    in_channels: int = 1
    cnn_channels: Tuple[int, ...] = (8, 16, 32)
    spatial_feature_dim: int = 32
    mlp_hidden: int = 32
    temporal_channels: int = 16
    recurrent_hidden: int = 32
    window_length: int = 16
    mode: str = "two_stream"
    n_scales: int = 2
    n_orientations: int = 4
    amplitude_quantile: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.window_length < 1:
            raise ConfigError("window_length must be >= 1")
        for name in ("spatial_feature_dim", "mlp_hidden", "temporal_channels",
                     "recurrent_hidden", "image_size", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        object.__setattr__(self, "cnn_channels", tuple(self.cnn_channels))

    @property
    def phase_channels(self) -> int:
        return self.n_scales * self.n_orientations

    def to_dict(self) -> dict:
        return asdict(self)


class SmallCNN(nn.Module):
    """Default spatial backbone: conv-relu-pool blocks then global average pooling.

    Any module with an ``out_dim`` attribute mapping ``(N, C, H, W)`` to
    ``(N, out_dim)`` can replace it (e.g. a wrapped pretrained network).
    """

    def __init__(self, in_channels: int, channels: Sequence[int]):
        super().__init__()
        layers = []
        prev = in_channels
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, 3, padding=1), nn.ReLU(), nn.AvgPool2d(2)]
            prev = ch
        self.body = nn.Sequential(*layers)
        self.out_dim = prev

    def forward(self, x):
        # centre [0, 1] pixels
        return self.body(2.0 * x - 1.0).mean(dim=(2, 3))


class TemporalBlock(nn.Module):
    """One conv block over phase differences, pooled and projected."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.proj = nn.Linear(channels, channels)
        self.out_dim = channels

    def forward(self, x):
        return self.proj(torch.relu(self.conv(x)).mean(dim=(2, 3)))


class TwoStreamRegressor(nn.Module):
    def __init__(self, config: ModelConfig, backbone: Optional[nn.Module] = None):
        super().__init__()
        self.config = config
        self.backbone = backbone or SmallCNN(config.in_channels, config.cnn_channels)
        self.mlp = nn.Sequential(
            nn.Linear(self.backbone.out_dim, config.mlp_hidden),
            nn.ReLU(),
            nn.Linear(config.mlp_hidden, config.spatial_feature_dim),
        )
        fused = config.spatial_feature_dim
        if config.mode == "two_stream":
            self.temporal = TemporalBlock(config.phase_channels, config.temporal_channels)
            fused += config.temporal_channels
        else:
            self.temporal = None
        self.gru = nn.GRU(fused, config.recurrent_hidden, batch_first=True)
        self.head = nn.Linear(config.recurrent_hidden, 2)

    def spatial_forward(self, frames: torch.Tensor) -> torch.Tensor:
        """``(N, C, H, W)`` frames -> ``(N, spatial_feature_dim)``."""
        c = self.config
        if frames.ndim != 4 or frames.shape[0] == 0:
            raise ValidationError("expected a non-empty (N, C, H, W) batch")
        if tuple(frames.shape[1:]) != (c.in_channels, c.image_size, c.image_size):
            raise ValidationError(
                f"frames {tuple(frames.shape[1:])} != {(c.in_channels, c.image_size, c.image_size)}")
        return self.mlp(self.backbone(frames))

    def temporal_forward(self, stacks: torch.Tensor) -> torch.Tensor:
        """``(N, S*O, H, W)`` phase differences -> ``(N, temporal_channels)``."""
        if self.temporal is None:
            raise ValidationError("spatial_only model has no temporal stream")
        c = self.config
        if stacks.ndim != 4 or tuple(stacks.shape[1:]) != (c.phase_channels, c.image_size,
                                                           c.image_size):
            raise ValidationError(f"phase stacks shaped {tuple(stacks.shape)} do not match config")
        return self.temporal(stacks)

    def fuse_and_regress(self, spatial_feats: torch.Tensor,
                         temporal_feats: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``(B, W, Ds)`` and ``(B, W or W-1, Dt)`` features -> ``(B, W, 2)``.

        With ``W - 1`` temporal vectors the first frame gets a zero vector.
        """
        if spatial_feats.shape[1] < 1:
            raise ValidationError("window must hold at least one frame")
        feats = spatial_feats
        if self.temporal is not None:
            b, w = spatial_feats.shape[:2]
            if temporal_feats is None:
                temporal_feats = spatial_feats.new_zeros(b, w, self.config.temporal_channels)
            if temporal_feats.shape[1] == w - 1:
                pad = temporal_feats.new_zeros(b, 1, temporal_feats.shape[2])
                temporal_feats = torch.cat([pad, temporal_feats], dim=1)
            if temporal_feats.shape[1] != w:
                raise ValidationError("temporal features must cover W or W-1 frames")
            feats = torch.cat([spatial_feats, temporal_feats], dim=2)
        out, _ = self.gru(feats)
        return torch.tanh(self.head(out))

    def forward(self, frames: torch.Tensor, diffs: Optional[torch.Tensor] = None,
                diff_valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Per-frame predictions for a batch of windows.

        frames: ``(B, W, C, H, W)``. diffs: ``(B, W, S*O, H, W)`` where
        ``diffs[:, t]`` is the transition into frame ``t``, or ``(B, W-1, ...)``
        for transitions inside the window only. ``diff_valid`` ``(B, W)``
        zeroes the temporal feature of frames with no predecessor.
        """
        b, w = frames.shape[:2]
        spatial = self.spatial_forward(frames.reshape(b * w, *frames.shape[2:])).reshape(b, w, -1)
        if self.temporal is None:
            return self.fuse_and_regress(spatial)
        if diffs is None:
            raise ValidationError("two_stream model needs phase differences")
        n = diffs.shape[1]
        temporal = self.temporal_forward(diffs.reshape(b * n, *diffs.shape[2:])).reshape(b, n, -1)
        if diff_valid is not None:
            temporal = temporal * diff_valid[:, -n:, None].to(temporal.dtype)
        return self.fuse_and_regress(spatial, temporal)


def build_model(config: ModelConfig, seed: Optional[int] = None) -> TwoStreamRegressor:
    if seed is not None:
        torch.manual_seed(seed)
    return TwoStreamRegressor(config)


def count_parameters(config: ModelConfig) -> int:
    model = TwoStreamRegressor(config)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
