"""Transformer blocks: pose VAE, action VAE, object aggregator, sequence feature net.

Both VAE blocks share the same layout: the encoder input is two trainable
distribution tokens followed by the content tokens, the first two output
tokens parameterize a diagonal Gaussian (mean and log-variance), and the
decoder is a parallel transformer decoder whose queries are sinusoidal
position/phase encodings cross-attending the latent (plus optional context).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from .codec import FRAME_DIM, TRANSLATION_DIMS
from .errors import ConfigInvalid, ShapeMismatch


@dataclass(frozen=True)
class ModelConfig:
    d: int = 512
    enc_layers: int = 9
    dec_layers: int = 9
    heads: int = 8
    ffn: int = 2048
    t: int = 16
    max_frames: int = 256          # longest observation fed to the cascade
    n_max: int = 16                # observed clips for the action encoder
    nbar_max: int = 16             # predicted clips from the action decoder
    dropout: float = 0.1
    d_text: int | None = None      # label embedding dim, defaults to d
    translation_scale: float = 0.01
    decoder_skip: bool = True
    decoder_context: bool = True
    epo_layers: int = 2
    fid_layers: int = 9
    logvar_offset: float = 0.0     # added to the raw log-variance token readout

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigInvalid(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 4 != 0:
            raise ConfigInvalid("d must be divisible by 4 for the input embedding split")
        if self.t < 2:
            raise ConfigInvalid("clip length t must be >= 2")
        if self.max_frames % self.t != 0:
            raise ConfigInvalid("max_frames must be a multiple of t")
        if self.translation_scale <= 0:
            raise ConfigInvalid("translation_scale must be positive")

    @property
    def text_dim(self) -> int:
        return self.d if self.d_text is None else self.d_text

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(
            d=64, enc_layers=2, dec_layers=2, heads=4, ffn=128,
            dropout=0.0, epo_layers=2, fid_layers=2,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


class LatentDistribution(NamedTuple):
    mu: torch.Tensor
    logvar: torch.Tensor


def reparameterize(
    dist: LatentDistribution,
    generator: torch.Generator | None = None,
    mode: str = "sample",
    variance_scale: float = 1.0,
) -> torch.Tensor:
    """Draw from N(mu, variance_scale * diag(exp(logvar))), or return mu."""
    if mode == "mean" or variance_scale == 0.0:
        return dist.mu
    if mode != "sample":
        raise ValueError(f"unknown mode {mode!r}")
    eps = torch.randn(dist.mu.shape, generator=generator, dtype=dist.mu.dtype, device=dist.mu.device)
    return dist.mu + torch.sqrt(variance_scale * torch.exp(dist.logvar)) * eps


def sinusoidal_encoding(positions: torch.Tensor, d: int) -> torch.Tensor:
    """Standard sinusoidal encoding for integer positions (...,) -> (..., d)."""
    positions = positions.to(torch.float32)
    half = torch.arange(0, d, 2, dtype=torch.float32, device=positions.device)
    freq = torch.exp(-np.log(10000.0) * half / d)
    args = positions[..., None] * freq
    out = torch.zeros(*positions.shape, d, device=positions.device)
    out[..., 0::2] = torch.sin(args)
    out[..., 1::2] = torch.cos(args)
    return out


def phase_encoding(clip_index: int, d: int) -> torch.Tensor:
    """Phase of a clip: sinusoidal encoding of its 1-based ordinal position."""
    if clip_index < 1:
        raise ValueError("clip index is 1-based")
    return sinusoidal_encoding(torch.tensor([clip_index]), d)[0]


def frames_to_model_units(frames: np.ndarray, config: ModelConfig) -> torch.Tensor:
    """Codec frames (mm translations) -> float32 model tensor with O(1) entries."""
    out = np.array(frames, dtype=np.float32)
    out[..., TRANSLATION_DIMS] *= config.translation_scale
    return torch.from_numpy(out)


def frames_from_model_units(frames: torch.Tensor, config: ModelConfig) -> np.ndarray:
    """Inverse of :func:`frames_to_model_units`; returns float64 codec frames."""
    out = frames.detach().cpu().numpy().astype(np.float64)
    out[..., TRANSLATION_DIMS] /= config.translation_scale
    return out


# No final LayerNorm after the pre-LN stacks: the first two output tokens are
# read directly as a Gaussian's mean/log-variance (and the action decoder's
# tokens directly as mid-level features), so their scale must stay free.
def _encoder(config: ModelConfig, layers: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        config.d, config.heads, config.ffn, config.dropout,
        activation="gelu", batch_first=True, norm_first=True,
    )
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


def _decoder(config: ModelConfig, layers: int) -> nn.TransformerDecoder:
    layer = nn.TransformerDecoderLayer(
        config.d, config.heads, config.ffn, config.dropout,
        activation="gelu", batch_first=True, norm_first=True,
    )
    return nn.TransformerDecoder(layer, layers)


class FrameEmbedding(nn.Module):
    """Per-frame input embedding: [FC(p): d/2 | FC(v): d/4 | FC(r): d/4]."""

    def __init__(self, d: int):
        super().__init__()
        self.proj_p = nn.Linear(120, d // 2)
        self.proj_v = nn.Linear(18, d // 4)
        self.proj_r = nn.Linear(9, d // 4)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.shape[-1] != FRAME_DIM:
            raise ShapeMismatch(f"expected trailing dim {FRAME_DIM}, got {frames.shape}")
        return torch.cat(
            [
                self.proj_p(frames[..., 0:120]),
                self.proj_v(frames[..., 120:138]),
                self.proj_r(frames[..., 138:147]),
            ],
            dim=-1,
        )


class FrameHead(nn.Module):
    """Token -> frame vector head: widths [d, d, 147], LeakyReLU hidden."""

    def __init__(self, d: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d, d), nn.LeakyReLU(),
            nn.Linear(d, d), nn.LeakyReLU(),
            nn.Linear(d, FRAME_DIM),
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.net(tokens)


class PoseBlock(nn.Module):
    """Short-span pose VAE over clips of t frames."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d
        self.embed = FrameEmbedding(d)
        self.head = FrameHead(d)
        self.mu_token = nn.Parameter(torch.randn(d) * 0.02)
        self.logvar_token = nn.Parameter(torch.randn(d) * 0.02)
        self.encoder = _encoder(config, config.enc_layers)
        self.decoder = _decoder(config, config.dec_layers)

    def encode(self, frames: torch.Tensor):
        """(B, t, 147) -> refined frames, latent distribution, frame tokens.

        Token layout is exact: output[0], output[1] are the distribution
        tokens; the remaining t align index-wise with the input frames.
        """
        if frames.ndim != 3 or frames.shape[1] != self.config.t or frames.shape[2] != FRAME_DIM:
            raise ShapeMismatch(f"expected (B, {self.config.t}, {FRAME_DIM}), got {tuple(frames.shape)}")
        b, t, _ = frames.shape
        content = self.embed(frames) + sinusoidal_encoding(
            torch.arange(1, t + 1, device=frames.device), self.config.d
        )
        lead = torch.stack([self.mu_token, self.logvar_token]).expand(b, -1, -1)
        out = self.encoder(torch.cat([lead, content], dim=1))
        dist = LatentDistribution(out[:, 0], out[:, 1] + self.config.logvar_offset)
        tokens = out[:, 2:]
        return self.head(tokens), dist, tokens

    def decode(self, mid: torch.Tensor, skip: torch.Tensor | None = None) -> torch.Tensor:
        """Mid-level (B, d) [+ optional (B, t, d) skip tokens] -> (B, t, 147).

        One parallel pass: queries are the position encodings of the next t
        frames; memory is the latent optionally concatenated with the
        encoder's frame tokens.
        """
        if mid.ndim != 2 or mid.shape[1] != self.config.d:
            raise ShapeMismatch(f"expected (B, {self.config.d}) mid-level, got {tuple(mid.shape)}")
        b = mid.shape[0]
        t = self.config.t
        queries = sinusoidal_encoding(torch.arange(1, t + 1, device=mid.device), self.config.d)
        queries = queries.expand(b, -1, -1)
        memory = mid[:, None, :]
        if skip is not None:
            memory = torch.cat([memory, skip], dim=1)
        return self.head(self.decoder(queries, memory))


class ActionBlock(nn.Module):
    """Long-span action VAE over sequences of mid-level clip features."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d
        self.mu_token = nn.Parameter(torch.randn(d) * 0.02)
        self.logvar_token = nn.Parameter(torch.randn(d) * 0.02)
        self.encoder = _encoder(config, config.enc_layers)
        self.decoder = _decoder(config, config.dec_layers)
        self.label_head = nn.Linear(config.text_dim, d)

    def encode(
        self,
        mids: torch.Tensor,
        omegas: torch.Tensor,
        positions: torch.Tensor | None = None,
        pad_mask: torch.Tensor | None = None,
    ):
        """Mid-level and object features (B, n, d) -> latent distribution + clip tokens.

        ``positions`` are 1-based clip phases (B, n); ``pad_mask`` marks
        padded clips True. Returns (dist, eta, eta_mask) where eta stacks the
        motion-token and object-token outputs (B, 2n, d).
        """
        if mids.shape != omegas.shape or mids.ndim != 3 or mids.shape[2] != self.config.d:
            raise ShapeMismatch(f"mids {tuple(mids.shape)} vs omegas {tuple(omegas.shape)}")
        b, n, d = mids.shape
        if positions is None:
            positions = torch.arange(1, n + 1, device=mids.device).expand(b, -1)
        phases = sinusoidal_encoding(positions, d)
        tokens = torch.cat([
            torch.stack([self.mu_token, self.logvar_token]).expand(b, -1, -1),
            mids + phases,
            omegas + phases,
        ], dim=1)
        if pad_mask is None:
            key_mask = None
            eta_mask = torch.zeros(b, 2 * n, dtype=torch.bool, device=mids.device)
        else:
            key_mask = torch.cat(
                [torch.zeros(b, 2, dtype=torch.bool, device=mids.device), pad_mask, pad_mask], dim=1
            )
            eta_mask = torch.cat([pad_mask, pad_mask], dim=1)
        out = self.encoder(tokens, src_key_padding_mask=key_mask)
        return LatentDistribution(out[:, 0], out[:, 1] + self.config.logvar_offset), out[:, 2:], eta_mask

    def decode(
        self,
        alpha: torch.Tensor,
        positions: torch.Tensor,
        context: torch.Tensor | None = None,
        context_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Action latent (B, d) + future clip phases (B, n̄) -> mid-levels (B, n̄, d)."""
        if alpha.ndim != 2 or alpha.shape[1] != self.config.d:
            raise ShapeMismatch(f"expected (B, {self.config.d}) action latent, got {tuple(alpha.shape)}")
        b = alpha.shape[0]
        queries = sinusoidal_encoding(positions, self.config.d)
        memory = alpha[:, None, :]
        mem_mask = None
        if context is not None:
            memory = torch.cat([memory, context], dim=1)
            if context_mask is not None:
                mem_mask = torch.cat(
                    [torch.zeros(b, 1, dtype=torch.bool, device=alpha.device), context_mask], dim=1
                )
        return self.decoder(queries, memory, memory_key_padding_mask=mem_mask)


class ObjectAggregator(nn.Module):
    """Clip-wise object feature from t per-frame object features."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.lead_token = nn.Parameter(torch.randn(config.d) * 0.02)
        self.encoder = _encoder(config, config.epo_layers)

    def forward(self, obj_frames: torch.Tensor) -> torch.Tensor:
        """(B, t, d) per-frame object features -> (B, d) clip feature."""
        if obj_frames.ndim != 3 or obj_frames.shape[2] != self.config.d:
            raise ShapeMismatch(f"expected (B, t, {self.config.d}), got {tuple(obj_frames.shape)}")
        b, t, d = obj_frames.shape
        content = obj_frames + sinusoidal_encoding(
            torch.arange(1, t + 1, device=obj_frames.device), d
        )
        tokens = torch.cat([self.lead_token.expand(b, 1, -1), content], dim=1)
        return self.encoder(tokens)[:, 0]


class SequenceClassifier(nn.Module):
    """Global feature over a raw frame sequence; trained for recognition.

    The first output token doubles as the feature space for distributional
    generation metrics.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embed = FrameEmbedding(config.d)
        self.lead_token = nn.Parameter(torch.randn(config.d) * 0.02)
        self.encoder = _encoder(config, config.fid_layers)
        self.label_head = nn.Linear(config.text_dim, config.d)

    def forward(self, frames: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        """(B, f, 147) frames [+ (B, f) pad mask] -> (B, d) sequence feature."""
        if frames.ndim != 3 or frames.shape[2] != FRAME_DIM:
            raise ShapeMismatch(f"expected (B, f, {FRAME_DIM}), got {tuple(frames.shape)}")
        b, f, _ = frames.shape
        content = self.embed(frames) + sinusoidal_encoding(
            torch.arange(1, f + 1, device=frames.device), self.config.d
        )
        tokens = torch.cat([self.lead_token.expand(b, 1, -1), content], dim=1)
        key_mask = None
        if pad_mask is not None:
            key_mask = torch.cat([torch.zeros(b, 1, dtype=torch.bool, device=frames.device), pad_mask], dim=1)
        return self.encoder(tokens, src_key_padding_mask=key_mask)[:, 0]


def _seeded(builder, config: ModelConfig, seed: int):
    torch.manual_seed(seed)
    model = builder(config)
    model.eval()
    return model


def init_pose_block(config: ModelConfig, seed: int = 0) -> PoseBlock:
    return _seeded(PoseBlock, config, seed)


def init_action_block(config: ModelConfig, seed: int = 0) -> ActionBlock:
    return _seeded(ActionBlock, config, seed)


def init_object_aggregator(config: ModelConfig, seed: int = 0) -> ObjectAggregator:
    return _seeded(ObjectAggregator, config, seed)


def init_sequence_classifier(config: ModelConfig, seed: int = 0) -> SequenceClassifier:
    return _seeded(SequenceClassifier, config, seed)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
