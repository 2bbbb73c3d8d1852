"""Toy conditional denoiser: a 3-scale encoder-decoder with cross-attention
from spatial features (queries) to prompt tokens (keys/values) at every
decoder scale.

The network predicts the noise added by the forward process. After
pretraining it is frozen and used purely as a feature extractor: each decoder
scale yields a feature map f_i and a cross-attention map a_i over the M
prompt tokens, both consumed by the segmentation head. Scales run from H/2
(finest) to H/8 (coarsest).

Normalization is per-pixel over channels (no batch or spatial coupling), so
outputs are independent across batch entries and the receptive field of every
output location is finite and architecture-determined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .schedule import DOWNSAMPLE_FACTOR, LatentImage, NoiseSchedule
from .utils import module_digest

NUM_SCALES = 3
# spatial stride of each extracted scale, finest first
SCALE_STRIDES = (2, 4, 8)


@dataclass
class BackboneConfig:
    in_channels: int = 3
    widths: tuple[int, int, int] = (32, 64, 96)
    token_dim: int = 64   # N: dimension of every prompt token
    attn_dim: int = 64
    time_dim: int = 64

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["widths"] = list(self.widths)
        return d

    @staticmethod
    def from_json(d: dict) -> "BackboneConfig":
        kwargs = dict(d)
        kwargs["widths"] = tuple(kwargs["widths"])
        return BackboneConfig(**kwargs)


@dataclass
class BackboneOutput:
    """Per-scale features {f_i} and cross-attention maps {a_i}.

    features[i]: [channels_i, H/stride_i, W/stride_i], strides (2, 4, 8)
    attentions[i]: [M, H/stride_i, W/stride_i], softmax over the M axis.
    Batched variants carry a leading batch dimension.
    """

    features: list[torch.Tensor]
    attentions: list[torch.Tensor]

    def validate(self, atol: float = 1e-5) -> "BackboneOutput":
        if len(self.features) != NUM_SCALES or len(self.attentions) != NUM_SCALES:
            raise ValueError(f"expected {NUM_SCALES} scales")
        for a in self.attentions:
            if bool((a < 0).any()):
                raise ValueError("attention weights must be non-negative")
            sums = a.sum(dim=-3)
            if not bool(((sums - 1.0).abs() <= atol).all()):
                raise ValueError("attention maps must sum to 1 over the token axis")
        return self

    def index(self, b: int) -> "BackboneOutput":
        return BackboneOutput([f[b] for f in self.features], [a[b] for a in self.attentions])


class ChannelNorm(nn.Module):
    """Normalize over the channel axis independently at each pixel."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def timestep_embedding(p: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=p.dtype, device=p.device) / half
    )
    args = p[:, None].to(freqs.dtype) * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = ChannelNorm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = ChannelNorm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Single-head attention from each pixel (query) to the prompt tokens."""

    def __init__(self, channels: int, token_dim: int, attn_dim: int):
        super().__init__()
        self.scale = attn_dim ** -0.5
        self.to_q = nn.Conv2d(channels, attn_dim, 1)
        self.to_k = nn.Linear(token_dim, attn_dim, bias=False)
        self.to_v = nn.Linear(token_dim, attn_dim, bias=False)
        self.to_out = nn.Conv2d(attn_dim, channels, 1)
        self.norm = ChannelNorm(channels)

    def forward(self, x, tokens):
        # x: [B, C, h, w]; tokens: [M, N]
        B, _, h, w = x.shape
        q = self.to_q(self.norm(x)).flatten(2).transpose(1, 2)   # [B, hw, A]
        k = self.to_k(tokens)                                    # [M, A]
        v = self.to_v(tokens)                                    # [M, A]
        logits = torch.matmul(q, k.t()) * self.scale             # [B, hw, M]
        attn = torch.softmax(logits, dim=-1)
        gathered = torch.matmul(attn, v)                         # [B, hw, A]
        gathered = gathered.transpose(1, 2).reshape(B, -1, h, w)
        out = x + self.to_out(gathered)
        attn_map = attn.transpose(1, 2).reshape(B, -1, h, w)     # [B, M, h, w]
        return out, attn_map


class Downsample(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class DenoiserBackbone(nn.Module):
    """Noise-prediction network; also the frozen feature/attention extractor."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        cfg = config or BackboneConfig()
        self.config = cfg
        w0, w1, w2 = cfg.widths

        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim),
        )
        self.stem = nn.Conv2d(cfg.in_channels, w0, 3, stride=2, padding=1)
        self.enc0 = ResBlock(w0, w0, cfg.time_dim)
        self.down0 = Downsample(w0, w1)
        self.enc1 = ResBlock(w1, w1, cfg.time_dim)
        self.down1 = Downsample(w1, w2)
        self.enc2 = ResBlock(w2, w2, cfg.time_dim)
        self.mid = ResBlock(w2, w2, cfg.time_dim)

        self.dec2 = ResBlock(w2 + w2, w2, cfg.time_dim)
        self.attn2 = CrossAttention(w2, cfg.token_dim, cfg.attn_dim)
        self.up1 = Upsample(w2, w1)
        self.dec1 = ResBlock(w1 + w1, w1, cfg.time_dim)
        self.attn1 = CrossAttention(w1, cfg.token_dim, cfg.attn_dim)
        self.up0 = Upsample(w1, w0)
        self.dec0 = ResBlock(w0 + w0, w0, cfg.time_dim)
        self.attn0 = CrossAttention(w0, cfg.token_dim, cfg.attn_dim)

        self.out_norm = ChannelNorm(w0)
        self.out_conv = nn.Conv2d(w0, cfg.in_channels, 3, padding=1)

        self._frozen_digest: str | None = None

    # feature channel counts per scale, finest first
    @property
    def feature_channels(self) -> tuple[int, int, int]:
        return self.config.widths

    def receptive_field_radius(self, scale: int = 0) -> int:
        """Conservative input-pixel radius of one output location's dependence.

        Each 3x3 convolution at input stride s widens the radius by s; the
        attention and 1x1 paths add nothing spatial.
        """
        encoder = 1 + 2 * 2 + 1 * 2 + 2 * 4 + 1 * 4 + 2 * 8 + 2 * 8  # stem..mid
        f2 = encoder + 2 * 8
        f1 = f2 + 1 * 4 + 2 * 4
        f0 = f1 + 1 * 2 + 2 * 2
        return (f0, f1, f2)[scale]

    def forward(self, z: torch.Tensor, p: torch.Tensor | int, tokens: torch.Tensor):
        """z: [B, 3, H, W]; p: int or [B]; tokens: [M, N].

        Returns (eps_hat [B, 3, H, W], BackboneOutput with batch dims).
        """
        if tokens.ndim != 2 or tokens.shape[1] != self.config.token_dim:
            raise ValueError(
                f"tokens must be [M, {self.config.token_dim}], got {tuple(tokens.shape)}"
            )
        if z.shape[-1] % DOWNSAMPLE_FACTOR or z.shape[-2] % DOWNSAMPLE_FACTOR:
            raise ValueError(
                f"input spatial dims must be divisible by {DOWNSAMPLE_FACTOR}"
            )
        B = z.shape[0]
        if isinstance(p, int):
            p = torch.full((B,), p, dtype=z.dtype, device=z.device)
        else:
            p = p.to(z.dtype)
        t_emb = self.time_mlp(timestep_embedding(p, self.config.time_dim))

        h0 = self.enc0(self.stem(z), t_emb)          # H/2
        h1 = self.enc1(self.down0(h0), t_emb)        # H/4
        h2 = self.enc2(self.down1(h1), t_emb)        # H/8
        m = self.mid(h2, t_emb)

        d2 = self.dec2(torch.cat([m, h2], dim=1), t_emb)
        f2, a2 = self.attn2(d2, tokens)
        d1 = self.dec1(torch.cat([self.up1(f2), h1], dim=1), t_emb)
        f1, a1 = self.attn1(d1, tokens)
        d0 = self.dec0(torch.cat([self.up0(f1), h0], dim=1), t_emb)
        f0, a0 = self.attn0(d0, tokens)

        full = F.interpolate(f0, scale_factor=2, mode="nearest")
        eps_hat = self.out_conv(F.silu(self.out_norm(full)))
        return eps_hat, BackboneOutput([f0, f1, f2], [a0, a1, a2])

    # --- freezing -----------------------------------------------------

    def freeze(self) -> str:
        self.requires_grad_(False)
        self.eval()
        self._frozen_digest = module_digest(self)
        return self._frozen_digest

    @property
    def frozen_digest(self) -> str | None:
        return self._frozen_digest

    def verify_frozen(self) -> None:
        if self._frozen_digest is None:
            raise RuntimeError("backbone has not been frozen")
        current = module_digest(self)
        if current != self._frozen_digest:
            raise RuntimeError(
                "frozen backbone parameters changed: "
                f"{current} != {self._frozen_digest}"
            )


def denoise_predict(
    backbone: DenoiserBackbone, z_p: LatentImage, p: int, tokens: torch.Tensor
) -> tuple[torch.Tensor, BackboneOutput]:
    """Single-image noise prediction plus extracted internals (no gradients)."""
    if not bool(torch.isfinite(z_p.data).all()) or not bool(torch.isfinite(tokens).all()):
        raise ValueError("non-finite inputs")
    was_training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            eps_hat, out = backbone(z_p.data[None], p, tokens)
    finally:
        backbone.train(was_training)
    return eps_hat[0], out.index(0).validate()


def extract_features(
    backbone: DenoiserBackbone,
    image: LatentImage,
    tokens: torch.Tensor,
    schedule: NoiseSchedule,
    p_feat: int = 1,
) -> BackboneOutput:
    """Deterministic extraction: scale the clean image by sqrt(alpha_bar) at
    the extraction timestep, add no noise, and run the frozen denoiser."""
    if not (0 <= p_feat < schedule.P):
        raise ValueError(f"p_feat={p_feat} outside [0, {schedule.P})")
    scale = torch.sqrt(schedule.alpha_bars[p_feat].to(image.data.dtype))
    scaled = LatentImage(data=scale * image.data, timestep=p_feat)
    _, out = denoise_predict(backbone, scaled, p_feat, tokens)
    return out
