"""Global descriptor heads on top of (B, Hp, Wp, C) feature grids.

``PAFA`` treats every channel's spatial slab as one patch of length Hp*Wp,
runs a stack of residual MLP mixers over those patches (weights shared across
patches), then projects channels s -> d and rows n -> r and flattens to a
D = d*r descriptor. ``GeM``, ``NetVLAD`` and ``ConvAP`` are the usual
comparison heads, each followed by a linear map to the same D.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

HEADS = ("pafa", "gem", "netvlad", "conv_ap")
EMBED_VIEWS = ("street", "satellite", "drone_s1", "drone_s2", "drone_s3")


@dataclass
class PafaConfig:
    mixer_depth: int = 4
    hidden_ratio: float = 1.0
    out_channels: int = 1024
    out_rows: int = 4
    dim: int = 4096
    patch_mode: str = "per_channel"
    bias: bool = True

    def __post_init__(self):
        if self.out_channels * self.out_rows != self.dim:
            raise ValueError(f"out_channels * out_rows = {self.out_channels * self.out_rows} "
                             f"does not match embedding dim {self.dim}")
        if self.patch_mode != "per_channel":
            raise ValueError(f"unsupported patch_mode {self.patch_mode!r}")
        if self.mixer_depth < 1 or self.hidden_ratio <= 0:
            raise ValueError("mixer_depth and hidden_ratio must be positive")


@dataclass
class AggregationConfig:
    head: str = "pafa"
    dim: int = 4096
    pafa: PafaConfig = field(default_factory=PafaConfig)
    gem_p: float = 3.0
    netvlad_clusters: int = 64
    conv_ap_channels: int = 512
    conv_ap_pool: int = 2

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown aggregation head {self.head!r}; expected one of {HEADS}")
        if self.head == "pafa" and self.pafa.dim != self.dim:
            raise ValueError("pafa.dim must equal aggregation dim")


@dataclass
class Embedding:
    vector: np.ndarray
    view: str
    normalized: bool = True
    tta: bool = False

    def __post_init__(self):
        if self.view not in EMBED_VIEWS:
            raise ValueError(f"unknown embedding view {self.view!r}")
        if self.normalized and abs(np.linalg.norm(self.vector) - 1.0) > 1e-6:
            raise ValueError("embedding flagged normalized but norm != 1")


def pafa_mix(patch, w1, w2):
    """One residual mixer step: ``patch + w2 @ relu(w1 @ patch)``."""
    patch, w1, w2 = (torch.as_tensor(a) for a in (patch, w1, w2))
    if w1.ndim != 2 or w2.ndim != 2 or w1.shape[1] != patch.shape[-1] \
            or w2.shape != (w1.shape[1], w1.shape[0]):
        raise ValueError(f"incompatible shapes patch={tuple(patch.shape)} "
                         f"w1={tuple(w1.shape)} w2={tuple(w2.shape)}")
    return patch + F.relu(patch @ w1.T) @ w2.T


class MixerBlock(nn.Module):
    def __init__(self, n, hidden):
        super().__init__()
        self.fc1 = nn.Linear(n, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, n, bias=False)
        for lin in (self.fc1, self.fc2):
            nn.init.trunc_normal_(lin.weight, std=0.02)

    def forward(self, z):
        return pafa_mix(z, self.fc1.weight, self.fc2.weight)


class PAFA(nn.Module):
    def __init__(self, channels: int, grid: tuple[int, int], config: PafaConfig = None):
        super().__init__()
        config = config or PafaConfig()
        self.config = config
        n = grid[0] * grid[1]
        hidden = max(1, int(round(n * config.hidden_ratio)))
        self.mixers = nn.ModuleList(MixerBlock(n, hidden) for _ in range(config.mixer_depth))
        self.channel_proj = nn.Linear(channels, config.out_channels, bias=config.bias)
        self.row_proj = nn.Linear(n, config.out_rows, bias=config.bias)

    def patches(self, x):
        # (B, Hp, Wp, C) -> (B, C, Hp*Wp): one row per channel
        return x.flatten(1, 2).transpose(1, 2)

    def forward(self, x, normalize=True):
        z = self.patches(x)
        for mixer in self.mixers:
            z = mixer(z)
        z = self.channel_proj(z.transpose(1, 2))   # (B, n, d)
        z = self.row_proj(z.transpose(1, 2))       # (B, d, r)
        z = z.flatten(1)
        return F.normalize(z, dim=-1) if normalize else z


class GeM(nn.Module):
    """Generalized-mean pooling with a learnable exponent."""

    def __init__(self, channels, dim, p=3.0, eps=1e-6):
        super().__init__()
        self.p = nn.Parameter(torch.tensor(float(p)))
        self.eps = eps
        self.proj = nn.Linear(channels, dim)

    def pool(self, x):
        x = x.clamp(min=self.eps).pow(self.p)
        return x.mean(dim=(1, 2)).pow(1.0 / self.p)

    def forward(self, x):
        return F.normalize(self.proj(self.pool(x)), dim=-1)


class NetVLAD(nn.Module):
    def __init__(self, channels, dim, clusters=64, normalize_input=True):
        super().__init__()
        self.clusters = clusters
        self.normalize_input = normalize_input
        self.assign = nn.Linear(channels, clusters)
        self.centroids = nn.Parameter(torch.rand(clusters, channels))
        self.proj = nn.Linear(clusters * channels, dim)

    def residuals(self, x):
        """Soft-assigned residual sums, (B, K, C), before any normalization."""
        x = x.flatten(1, 2)                               # (B, N, C)
        if self.normalize_input:
            x = F.normalize(x, dim=-1)
        a = F.softmax(self.assign(x), dim=-1)             # (B, N, K)
        # sum_i a_ik (x_i - c_k)
        return a.transpose(1, 2) @ x - a.sum(1).unsqueeze(-1) * self.centroids

    def forward(self, x):
        v = F.normalize(self.residuals(x), dim=-1)        # intra-normalization
        v = F.normalize(v.flatten(1), dim=-1)
        return F.normalize(self.proj(v), dim=-1)


class ConvAP(nn.Module):
    """1x1 channel reduction followed by adaptive average pooling to a small grid."""

    def __init__(self, channels, dim, out_channels=512, pool=2):
        super().__init__()
        self.reduce = nn.Conv2d(channels, out_channels, kernel_size=1)
        self.pool = nn.AdaptiveAvgPool2d((pool, pool))
        self.proj = nn.Linear(out_channels * pool * pool, dim)

    def forward(self, x):
        x = self.pool(self.reduce(x.permute(0, 3, 1, 2)))
        x = F.normalize(x.flatten(1), dim=-1)
        return F.normalize(self.proj(x), dim=-1)


def build_head(config: AggregationConfig, channels: int, grid: tuple[int, int]) -> nn.Module:
    if config.head == "pafa":
        return PAFA(channels, grid, config.pafa)
    if config.head == "gem":
        return GeM(channels, config.dim, config.gem_p)
    if config.head == "netvlad":
        return NetVLAD(channels, config.dim, config.netvlad_clusters)
    if config.head == "conv_ap":
        return ConvAP(channels, config.dim, config.conv_ap_channels, config.conv_ap_pool)
    raise ValueError(f"unknown head {config.head!r}")


def _as_batch(fmap):
    grid = fmap.grid if hasattr(fmap, "grid") else torch.as_tensor(fmap)
    return grid.unsqueeze(0), getattr(fmap, "source_view", "street")


def pafa_aggregate(fmap, config: PafaConfig = None, head: Optional[PAFA] = None) -> Embedding:
    x, view = _as_batch(fmap)
    if head is None:
        head = PAFA(x.shape[-1], tuple(x.shape[1:3]), config).to(x.dtype)
    with torch.no_grad():
        v = head(x)[0]
    return Embedding(v.double().numpy(), view)


def baseline_aggregate(fmap, head: str, dim: int = 4096, module: Optional[nn.Module] = None) -> Embedding:
    if head not in ("gem", "netvlad", "conv_ap"):
        raise ValueError(f"unknown baseline head {head!r}")
    x, view = _as_batch(fmap)
    if module is None:
        cfg = AggregationConfig(head=head, dim=dim)
        module = build_head(cfg, x.shape[-1], tuple(x.shape[1:3])).to(x.dtype)
    with torch.no_grad():
        v = module(x)[0]
    return Embedding(v.double().numpy(), view)
