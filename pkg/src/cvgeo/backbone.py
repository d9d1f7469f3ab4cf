"""Siamese patch-grid feature extractors.

Every backend embeds 14x14 patches with a stride-14 convolution and returns a
channels-last grid of shape (B, H/14, W/14, C). Street and satellite images go
through the same module instance; there is no per-view copy of the weights.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

PATCH_SIZE = 14
BACKEND_CHANNELS = {"foundation_base": 768, "foundation_large": 1024, "toy": 64}
HUB_ENTRIES = {"foundation_base": "dinov2_vitb14", "foundation_large": "dinov2_vitl14"}

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])


@dataclass
class BackboneConfig:
    backend: str = "toy"
    input_size: int = 448
    channels: Optional[int] = None
    shared_weights: bool = True
    weights_path: Optional[str] = None
    depth: int = 2
    heads: int = 4
    # none | last_block | all
    trainable: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.backend not in BACKEND_CHANNELS:
            raise ValueError(f"unknown backbone backend {self.backend!r}")
        if not self.shared_weights:
            raise ValueError("street and satellite branches must share weights")
        if self.input_size % PATCH_SIZE:
            raise ValueError(f"input_size {self.input_size} is not divisible by {PATCH_SIZE}")
        if self.channels is None:
            self.channels = BACKEND_CHANNELS[self.backend]
        if self.trainable not in ("none", "last_block", "all"):
            raise ValueError(f"unknown trainable mode {self.trainable!r}")

    @property
    def grid(self) -> int:
        return self.input_size // PATCH_SIZE


@dataclass
class FeatureMap:
    grid: torch.Tensor  # (Hp, Wp, C)
    source_view: str
    patch_size: int = PATCH_SIZE

    @property
    def shape(self):
        return tuple(self.grid.shape)


def normalize_image(image: np.ndarray, backend: str = "toy") -> np.ndarray:
    """Map [0, 1] RGB to the backend's input convention."""
    if backend == "toy":
        return (image - 0.5) / 0.5
    return (image - IMAGENET_MEAN) / IMAGENET_STD


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) or (B, H, W, 3) array -> (B, 3, H, W) tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ToyBackbone(nn.Module):
    """Patch embedding plus a few pre-norm transformer blocks."""

    def __init__(self, channels=64, depth=2, heads=4, grid=32):
        super().__init__()
        self.channels = channels
        self.patch_size = PATCH_SIZE
        self.patch_embed = nn.Conv2d(3, channels, PATCH_SIZE, stride=PATCH_SIZE)
        self.pos_embed = nn.Parameter(torch.randn(1, channels, grid, grid) * 0.02)
        self.blocks = nn.ModuleList(Block(channels, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        check_input_size(x)
        x = self.patch_embed(x)
        b, c, hp, wp = x.shape
        pos = self.pos_embed
        if pos.shape[-2:] != (hp, wp):
            pos = F.interpolate(pos, size=(hp, wp), mode="bilinear", align_corners=False)
        x = (x + pos).flatten(2).transpose(1, 2)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x).reshape(b, hp, wp, c)


class FoundationBackbone(nn.Module):
    """Wraps a DINOv2-style hub model and exposes its normalized patch tokens."""

    def __init__(self, model, channels):
        super().__init__()
        self.model = model
        self.channels = channels
        self.patch_size = PATCH_SIZE
        self.blocks = model.blocks

    def forward(self, x):
        check_input_size(x)
        b, _, h, w = x.shape
        tokens = self.model.forward_features(x)["x_norm_patchtokens"]
        return tokens.reshape(b, h // PATCH_SIZE, w // PATCH_SIZE, self.channels)


def check_input_size(x: torch.Tensor):
    h, w = x.shape[-2:]
    if h % PATCH_SIZE or w % PATCH_SIZE:
        raise ValueError(f"input {h}x{w} is not divisible by the {PATCH_SIZE}px patch size")


def build_backbone(config: BackboneConfig) -> nn.Module:
    if config.backend != "toy" and config.weights_path:
        model = torch.hub.load(config.weights_path, HUB_ENTRIES[config.backend], source="local")
        net = FoundationBackbone(model, config.channels)
    else:
        if config.backend != "toy":
            logger.warning("no weights_path for %s; using a randomly initialised structural "
                           "substitute with %d channels", config.backend, config.channels)
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            net = ToyBackbone(config.channels, config.depth, config.heads, config.grid)
    set_trainable(net, config.trainable)
    return net


def set_trainable(net: nn.Module, mode: str):
    for p in net.parameters():
        p.requires_grad_(mode == "all")
    if mode == "last_block":
        for p in net.blocks[-1].parameters():
            p.requires_grad_(True)
    if mode == "none":
        net.eval()


def encode(image: np.ndarray, backbone: nn.Module, view: str = "street") -> FeatureMap:
    """Encode one normalized (H, W, 3) image into a (H/14, W/14, C) feature map."""
    h, w = image.shape[:2]
    if h % PATCH_SIZE or w % PATCH_SIZE:
        raise ValueError(f"image {h}x{w} is not divisible by {PATCH_SIZE}")
    dtype = next(backbone.parameters()).dtype
    grid = backbone(to_tensor(image, dtype))[0]
    return FeatureMap(grid, view)
