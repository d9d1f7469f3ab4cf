"""Run configuration: typed dataclasses backed by a flat ``key = value`` text file.

Example::

    # comments start with '#'
    backbone.backend = toy
    backbone.input_size = 56
    aggregation.head = pafa
    aggregation.pafa.out_channels = 64
    train.epochs = 5
    loss.lambda = 3.0
"""
from __future__ import annotations

import ast
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .aggregation import AggregationConfig, PafaConfig
from .backbone import BackboneConfig
from .losses import LossConfig


@dataclass
class AugmentConfig:
    jpeg_p: float = 0.5
    jpeg_quality: tuple = (60, 95)
    color_p: float = 0.8
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    filter_p: float = 0.3
    dropout_p: float = 0.3
    dropout_holes: int = 4
    dropout_frac: float = 0.125
    rotate_p: float = 1.0
    rotate_jitter: float = 10.0

    @classmethod
    def identity(cls):
        return cls(jpeg_p=0.0, color_p=0.0, filter_p=0.0, dropout_p=0.0, rotate_p=0.0)


@dataclass
class BridgeConfig:
    enabled: bool = True
    backend: str = "stub"          # stub | vggt
    weights: Optional[str] = None
    views: int = 6
    resolution: int = 224
    fusion_dim: int = 1024
    shared_adapter: bool = True
    encoder_channels: int = 64
    cache_dir: Optional[str] = None


@dataclass
class TrainConfig:
    epochs: int = 40
    lr_max: float = 5e-4
    lr_min: float = 1e-4
    warmup_fraction: float = 0.10
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    seed: int = 0
    dtype: str = "float32"
    image_cache: int = 4096

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


@dataclass
class DataConfig:
    root: Optional[str] = None
    invert_altitude: bool = False
    grem: bool = True
    grem_manifest: Optional[str] = None
    grem_scope: str = "location"
    grem_extractor: str = "meanpool"   # meanpool | resnet50
    grem_weights: Optional[str] = None


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    bridge3d: BridgeConfig = field(default_factory=BridgeConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def flat(self) -> dict[str, Any]:
        return _flatten(self)

    def fingerprint(self) -> str:
        """Hash of every setting except local paths and cache sizes."""
        text = "\n".join(f"{k}={v!r}" for k, v in sorted(self.flat().items())
                         if k not in _FINGERPRINT_SKIP)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"loss.lambda": 2.0})``."""
        flat = self.flat()
        for k, v in overrides.items():
            key = _ALIASES.get(k, k)
            if key not in flat:
                raise KeyError(f"unknown config key {k!r}")
            flat[key] = v
        return from_flat(flat)

    def dump(self, path) -> None:
        lines = [f"{k} = {_format(v)}" for k, v in sorted(self.flat().items())]
        Path(path).write_text("\n".join(lines) + "\n")


_ALIASES = {"loss.lambda": "loss.lam"}
_FINGERPRINT_SKIP = {"data.root", "bridge3d.cache_dir", "train.image_cache"}


def _format(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return v
    return repr(v)


def _flatten(obj, prefix=""):
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _build(cls, flat: dict, prefix: str):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}"
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[f.name] = _build(sub, flat, key + ".")
        elif key in flat:
            kwargs[f.name] = flat[key]
    return cls(**kwargs)


def from_flat(flat: dict) -> RunConfig:
    flat = {_ALIASES.get(k, k): v for k, v in flat.items()}
    known = set(_flatten(RunConfig()))
    unknown = set(flat) - known
    if unknown:
        raise KeyError(f"unknown config keys: {sorted(unknown)}")
    # PAFA geometry follows aggregation.dim unless given explicitly
    dim = flat.get("aggregation.dim", AggregationConfig.dim)
    flat.setdefault("aggregation.pafa.dim", dim)
    if "aggregation.pafa.out_channels" not in flat:
        rows = flat.setdefault("aggregation.pafa.out_rows", PafaConfig.out_rows)
        flat["aggregation.pafa.out_channels"] = dim // rows
    elif "aggregation.pafa.out_rows" not in flat:
        flat["aggregation.pafa.out_rows"] = dim // flat["aggregation.pafa.out_channels"]
    return _build(RunConfig, flat, "")


def parse_text(text: str) -> dict:
    flat = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        flat[key] = _parse_value(value)
    return flat


def load_config(path) -> RunConfig:
    return from_flat(parse_text(Path(path).read_text()))


def toy_config(**overrides) -> RunConfig:
    """Desk-scale settings used by the synthetic dataset, tests and the ablation harness."""
    flat = {
        "backbone.backend": "toy",
        "backbone.input_size": 56,
        "backbone.channels": 64,
        "backbone.trainable": "all",
        "aggregation.dim": 256,
        "aggregation.pafa.out_channels": 64,
        "aggregation.pafa.out_rows": 4,
        "aggregation.pafa.dim": 256,
        "aggregation.pafa.mixer_depth": 2,
        "aggregation.netvlad_clusters": 16,
        "aggregation.conv_ap_channels": 64,
        "bridge3d.resolution": 28,
        "bridge3d.fusion_dim": 256,
        "bridge3d.encoder_channels": 32,
        "train.epochs": 5,
        "train.batch_size": 8,
        "train.lr_max": 0.005,
        "train.lr_min": 0.001,
        "train.dtype": "float64",
        "loss.lam": 3.0,
        "loss.temperature": 0.07,
    }
    flat.update({_ALIASES.get(k, k): v for k, v in overrides.items()})
    return from_flat(flat)
