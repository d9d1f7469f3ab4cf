"""Training loop: warmup + cosine schedule, SGD with momentum, two augmentation draws per image."""
from __future__ import annotations

import io
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image, ImageFilter
from torch import nn

from .aggregation import build_head
from .backbone import build_backbone, normalize_image
from .bridge3d import Adapter, DepthViewEncoder, SceneEncoder, StubReconstructor
from .config import AugmentConfig, RunConfig
from .data import (SCALES, LocationTuple, Source, build_tuples, load_image, make_batches,
                   read_manifest, scan_dataset, street_pools)
from .losses import contrastive_objective

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- schedule

def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    return int(math.floor(warmup_fraction * total_steps))


def lr_at(step: int, total_steps: int, config) -> float:
    """Linear warmup from 0 to lr_max, then cosine decay reaching lr_min at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warm = warmup_steps(total_steps, config.warmup_fraction)
    if step < warm:
        return config.lr_max * step / warm
    span = total_steps - 1 - warm
    if span <= 0:
        return config.lr_max
    t = (step - warm) / span
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1 + math.cos(math.pi * t))


# ---------------------------------------------------------------- augmentation

def _to_uint8(img):
    return Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8))


def _rotate(img, angle):
    chans = [np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F")
                        .rotate(angle, resample=Image.BILINEAR)) for c in range(img.shape[-1])]
    return np.stack(chans, axis=-1).astype(np.float64)


def augment(image: np.ndarray, view: str, rng: np.random.Generator, config: AugmentConfig = None,
            size: Optional[int] = None, backend: str = "toy") -> np.ndarray:
    """Random photometric/occlusion pipeline; satellite images are also rotated.

    Order: resize, [satellite: quarter turn + small-angle jitter], JPEG
    compression, colour jitter, blur or sharpen, grid or coarse dropout,
    normalization. Each stage fires with its configured probability.
    """
    config = config or AugmentConfig()
    img = np.asarray(image, dtype=np.float64)
    if size is not None and img.shape[:2] != (size, size):
        img = np.asarray(_to_uint8(img).resize((size, size), Image.BILINEAR), dtype=np.float64) / 255
    h, w = img.shape[:2]

    if view == "satellite" and rng.random() < config.rotate_p:
        img = np.rot90(img, int(rng.integers(4))).copy()
        img = _rotate(img, rng.uniform(-config.rotate_jitter, config.rotate_jitter))
    if rng.random() < config.jpeg_p:
        buf = io.BytesIO()
        _to_uint8(img).save(buf, format="JPEG", quality=int(rng.integers(*config.jpeg_quality)))
        img = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64) / 255
    if rng.random() < config.color_p:
        img = img * (1 + rng.uniform(-config.brightness, config.brightness))
        mean = img.mean()
        img = (img - mean) * (1 + rng.uniform(-config.contrast, config.contrast)) + mean
        grey = img.mean(axis=-1, keepdims=True)
        img = (img - grey) * (1 + rng.uniform(-config.saturation, config.saturation)) + grey
        img = np.clip(img, 0, 1)
    if rng.random() < config.filter_p:
        flt = ImageFilter.GaussianBlur(rng.uniform(0.5, 1.5)) if rng.random() < 0.5 else ImageFilter.SHARPEN
        img = np.asarray(_to_uint8(img).filter(flt), dtype=np.float64) / 255
    if rng.random() < config.dropout_p:
        img = img.copy()
        hole = max(1, int(round(config.dropout_frac * min(h, w))))
        if rng.random() < 0.5:
            # coarse dropout: a few random holes
            for _ in range(int(rng.integers(1, config.dropout_holes + 1))):
                y, x = rng.integers(0, h - hole + 1), rng.integers(0, w - hole + 1)
                img[y:y + hole, x:x + hole] = 0
        else:
            # grid dropout: every other cell of a hole-sized grid, random offset
            oy, ox = rng.integers(0, hole, size=2)
            for y in range(oy, h, 2 * hole):
                for x in range(ox, w, 2 * hole):
                    img[y:y + hole, x:x + hole] = 0
    return normalize_image(img, backend)


# ---------------------------------------------------------------- model

class GeoModel(nn.Module):
    """Shared backbone + aggregation head for street/satellite, adapters for drone scenes."""

    def __init__(self, config: RunConfig, feat_dim: int = 64):
        super().__init__()
        self.config = config
        bcfg = config.backbone
        self.backbone = build_backbone(bcfg)
        grid = (bcfg.grid, bcfg.grid)
        with torch.random.fork_rng():
            torch.manual_seed(config.train.seed + 1)
            self.head = build_head(config.aggregation, bcfg.channels, grid)
            br = config.bridge3d
            n_adapters = 1 if br.shared_adapter else 3
            self.adapters = nn.ModuleList(
                Adapter(br.views, feat_dim, br.fusion_dim, config.aggregation.dim)
                for _ in range(n_adapters))
        self.to(DTYPES[config.train.dtype])

    @property
    def dtype(self):
        return next(self.head.parameters()).dtype

    def embed_images(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))

    def embed_scenes(self, feats: torch.Tensor, scale_index: int) -> torch.Tensor:
        adapter = self.adapters[0 if len(self.adapters) == 1 else scale_index]
        return adapter(feats)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def build_scene_encoder(config: RunConfig) -> SceneEncoder:
    br = config.bridge3d
    if br.backend == "stub":
        backend = StubReconstructor()
    elif br.backend == "vggt":
        from .bridge3d import VGGTReconstructor
        backend = VGGTReconstructor(br.weights or "facebook/VGGT-1B")
    else:
        raise ValueError(f"unknown reconstruction backend {br.backend!r}")
    encoder = DepthViewEncoder(channels=br.encoder_channels)
    return SceneEncoder(backend, encoder, br.views, br.resolution, br.cache_dir)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    step: int
    epoch: int
    model_state: dict
    optimizer_state: dict
    fingerprint: str
    metrics: dict = field(default_factory=dict)

    def save(self, path):
        torch.save(self.__dict__, path)

    @classmethod
    def load(cls, path):
        return cls(**torch.load(path, map_location="cpu", weights_only=False))


class ImageCache:
    def __init__(self, size: int, capacity: int):
        self.size = size
        self.capacity = capacity
        self._data: OrderedDict[str, np.ndarray] = OrderedDict()

    def __call__(self, path: str) -> np.ndarray:
        if path in self._data:
            self._data.move_to_end(path)
            return self._data[path]
        img = load_image(path, self.size)
        self._data[path] = img
        if len(self._data) > self.capacity:
            self._data.popitem(last=False)
        return img


# ---------------------------------------------------------------- trainer

class Trainer:
    """Single-device trainer.

    An epoch visits every street candidate once, paired with its location's
    satellite image and drone scenes. Randomness is derived from (seed, epoch)
    for batching and from (seed, step, item, draw) for augmentation, so
    resuming from an epoch checkpoint reproduces the uninterrupted run.
    """

    def __init__(self, config: RunConfig, records, run_dir=None, use_msbm: Optional[bool] = None):
        self.config = config
        self.use_msbm = config.bridge3d.enabled if use_msbm is None else use_msbm
        if not config.data.grem:
            records = [r for r in records if r.source is Source.ORIGINAL]
        self.records = list(records)
        self.tuples = build_tuples(self.records)
        if len(self.tuples) < 2:
            raise ValueError(f"only {len(self.tuples)} complete location tuples; need >= 2")
        self.streets = street_pools(self.records)
        self.run_dir = Path(run_dir) if run_dir else None
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)

        self.scenes = build_scene_encoder(config) if self.use_msbm else None
        feat_dim = self.scenes.feat_dim if self.scenes else config.bridge3d.encoder_channels
        self.model = GeoModel(config, feat_dim)
        tc = config.train
        self.optimizer = torch.optim.SGD(self.model.trainable_parameters(), lr=0.0,
                                         momentum=tc.momentum, weight_decay=tc.weight_decay)
        self.images = ImageCache(config.backbone.input_size, tc.image_cache)
        # packing can leave a different number of batches per epoch
        self.total_steps = sum(len(self._batches(e)) for e in range(tc.epochs))
        self.step = 0
        self.epoch = 0
        self.history: list[dict] = []
        self.unavailable: set[str] = set()

    # -- data
    def _epoch_tuples(self, epoch: int) -> list[LocationTuple]:
        # one tuple per street candidate, so GREM additions lengthen the epoch
        return [LocationTuple(t.location_id, street, t.satellite, t.scenes)
                for t in self.tuples for street in self.streets[t.location_id]]

    def _batches(self, epoch: int):
        seed = int(np.random.default_rng([self.config.train.seed, epoch]).integers(2**31))
        return make_batches(self._epoch_tuples(epoch), self.config.train.batch_size, seed)

    def _images(self, batch, draw: int) -> torch.Tensor:
        cfg = self.config
        arrs = []
        for i, t in enumerate(batch.tuples):
            for j, (rec, view) in enumerate(((t.street, "street"), (t.satellite, "satellite"))):
                rng = np.random.default_rng([cfg.train.seed, self.step, i, j, draw])
                arrs.append(augment(self.images(rec.path), view, rng, cfg.augment,
                                    backend=cfg.backbone.backend))
        x = torch.from_numpy(np.stack(arrs).transpose(0, 3, 1, 2).copy())
        return x.to(self.model.dtype)

    def _scene_feats(self, batch, turns_by_scene):
        feats = {}
        for si, scale in enumerate(SCALES):
            rows = []
            for t in batch.tuples:
                scene = t.scenes[si]
                if scene.key in self.unavailable:
                    rows = None
                    break
                try:
                    rows.append(self.scenes.view_features(scene, turns_by_scene[scene.key]))
                except Exception as exc:  # reconstruction backends may fail arbitrarily
                    logger.warning("scene %s unavailable: %s", scene.key, exc)
                    self.unavailable.add(scene.key)
                    rows = None
                    break
            feats[scale.value] = None if rows is None else torch.from_numpy(np.stack(rows))
        return feats

    def warm_cache(self):
        if self.scenes is None:
            return
        for t in self.tuples:
            for scene in t.scenes:
                for turns in range(4):
                    try:
                        self.scenes.view_features(scene, turns)
                    except Exception as exc:
                        logger.warning("scene %s unavailable: %s", scene.key, exc)
                        self.unavailable.add(scene.key)
                        break

    # -- optimisation
    def forward_batch(self, batch):
        """Embeddings of both augmentation draws for one batch: (draw_a, draw_b) dicts."""
        draws = []
        n = len(batch)
        x = torch.cat([self._images(batch, 0), self._images(batch, 1)])
        emb = self.model.embed_images(x)
        rng = np.random.default_rng([self.config.train.seed, self.step, 7])
        turns = {}
        if self.scenes is not None:
            for t in batch.tuples:
                for scene in t.scenes:
                    a, b = rng.choice(4, size=2, replace=False)
                    turns[scene.key] = (int(a), int(b))
        for d in range(2):
            e = emb[2 * n * d: 2 * n * (d + 1)]
            out = {"g": e[0::2], "s": e[1::2]}
            if self.scenes is not None:
                feats = self._scene_feats(batch, {k: v[d] for k, v in turns.items()})
                for si, (key, f) in enumerate(feats.items()):
                    out[f"d_{key}"] = None if f is None else self.model.embed_scenes(
                        f.to(self.model.dtype), si)
            draws.append(out)
        return draws

    def train_step(self, batch) -> dict:
        lr = lr_at(self.step, self.total_steps, self.config.train)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        draw_a, draw_b = self.forward_batch(batch)
        try:
            report = contrastive_objective(draw_a, draw_b, self.config.loss)
        except FloatingPointError as exc:
            self._dump_failure(batch, str(exc))
            raise TrainingDiverged(f"non-finite loss at step {self.step}; "
                                   f"batch {batch.location_ids}") from exc
        self.optimizer.zero_grad(set_to_none=True)
        report.l_total.backward()
        self.optimizer.step()
        rec = {**report.to_json(self.step), "epoch": self.epoch, "lr": lr}
        self.history.append(rec)
        if self.run_dir:
            with open(self.run_dir / "train_log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        self.step += 1
        return rec

    def _dump_failure(self, batch, message):
        if self.run_dir:
            (self.run_dir / "diverged.json").write_text(json.dumps(
                {"step": self.step, "batch": batch.location_ids, "error": message}, indent=2))

    def fit(self, epochs: Optional[int] = None) -> list[float]:
        """Train until ``epochs`` (default: the configured total); returns epoch-mean losses."""
        self.warm_cache()
        stop = self.config.train.epochs if epochs is None else epochs
        means = []
        while self.epoch < stop:
            losses = [self.train_step(b)["l_total"] for b in self._batches(self.epoch)]
            means.append(float(np.mean(losses)))
            logger.info("epoch %d  mean L_total %.4f", self.epoch, means[-1])
            self.epoch += 1
            if self.run_dir:
                self.checkpoint().save(self.run_dir / f"{self.config.fingerprint()}_epoch{self.epoch:03d}.pt")
        return means

    def checkpoint(self, metrics: Optional[dict] = None) -> Checkpoint:
        return Checkpoint(self.step, self.epoch,
                          {k: v.detach().clone() for k, v in self.model.state_dict().items()},
                          self.optimizer.state_dict(), self.config.fingerprint(), metrics or {})

    def restore(self, ckpt: Checkpoint):
        if ckpt.fingerprint != self.config.fingerprint():
            raise ValueError("checkpoint was produced under a different configuration")
        self.model.load_state_dict(ckpt.model_state)
        self.optimizer.load_state_dict(ckpt.optimizer_state)
        self.step, self.epoch = ckpt.step, ckpt.epoch


def load_training_records(config: RunConfig, manifests=()) -> list:
    """Records from explicit manifests, else from scanning ``data.root`` (+ GREM manifest)."""
    records = []
    for m in manifests:
        records.extend(read_manifest(m))
    if not manifests:
        if not config.data.root:
            raise ValueError("no manifests given and data.root is not set")
        records = scan_dataset(config.data.root, "train", config.data.invert_altitude)
        if config.data.grem and config.data.grem_manifest and Path(config.data.grem_manifest).exists():
            records.extend(r for r in read_manifest(config.data.grem_manifest)
                           if r.source is Source.GREM)
    seen, unique = set(), []
    for r in records:
        if r.image_id not in seen:
            seen.add(r.image_id)
            unique.append(r)
    return unique
