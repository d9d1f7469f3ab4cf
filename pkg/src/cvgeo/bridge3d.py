"""Drone scenes -> point clouds -> multi-view depth maps -> scene embeddings.

Each 18-frame drone group is lifted to a point cloud by a frozen
reconstruction backend, rendered into M orthographic depth maps, encoded per
view by a frozen image encoder and fused by a small residual adapter::

    g   = relu(concat(v_1 .. v_M) @ W3) @ W4
    out = normalize(g + relu(g @ W5))

Only the adapter weights are trainable on this path.
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .aggregation import Embedding
from .backbone import ToyBackbone, normalize_image
from .data import SCENE_SIZE, SceneGroup, Scale, load_image

logger = logging.getLogger(__name__)

# |u| <= sqrt(3)/2 for any point of a centred unit cube, whatever the direction
_HALF_EXTENT = np.sqrt(3.0) / 2.0
_CAMERA_DISTANCE = 1.0


class ReconstructionError(RuntimeError):
    pass


class DegenerateEmbeddingError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    scale: Scale
    location_id: str
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise ValueError(f"points must be (N>=1, 3), got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64)
            if self.colors.shape != self.points.shape:
                raise ValueError("colors must match points in shape")
        self.scale = Scale(self.scale)


@dataclass
class DepthViewSet:
    views: np.ndarray        # (M, Hd, Wd), 0 = background
    camera_dirs: np.ndarray  # (M, 3) unit vectors from the cube centre towards each camera

    def __post_init__(self):
        if len(self.views) < 1 or (self.views < 0).any():
            raise ValueError("need at least one view with non-negative depths")


# ---------------------------------------------------------------- reconstruction

class StubReconstructor:
    """Deterministic stand-in for a feed-forward multi-view reconstruction network.

    The 18 frames are resized to ``size`` x ``size``, averaged, and the grey level
    of a ``grid`` x ``grid`` downsampling becomes a height field over the unit
    square; colours are the mean RGB per cell. A small jitter seeded by the
    SHA-256 of the frame bytes is added, scaled by the frames' pixel standard
    deviation. Blank (constant) frames therefore give the canonical shape: a flat,
    jitter-free ``grid`` x ``grid`` lattice over the unit square at the frames'
    grey level, coloured with the constant colour.
    """

    version = "stub-v1"

    def __init__(self, grid: int = 16, size: int = 32, jitter: float = 0.02):
        self.grid = grid
        self.size = size
        self.jitter = jitter

    def __call__(self, frames: np.ndarray, location_id: str, scale) -> PointCloud:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[0] != SCENE_SIZE:
            raise ReconstructionError(f"expected {SCENE_SIZE} frames, got {frames.shape[0]}")
        g = self.grid
        mean = frames.mean(axis=0)                                  # (H, W, 3)
        h, w = mean.shape[:2]
        cells = mean[: h - h % g, : w - w % g].reshape(g, h // g, g, w // g, 3).mean(axis=(1, 3))
        heights = cells.mean(axis=-1)
        ys, xs = np.meshgrid(np.linspace(0, 1, g), np.linspace(0, 1, g), indexing="ij")
        pts = np.stack([xs, ys, heights], axis=-1).reshape(-1, 3)
        digest = hashlib.sha256(np.ascontiguousarray(frames).tobytes()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        pts = pts + rng.normal(size=pts.shape) * self.jitter * frames.std()
        return PointCloud(pts, scale, location_id, colors=cells.reshape(-1, 3))

    def reconstruct(self, scene: SceneGroup) -> PointCloud:
        frames = np.stack([load_image(r.path, self.size) for r in scene.images])
        return self(frames, scene.location_id, scene.scale)


class VGGTReconstructor:
    """Production slot: a pretrained VGGT model from the external ``vggt`` package.

    Points with confidence below ``min_conf`` quantile are discarded and the
    remainder subsampled to ``max_points``. Requires the package and weights.
    """

    def __init__(self, weights: str = "facebook/VGGT-1B", max_points: int = 8192,
                 min_conf: float = 0.5, device: str = "cpu"):
        from vggt.models.vggt import VGGT  # external dependency, not installed by default
        from vggt.utils.load_fn import load_and_preprocess_images

        self._load = load_and_preprocess_images
        self.model = VGGT.from_pretrained(weights).to(device).eval()
        self.device = device
        self.max_points = max_points
        self.min_conf = min_conf
        self.version = f"vggt:{weights}"

    def reconstruct(self, scene: SceneGroup) -> PointCloud:
        images = self._load([r.path for r in scene.images]).to(self.device)
        with torch.no_grad():
            pred = self.model(images)
        pts = pred["world_points"].reshape(-1, 3).double().cpu().numpy()
        conf = pred["world_points_conf"].reshape(-1).double().cpu().numpy()
        keep = conf >= np.quantile(conf, self.min_conf)
        pts = pts[keep & np.isfinite(pts).all(axis=1)]
        if len(pts) == 0:
            raise ReconstructionError(f"no confident points for {scene.key}")
        if len(pts) > self.max_points:
            pts = pts[np.linspace(0, len(pts) - 1, self.max_points).astype(int)]
        return PointCloud(pts, scene.scale, scene.location_id)


def reconstruct(scene: SceneGroup, backend) -> PointCloud:
    if len(scene.images) != SCENE_SIZE:
        raise ReconstructionError(f"{scene.key}: need {SCENE_SIZE} images")
    try:
        return backend.reconstruct(scene)
    except ReconstructionError:
        raise
    except Exception as exc:  # backend internals are opaque
        raise ReconstructionError(f"{scene.key}: {exc}") from exc


# ---------------------------------------------------------------- projection

def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Centre on the bounding box and scale the longest side to 1."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = (hi - lo).max()
    centred = points - (lo + hi) / 2.0
    return centred / extent if extent > 0 else centred


def camera_directions(m: int) -> np.ndarray:
    """Viewing directions (unit vectors from the centre to the camera).

    m == 1: top view only; 2-4: horizontal ring; 5: ring of 4 + top;
    m >= 6: ring of m-2 + top + bottom. Ring views start at +x.
    """
    if m < 1:
        raise ValueError("need at least one view")
    if m == 1:
        return np.array([[0.0, 0.0, 1.0]])
    ring = m if m <= 4 else 4 if m == 5 else m - 2
    az = 2 * np.pi * np.arange(ring) / ring
    dirs = [np.stack([np.cos(az), np.sin(az), np.zeros(ring)], axis=1)]
    if m >= 5:
        dirs.append([[0.0, 0.0, 1.0]])
    if m >= 6:
        dirs.append([[0.0, 0.0, -1.0]])
    # snap cos/sin round-off so axis-aligned cameras are exact
    return np.round(np.concatenate(dirs).astype(np.float64), 12) + 0.0


def _image_axes(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right and up vectors of the image plane for viewing direction ``d``."""
    up_ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.5 else np.array([0.0, 1.0, 0.0])
    right = np.cross(up_ref, d)
    right /= np.linalg.norm(right)
    up = np.cross(d, right)
    return right, up


def project_depth(cloud: PointCloud, m: int = 6, resolution: int = 224) -> DepthViewSet:
    """Orthographic z-buffer renderings of the unit-cube-normalized cloud.

    Depth is the distance from a camera plane at unit distance from the cube
    centre, so every rendered point has depth > 0 and 0 marks empty pixels.
    The nearest point wins a pixel; exact depth ties go to the lowest point index.
    """
    pts = normalize_cloud(cloud.points)
    dirs = camera_directions(m)
    views = np.zeros((len(dirs), resolution, resolution))
    idx = np.arange(len(pts))
    for k, d in enumerate(dirs):
        right, up = _image_axes(d)
        u = pts @ right
        v = pts @ up
        depth = _CAMERA_DISTANCE - pts @ d
        col = np.clip(np.floor((u + _HALF_EXTENT) / (2 * _HALF_EXTENT) * resolution), 0, resolution - 1)
        row = np.clip(np.floor((_HALF_EXTENT - v) / (2 * _HALF_EXTENT) * resolution), 0, resolution - 1)
        pix = (row * resolution + col).astype(np.int64)
        order = np.lexsort((idx, depth, pix))
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix[order][1:] != pix[order][:-1]
        win = order[first]
        views[k].flat[pix[win]] = depth[win]
    return DepthViewSet(views, dirs)


def rotate_vertical(points: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Exact rotation by ``quarter_turns`` * 90 degrees about the vertical (z) axis."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    for _ in range(quarter_turns % 4):
        x, y = -y, x
    return np.stack([x, y, z], axis=1)


# ---------------------------------------------------------------- adapter

class Adapter(nn.Module):
    """Residual fusion of M per-view features into one D-dim scene descriptor."""

    def __init__(self, views: int, feat_dim: int, fusion_dim: int, dim: int):
        super().__init__()
        self.views = views
        self.feat_dim = feat_dim
        self.W3 = nn.Parameter(torch.empty(views * feat_dim, fusion_dim))
        self.W4 = nn.Parameter(torch.empty(fusion_dim, dim))
        self.W5 = nn.Parameter(torch.empty(dim, dim))
        nn.init.xavier_uniform_(self.W3)
        nn.init.xavier_uniform_(self.W4)
        nn.init.normal_(self.W5, std=0.02)

    def fuse(self, feats):
        """(B, M, Ce) -> pre-normalization output and the global term."""
        if feats.shape[-2:] != (self.views, self.feat_dim):
            raise ValueError(f"expected (B, {self.views}, {self.feat_dim}) view features, "
                             f"got {tuple(feats.shape)}")
        g = F.relu(feats.flatten(-2) @ self.W3) @ self.W4
        return g + F.relu(g @ self.W5), g

    def forward(self, feats):
        out, _ = self.fuse(feats)
        norms = out.norm(dim=-1, keepdim=True)
        if (norms == 0).any():
            raise DegenerateEmbeddingError("adapter produced an all-zero scene descriptor")
        return out / norms


def adapter_fuse(view_features, weights: Adapter, view: str = "drone_s1") -> Embedding:
    feats = torch.as_tensor(np.asarray(view_features), dtype=weights.W3.dtype)
    if feats.ndim != 2:
        raise ValueError("expected an (M, Ce) array of per-view features")
    with torch.no_grad():
        v = weights(feats.unsqueeze(0))[0]
    return Embedding(v.double().numpy(), view)


# ---------------------------------------------------------------- scene encoding

class DepthViewEncoder:
    """Frozen image encoder applied to depth maps replicated to three channels.

    Defaults to a seeded toy backbone; any (B, 3, H, W) -> (B, Hp, Wp, C)
    module may be supplied instead. Output is the token mean, (M, C).
    """

    def __init__(self, module: nn.Module = None, channels: int = 64, seed: int = 1234,
                 dtype=torch.float64):
        if module is None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                module = ToyBackbone(channels, depth=2, heads=4, grid=2)
        self.module = module.to(dtype).eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.channels = module.channels
        self.dtype = dtype
        self.fingerprint = f"toy{channels}-s{seed}"

    def __call__(self, views: DepthViewSet) -> np.ndarray:
        imgs = np.repeat(views.views[..., None], 3, axis=-1)
        x = torch.from_numpy(normalize_image(imgs).transpose(0, 3, 1, 2).copy()).to(self.dtype)
        with torch.no_grad():
            return self.module(x).mean(dim=(1, 2)).double().numpy()


def write_cloud(cloud: PointCloud, path) -> None:
    """Binary cloud: <u32 N, u32 flags> then N*3 float32 LE, then colours if flags & 1."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flags = 1 if cloud.colors is not None else 0
    payload = struct.pack("<II", len(cloud.points), flags)
    payload += cloud.points.astype("<f4").tobytes()
    if flags & 1:
        payload += cloud.colors.astype("<f4").tobytes()
    _atomic_write(path, payload)


def read_cloud(path, scale, location_id) -> PointCloud:
    raw = Path(path).read_bytes()
    n, flags = struct.unpack_from("<II", raw)
    off = 8
    pts = np.frombuffer(raw, "<f4", n * 3, off).reshape(n, 3).astype(np.float64)
    colors = None
    if flags & 1:
        colors = np.frombuffer(raw, "<f4", n * 3, off + 12 * n).reshape(n, 3).astype(np.float64)
    return PointCloud(pts, scale, location_id, colors)


def _atomic_write(path: Path, payload: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


class SceneEncoder:
    """Frozen part of the 3D path: reconstruct, render, encode views (with disk cache).

    ``view_features(scene, turns)`` renders the cloud after ``turns`` quarter
    turns about the vertical axis; the trainer uses distinct turns as the two
    augmentation draws of a scene.
    """

    def __init__(self, backend=None, encoder: DepthViewEncoder = None, views: int = 6,
                 resolution: int = 224, cache_dir=None):
        self.backend = backend or StubReconstructor()
        self.encoder = encoder or DepthViewEncoder()
        self.views = views
        self.resolution = resolution
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._clouds: dict[str, PointCloud] = {}
        self._feats: dict[tuple[str, int], np.ndarray] = {}

    @property
    def feat_dim(self) -> int:
        return self.encoder.channels

    def _cache_path(self, scene: SceneGroup, suffix: str) -> Optional[Path]:
        if self.cache_dir is None:
            return None
        version = self.backend.version.replace("/", "_").replace(":", "_")
        name = f"{scene.location_id}_{scene.scale.value}{suffix}"
        return self.cache_dir / version / name

    def cloud(self, scene: SceneGroup) -> PointCloud:
        if scene.key in self._clouds:
            return self._clouds[scene.key]
        path = self._cache_path(scene, ".pcl")
        if path is not None and path.exists():
            cloud = read_cloud(path, scene.scale, scene.location_id)
        else:
            cloud = reconstruct(scene, self.backend)
            if path is not None:
                write_cloud(cloud, path)
        self._clouds[scene.key] = cloud
        return cloud

    def view_features(self, scene: SceneGroup, turns: int = 0) -> np.ndarray:
        key = (scene.key, turns % 4)
        if key in self._feats:
            return self._feats[key]
        tag = f"_{self.encoder.fingerprint}_m{self.views}_r{self.resolution}_t{turns % 4}.npy"
        path = self._cache_path(scene, tag)
        if path is not None and path.exists():
            feats = np.load(path)
        else:
            cloud = self.cloud(scene)
            rotated = PointCloud(rotate_vertical(cloud.points, turns), cloud.scale, cloud.location_id)
            feats = self.encoder(project_depth(rotated, self.views, self.resolution))
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npy")
                with os.fdopen(fd, "wb") as fh:
                    np.save(fh, feats)
                os.replace(tmp, path)
        self._feats[key] = feats
        return feats


def scene_embedding(scene: SceneGroup, encoder: SceneEncoder, adapter: Adapter,
                    turns: int = 0) -> Embedding:
    feats = encoder.view_features(scene, turns)
    return adapter_fuse(feats, adapter, view=f"drone_{scene.scale.value}")
