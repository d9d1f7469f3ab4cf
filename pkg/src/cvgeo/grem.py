"""Retrieval-based enrichment of the street-view training pool.

A frozen global-feature extractor embeds the original street images and an
auxiliary candidate pool; each original image then recruits the most similar
half of its candidates as extra street samples carrying its location label.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import (ImageRecord, Source, View, _image_files, _read_size, load_image,
                   write_manifest)

logger = logging.getLogger(__name__)

NORM_TOL = 1e-6


@dataclass(frozen=True)
class CandidateFeature:
    image_id: str
    feature: np.ndarray
    pool: str = "auxiliary"  # or "original_street"
    location_id: str | None = None

    def __post_init__(self):
        if self.pool not in ("auxiliary", "original_street"):
            raise ValueError(f"unknown pool {self.pool!r}")
        norm = float(np.linalg.norm(self.feature))
        if abs(norm - 1.0) > NORM_TOL:
            raise ValueError(f"{self.image_id}: feature not unit norm ({norm})")


@dataclass(frozen=True)
class GremAssignment:
    anchor_image_id: str
    inherit_location: str
    selected: tuple[tuple[str, float], ...]

    def records(self, lookup: dict[str, ImageRecord]) -> list[ImageRecord]:
        """Selected candidates as street records under the anchor's location."""
        out = []
        for cand_id, _ in self.selected:
            src = lookup[cand_id]
            out.append(ImageRecord(
                image_id=f"grem:{self.anchor_image_id}:{cand_id}",
                location_id=self.inherit_location,
                view=View.STREET,
                path=src.path,
                height_px=src.height_px,
                width_px=src.width_px,
                source=Source.GREM,
            ))
        return out


class MeanPoolExtractor:
    """Deterministic stand-in extractor: per-channel means over a ``grid`` x ``grid`` tiling."""

    def __init__(self, grid: int = 4, size: int = 64):
        self.grid = grid
        self.size = size

    def __call__(self, image: np.ndarray) -> np.ndarray:
        h, w, c = image.shape
        g = self.grid
        hs = np.linspace(0, h, g + 1).astype(int)
        ws = np.linspace(0, w, g + 1).astype(int)
        out = np.empty((c, g, g))
        for i in range(g):
            for j in range(g):
                out[:, i, j] = image[hs[i]:hs[i + 1], ws[j]:ws[j + 1]].mean(axis=(0, 1))
        return out.ravel()


class ResNet50Extractor:
    """Frozen torchvision ResNet-50 with the classifier removed (2048-d pooled features).

    ``weights_path`` points at a torchvision state dict; this class never downloads.
    """

    def __init__(self, weights_path, size: int = 224):
        import torch
        import torchvision

        self.size = size
        self.model = torchvision.models.resnet50(weights=None)
        self.model.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.model.fc = torch.nn.Identity()
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self._mean = np.array([0.485, 0.456, 0.406])
        self._std = np.array([0.229, 0.224, 0.225])

    def __call__(self, image: np.ndarray) -> np.ndarray:
        import torch

        x = (image - self._mean) / self._std
        x = torch.from_numpy(x.transpose(2, 0, 1)[None].astype(np.float32))
        with torch.no_grad():
            return self.model(x)[0].double().numpy()


FrozenExtractor = Callable[[np.ndarray], np.ndarray]


def build_extractor(name: str = "meanpool", weights=None) -> FrozenExtractor:
    if name == "meanpool":
        return MeanPoolExtractor()
    if name == "resnet50":
        if not weights:
            raise ValueError("the resnet50 extractor needs a local weights file (data.grem_weights)")
        return ResNet50Extractor(weights)
    raise ValueError(f"unknown GREM extractor {name!r}")


def _normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero feature vector cannot be normalized")
    return v / n


def extract_pool_features(records: Iterable[ImageRecord], extractor: FrozenExtractor,
                          pool: str = "auxiliary", size: int | None = None) -> list[CandidateFeature]:
    size = size or getattr(extractor, "size", None)
    feats = []
    for r in records:
        try:
            image = load_image(r.path, size)
        except OSError as exc:
            logger.warning("skipping unreadable image %s: %s", r.path, exc)
            continue
        feats.append(CandidateFeature(r.image_id, _normalize(extractor(image)), pool, r.location_id))
    return feats


def select_top_half(anchor: CandidateFeature, pool: Sequence[CandidateFeature],
                    location_id: str | None = None) -> GremAssignment:
    """Keep the floor(|pool|/2) candidates most cosine-similar to ``anchor``.

    Ties are ordered by ascending image id so the cut is deterministic.
    """
    location_id = location_id if location_id is not None else anchor.location_id
    if any(c.image_id == anchor.image_id for c in pool):
        raise ValueError(f"anchor {anchor.image_id} must not be part of its candidate pool")
    if not pool:
        return GremAssignment(anchor.image_id, location_id, ())
    feats = np.stack([c.feature for c in pool])
    # row-wise reduction: a candidate's score must not depend on its position in the pool
    scores = (feats * anchor.feature).sum(axis=1)
    order = sorted(range(len(pool)), key=lambda i: (-scores[i], pool[i].image_id))
    keep = order[: len(pool) // 2]
    return GremAssignment(anchor.image_id, location_id,
                          tuple((pool[i].image_id, float(scores[i])) for i in keep))


def scan_pool(pool_dir) -> list[ImageRecord]:
    """Candidate images under ``pool_dir``; one subdirectory per location, or a flat folder."""
    pool_dir = Path(pool_dir).resolve()
    if not pool_dir.is_dir():
        raise FileNotFoundError(f"candidate pool not found: {pool_dir}")
    records = []
    subdirs = sorted(p for p in pool_dir.iterdir() if p.is_dir())
    groups = [(d.name, d) for d in subdirs] or [("", pool_dir)]
    for loc, d in groups:
        for path in _image_files(d):
            size = _read_size(path)
            if size is None:
                continue
            records.append(ImageRecord(
                image_id=f"pool/{path.relative_to(pool_dir).as_posix()}",
                location_id=loc or "_pool",
                view=View.STREET, path=str(path), height_px=size[0], width_px=size[1]))
    return records


def run_grem(anchors: Sequence[ImageRecord], candidates: Sequence[ImageRecord],
             extractor: FrozenExtractor, scope: str = "location") -> tuple[list[GremAssignment], list[ImageRecord]]:
    """Assign candidates to every original street anchor.

    ``scope="location"`` restricts each anchor's pool to candidates filed under
    its own location; ``scope="global"`` searches the whole auxiliary pool.
    """
    if scope not in ("location", "global"):
        raise ValueError(f"unknown scope {scope!r}")
    anchor_feats = extract_pool_features(
        [a for a in anchors if a.view is View.STREET and a.source is Source.ORIGINAL],
        extractor, pool="original_street")
    cand_feats = extract_pool_features(candidates, extractor)
    by_loc: dict[str, list[CandidateFeature]] = {}
    for c in cand_feats:
        by_loc.setdefault(c.location_id, []).append(c)
    lookup = {c.image_id: c for c in candidates}

    assignments, records = [], []
    for a in anchor_feats:
        pool = by_loc.get(a.location_id, []) if scope == "location" else cand_feats
        asg = select_top_half(a, pool)
        assignments.append(asg)
        records.extend(asg.records(lookup))
    return assignments, records


def audit(assignments: Sequence[GremAssignment]) -> dict:
    """Raw selection count (one per anchor/candidate pair) and distinct candidate count."""
    raw = sum(len(a.selected) for a in assignments)
    distinct = len({cid for a in assignments for cid, _ in a.selected})
    return {"anchors": len(assignments), "raw_selected": raw, "deduplicated_selected": distinct}


def write_assignments(assignments: Sequence[GremAssignment], records: Sequence[ImageRecord],
                      manifest_path, append: bool = True) -> Path:
    """Append GREM records to the training manifest; assignments go to a sidecar JSON-lines file."""
    manifest_path = Path(manifest_path)
    write_manifest(records, manifest_path, append=append)
    sidecar = manifest_path.with_name(manifest_path.stem + ".assignments.jsonl")
    with open(sidecar, "w", encoding="utf-8") as fh:
        for a in assignments:
            fh.write(json.dumps({"anchor_image_id": a.anchor_image_id,
                                 "inherit_location": a.inherit_location,
                                 "selected": [list(s) for s in a.selected]}) + "\n")
    return sidecar
