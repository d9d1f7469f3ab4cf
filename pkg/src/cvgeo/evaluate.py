"""Street -> satellite retrieval evaluation: TTA embedding, ranking, Recall@K and AP."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .backbone import normalize_image
from .data import ImageRecord, load_image

logger = logging.getLogger(__name__)

TRANSFORMS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda x: x,
    "hflip": lambda x: x[:, ::-1],
    "rot90": lambda x: np.rot90(x, 1),
    "rot180": lambda x: np.rot90(x, 2),
    "rot270": lambda x: np.rot90(x, 3),
}
DEFAULT_TTA = {
    "street": ("identity", "hflip"),
    "satellite": ("identity", "hflip", "rot90", "rot180", "rot270"),
}


@dataclass
class RetrievalResult:
    query_id: str
    ranked: list[tuple[str, float]]
    true_ids: set[str]


@dataclass
class MetricsReport:
    recall_at: dict[int, float]
    ap: float
    n_queries: int
    excluded: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"recall_at": {str(k): v for k, v in self.recall_at.items()}, "ap": self.ap,
                "n_queries": self.n_queries, "excluded": list(self.excluded)}

    def __str__(self):
        parts = [f"R@{k}={v:.2f}" for k, v in sorted(self.recall_at.items())]
        return "  ".join(parts + [f"AP={self.ap:.2f}", f"queries={self.n_queries}"])


# ---------------------------------------------------------------- embedding

class Pipeline:
    """Frozen image -> unit embedding function around a trained model."""

    def __init__(self, model, backend: str = "toy"):
        self.model = model.eval()
        self.backend = backend

    @property
    def dtype(self):
        return self.model.dtype

    def __call__(self, images: np.ndarray) -> np.ndarray:
        """(H, W, 3) or (B, H, W, 3) normalized images -> (B, D) float64 embeddings."""
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(self.dtype)
        with torch.no_grad():
            return self.model.embed_images(x).double().numpy()


def _normalize_rows(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if (n == 0).any():
        raise ValueError("cannot normalize a zero embedding")
    return v / n


def embed_with_tta(image: np.ndarray, pipeline: Callable, tta: Sequence[str]) -> np.ndarray:
    """Average the embeddings of every transformed copy of ``image``, then L2-normalize.

    Each variant is embedded on its own so its result does not depend on batch
    composition.
    """
    if not tta:
        raise ValueError("TTA set must not be empty")
    total = None
    for name in tta:
        e = np.asarray(pipeline(np.ascontiguousarray(TRANSFORMS[name](image))))[0]
        total = e if total is None else total + e
    return _normalize_rows(total / len(tta))


def embed_batch_tta(images: np.ndarray, pipeline: Callable, tta: Sequence[str],
                    batch_size: int = 64) -> np.ndarray:
    """Batched TTA: one forward pass per (variant, chunk)."""
    if not tta:
        raise ValueError("TTA set must not be empty")
    images = np.asarray(images)
    total = np.zeros(0)
    for name in tta:
        chunks = []
        for start in range(0, len(images), batch_size):
            part = np.stack([np.ascontiguousarray(TRANSFORMS[name](im))
                             for im in images[start:start + batch_size]])
            chunks.append(pipeline(part))
        e = np.concatenate(chunks)
        total = e if total.size == 0 else total + e
    return _normalize_rows(total / len(tta))


def embed_records(records: Sequence[ImageRecord], pipeline: Pipeline, size: int,
                  tta: Optional[Sequence[str]] = None, use_tta: bool = True) -> np.ndarray:
    if not records:
        return np.zeros((0, 0))
    view = records[0].view.value
    tta = tta or (DEFAULT_TTA.get(view, ("identity",)) if use_tta else ("identity",))
    images = np.stack([normalize_image(load_image(r.path, size), pipeline.backend) for r in records])
    return embed_batch_tta(images, pipeline, tta)


# ---------------------------------------------------------------- ranking / metrics

def rank(queries: np.ndarray, gallery: np.ndarray, query_ids: Sequence[str],
         gallery_ids: Sequence[str], query_labels: Optional[Sequence[str]] = None,
         gallery_labels: Optional[Sequence[str]] = None) -> list[RetrievalResult]:
    """Exhaustive cosine ranking; equal scores are ordered by ascending gallery id.

    A gallery item is relevant to a query when their labels match (labels
    default to the ids themselves).
    """
    gallery = np.asarray(gallery, dtype=np.float64)
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    queries = np.asarray(queries, dtype=np.float64)
    query_labels = list(query_ids) if query_labels is None else list(query_labels)
    gallery_labels = list(gallery_ids) if gallery_labels is None else list(gallery_labels)
    gids = np.asarray(gallery_ids)
    results = []
    for q, qid, qlab in zip(queries, query_ids, query_labels):
        # row-wise reduction keeps each score independent of gallery order
        scores = (gallery * q).sum(axis=1)
        order = np.lexsort((gids, -scores))
        results.append(RetrievalResult(
            qid, [(str(gids[i]), float(scores[i])) for i in order],
            {g for g, lab in zip(gallery_ids, gallery_labels) if lab == qlab}))
    return results


def average_precision(ranked_ids: Sequence[str], relevant: set, mode: str = "standard") -> float:
    if mode == "first":
        for i, g in enumerate(ranked_ids, 1):
            if g in relevant:
                return 1.0 / i
        return 0.0
    hits, total = 0, 0.0
    for i, g in enumerate(ranked_ids, 1):
        if g in relevant:
            hits += 1
            total += hits / i
    return total / len(relevant)


def compute_metrics(results: Iterable[RetrievalResult], ks=(1, 5, 10),
                    ap_mode: str = "standard") -> MetricsReport:
    """Recall@K (any relevant item in the top K) and mean AP, both as percentages."""
    if ap_mode not in ("standard", "first"):
        raise ValueError(f"unknown ap_mode {ap_mode!r}")
    hits = {k: 0 for k in ks}
    ap_sum, n, excluded = 0.0, 0, []
    for res in results:
        ranked = [g for g, _ in res.ranked]
        relevant = res.true_ids & set(ranked)
        if not relevant:
            excluded.append(res.query_id)
            continue
        n += 1
        first = next(i for i, g in enumerate(ranked) if g in relevant)
        for k in ks:
            hits[k] += first < k
        ap_sum += average_precision(ranked, relevant, ap_mode)
    if n == 0:
        return MetricsReport({k: 0.0 for k in ks}, 0.0, 0, excluded)
    return MetricsReport({k: 100.0 * hits[k] / n for k in ks}, 100.0 * ap_sum / n, n, excluded)


# ---------------------------------------------------------------- embedding dumps

_MAGIC = b"CVEM"


def write_embeddings(path, ids: Sequence[str], labels: Sequence[str], vectors: np.ndarray) -> None:
    """Binary dump.

    Header ``<4s magic, u32 count, u32 D>``; id table of ``count`` entries, each
    ``<u16 len>`` + UTF-8 image id + ``<u16 len>`` + UTF-8 location id; then
    ``count * D`` little-endian float32 values, row-major.
    """
    vectors = np.asarray(vectors)
    count, dim = vectors.shape if vectors.size else (len(ids), 0)
    parts = [struct.pack("<4sII", _MAGIC, count, dim)]
    for i, lab in zip(ids, labels):
        for s in (i.encode(), lab.encode()):
            parts.append(struct.pack("<H", len(s)) + s)
    parts.append(vectors.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_embeddings(path) -> tuple[list[str], list[str], np.ndarray]:
    raw = Path(path).read_bytes()
    magic, count, dim = struct.unpack_from("<4sII", raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not an embedding dump")
    off = 12
    ids, labels = [], []
    for _ in range(count):
        for out in (ids, labels):
            (n,) = struct.unpack_from("<H", raw, off)
            out.append(raw[off + 2: off + 2 + n].decode())
            off += 2 + n
    vecs = np.frombuffer(raw, "<f4", count * dim, off).reshape(count, dim).astype(np.float64)
    return ids, labels, vecs


def query_gallery_records(root) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Street queries and satellite gallery of a dataset's test split."""
    from .data import View, scan_dataset

    queries = [r for r in scan_dataset(root, "test_query") if r.view is View.STREET]
    gallery = [r for r in scan_dataset(root, "test_gallery") if r.view is View.SATELLITE]
    return queries, gallery


def evaluate_model(model, queries: Sequence[ImageRecord], gallery: Sequence[ImageRecord],
                   size: int, backend: str = "toy", use_tta: bool = True,
                   ap_mode: str = "standard") -> tuple[MetricsReport, list[RetrievalResult]]:
    pipeline = Pipeline(model, backend)
    q = embed_records(queries, pipeline, size, use_tta=use_tta)
    g = embed_records(gallery, pipeline, size, use_tta=use_tta)
    results = rank(q, g, [r.image_id for r in queries], [r.image_id for r in gallery],
                   [r.location_id for r in queries], [r.location_id for r in gallery])
    return compute_metrics(results, ap_mode=ap_mode), results
