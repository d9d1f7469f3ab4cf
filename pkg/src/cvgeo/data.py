"""Dataset records, University-1652 directory scanning and batch assembly.

Expected layout under ``root``::

    train/street/<location>/*.jpg
    train/satellite/<location>/*.jpg
    train/drone/<location>/*.jpeg        # 54 altitude-ordered frames
    train/google/<location>/*.jpg        # auxiliary street pool (GREM)
    test/query_street/<location>/...
    test/query_drone/<location>/...
    test/gallery_satellite/<location>/...
    test/gallery_drone/<location>/...
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".webp"}
SCENE_SIZE = 18
DRONE_PER_LOCATION = 3 * SCENE_SIZE


class View(str, Enum):
    STREET = "street"
    SATELLITE = "satellite"
    DRONE = "drone"


class Scale(str, Enum):
    S1 = "s1"  # low altitude
    S2 = "s2"
    S3 = "s3"  # high altitude


class Source(str, Enum):
    ORIGINAL = "original"
    GREM = "grem_augmented"


SCALES = (Scale.S1, Scale.S2, Scale.S3)

# split -> [(subdirectory, view)]
SPLIT_DIRS = {
    "train": [("train/street", View.STREET), ("train/satellite", View.SATELLITE),
              ("train/drone", View.DRONE)],
    "test_query": [("test/query_street", View.STREET), ("test/query_drone", View.DRONE)],
    "test_gallery": [("test/gallery_satellite", View.SATELLITE),
                     ("test/gallery_drone", View.DRONE)],
}


class IngestionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    location_id: str
    view: View
    path: str
    height_px: int
    width_px: int
    scale: Scale | None = None
    source: Source = Source.ORIGINAL

    def __post_init__(self):
        object.__setattr__(self, "view", View(self.view))
        object.__setattr__(self, "source", Source(self.source))
        if self.scale is not None:
            object.__setattr__(self, "scale", Scale(self.scale))
        if (self.scale is not None) != (self.view is View.DRONE):
            raise ValueError(f"{self.image_id}: scale must be set iff view is drone")
        if self.height_px <= 0 or self.width_px <= 0:
            raise ValueError(f"{self.image_id}: non-positive image size")

    def to_json(self) -> dict:
        d = asdict(self)
        d["view"] = self.view.value
        d["source"] = self.source.value
        d["scale"] = self.scale.value if self.scale is not None else None
        return d


@dataclass(frozen=True)
class SceneGroup:
    location_id: str
    scale: Scale
    images: tuple[ImageRecord, ...]

    def __post_init__(self):
        if len(self.images) != SCENE_SIZE:
            raise ValueError(f"scene group needs {SCENE_SIZE} images, got {len(self.images)}")
        for r in self.images:
            if r.location_id != self.location_id or r.scale != self.scale:
                raise ValueError(f"{r.image_id} does not belong to {self.location_id}/{self.scale}")

    @property
    def key(self) -> str:
        return f"{self.location_id}/{self.scale.value}"


@dataclass(frozen=True)
class LocationTuple:
    location_id: str
    street: ImageRecord
    satellite: ImageRecord
    scenes: tuple[SceneGroup, ...]

    def __post_init__(self):
        if sorted(s.scale.value for s in self.scenes) != [s.value for s in SCALES]:
            raise ValueError(f"{self.location_id}: scenes must cover s1, s2, s3 exactly once")
        parts = [self.street, self.satellite, *self.scenes]
        if any(p.location_id != self.location_id for p in parts):
            raise ValueError(f"{self.location_id}: mixed location ids in tuple")
        # keep scenes in s1, s2, s3 order
        object.__setattr__(self, "scenes", tuple(sorted(self.scenes, key=lambda s: s.scale.value)))


@dataclass(frozen=True)
class Batch:
    tuples: tuple[LocationTuple, ...]
    seed: int

    def __post_init__(self):
        ids = [t.location_id for t in self.tuples]
        if len(set(ids)) != len(ids):
            raise ValueError("batch contains repeated location ids")
        if len(ids) < 2:
            raise ValueError("a batch needs at least 2 locations")

    @property
    def location_ids(self) -> list[str]:
        return [t.location_id for t in self.tuples]

    def __len__(self):
        return len(self.tuples)


def _natural_key(name: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", name)]


def _image_files(directory: Path) -> list[Path]:
    files = [p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(files, key=lambda p: _natural_key(p.name))


def _read_size(path: Path) -> tuple[int, int] | None:
    try:
        with Image.open(path) as im:
            w, h = im.size
        return h, w
    except OSError as exc:
        logger.warning("unreadable image %s: %s", path, exc)
        return None


def scan_dataset(root, split: str, invert_altitude: bool = False) -> list[ImageRecord]:
    """Walk one split of a University-1652 style tree.

    Drone frames are assigned scales by file order: indices 0-17 -> s1,
    18-35 -> s2, 36-53 -> s3 (reversed when ``invert_altitude``). Locations
    whose drone folder does not hold exactly 54 frames lose their drone
    records with a warning; their street/satellite records are kept.
    """
    root = Path(root).resolve()
    if not root.is_dir():
        raise IngestionError(f"dataset root not found: {root}")
    if split not in SPLIT_DIRS:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(SPLIT_DIRS)}")

    records: list[ImageRecord] = []
    found_any = False
    for subdir, view in SPLIT_DIRS[split]:
        base = root / subdir
        if not base.is_dir():
            continue
        found_any = True
        for loc_dir in sorted((p for p in base.iterdir() if p.is_dir()), key=lambda p: p.name):
            files = _image_files(loc_dir)
            if view is View.DRONE and len(files) != DRONE_PER_LOCATION:
                logger.warning("location %s has %d drone images (need %d); drone scenes skipped",
                               loc_dir.name, len(files), DRONE_PER_LOCATION)
                continue
            for i, path in enumerate(files):
                size = _read_size(path)
                if size is None:
                    continue
                scale = None
                if view is View.DRONE:
                    group = i // SCENE_SIZE
                    scale = SCALES[2 - group] if invert_altitude else SCALES[group]
                records.append(ImageRecord(
                    image_id=path.relative_to(root).as_posix(),
                    location_id=loc_dir.name,
                    view=view,
                    path=str(path),
                    height_px=size[0],
                    width_px=size[1],
                    scale=scale,
                ))
    if not found_any or not records:
        logger.warning("no images found for split %r under %s", split, root)
    return records


def scene_groups(records: Iterable[ImageRecord]) -> dict[tuple[str, Scale], SceneGroup]:
    buckets: dict[tuple[str, Scale], list[ImageRecord]] = {}
    for r in records:
        if r.view is View.DRONE:
            buckets.setdefault((r.location_id, r.scale), []).append(r)
    groups = {}
    for key, members in buckets.items():
        if len(members) == SCENE_SIZE:
            groups[key] = SceneGroup(key[0], key[1], tuple(members))
        else:
            logger.warning("scene %s/%s has %d images; skipped", key[0], key[1].value, len(members))
    return groups


def street_pools(records: Iterable[ImageRecord]) -> dict[str, list[ImageRecord]]:
    """Street images per location: originals first, then GREM additions."""
    pools: dict[str, list[ImageRecord]] = {}
    for r in sorted(records, key=lambda r: (r.source is not Source.ORIGINAL, r.image_id)):
        if r.view is View.STREET:
            pools.setdefault(r.location_id, []).append(r)
    return pools


def build_tuples(records: Sequence[ImageRecord]) -> list[LocationTuple]:
    """One tuple per location having a street image, a satellite image and all 3 scenes."""
    groups = scene_groups(records)
    streets = street_pools(records)
    sats: dict[str, ImageRecord] = {}
    for r in records:
        if r.view is View.SATELLITE:
            sats.setdefault(r.location_id, r)
    out = []
    for loc in sorted(set(streets) & set(sats)):
        scenes = [groups.get((loc, s)) for s in SCALES]
        if any(s is None for s in scenes):
            logger.warning("location %s lacks complete drone scenes; not used for training", loc)
            continue
        out.append(LocationTuple(loc, streets[loc][0], sats[loc], tuple(scenes)))
    return out


def make_batches(tuples: Sequence[LocationTuple], batch_size: int, seed: int,
                 drop_last: bool = False) -> list[Batch]:
    """Shuffle deterministically under ``seed`` and pack into batches of distinct locations.

    Several tuples may share a location (one per street image); each goes to the
    first open batch that does not yet hold its location. Incomplete batches
    are kept when they hold at least 2 tuples, unless ``drop_last`` asks for
    full batches only.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    if len(tuples) < 2:
        raise ValueError("need at least 2 location tuples for contrastive batches")
    if len({t.location_id for t in tuples}) < 2:
        raise ValueError("need at least 2 distinct locations for contrastive batches")
    order = np.random.default_rng(seed).permutation(len(tuples))
    done, open_ = [], []
    for i in order:
        loc = tuples[i].location_id
        for chunk in open_:
            if loc not in chunk[1]:
                chunk[0].append(i)
                chunk[1].add(loc)
                break
        else:
            chunk = ([i], {loc})
            open_.append(chunk)
        if len(chunk[0]) == batch_size:
            open_.remove(chunk)
            done.append(chunk[0])
    done.extend(c[0] for c in open_)
    return [Batch(tuple(tuples[i] for i in chunk), seed) for chunk in done
            if len(chunk) >= 2 and not (drop_last and len(chunk) < batch_size)]


def write_manifest(records: Iterable[ImageRecord], path, append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_manifest(path) -> list[ImageRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(ImageRecord(**json.loads(line)))
    return records


def load_image(path, size: int | None = None) -> np.ndarray:
    """RGB image as float64 array (H, W, 3) in [0, 1], optionally resized square."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def retag(record: ImageRecord, **changes) -> ImageRecord:
    return replace(record, **changes)
