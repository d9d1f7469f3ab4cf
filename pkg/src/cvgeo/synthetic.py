"""Synthetic University-1652 style tree with correlated cross-view content.

Every location is a building: a roof colour, a ground colour, an accent
colour and a rectangular footprint. Walls are a darker shade of the roof;
the accent shows up as skylights from above and as windows from the street.

* satellite: top-down, ground everywhere with the roof over the footprint,
* street: sky band, facade (wall colour with windows, width follows the
  footprint), ground strip at the bottom; random brightness and offset,
* drone: 54 frames in three altitude bands. Low frames see mostly facade and
  ground, high frames approach the satellite view; frames orbit by quarter turns,
* google: street renders of the same building plus one render of a random
  other building (a distractor for the retrieval-based enrichment),
* test: fresh noise draws of street queries and satellite gallery tiles.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SKY = np.array([0.62, 0.78, 0.95])


@dataclass(frozen=True)
class Building:
    roof: np.ndarray
    ground: np.ndarray
    accent: np.ndarray
    footprint: tuple[float, float, float, float]  # y0, x0, y1, x1 in [0, 1]

    @property
    def wall(self):
        return 0.75 * self.roof


def random_building(rng) -> Building:
    h, w = rng.uniform(0.35, 0.7, size=2)
    y0, x0 = rng.uniform(0.1, 0.9 - h), rng.uniform(0.1, 0.9 - w)
    roof, ground, accent = rng.uniform(0.1, 0.95, (3, 3))
    return Building(roof, ground, accent, (y0, x0, y0 + h, x0 + w))


def distinct_buildings(n: int, rng, min_separation: float = 0.35, max_tries: int = 10000):
    """``n`` buildings whose (roof, ground) colours are pairwise at least ``min_separation`` apart."""
    out, sigs = [], []
    for _ in range(max_tries):
        b = random_building(rng)
        sig = np.r_[b.roof, b.ground]
        if all(np.linalg.norm(sig - s) >= min_separation for s in sigs):
            out.append(b)
            sigs.append(sig)
            if len(out) == n:
                return out
    raise RuntimeError(f"could not place {n} buildings {min_separation} apart")


def _save(arr: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8)).save(path)


def _top_down(b: Building, size: int, zoom: float = 1.0) -> np.ndarray:
    # zoom < 1 shows the central part of the tile only
    coords = 0.5 + (np.arange(size) + 0.5) / size * zoom - zoom / 2
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    y0, x0, y1, x1 = b.footprint
    inside = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
    # skylights: a 2x2 pattern of squares in the middle of each roof quadrant
    fy, fx = (yy - y0) / (y1 - y0), (xx - x0) / (x1 - x0)
    light = inside & (np.abs((fy * 2) % 1 - 0.5) < 0.2) & (np.abs((fx * 2) % 1 - 0.5) < 0.2)
    img = np.where(inside[..., None], b.roof, b.ground)
    return np.where(light[..., None], b.accent, img)


def satellite_view(b: Building, rng, size=56, noise=0.04):
    img = _top_down(b, size)
    return img + rng.normal(0, noise, img.shape)


def street_view(b: Building, rng, size=56, noise=0.05):
    img = np.empty((size, size, 3))
    horizon = size // 4 + int(rng.integers(-2, 3))
    ground = size - size // 5
    img[:horizon] = SKY
    img[horizon:ground] = b.ground
    width = (b.footprint[3] - b.footprint[1]) * size * 1.3
    left = int(round(size / 2 - width / 2 + rng.integers(-4, 5)))
    lo, hi = max(left, 0), max(left + int(width), 0)
    img[horizon:ground, lo:hi] = b.wall
    rows = (np.arange(size) - horizon) % 8
    cols = (np.arange(size) - lo) % 8
    windows = (rows[:, None] >= 2) & (rows[:, None] < 5) & (cols[None] >= 2) & (cols[None] < 6)
    windows[: horizon + 1] = False
    windows[ground - 1:] = False
    windows[:, :lo] = False
    windows[:, hi:] = False
    img[windows] = b.accent
    img[ground:] = b.ground
    img = img * rng.uniform(0.95, 1.05)
    return img + rng.normal(0, noise, img.shape)


def drone_view(b: Building, band: int, frame: int, rng, size=32, noise=0.04):
    if band == 2:
        img = _top_down(b, size)
    else:
        # oblique: upper part top-down (zoomed in for the lowest band), lower part facade
        split = size // 2 if band == 0 else size // 3
        img = _top_down(b, size, zoom=0.6 if band == 0 else 0.8)
        img[split:] = b.wall
        img[-max(2, size // 8):] = b.ground
    img = np.rot90(img, frame % 4)
    return img + rng.normal(0, noise, img.shape)


def make_toy_dataset(root, n_locations=32, seed=0, size=56, drone_size=32,
                     street_per_location=6, google_per_location=4, incomplete=()):
    """Write the tree under ``root`` and return the buildings by location id.

    Location ids in ``incomplete`` get 53 drone frames instead of 54.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    buildings = {f"{i:04d}": b for i, b in enumerate(distinct_buildings(n_locations, rng))}
    ids = sorted(buildings)
    for loc, b in buildings.items():
        lrng = np.random.default_rng([seed, int(loc)])
        _save(satellite_view(b, lrng, size), root / "train/satellite" / loc / f"{loc}.png")
        for j in range(street_per_location):
            _save(street_view(b, lrng, size), root / "train/street" / loc / f"street_{j}.png")
        n_drone = 53 if loc in incomplete else 54
        for i in range(n_drone):
            _save(drone_view(b, i // 18, i, lrng, drone_size),
                  root / "train/drone" / loc / f"image-{i + 1:02d}.png")
        for j in range(google_per_location - 1):
            _save(street_view(b, lrng, size), root / "train/google" / loc / f"g{j}.png")
        other = ids[(ids.index(loc) + 1 + lrng.integers(len(ids) - 1)) % len(ids)]
        _save(street_view(buildings[other], lrng, size),
              root / "train/google" / loc / f"g{google_per_location - 1}.png")
        _save(street_view(b, lrng, size), root / "test/query_street" / loc / "street_q.png")
        _save(satellite_view(b, lrng, size), root / "test/gallery_satellite" / loc / f"{loc}.png")
    return buildings
