"""Procedural synthetic building-road scenes for desk-scale experiments.

Roads are polyline corridors of configurable width; buildings are axis-aligned
or rotated rectangles, a configurable fraction of which is placed near a road
corridor (the spatial-correlation premise the collaborative model exploits).
Rendering uses distinct per-class base colors plus per-pixel uniform noise;
masks are exact rasterizations.  Everything is deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Sample

BACKGROUND_COLOR = (0.42, 0.52, 0.34)
ROAD_COLOR = (0.30, 0.29, 0.28)
BUILDING_COLOR = (0.62, 0.33, 0.26)


@dataclass
class SynthConfig:
    scene_size: int = 128
    road_count: int = 2
    road_width: tuple[int, int] = (4, 8)
    building_count: int = 8
    building_size: tuple[int, int] = (10, 24)
    adjacency_ratio: float = 0.8   # fraction of buildings placed near a road
    noise: float = 0.06
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.adjacency_ratio <= 1.0:
            raise ValueError(f"adjacency_ratio {self.adjacency_ratio} not in [0, 1]")
        for name, rng_ in (("road_width", self.road_width),
                           ("building_size", self.building_size)):
            lo, hi = rng_
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} range {rng_} must be positive and ordered")


@dataclass
class SynthStats:
    skipped_buildings: int = 0


def _segment_distance(py: np.ndarray, px: np.ndarray, a, b) -> np.ndarray:
    """Distance from every grid point to segment a-b."""
    ay, ax = a
    by, bx = b
    dy, dx = by - ay, bx - ax
    denom = dy * dy + dx * dx
    if denom == 0:
        return np.hypot(py - ay, px - ax)
    t = np.clip(((py - ay) * dy + (px - ax) * dx) / denom, 0.0, 1.0)
    return np.hypot(py - (ay + t * dy), px - (ax + t * dx))


def _road_polyline(rng: np.random.Generator, size: int) -> list[tuple[float, float]]:
    """A corridor crossing the scene: border point to opposite border with
    jittered interior waypoints."""
    if rng.random() < 0.5:  # left-to-right
        pts = [(rng.uniform(0, size), 0.0), (rng.uniform(0, size), float(size))]
    else:  # top-to-bottom
        pts = [(0.0, rng.uniform(0, size)), (float(size), rng.uniform(0, size))]
    (y0, x0), (y1, x1) = pts
    mids = []
    for t in (0.33, 0.66):
        jy = rng.uniform(-size * 0.15, size * 0.15)
        jx = rng.uniform(-size * 0.15, size * 0.15)
        mids.append((y0 + t * (y1 - y0) + jy, x0 + t * (x1 - x0) + jx))
    return [pts[0]] + mids + [pts[1]]


def _rect_mask(py, px, cy, cx, hh, hw, angle) -> np.ndarray:
    ca, sa = np.cos(angle), np.sin(angle)
    ry = (py - cy) * ca + (px - cx) * sa
    rx = -(py - cy) * sa + (px - cx) * ca
    return (np.abs(ry) <= hh) & (np.abs(rx) <= hw)


def generate_scene(config: SynthConfig, scene_index: int,
                   stats: SynthStats | None = None) -> Sample:
    rng = np.random.default_rng(
        np.random.SeedSequence([0x5C, config.seed, scene_index]))
    s = config.scene_size
    py, px = np.mgrid[0:s, 0:s].astype(np.float64)

    road_width = int(rng.integers(config.road_width[0], config.road_width[1] + 1))
    road_dist = np.full((s, s), np.inf)
    for _ in range(config.road_count):
        pts = _road_polyline(rng, s)
        for a, b in zip(pts[:-1], pts[1:]):
            road_dist = np.minimum(road_dist, _segment_distance(py, px, a, b))
    road_mask = road_dist <= road_width / 2.0

    d_max = 3.0 * road_width
    near_road = road_dist <= d_max
    road_pix = np.argwhere(road_mask)

    building_mask = np.zeros((s, s), dtype=bool)
    n_near = int(round(config.adjacency_ratio * config.building_count))
    for bi in range(config.building_count):
        want_near = bi < n_near and len(road_pix) > 0
        placed = False
        for _ in range(30):
            bh = rng.integers(config.building_size[0], config.building_size[1] + 1)
            bw = rng.integers(config.building_size[0], config.building_size[1] + 1)
            if want_near:
                ry, rx = road_pix[rng.integers(len(road_pix))]
                ang = rng.uniform(0, 2 * np.pi)
                rad = rng.uniform(road_width / 2.0 + 1.0, d_max)
                cy, cx = ry + rad * np.cos(ang), rx + rad * np.sin(ang)
            else:
                cy, cx = rng.uniform(0, s), rng.uniform(0, s)
            angle = rng.uniform(0, np.pi) if rng.random() < 0.5 else 0.0
            half = np.hypot(bh, bw) / 2.0
            if not (half <= cy <= s - half and half <= cx <= s - half):
                continue
            if want_near and not near_road[int(cy), int(cx)]:
                continue
            rect = _rect_mask(py, px, cy, cx, bh / 2.0, bw / 2.0, angle)
            if (rect & road_mask).any():
                continue
            building_mask |= rect
            placed = True
            break
        if not placed and stats is not None:
            stats.skipped_buildings += 1

    image = np.empty((3, s, s), dtype=np.float64)
    for c in range(3):
        image[c] = BACKGROUND_COLOR[c]
        image[c][road_mask] = ROAD_COLOR[c]
        image[c][building_mask] = BUILDING_COLOR[c]
    image += rng.uniform(-config.noise, config.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    return Sample(
        image=image,
        building_mask=building_mask[None].astype(np.uint8),
        road_mask=road_mask[None].astype(np.uint8),
        id=f"scene_{scene_index:05d}",
        source="synthetic",
    )


def synth_generate(config: SynthConfig, count: int, start_index: int = 0,
                   stats: SynthStats | None = None) -> list[Sample]:
    return [generate_scene(config, start_index + i, stats) for i in range(count)]
