"""Seeded synthetic terrain and drive-test style measurements.

Targets follow a known law in distance, frequency and obstruction depth so
the rest of the toolkit can be exercised without real measurement data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diagnostics import obstruction_depth
from .geodata import DsmRaster
from .profile import (DEFAULT_D_MIN, DEFAULT_WIDTH, EARTH_RADIUS_M, LinkMeasurement,
                      build_profile, corridor_points)

UK_BANDS_MHZ = (449.0, 1802.0, 2695.0, 3602.0, 5850.0)


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class TerrainParams:
    seed: int = 0
    size: int = 512
    roughness_m: float = 8.0
    building_density: float = 0.2
    building_height_m: tuple[float, float] = (5.0, 25.0)
    building_side_m: tuple[int, int] = (8, 30)
    noise_scale_cells: int = 64
    cell_size: float = 1.0

    def __post_init__(self):
        if self.size < 64:
            raise ValueError(f"terrain size must be >= 64 cells, got {self.size}")
        if self.roughness_m < 0:
            raise ValueError("roughness must be non-negative")
        if not 0.0 <= self.building_density <= 1.0:
            raise ValueError("building density must lie in [0, 1]")
        lo, hi = self.building_height_m
        if lo < 0 or hi < lo:
            raise ValueError(f"bad building height range {self.building_height_m}")
        smin, smax = self.building_side_m
        if smin < 1 or smax < smin:
            raise ValueError(f"bad building side range {self.building_side_m}")


@dataclass(frozen=True)
class GroundTruthModel:
    """Path loss = L0 + 10 n log10(d) + fc log10(f/f0) + oc * depth * (f/f0)**k + noise.

    ``k`` (``obstruction_freq_exponent``) couples frequency into the
    obstruction term; 0 keeps the two effects additive.
    """

    l0_db: float = 40.0
    exponent: float = 3.0
    freq_coeff_db: float = 20.0
    obstruction_coeff_db_per_m: float = 0.02
    noise_sd_db: float = 0.0
    f0_mhz: float = 1000.0
    obstruction_freq_exponent: float = 0.0

    def __post_init__(self):
        if self.exponent < 1:
            raise ValueError("path-loss exponent must be >= 1")
        if self.noise_sd_db < 0:
            raise ValueError("noise SD must be non-negative")
        if self.f0_mhz <= 0:
            raise ValueError("reference frequency must be positive")

    def mean_loss(self, d_m, f_mhz, depth_m):
        d_m = np.asarray(d_m, dtype=np.float64)
        f = np.asarray(f_mhz, dtype=np.float64) / self.f0_mhz
        return (self.l0_db + 10.0 * self.exponent * np.log10(d_m)
                + self.freq_coeff_db * np.log10(f)
                + self.obstruction_coeff_db_per_m * np.asarray(depth_m) * f ** self.obstruction_freq_exponent)


def _value_noise(rng, size: int, scale: int) -> np.ndarray:
    """Smooth noise in [0, 1]: a random lattice every ``scale`` cells, smoothstep-blended."""
    n = size // scale + 2
    lattice = rng.random((n, n))
    t = np.arange(size) / scale
    i = t.astype(int)
    f = t - i
    f = f * f * (3 - 2 * f)
    rows = lattice[i] * (1 - f)[:, None] + lattice[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def terrain_layers(params: TerrainParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bare ground, surface heights and the building footprint mask."""
    rng = np.random.default_rng(params.seed)
    size = params.size
    ground = np.zeros((size, size))
    if params.roughness_m > 0:
        scale = max(2, params.noise_scale_cells)
        ground = (_value_noise(rng, size, scale) + 0.5 * _value_noise(rng, size, max(2, scale // 4)))
        ground = params.roughness_m * (ground - ground.min()) / 1.5
    heights = ground.copy()
    covered = np.zeros((size, size), dtype=bool)
    target = params.building_density * size * size
    smin, smax = params.building_side_m
    hmin, hmax = params.building_height_m
    n_covered = 0
    while n_covered < target:
        w, h = rng.integers(smin, smax + 1, size=2)
        r0 = int(rng.integers(0, size - h + 1))
        c0 = int(rng.integers(0, size - w + 1))
        block = np.s_[r0:r0 + h, c0:c0 + w]
        roof = ground[block].max() + rng.uniform(hmin, hmax)
        heights[block] = np.maximum(heights[block], roof)
        n_covered += int(np.count_nonzero(~covered[block]))
        covered[block] = True
    return ground, heights, covered


def generate_terrain(params: TerrainParams) -> DsmRaster:
    """Rolling ground (two octaves of value noise) plus rectangular flat-roof buildings."""
    _, heights, _ = terrain_layers(params)
    return DsmRaster(0.0, 0.0, params.cell_size, heights.astype(np.float32))


def _region_tiles(raster: DsmRaster, regions: Sequence[str]):
    xmin, ymin, xmax, ymax = raster.bounds
    n = len(regions)
    ncols = math.ceil(math.sqrt(n))
    nrows = math.ceil(n / ncols)
    tw, th = (xmax - xmin) / ncols, (ymax - ymin) / nrows
    tiles = {}
    for k, name in enumerate(regions):
        r, c = divmod(k, ncols)
        tiles[name] = (xmin + c * tw, ymin + r * th, xmin + (c + 1) * tw, ymin + (r + 1) * th)
    return tiles


def generate_measurements(raster: DsmRaster, n: int, regions: Sequence[str], bands: Sequence[float],
                          truth: GroundTruthModel, seed: int, *,
                          distance_range_m: tuple[float, float] = (80.0, 400.0),
                          tx_agl_range_m: tuple[float, float] = (15.0, 40.0),
                          rx_agl_m: float = 1.5, width: int = DEFAULT_WIDTH,
                          categories: dict[str, str] | None = None,
                          max_retries: int = 1000) -> list[LinkMeasurement]:
    """Place ``n`` links and label them with ground-truth path loss.

    The raster is tiled into one rectangle per region; every link's corridor
    lies inside its region's tile, so region labels partition links spatially.
    Links are dealt to regions round-robin.
    """
    if n < 1:
        raise SynthError("n must be >= 1")
    if len(bands) == 0:
        raise SynthError("at least one frequency band is required")
    if not regions:
        raise SynthError("at least one region label is required")
    dmin, dmax = distance_range_m
    if dmin < DEFAULT_D_MIN:
        raise SynthError(f"minimum link distance must be >= {DEFAULT_D_MIN} m")
    rng = np.random.default_rng(seed)
    tiles = _region_tiles(raster, regions)
    bands = np.asarray(bands, dtype=np.float64)
    links = []
    for k in range(n):
        region = regions[k % len(regions)]
        x0, y0, x1, y1 = tiles[region]
        for _ in range(max_retries):
            tx, ty = rng.uniform(x0, x1), rng.uniform(y0, y1)
            d = rng.uniform(dmin, dmax)
            theta = rng.uniform(0, 2 * math.pi)
            rx, ry = tx + d * math.cos(theta), ty + d * math.sin(theta)
            cand = LinkMeasurement(tx, ty, rx, ry, float(rng.uniform(*tx_agl_range_m)), rx_agl_m,
                                   float(bands[rng.integers(len(bands))]), region=region,
                                   category=(categories or {}).get(region), link_id=k)
            xs, ys = corridor_points(cand, width)
            inside = ((xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)).all()
            if inside and x0 <= rx <= x1 and y0 <= ry <= y1:
                break
        else:
            raise SynthError(f"could not place link {k} in region {region!r} "
                             f"after {max_retries} attempts")
        links.append(cand)
    return label_links(raster, links, truth, rng, width)


def label_links(raster: DsmRaster, links: Sequence[LinkMeasurement], truth: GroundTruthModel,
                rng: np.random.Generator, width: int = DEFAULT_WIDTH,
                radius: float = EARTH_RADIUS_M) -> list[LinkMeasurement]:
    out = []
    for link in links:
        depth = obstruction_depth(build_profile(raster, link, width, radius))
        loss = float(truth.mean_loss(link.ground_distance, link.frequency, depth))
        if truth.noise_sd_db > 0:
            loss += float(rng.normal(0.0, truth.noise_sd_db))
        out.append(LinkMeasurement(link.tx_x, link.tx_y, link.rx_x, link.rx_y, link.tx_height_agl,
                                   link.rx_height_agl, link.frequency, loss, link.region,
                                   link.category, link.link_id))
    return out
