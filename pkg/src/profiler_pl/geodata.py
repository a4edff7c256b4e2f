"""Height rasters and the two sampling primitives used by corridor extraction.

Coordinates are planar metres. Row 0 of a raster sits at ``origin_y`` and rows
grow with y; column 0 sits at ``origin_x``. Cell ``(r, c)`` covers
``[origin + c*cell, origin + (c+1)*cell)`` so its center is at ``+0.5`` cells.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DSR_MAGIC = b"DSR1"
_DSR_HEADER = struct.Struct("<4sdddQQ")


class RasterError(ValueError):
    """Raised for malformed, non-finite or out-of-bounds raster access."""


@dataclass(frozen=True)
class GridPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise RasterError(f"non-finite grid point ({self.x}, {self.y})")


@dataclass(frozen=True, eq=False)
class DsmRaster:
    """Regular surface-height grid in metres above sea level."""

    origin_x: float
    origin_y: float
    cell_size: float
    heights: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.heights)
        if h.ndim != 2:
            raise RasterError(f"heights must be 2-D, got shape {h.shape}")
        if h.shape[0] < 2 or h.shape[1] < 2:
            raise RasterError(f"raster must be at least 2x2, got {h.shape}")
        if not self.cell_size > 0:
            raise RasterError(f"cell_size must be positive, got {self.cell_size}")
        if not np.all(np.isfinite(h)):
            raise RasterError("raster contains non-finite heights")
        h = h.astype(np.float32, copy=True)
        h.flags.writeable = False
        object.__setattr__(self, "heights", h)

    @property
    def n_rows(self) -> int:
        return self.heights.shape[0]

    @property
    def n_cols(self) -> int:
        return self.heights.shape[1]

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the covered area."""
        return (
            self.origin_x,
            self.origin_y,
            self.origin_x + self.n_cols * self.cell_size,
            self.origin_y + self.n_rows * self.cell_size,
        )

    def contains(self, x, y) -> np.ndarray:
        xmin, ymin, xmax, ymax = self.bounds
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.origin_x + (np.arange(self.n_cols) + 0.5) * self.cell_size
        ys = self.origin_y + (np.arange(self.n_rows) + 0.5) * self.cell_size
        return xs, ys


def _nearest_index(frac: np.ndarray, n: int) -> np.ndarray:
    # frac is the continuous index of cell centers; exact halves go to the lower index
    idx = np.ceil(frac - 0.5).astype(np.int64)
    return np.clip(idx, 0, n - 1)


def nearest_indices(raster: DsmRaster, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Row/column of the cell center closest to each point (vectorised)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise RasterError("non-finite sample coordinates")
    inside = raster.contains(x, y)
    if not np.all(inside):
        bad = np.flatnonzero(~inside.ravel())[0]
        raise RasterError(
            f"point ({x.ravel()[bad]:.3f}, {y.ravel()[bad]:.3f}) outside raster "
            f"bounds {raster.bounds}"
        )
    cols = _nearest_index((x - raster.origin_x) / raster.cell_size - 0.5, raster.n_cols)
    rows = _nearest_index((y - raster.origin_y) / raster.cell_size - 0.5, raster.n_rows)
    return rows, cols


def sample_nearest(raster: DsmRaster, x, y) -> np.ndarray:
    """Vectorised nearest-neighbor sampling, same semantics as the scalar form."""
    rows, cols = nearest_indices(raster, x, y)
    return raster.heights[rows, cols].astype(np.float64)


def nearest_neighbor_sample(raster: DsmRaster, p: GridPoint) -> float:
    """Height of the cell whose center is closest to ``p``.

    Equidistant centers resolve to the lowest row-major index.
    """
    return float(sample_nearest(raster, p.x, p.y))


def bilinear_resample(grid, target_rows: int = 256) -> np.ndarray:
    """Linearly resample a ``(d, W)`` grid along its first axis to ``target_rows``.

    Output row ``r`` reads source coordinate ``r * (d - 1) / (target_rows - 1)``.
    Columns are left untouched.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise RasterError(f"expected a 2-D grid, got shape {g.shape}")
    d, w = g.shape
    if d < 2:
        raise RasterError(f"need at least 2 source rows, got {d}")
    if w < 1:
        raise RasterError("grid has no columns")
    if target_rows < 2:
        raise RasterError(f"target_rows must be >= 2, got {target_rows}")
    if not np.all(np.isfinite(g)):
        raise RasterError("grid contains non-finite values")
    pos = np.arange(target_rows, dtype=np.float64) * (d - 1) / (target_rows - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), d - 2)
    frac = (pos - lo)[:, None]
    out = (1.0 - frac) * g[lo] + frac * g[lo + 1]
    exact = frac[:, 0] == 0.0
    out[exact] = g[lo[exact]]
    return out


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def save_raster(raster: DsmRaster, path) -> None:
    """Write ``raster`` in the DSR1 binary layout."""
    header = _DSR_HEADER.pack(
        DSR_MAGIC,
        float(raster.origin_x),
        float(raster.origin_y),
        float(raster.cell_size),
        raster.n_rows,
        raster.n_cols,
    )
    payload = np.ascontiguousarray(raster.heights, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def _read_dsr(path, fill_value: float | None) -> DsmRaster:
    blob = Path(path).read_bytes()
    if len(blob) < _DSR_HEADER.size:
        raise RasterError(f"{path}: truncated DSR1 header")
    magic, ox, oy, cell, n_rows, n_cols = _DSR_HEADER.unpack_from(blob)
    if magic != DSR_MAGIC:
        raise RasterError(f"{path}: bad magic {magic!r}")
    expected = n_rows * n_cols * 4
    payload = blob[_DSR_HEADER.size:]
    if len(payload) != expected:
        raise RasterError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    heights = np.frombuffer(payload, dtype="<f4").reshape(n_rows, n_cols).astype(np.float32)
    heights = _apply_fill(heights, ~np.isfinite(heights), fill_value, path)
    return DsmRaster(ox, oy, cell, heights)


def _apply_fill(heights, missing, fill_value, path):
    if missing.any():
        if fill_value is None:
            raise RasterError(
                f"{path}: {int(missing.sum())} no-data cells and no fill value configured"
            )
        heights = heights.copy()
        heights[missing] = fill_value
    return heights


_ASCII_KEYS = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value",
               "xllcenter", "yllcenter"}


def _read_ascii_grid(path, fill_value: float | None) -> DsmRaster:
    tokens = Path(path).read_text().split()
    header: dict[str, float] = {}
    pos = 0
    while pos + 1 < len(tokens) and tokens[pos].lower() in _ASCII_KEYS:
        try:
            header[tokens[pos].lower()] = float(tokens[pos + 1])
        except ValueError as exc:
            raise RasterError(f"{path}: bad header value for {tokens[pos]}") from exc
        pos += 2
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise RasterError(f"{path}: missing header key {key!r}")
    n_cols, n_rows, cell = int(header["ncols"]), int(header["nrows"]), header["cellsize"]
    if "xllcorner" in header:
        ox = header["xllcorner"]
    elif "xllcenter" in header:
        ox = header["xllcenter"] - cell / 2
    else:
        raise RasterError(f"{path}: missing xllcorner")
    if "yllcorner" in header:
        oy = header["yllcorner"]
    elif "yllcenter" in header:
        oy = header["yllcenter"] - cell / 2
    else:
        raise RasterError(f"{path}: missing yllcorner")
    values = tokens[pos:]
    if len(values) != n_rows * n_cols:
        raise RasterError(f"{path}: expected {n_rows * n_cols} values, found {len(values)}")
    try:
        grid = np.array([float(v) for v in values], dtype=np.float64).reshape(n_rows, n_cols)
    except ValueError as exc:
        raise RasterError(f"{path}: non-numeric grid value") from exc
    # first data row is the northern edge; flip so row 0 sits at yllcorner
    grid = grid[::-1]
    missing = ~np.isfinite(grid)
    if "nodata_value" in header:
        missing |= grid == header["nodata_value"]
    grid = _apply_fill(grid, missing, fill_value, path)
    return DsmRaster(ox, oy, cell, grid)


RASTER_FORMATS = ("dsr1", "ascii")


def load_raster(path, format: str | None = None, fill_value: float | None = None) -> DsmRaster:
    """Load a raster from disk.

    Args:
        path: file to read.
        format: ``"dsr1"`` or ``"ascii"``; inferred from the suffix when omitted
            (``.asc``/``.txt`` are ASCII grids, anything else DSR1).
        fill_value: constant that replaces no-data / non-finite cells. Without
            it such cells are an error.
    """
    path = Path(path)
    if format is None:
        format = "ascii" if path.suffix.lower() in (".asc", ".txt") else "dsr1"
    format = format.lower()
    if format not in RASTER_FORMATS:
        raise RasterError(f"unknown raster format {format!r}")
    if not path.is_file():
        raise FileNotFoundError(path)
    if format == "dsr1":
        return _read_dsr(path, fill_value)
    return _read_ascii_grid(path, fill_value)
