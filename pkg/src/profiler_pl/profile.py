"""Path-profile extraction and per-configuration input assembly.

A link's corridor is a ``floor(d) x W`` strip of surface heights sampled at
1 m along the Tx->Rx axis and 1 m across it, then resampled to 256 rows.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .geodata import DsmRaster, bilinear_resample, sample_nearest

EARTH_RADIUS_M = 6_365_000.0
PROFILE_ROWS = 256
DEFAULT_WIDTH = 61
DEFAULT_D_MIN = 62.0

CSV_COLUMNS = ("tx_x", "tx_y", "rx_x", "rx_y", "tx_agl", "rx_agl", "freq_mhz",
               "path_loss_db", "region")


class ProfileError(ValueError):
    pass


class ConfigKind(str, enum.Enum):
    ORIGINAL = "original"
    FINE = "fine"
    FLIP = "flip"

    @classmethod
    def parse(cls, value) -> "ConfigKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ProfileError(f"unknown configuration {value!r}; "
                               f"expected one of {[k.value for k in cls]}") from None


_LAYOUT = {
    ConfigKind.ORIGINAL: (4, 0),
    ConfigKind.FINE: (4, 0),
    ConfigKind.FLIP: (2, 2),
}


@dataclass(frozen=True)
class ChannelConfig:
    kind: ConfigKind
    n_channels: int
    n_scalars: int

    def __post_init__(self):
        kind = ConfigKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        if (self.n_channels, self.n_scalars) != _LAYOUT[kind]:
            raise ProfileError(
                f"{kind.value} uses {_LAYOUT[kind][0]} channels and {_LAYOUT[kind][1]} "
                f"scalars, got ({self.n_channels}, {self.n_scalars})"
            )

    @classmethod
    def of(cls, kind) -> "ChannelConfig":
        kind = ConfigKind.parse(kind)
        return cls(kind, *_LAYOUT[kind])


@dataclass(frozen=True)
class NormalizationSpec:
    """Constants that map physical quantities to O(1) network values.

    Heights are first shifted by the mean of the two antenna heights (a
    per-link quantity, so not stored here).
    """

    height_scale_m: float = 200.0
    freq_log_divisor: float = 4.0
    distance_scale_m: float = 5000.0
    target_scale_db: float = 200.0
    target_offset_db: float = 0.0

    def __post_init__(self):
        for name in ("height_scale_m", "freq_log_divisor", "distance_scale_m", "target_scale_db"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ProfileError(f"{name} must be positive and finite, got {v}")
        if not math.isfinite(self.target_offset_db):
            raise ProfileError("target_offset_db must be finite")

    def frequency(self, f_mhz: float) -> float:
        return math.log10(f_mhz) / self.freq_log_divisor

    def distance(self, metres):
        return np.asarray(metres, dtype=np.float64) / self.distance_scale_m

    def target(self, loss_db):
        return (np.asarray(loss_db, dtype=np.float64) - self.target_offset_db) / self.target_scale_db

    def denormalize_target(self, value):
        return np.asarray(value, dtype=np.float64) * self.target_scale_db + self.target_offset_db

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class LinkMeasurement:
    tx_x: float
    tx_y: float
    rx_x: float
    rx_y: float
    tx_height_agl: float
    rx_height_agl: float
    frequency: float
    path_loss: float | None = None
    region: str = ""
    category: str | None = None
    link_id: int | None = None

    def __post_init__(self):
        coords = (self.tx_x, self.tx_y, self.rx_x, self.rx_y, self.tx_height_agl, self.rx_height_agl)
        if not all(math.isfinite(v) for v in coords):
            raise ProfileError("link coordinates and antenna heights must be finite")
        if not (math.isfinite(self.frequency) and self.frequency > 0):
            raise ProfileError(f"frequency must be positive, got {self.frequency}")
        if self.path_loss is not None and not math.isfinite(self.path_loss):
            raise ProfileError("path_loss must be finite when present")

    @property
    def ground_distance(self) -> float:
        return math.hypot(self.rx_x - self.tx_x, self.rx_y - self.tx_y)


@dataclass(frozen=True, eq=False)
class PathProfile:
    corridor: np.ndarray  # (floor(d), W), rows ordered Tx -> Rx
    d: float
    tx_abs_height: float
    rx_abs_height: float

    def __post_init__(self):
        c = np.asarray(self.corridor, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] % 2 == 0:
            raise ProfileError(f"corridor must be 2-D with odd width, got {c.shape}")
        object.__setattr__(self, "corridor", c)

    @property
    def width(self) -> int:
        return self.corridor.shape[1]

    @property
    def center(self) -> int:
        return (self.width - 1) // 2


@dataclass(eq=False)
class ModelInput:
    channels: np.ndarray  # (C, 256, W)
    scalars: np.ndarray  # (n_scalars,)
    target: float | None = None


# ---------------------------------------------------------------------------
# Corridor geometry
# ---------------------------------------------------------------------------


def corridor_points(link: LinkMeasurement, width: int = DEFAULT_WIDTH):
    """Planar sample coordinates of the corridor, each of shape ``(floor(d), W)``."""
    d = link.ground_distance
    ux = (link.rx_x - link.tx_x) / d
    uy = (link.rx_y - link.tx_y) / d
    along = np.arange(math.floor(d), dtype=np.float64)[:, None]
    across = (np.arange(width, dtype=np.float64) - (width - 1) / 2)[None, :]
    # left-hand normal (-uy, ux)
    xs = link.tx_x + along * ux - across * uy
    ys = link.tx_y + along * uy + across * ux
    return xs, ys


def corridor_in_bounds(raster: DsmRaster, link: LinkMeasurement, width: int = DEFAULT_WIDTH) -> bool:
    xs, ys = corridor_points(link, width)
    return bool(np.all(raster.contains(xs, ys))) and bool(
        raster.contains(link.rx_x, link.rx_y))


def extract_corridor(raster: DsmRaster, link: LinkMeasurement, width: int = DEFAULT_WIDTH,
                     d_min: float = DEFAULT_D_MIN) -> PathProfile:
    """Nearest-neighbor sample the corridor around the direct path.

    Row ``i`` lies ``i`` metres from the Tx; column ``j`` is offset
    ``j - (W-1)/2`` metres to the left of the Tx->Rx direction. Antenna
    heights are the surface height under each endpoint plus the AGL height.
    """
    if width < 1 or width % 2 == 0:
        raise ProfileError(f"corridor width must be odd, got {width}")
    d = link.ground_distance
    if d < d_min:
        raise ProfileError(f"link distance {d:.2f} m below minimum {d_min} m")
    xs, ys = corridor_points(link, width)
    corridor = sample_nearest(raster, xs, ys)
    ends = sample_nearest(raster, np.array([link.tx_x, link.rx_x]), np.array([link.tx_y, link.rx_y]))
    return PathProfile(
        corridor=corridor,
        d=d,
        tx_abs_height=float(ends[0]) + link.tx_height_agl,
        rx_abs_height=float(ends[1]) + link.rx_height_agl,
    )


def earth_bulge(x, d: float, radius: float = EARTH_RADIUS_M):
    """Parabolic earth bulge ``x (d - x) / (2 R)`` in metres."""
    x = np.asarray(x, dtype=np.float64)
    return x * (d - x) / (2.0 * radius)


def apply_earth_curvature(profile: PathProfile, radius: float = EARTH_RADIUS_M) -> PathProfile:
    if not radius > 0:
        raise ProfileError(f"earth radius must be positive, got {radius}")
    x = np.arange(profile.corridor.shape[0], dtype=np.float64)
    corrected = profile.corridor - earth_bulge(x, profile.d, radius)[:, None]
    return replace(profile, corridor=corrected)


def direct_path_line(profile: PathProfile, n: int) -> np.ndarray:
    """Straight Tx->Rx antenna line sampled at ``n`` evenly spaced positions."""
    k = np.arange(n, dtype=np.float64)
    return profile.tx_abs_height + (profile.rx_abs_height - profile.tx_abs_height) * k / (n - 1)


def direct_path_channel(profile: PathProfile, rows: int = PROFILE_ROWS) -> np.ndarray:
    """``rows x W`` array, zero except the center width index holding the antenna line."""
    out = np.zeros((rows, profile.width), dtype=np.float64)
    out[:, profile.center] = direct_path_line(profile, rows)
    return out


def distance_grid_2d(d: float, width: int = DEFAULT_WIDTH, rows: int = PROFILE_ROWS) -> np.ndarray:
    """Planar distance (m) of every resampled pixel from the Tx pixel."""
    if not d > 0:
        raise ProfileError(f"distance must be positive, got {d}")
    along = np.arange(rows, dtype=np.float64)[:, None] * d / (rows - 1)
    across = (np.arange(width, dtype=np.float64) - (width - 1) / 2)[None, :]
    return np.hypot(along, across)


def distance_3d(link: LinkMeasurement, profile: PathProfile) -> float:
    dz = profile.rx_abs_height - profile.tx_abs_height
    return math.sqrt(profile.d ** 2 + dz ** 2)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def assemble_input(profile: PathProfile, link: LinkMeasurement, config: ChannelConfig,
                   norm: NormalizationSpec = NormalizationSpec()) -> ModelInput:
    """Build the normalized channel stack and scalar vector for one link.

    Channel 0 is the resampled DSM corridor and channel 1 the direct-path
    channel; only its center column is shifted and scaled, the zeros stay zero.
    """
    config = ChannelConfig(config.kind, config.n_channels, config.n_scalars)
    shift = 0.5 * (profile.tx_abs_height + profile.rx_abs_height)
    hs = norm.height_scale_m
    rows = PROFILE_ROWS
    w = profile.width
    dsm = (bilinear_resample(profile.corridor, rows) - shift) / hs
    path = np.zeros((rows, w))
    path[:, profile.center] = (direct_path_line(profile, rows) - shift) / hs

    freq = norm.frequency(link.frequency)
    dist3 = float(norm.distance(distance_3d(link, profile)))
    if config.kind is ConfigKind.ORIGINAL:
        stack = [dsm, path, np.full((rows, w), freq), norm.distance(distance_grid_2d(profile.d, w, rows))]
        scalars: list[float] = []
    elif config.kind is ConfigKind.FINE:
        stack = [dsm, path, np.full((rows, w), freq), np.full((rows, w), dist3)]
        scalars = []
    else:
        stack = [dsm, path]
        scalars = [freq, dist3]
    channels = np.stack(stack).astype(np.float32)
    scalar_arr = np.asarray(scalars, dtype=np.float32)
    if not (np.all(np.isfinite(channels)) and np.all(np.isfinite(scalar_arr))):
        raise ProfileError("normalization produced non-finite values")
    target = None if link.path_loss is None else float(norm.target(link.path_loss))
    return ModelInput(channels=channels, scalars=scalar_arr, target=target)


def build_profile(raster: DsmRaster, link: LinkMeasurement, width: int = DEFAULT_WIDTH,
                  radius: float = EARTH_RADIUS_M, d_min: float = DEFAULT_D_MIN) -> PathProfile:
    """Extraction followed by curvature correction, the form the model consumes."""
    return apply_earth_curvature(extract_corridor(raster, link, width, d_min), radius)


# ---------------------------------------------------------------------------
# Measurement CSV
# ---------------------------------------------------------------------------

LinkFilter = Callable[[LinkMeasurement], bool]


def read_measurements(path, keep: LinkFilter | None = None) -> list[LinkMeasurement]:
    """Read a measurement CSV.

    ``keep`` is the noise/reliability filter hook: links for which it returns
    False are dropped. An optional ``category`` column is carried through.
    Link ids are the 0-based data row numbers in the file.
    """
    links = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ProfileError(f"{path}: missing columns {missing}")
        for i, row in enumerate(reader):
            try:
                pl = row["path_loss_db"].strip()
                link = LinkMeasurement(
                    tx_x=float(row["tx_x"]), tx_y=float(row["tx_y"]),
                    rx_x=float(row["rx_x"]), rx_y=float(row["rx_y"]),
                    tx_height_agl=float(row["tx_agl"]), rx_height_agl=float(row["rx_agl"]),
                    frequency=float(row["freq_mhz"]),
                    path_loss=float(pl) if pl else None,
                    region=row["region"].strip(),
                    category=(row.get("category") or "").strip() or None,
                    link_id=i,
                )
            except (ValueError, TypeError) as exc:
                raise ProfileError(f"{path}: row {i + 2}: {exc}") from exc
            if keep is None or keep(link):
                links.append(link)
    return links


def write_measurements(links: Iterable[LinkMeasurement], path) -> None:
    links = list(links)
    with_category = any(link.category for link in links)
    cols = list(CSV_COLUMNS) + (["category"] if with_category else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for link in links:
            row = [repr(float(v)) for v in (link.tx_x, link.tx_y, link.rx_x, link.rx_y,
                                            link.tx_height_agl, link.rx_height_agl, link.frequency)]
            row.append("" if link.path_loss is None else repr(float(link.path_loss)))
            row.append(link.region)
            if with_category:
                row.append(link.category or "")
            writer.writerow(row)


def stack_inputs(inputs: Sequence[ModelInput]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack ModelInputs into ``(N, C, H, W)`` channels, ``(N, S)`` scalars, ``(N,)`` targets."""
    channels = np.stack([m.channels for m in inputs]).astype(np.float32)
    scalars = np.stack([m.scalars for m in inputs]).astype(np.float32).reshape(len(inputs), -1)
    targets = np.array([np.nan if m.target is None else m.target for m in inputs], dtype=np.float64)
    return channels, scalars, targets
