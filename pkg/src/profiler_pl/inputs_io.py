"""MIN1: a length-prefixed binary container for assembled model inputs.

Layout (all little-endian)::

    b"MIN1"
    u32   header length H
    H     bytes of UTF-8 JSON (sorted keys): config, norm, width, channel_shape,
          n_scalars and a per-record list of {id, region, category, rx_x, rx_y, target}
    then, per record in header order:
    u64   payload length L
    L     bytes: channels as <f4 (C*256*W values) followed by scalars as <f4

Saving the assembled stack avoids re-running corridor extraction for every
training run. A missing target is stored as JSON null.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .pipeline import RegionDataset
from .profile import ChannelConfig, NormalizationSpec

MAGIC = b"MIN1"


class ContainerError(ValueError):
    pass


def save_inputs(datasets: list[RegionDataset], config: ChannelConfig, norm: NormalizationSpec,
                path) -> None:
    if not datasets:
        raise ContainerError("nothing to save")
    shape = datasets[0].channels.shape[1:]
    records, payloads = [], []
    for ds in datasets:
        if ds.channels.shape[1:] != shape:
            raise ContainerError("all datasets must share one channel shape")
        for i in range(len(ds)):
            t = float(ds.targets[i])
            records.append({
                "id": int(ds.ids[i]),
                "region": ds.region,
                "category": ds.categories[i],
                "rx_x": float(ds.rx_xy[i, 0]),
                "rx_y": float(ds.rx_xy[i, 1]),
                "target": None if math.isnan(t) else t,
            })
            payloads.append(np.ascontiguousarray(ds.channels[i], dtype="<f4").tobytes()
                            + np.ascontiguousarray(ds.scalars[i], dtype="<f4").tobytes())
    header = json.dumps({
        "config": config.kind.value,
        "norm": norm.to_dict(),
        "channel_shape": list(shape),
        "n_scalars": config.n_scalars,
        "records": records,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def load_inputs(path) -> tuple[list[RegionDataset], ChannelConfig, NormalizationSpec]:
    """Read a MIN1 file back into per-region datasets (sorted by region label)."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise ContainerError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
        config = ChannelConfig.of(header["config"])
        norm = NormalizationSpec.from_dict(header["norm"])
        shape = tuple(int(v) for v in header["channel_shape"])
        records = header["records"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ContainerError(f"{path}: malformed header ({exc})") from exc
    n_ch = int(np.prod(shape))
    expect = 4 * (n_ch + config.n_scalars)
    pos = 8 + hlen
    channels = np.empty((len(records),) + shape, dtype=np.float32)
    scalars = np.empty((len(records), config.n_scalars), dtype=np.float32)
    for i in range(len(records)):
        if pos + 8 > len(blob):
            raise ContainerError(f"{path}: truncated at record {i}")
        (length,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if length != expect or pos + length > len(blob):
            raise ContainerError(f"{path}: record {i} has a bad length")
        values = np.frombuffer(blob, dtype="<f4", count=n_ch + config.n_scalars, offset=pos)
        channels[i] = values[:n_ch].reshape(shape)
        scalars[i] = values[n_ch:]
        pos += length
    if pos != len(blob):
        raise ContainerError(f"{path}: {len(blob) - pos} trailing bytes")
    by_region: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        by_region.setdefault(rec["region"], []).append(i)
    out = []
    for region in sorted(by_region):
        idx = by_region[region]
        out.append(RegionDataset(
            region, channels[idx], scalars[idx],
            np.array([math.nan if records[i]["target"] is None else records[i]["target"] for i in idx]),
            np.array([[records[i]["rx_x"], records[i]["rx_y"]] for i in idx], dtype=np.float64),
            np.array([records[i]["id"] for i in idx], dtype=np.int64),
            [records[i]["category"] for i in idx],
        ))
    return out, config, norm
