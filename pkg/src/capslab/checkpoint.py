"""Self-describing binary checkpoint container.

Layout: an 8-byte magic, a length-prefixed canonical JSON header (tensor
names/shapes/dtypes in order, epoch counter, optimizer step, config
fingerprint, RNG state), then the raw little-endian tensor payloads in
header order. Canonical JSON keeps save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CAPSCKP1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict                      # name -> ndarray
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    config_fingerprint: str = ""
    rng_state: dict | None = None
    config: dict = field(default_factory=dict)   # resolved key=value echo


def _tensor_entries(ckpt: Checkpoint):
    for group, tensors in (("param", ckpt.params), ("adam_m", ckpt.adam_m),
                           ("adam_v", ckpt.adam_v)):
        for name in sorted(tensors):
            yield f"{group}/{name}", tensors[name]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = list(_tensor_entries(ckpt))
    header = {
        "format_version": FORMAT_VERSION,
        "epoch": ckpt.epoch,
        "adam_t": ckpt.adam_t,
        "config_fingerprint": ckpt.config_fingerprint,
        "rng_state": ckpt.rng_state,
        "config": ckpt.config,
        "tensors": [
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
            for name, arr in entries
        ],
    }
    blob = json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"),
                                                     copy=False).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version "
                              f"{header['format_version']}")
    offset = 12 + hlen
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        nbytes = int(np.prod(entry["shape"]) if entry["shape"] else 1) \
            * dtype.itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=max(
            int(np.prod(entry["shape"])), 1) if entry["shape"] else 1,
            offset=offset).reshape(entry["shape"]).copy()
        arr = arr.astype(arr.dtype.newbyteorder("="))
        offset += nbytes
        group, name = entry["name"].split("/", 1)
        groups[group][name] = arr
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(params=groups["param"], adam_m=groups["adam_m"],
                      adam_v=groups["adam_v"], adam_t=header["adam_t"],
                      epoch=header["epoch"],
                      config_fingerprint=header["config_fingerprint"],
                      rng_state=header["rng_state"],
                      config=header.get("config", {}))
