"""Single-file versioned checkpoint container.

Layout: magic, little-endian uint64 header length, UTF-8 JSON header, then
raw little-endian array bytes in sorted-key order. Saving the result of a
load reproduces the file byte for byte, and loading refuses version or
config-hash mismatches.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig

MAGIC = b"SPCHKPT1"
FORMAT_VERSION = "1"

STAGES = ("vae", "encoders", "full")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    stage: str
    arrays: dict[str, np.ndarray]
    stats: dict = field(default_factory=dict)

    def require_stage(self, stage: str) -> None:
        order = {s: i for i, s in enumerate(STAGES)}
        if order[self.stage] < order[stage]:
            raise CheckpointError(
                f"checkpoint is at stage {self.stage!r} but {stage!r} is required; "
                f"run the earlier training stages first")

    def state_dict(self, prefix: str) -> dict[str, "np.ndarray"]:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in self.arrays.items()
                if k.startswith(prefix + ".")}


def module_arrays(prefix: str, module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy()
            for k, v in module.state_dict().items()}


def load_module(module, ckpt: Checkpoint, prefix: str) -> None:
    import torch
    state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.state_dict(prefix).items()}
    if not state:
        raise CheckpointError(f"checkpoint has no arrays under {prefix!r}")
    module.load_state_dict(state)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    if ckpt.stage not in STAGES:
        raise CheckpointError(f"unknown stage {ckpt.stage!r}")
    keys = sorted(ckpt.arrays)
    offset = 0
    index = []
    for k in keys:
        arr = np.ascontiguousarray(ckpt.arrays[k])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        ckpt.arrays[k] = arr
        index.append({"key": k, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "stage": ckpt.stage,
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config.config_hash(),
        "stats": ckpt.stats,
        "arrays": index,
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for k in keys:
            f.write(ckpt.arrays[k].tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(raw[start: start + hlen].decode())
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header['format_version']!r} != {FORMAT_VERSION!r}")
    config = RunConfig.from_dict(header["config"])
    if config.config_hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    body = start + hlen
    arrays = {}
    for meta in header["arrays"]:
        buf = raw[body + meta["offset"]: body + meta["offset"] + meta["nbytes"]]
        arrays[meta["key"]] = np.frombuffer(buf, dtype=np.dtype(meta["dtype"])) \
            .reshape(meta["shape"]).copy()
    return Checkpoint(config=config, stage=header["stage"], arrays=arrays,
                      stats=header["stats"])
