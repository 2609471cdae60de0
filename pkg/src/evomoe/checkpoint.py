"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"EVMO"
    version u32      currently 1
    meta    u64 length + canonical JSON (config snapshot, stage tag, step,
                     optimizer step count, evolution stream counter)
    count   u64      number of named arrays
    per array:
        name  u16 length + utf-8 bytes
        ndim  u8, then ndim extents as u64
        data  float64 raw bytes, C order

Parameter arrays use their registry names; optimizer moments are stored as
"adam.m/<name>" and "adam.v/<name>". Arrays are written in registry order so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import LabConfig, config_from_snapshot
from .errors import (
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
)
from .model import Model

MAGIC = b"EVMO"
VERSION = 1


@dataclass
class TrainingState:
    """Everything needed to continue or evaluate a run."""

    lab: LabConfig
    model: Model
    stage: str = "I"
    step: int = 0  # completed steps within `stage`
    adam_t: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    beta_counter: int = 0  # evolution stream position


def _meta_bytes(state: TrainingState) -> bytes:
    meta = {
        "config": state.lab.to_dict(),
        "stage": state.stage,
        "step": state.step,
        "adam_t": state.adam_t,
        "beta_counter": state.beta_counter,
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _named_arrays(state: TrainingState):
    for name, p in state.model.params.items():
        yield name, p.data
    for name in state.model.params:
        if name in state.adam_m:
            yield f"adam.m/{name}", state.adam_m[name]
    for name in state.model.params:
        if name in state.adam_v:
            yield f"adam.v/{name}", state.adam_v[name]


def save_checkpoint(path: str, state: TrainingState) -> None:
    meta = _meta_bytes(state)
    arrays = list(_named_arrays(state))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path: str) -> TrainingState:
    """Parse, validate, and rebuild the model the checkpoint describes."""
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointFormatError(f"cannot open checkpoint {path}: {e}") from e
    with fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version > VERSION:
            raise CheckpointVersionError(
                f"checkpoint version {version} is newer than supported {VERSION}"
            )
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "meta length"))
        try:
            meta = json.loads(_read_exact(fh, meta_len, "meta").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"corrupt checkpoint meta: {e}") from e

        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "array count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "array name length"))
            name = _read_exact(fh, name_len, "array name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "array rank"))
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8, f"extent of {name}"))[0]
                for _ in range(ndim)
            )
            n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(fh, 8 * n_items, f"data of {name}")
            arrays[name] = (
                np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            )
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after last array")

    for key in ("config", "stage", "step", "adam_t", "beta_counter"):
        if key not in meta:
            raise CheckpointFormatError(f"checkpoint meta missing {key!r}")
    lab = config_from_snapshot(meta["config"])
    stage = meta["stage"]
    model = Model(lab.model, is_moe=stage != "I")

    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    seen = set()
    for name, arr in arrays.items():
        if name.startswith("adam.m/") or name.startswith("adam.v/"):
            base = name[7:]
            if base not in model.params:
                raise ConfigError(f"checkpoint optimizer array {name!r} has no parameter")
            if model.params[base].data.shape != arr.shape:
                raise ConfigError(f"optimizer array {name!r} shape {arr.shape} mismatches")
            (adam_m if name.startswith("adam.m/") else adam_v)[base] = arr
            continue
        if name not in model.params:
            raise ConfigError(f"checkpoint array {name!r} does not match the config's model")
        if model.params[name].data.shape != arr.shape:
            raise ConfigError(
                f"checkpoint array {name!r} has shape {arr.shape}, "
                f"model expects {model.params[name].data.shape}"
            )
        model.params[name].data[...] = arr
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise ConfigError(f"checkpoint is missing parameters: {sorted(missing)[:4]} ...")

    return TrainingState(
        lab=lab,
        model=model,
        stage=stage,
        step=int(meta["step"]),
        adam_t=int(meta["adam_t"]),
        adam_m=adam_m,
        adam_v=adam_v,
        beta_counter=int(meta["beta_counter"]),
    )
