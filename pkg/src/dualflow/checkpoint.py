"""Binary checkpoint format.

Layout, all integers little-endian:

    magic   4 bytes  b"DADF"
    version u32      currently 1
    count   u32      number of named arrays
    entry   repeated count times:
        name_len u16, name UTF-8,
        dtype u8 (0 = float32, 1 = float64), rank u8,
        dims u64 * rank, raw element bytes (little-endian)
    config  u32 length + UTF-8 INI echo of the run config plus a [state]
            section recording training progress

Arrays are written in ``parameters()`` then ``buffers()`` order, so a
checkpoint written twice from the same state is byte-identical.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .autodiff import default_dtype
from .config import RunConfig, parse_run_config, render_run_config
from .errors import CheckpointError
from .pipeline import Model, build_model

MAGIC = b"DADF"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _state_text(model: Model) -> str:
    return ("[state]\n"
            f"transformer_trained = {str(model.transformer_trained).lower()}\n"
            f"flow_trained = {str(model.flow_trained).lower()}\n")


def _split_state(text: str):
    head, sep, tail = text.partition("[state]")
    if not sep:
        raise CheckpointError("checkpoint config echo lacks a [state] section")
    state = {}
    for line in tail.strip().splitlines():
        key, _, value = line.partition("=")
        state[key.strip()] = value.strip() == "true"
    return head, state


def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"cannot serialize dtype {arr.dtype} for {name!r}")
    raw_name = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw_name)))
    fh.write(raw_name)
    fh.write(struct.pack("<BB", code, arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())


def save_checkpoint(model: Model, rc: RunConfig, path) -> None:
    entries = dict(model.parameters())
    arrays = [(name, p.data) for name, p in entries.items()]
    arrays += list(model.buffers().items())
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays:
        _write_entry(buf, name, np.asarray(arr))
    config_text = render_run_config(rc) + _state_text(model)
    raw = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(raw)}")
    return raw


def load_checkpoint(path):
    """Rebuild (model, run_config) from a checkpoint file. Arrays are cast
    to the active default dtype on assignment."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
            dims = [struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank)]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * _CODE_DTYPES[code].itemsize
            arr = np.frombuffer(_read_exact(fh, n_bytes), dtype=_CODE_DTYPES[code])
            arrays[name] = arr.reshape(dims)
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config_text = _read_exact(fh, cfg_len).decode("utf-8")
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after config echo")
    cfg_part, state = _split_state(config_text)
    rc = parse_run_config(cfg_part)
    model = build_model(rc)
    dt = default_dtype()
    params = model.parameters()
    buffers = model.buffers()
    expected = set(params) | set(buffers)
    stored = set(arrays)
    if stored != expected:
        missing = sorted(expected - stored)[:3]
        extra = sorted(stored - expected)[:3]
        raise CheckpointError(f"{path}: array names do not match the config "
                              f"(missing {missing}, unexpected {extra})")
    for name, p in params.items():
        if tuple(p.data.shape) != tuple(arrays[name].shape):
            raise CheckpointError(f"{path}: shape mismatch for {name!r}")
        p.data = arrays[name].astype(dt)
    model.norm_mean = arrays["norm.mean"].astype(dt)
    model.norm_std = arrays["norm.std"].astype(dt)
    for i, stack in enumerate(model.flows):
        stack.standardize.set_stats(arrays[f"flow.{i}.in_mean"].astype(dt),
                                    arrays[f"flow.{i}.in_std"].astype(dt))
    model.transformer_trained = state.get("transformer_trained", False)
    model.flow_trained = state.get("flow_trained", False)
    return model, rc
