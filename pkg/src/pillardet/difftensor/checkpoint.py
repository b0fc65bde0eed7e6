"""Binary checkpoint format.

Layout, all integers little-endian:

    magic   8 bytes  b"HVPRCKPT"
    version u32
    count   u32      number of parameter records
    records          count times:
                       name_len u32, name utf-8,
                       rank u32, extents u64 * rank,
                       values f64 * prod(extents)
    sections         zero or more, each opened by an 8-byte tag:
                       b"OPTSTATE"  count u32 + records as above
                       b"CONFIG__"  length u64 + utf-8 JSON

Model buffers (running statistics) are stored as ordinary parameter records;
what is trainable is the optimizer's concern, not the file format's.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from ..errors import CheckpointError

MAGIC = b"HVPRCKPT"
VERSION = 1
_TAG_OPT = b"OPTSTATE"
_TAG_CONFIG = b"CONFIG__"


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what} "
                              f"(wanted {n} bytes, got {len(buf)})")
    return buf


def _write_records(f: BinaryIO, records: list[tuple[str, np.ndarray]]) -> None:
    f.write(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.asarray(arr, dtype=np.float64)  # tobytes(order="C") copies as needed
        raw_name = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw_name)))
        f.write(raw_name)
        f.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            f.write(struct.pack("<Q", extent))
        f.write(arr.tobytes(order="C"))


def _read_records(f: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(f, 4, "record count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(f, 4, f"record {i} name length"))
        name = _read_exact(f, name_len, f"record {i} name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(f, 4, f"{name} rank"))
        shape = tuple(
            struct.unpack("<Q", _read_exact(f, 8, f"{name} extent {d}"))[0]
            for d in range(rank)
        )
        n_values = 1
        for extent in shape:
            n_values *= extent
        raw = _read_exact(f, 8 * n_values, f"{name} values")
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return out


def write_checkpoint(path, params: list[tuple[str, np.ndarray]],
                     opt_state: list[tuple[str, np.ndarray]] | None = None,
                     config_json: str | None = None) -> None:
    names = [n for n, _ in params]
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names in checkpoint")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        _write_records(f, params)
        if opt_state is not None:
            f.write(_TAG_OPT)
            _write_records(f, opt_state)
        if config_json is not None:
            raw = config_json.encode("utf-8")
            f.write(_TAG_CONFIG)
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)


def read_checkpoint(path):
    """Returns (params, opt_state or None, config_json or None)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version} unsupported; "
                                  f"this build reads version {VERSION}")
        params = _read_records(f)
        opt_state = None
        config_json = None
        while True:
            tag = f.read(8)
            if not tag:
                break
            if len(tag) != 8:
                raise CheckpointError("truncated checkpoint while reading section tag")
            if tag == _TAG_OPT:
                opt_state = _read_records(f)
            elif tag == _TAG_CONFIG:
                (length,) = struct.unpack("<Q", _read_exact(f, 8, "config length"))
                config_json = _read_exact(f, length, "config body").decode("utf-8")
            else:
                raise CheckpointError(f"unknown section tag {tag!r}")
    return params, opt_state, config_json
