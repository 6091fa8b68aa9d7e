"""Checkpoint files: an 8-byte little-endian header length, a UTF-8 JSON header
listing ``(name, shape, offset)`` per array, then the arrays as contiguous
little-endian float64 values. Offsets count float64 elements from the start
of the payload."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .models import Module, shape_diff

MAGIC = "align-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {"format": MAGIC, "version": VERSION, "params": entries, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"{path}: file too short for a header ({len(raw)} bytes)")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if 8 + hlen > len(raw):
        raise CheckpointError(f"{path}: header length {hlen} runs past end of file ({len(raw)} bytes)")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON: {exc}") from exc
    if header.get("format") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (format={header.get('format')!r})")
    payload = np.frombuffer(raw[8 + hlen:], dtype="<f8")
    arrays = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        if start + n > payload.size:
            raise CheckpointError(
                f"{path}: payload truncated at {entry['name']} "
                f"(needs elements {start}..{start + n}, file has {payload.size})"
            )
        arrays[entry["name"]] = payload[start:start + n].reshape(entry["shape"]).astype(np.float64)
    return arrays, header.get("meta", {})


def save_module(path, net: Module, meta: dict | None = None) -> None:
    save_arrays(path, net.state_dict(), meta)


def load_module(path, net: Module) -> dict:
    arrays, meta = load_arrays(path)
    expected = {n: a.shape for n, a in net.state_dict().items()}
    got = {n: a.shape for n, a in arrays.items()}
    if expected != got:
        raise CheckpointError(f"{path}: header does not match the network:\n{shape_diff(expected, got)}")
    net.load_state_dict(arrays)
    return meta
