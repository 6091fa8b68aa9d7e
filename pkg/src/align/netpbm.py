"""Binary PPM (P6) / PGM (P5) reading and writing for [0, 1] float images."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit codes, rounding half up."""
    v = np.asarray(values, dtype=np.float64)
    if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
        raise ValueError("image values must lie in [0, 1]")
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def encode(image: np.ndarray) -> bytes:
    """Encode a (3,H,W) image as P6 or a (1,H,W)/(H,W) map as P5."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (3,H,W), (1,H,W) or (H,W), got {np.shape(image)}")
    c, h, w = img.shape
    magic = b"P6" if c == 3 else b"P5"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + quantize(img).transpose(1, 2, 0).tobytes()


def write_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode(image))


def _tokens(raw: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out = []
    n = len(raw)
    while len(out) < count:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise NetpbmError(f"header ends early at byte {pos}")
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        tok = raw[start:pos]
        if not tok.isdigit():
            raise NetpbmError(f"expected a decimal number at byte {start}, found {tok[:16]!r}")
        out.append(int(tok))
    return out, pos


def decode(raw: bytes) -> np.ndarray:
    if len(raw) < 2 or raw[:2] not in (b"P5", b"P6"):
        raise NetpbmError(f"bad magic {raw[:2]!r} at byte 0; expected P5 or P6")
    channels = 3 if raw[:2] == b"P6" else 1
    (w, h, maxval), pos = _tokens(raw, 3, 2)
    if w <= 0 or h <= 0:
        raise NetpbmError(f"non-positive dimensions {w}x{h} in header")
    if not 0 < maxval < 65536:
        raise NetpbmError(f"maxval {maxval} out of range (1..65535)")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise NetpbmError(f"missing whitespace after maxval at byte {pos}")
    pos += 1
    depth = 1 if maxval < 256 else 2
    need = w * h * channels * depth
    payload = raw[pos:pos + need]
    if len(payload) < need:
        raise NetpbmError(
            f"payload truncated: expected {need} bytes starting at byte {pos}, got {len(payload)}"
        )
    dtype = np.uint8 if depth == 1 else ">u2"
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w, channels).astype(np.float64) / maxval
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_image(path) -> np.ndarray:
    """Return a (C,H,W) float array in [0, 1]; C is 3 for P6, 1 for P5."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise NetpbmError(f"cannot read {path}: {exc}") from exc
    try:
        return decode(raw)
    except NetpbmError as exc:
        raise NetpbmError(f"{path}: {exc}") from None
