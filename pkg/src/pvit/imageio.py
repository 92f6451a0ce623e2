"""Binary PPM (P6) and PGM (P5) codecs, maxval 255 only.

Images are float arrays in [0, 1], shape (h, w, 3) for color and (h, w) for
gray. Decoding divides raw bytes by 255; encoding rounds value*255. Format
errors carry the byte offset of the offending field.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping '#' comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError("truncated header", offset=pos)
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def _parse_header(buf: bytes, magic: bytes) -> tuple[int, int, int]:
    if buf[:2] != magic:
        raise FormatError(f"bad magic {buf[:2]!r}, expected {magic!r}", offset=0)
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"non-numeric header field {tok!r}", offset=pos - len(tok))
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, only 255", offset=pos - len(str(maxval)))
    if w <= 0 or h <= 0:
        raise FormatError(f"non-positive dimensions {w}x{h}", offset=2)
    # exactly one whitespace byte separates header from payload
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("missing separator after maxval", offset=pos)
    return w, h, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    """P6 bytes -> float32 (h, w, 3) in [0, 1]."""
    w, h, start = _parse_header(data, b"P6")
    need = w * h * 3
    payload = data[start : start + need]
    if len(payload) < need:
        raise FormatError(f"payload holds {len(payload)} bytes, need {need}", offset=start + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float32) / 255.0


def encode_ppm(img: np.ndarray) -> bytes:
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"expected (h, w, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    raw = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + raw.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """P5 bytes -> float32 (h, w) in [0, 1]."""
    w, h, start = _parse_header(data, b"P5")
    need = w * h
    payload = data[start : start + need]
    if len(payload) < need:
        raise FormatError(f"payload holds {len(payload)} bytes, need {need}", offset=start + len(payload))
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0


def encode_pgm(img: np.ndarray) -> bytes:
    if img.ndim != 2:
        raise FormatError(f"expected (h, w) gray image, got shape {img.shape}")
    h, w = img.shape
    raw = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + raw.tobytes()


def write_pgm_scores(scores: np.ndarray, path) -> None:
    """Normalize a non-negative score grid to [0, 255] and write a P5 file.

    Constant grids map to mid-gray 128 (no contrast to stretch).
    """
    grid = np.asarray(scores, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    if hi - lo == 0:
        out = np.full(grid.shape, 128, dtype=np.uint8)
    else:
        out = np.rint((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h) + out.tobytes())
