"""Minimal reader/writer for 8-bit binary PGM (P5) files."""

from __future__ import annotations

import os

import numpy as np


class PGMError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset of the single whitespace byte that ends
    the last token.
    """
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMError("truncated PGM header")
        tokens.append(data[start:pos])
    if pos >= n or not data[pos : pos + 1].isspace():
        raise PGMError("malformed PGM header")
    return tokens, pos


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode P5 bytes into a uint8 array of shape (height, width)."""
    tokens, pos = _tokens(data, 4)
    if tokens[0] != b"P5":
        raise PGMError(f"malformed PGM header: magic {tokens[0]!r}, expected b'P5'")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMError("malformed PGM header: non-integer field") from None
    if width < 1 or height < 1:
        raise PGMError(f"malformed PGM header: size {width}x{height}")
    if maxval != 255:
        raise PGMError(f"unsupported bit depth (maxval {maxval}, only 255 is supported)")
    pixels = data[pos + 1 : pos + 1 + width * height]
    if len(pixels) != width * height:
        raise PGMError(f"truncated PGM data: expected {width * height} bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError("encode_pgm expects a 2-D uint8 array")
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit PGM and return float samples in [0, 1] (byte / 255)."""
    with open(path, "rb") as fh:
        raw = decode_pgm(fh.read())
    return raw.astype(np.float64) / 255.0


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] samples to uint8 by rounding to the nearest level."""
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(to_bytes(img)))
