"""Binary PGM (P5) input/output and integer-ratio box degradation."""

from __future__ import annotations

import os

import numpy as np

from ..exceptions import FormatError, PreconditionError

_WHITESPACE = b" \t\r\n"


def _header_tokens(buf: bytes, count: int):
    """Return ``count`` whitespace-separated header tokens and the payload offset."""
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos] in _WHITESPACE:
            pos += 1
        if pos < n and buf[pos] == ord("#"):
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos] not in _WHITESPACE:
            pos += 1
        if start == pos:
            raise FormatError("PGM header truncated")
        tokens.append(buf[start:pos])
    if pos >= n or buf[pos] not in _WHITESPACE:
        raise FormatError("PGM header must end with a single whitespace byte")
    return tokens, pos + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    """Decode a P5/maxval-255 image to a uint8 (height, width) array."""
    if buf[:2] != b"P5":
        raise FormatError(f"not a binary PGM: magic {buf[:2]!r}")
    tokens, offset = _header_tokens(buf[2:], 3)
    offset += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"PGM header fields are not integers: {tokens!r}") from None
    if width < 1 or height < 1:
        raise FormatError(f"PGM dimensions must be positive, got {width}x{height}")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    payload = buf[offset:]
    if len(payload) < width * height:
        raise FormatError(f"PGM payload truncated: {len(payload)} of {width * height} bytes")
    return np.frombuffer(payload, dtype=np.uint8, count=width * height).reshape(height, width).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError("encode_pgm expects a 2-D uint8 array")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path, pixels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(pixels))


def load_image(path) -> np.ndarray:
    """Read a PGM file as a float64 (1, height, width) array with values p/255."""
    if not os.path.exists(path):
        raise FormatError(f"image file not found: {path}")
    with open(path, "rb") as fh:
        pixels = decode_pgm(fh.read())
    return (pixels.astype(np.float64) / 255.0)[None]


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8 by rounding p*255."""
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def degrade(hr: np.ndarray, target: int = 16) -> np.ndarray:
    """Downsample (channels, side, side) by exact averaging over non-overlapping blocks.

    ``side`` must be an integer multiple of ``target`` (112 -> 16 uses 7x7
    blocks). Accumulation is in float64.
    """
    hr = np.asarray(hr, dtype=np.float64)
    if hr.ndim == 2:
        hr = hr[None]
    if hr.ndim != 3:
        raise PreconditionError(f"degrade expects (channels, side, side), got shape {hr.shape}")
    c, h, w = hr.shape
    if h % target or w % target:
        raise PreconditionError(f"image {h}x{w} is not an integer multiple of {target}; general resampling is unsupported")
    fh, fw = h // target, w // target
    return hr.reshape(c, target, fh, target, fw).mean(axis=(2, 4))
