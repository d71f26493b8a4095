"""Binary PGM/PPM (P5/P6) and PFM ("Pf"/"PF") readers and writers."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class FormatError(ValueError):
    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} at byte offset {offset}")
        self.offset = offset


_WS = b" \t\r\n"


def _header_tokens(buf: bytes, count: int, path=None):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last one.
    """
    tokens = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(buf):
            raise FormatError("unexpected end of header", pos, path)
        ch = buf[pos : pos + 1]
        if ch in (b" ", b"\t", b"\r", b"\n"):
            pos += 1
        elif ch == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
        else:
            start = pos
            while pos < len(buf) and buf[pos] not in _WS:
                pos += 1
            tokens.append((buf[start:pos], start))
    if pos >= len(buf):
        raise FormatError("missing whitespace after header", pos, path)
    return tokens, pos + 1


def parse_pnm(buf: bytes, path=None) -> np.ndarray:
    """Decode P5 (gray) or P6 (RGB) bytes into an array scaled to [0, 1].

    Gray images come back as (H, W), colour images as (3, H, W).
    """
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise FormatError("not a binary PGM/PPM (expected P5 or P6 magic)", 0, path)
    channels = 1 if buf[:2] == b"P5" else 3
    tokens, offset = _header_tokens(buf, 4, path)
    values = []
    for tok, at in tokens[1:]:
        try:
            values.append(int(tok))
        except ValueError:
            raise FormatError(f"non-integer header field {tok!r}", at, path) from None
    width, height, maxval = values
    if width < 1 or height < 1:
        raise FormatError(f"invalid image size {width}x{height}", tokens[1][1], path)
    if not 0 < maxval < 65536:
        raise FormatError(f"invalid maxval {maxval}", tokens[3][1], path)
    depth = 1 if maxval < 256 else 2
    need = width * height * channels * depth
    have = len(buf) - offset
    if have != need:
        raise FormatError(
            f"declared {width}x{height}x{channels} payload needs {need} bytes, found {have}",
            offset + min(have, need),
            path,
        )
    dtype = np.uint8 if depth == 1 else ">u2"
    raw = np.frombuffer(buf, dtype=dtype, count=width * height * channels, offset=offset)
    arr = raw.astype(np.float64) / maxval
    if channels == 1:
        return arr.reshape(height, width)
    return arr.reshape(height, width, 3).transpose(2, 0, 1)


def read_pnm(path) -> np.ndarray:
    return parse_pnm(Path(path).read_bytes(), path)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a (H, W) array with values in [0, 1] as 8-bit P5."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) array with values in [0, 1] as 8-bit P6."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM needs a (3, H, W) array, got shape {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = data.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def write_pfm(path, image: np.ndarray) -> None:
    """Write a (H, W) float map as little-endian grayscale PFM (rows bottom-to-top)."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise ValueError(f"PFM needs a 2-D array, got shape {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"Pf\n{w} {h}\n-1.0\n".encode() + np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"Pf":
        raise FormatError("not a grayscale PFM (expected Pf magic)", 0, path)
    tokens, offset = _header_tokens(buf, 4, path)
    try:
        width, height = int(tokens[1][0]), int(tokens[2][0])
        scale = float(tokens[3][0])
    except ValueError:
        raise FormatError("malformed PFM header", tokens[1][1], path) from None
    dtype = "<f4" if scale < 0 else ">f4"
    need = width * height * 4
    have = len(buf) - offset
    if have != need:
        raise FormatError(f"declared {width}x{height} payload needs {need} bytes, found {have}", offset, path)
    arr = np.frombuffer(buf, dtype=dtype, count=width * height, offset=offset).reshape(height, width)
    return arr[::-1].astype(np.float64)
