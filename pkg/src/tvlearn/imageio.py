"""Grayscale image I/O: PGM (P2/P5) and PNG, intensities mapped to [0, 1]."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .grid import ImageGrid, spacing


def _pgm_tokens(raw: bytes):
    # strip comments, split header tokens
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = re.match(rb"\s*(#[^\n]*\n|\S+)", raw[pos:])
        if m is None:
            raise ValueError("malformed PGM header")
        pos += m.end()
        tok = m.group(1)
        if not tok.startswith(b"#"):
            tokens.append(tok)
    return tokens, pos


def read_pgm(path) -> ImageGrid:
    raw = Path(path).read_bytes()
    tokens, pos = _pgm_tokens(raw)
    magic = tokens[0]
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"unsupported PGM magic {magic!r}")
    nx, ny, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval <= 0 or maxval > 65535:
        raise ValueError(f"invalid PGM maxval {maxval}")
    if magic == b"P2":
        data = np.array(raw[pos:].split(), dtype=float)
    else:
        # exactly one whitespace byte separates the header from the pixels
        if pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        dtype = ">u2" if maxval > 255 else "u1"
        data = np.frombuffer(raw[pos:], dtype=dtype,
                             count=nx * ny).astype(float)
    if data.size != nx * ny:
        raise ValueError("PGM pixel count does not match header")
    values = data.reshape(ny, nx) / maxval
    return ImageGrid(values, spacing(nx, ny))


def write_pgm(grid: ImageGrid, path, depth: int = 16):
    if depth not in (8, 16):
        raise ValueError("depth must be 8 or 16")
    maxval = 2 ** depth - 1
    q = np.rint(np.clip(grid.values, 0.0, 1.0) * maxval).astype(np.uint32)
    header = f"P5\n{grid.nx} {grid.ny}\n{maxval}\n".encode()
    payload = q.astype(">u2" if depth == 16 else "u1").tobytes()
    Path(path).write_bytes(header + payload)


def read_png(path) -> ImageGrid:
    from PIL import Image
    img = Image.open(path)
    if img.mode in ("L", "I", "I;16"):
        a = np.asarray(img, dtype=float)
        maxval = 255.0 if img.mode == "L" else 65535.0
    else:
        raise ValueError(
            f"unsupported PNG mode {img.mode!r}; convert to grayscale first")
    ny, nx = a.shape
    return ImageGrid(a / maxval, spacing(nx, ny))


def write_png(grid: ImageGrid, path, depth: int = 16):
    from PIL import Image
    if depth == 8:
        q = np.rint(np.clip(grid.values, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(q, mode="L").save(path)
    elif depth == 16:
        q = np.rint(np.clip(grid.values, 0, 1) * 65535).astype(np.uint16)
        Image.fromarray(q).save(path)
    else:
        raise ValueError("depth must be 8 or 16")


def read_image(path) -> ImageGrid:
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".png":
        return read_png(path)
    raise ValueError(f"unsupported image format {suffix!r}")


def write_image(grid: ImageGrid, path, depth: int = 16):
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        write_pgm(grid, path, depth)
    elif suffix == ".png":
        write_png(grid, path, depth)
    else:
        raise ValueError(f"unsupported image format {suffix!r}")
