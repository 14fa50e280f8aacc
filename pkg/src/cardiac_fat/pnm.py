"""Binary PGM (P5) and PPM (P6) reading and writing.

Only maxval 255 (8-bit) and 65535 (16-bit, big-endian) payloads are supported.
A ``# pixel_spacing <mm>`` comment line, when present, carries the in-plane
spacing through a round-trip.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .errors import CardiacFatError


class PNMError(CardiacFatError):
    """Raised for malformed or unsupported PGM/PPM files."""

    code = "IMAGE_FORMAT"


def _parse_header(data: bytes, path) -> tuple[bytes, int, int, int, int, dict]:
    """Return (magic, width, height, maxval, payload offset, comment dict)."""
    tokens: list[bytes] = []
    comments: dict[str, str] = {}
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise PNMError(f"{path}: malformed header (truncated)")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise PNMError(f"{path}: malformed header (unterminated comment)")
            parts = data[pos + 1 : end].decode("ascii", "replace").split()
            if len(parts) == 2:
                comments[parts[0]] = parts[1]
            pos = end + 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    if pos >= n or not data[pos : pos + 1].isspace():
        raise PNMError(f"{path}: malformed header (no separator before payload)")
    pos += 1
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PNMError(f"{path}: malformed header (non-integer field)") from None
    if width <= 0 or height <= 0:
        raise PNMError(f"{path}: malformed header (non-positive dimensions)")
    return magic, width, height, maxval, pos, comments


def read_pnm(path) -> tuple[np.ndarray, int, dict]:
    """Read a P5 or P6 file.

    Returns:
        (pixels, maxval, comments); pixels is (H, W) for P5 and (H, W, 3) for P6,
        dtype uint8 or uint16 depending on maxval.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    magic, width, height, maxval, offset, comments = _parse_header(data, path)
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise PNMError(f"{path}: malformed header (unknown magic {magic!r})")
    if maxval == 255:
        dtype = np.dtype(np.uint8)
    elif maxval == 65535:
        dtype = np.dtype(">u2")
    else:
        raise PNMError(f"{path}: unsupported maxval {maxval}")
    count = width * height * channels
    expected = count * dtype.itemsize
    payload = data[offset : offset + expected]
    if len(payload) < expected:
        raise PNMError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    arr = np.frombuffer(payload, dtype=dtype, count=count).astype(
        np.uint8 if maxval == 255 else np.uint16
    )
    shape = (height, width) if channels == 1 else (height, width, 3)
    return arr.reshape(shape), maxval, comments


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write ``payload`` to a temp file next to ``path`` and rename it into place."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_pnm(path, pixels: np.ndarray, comments: dict | None = None) -> None:
    """Write a 2-D array as P5 or an (H, W, 3) array as P6.

    uint8 arrays are written with maxval 255, uint16 arrays with maxval 65535.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise PNMError(f"cannot write array of shape {pixels.shape}")
    if pixels.dtype == np.uint8:
        maxval, body = 255, pixels.tobytes()
    elif pixels.dtype == np.uint16:
        maxval, body = 65535, pixels.astype(">u2").tobytes()
    else:
        raise PNMError(f"unsupported dtype {pixels.dtype}; use uint8 or uint16")
    height, width = pixels.shape[:2]
    header = magic + b"\n"
    for key, value in (comments or {}).items():
        header += f"# {key} {value}\n".encode("ascii")
    header += f"{width} {height}\n{maxval}\n".encode("ascii")
    atomic_write_bytes(path, header + body)
