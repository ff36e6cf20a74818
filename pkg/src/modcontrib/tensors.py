"""Reading and writing the flat binary tensor container.

A container file is: the five magic bytes ``MTN1\\n``, one JSON header line
``{"dtype":"f32","shape":[...]}`` terminated by a newline, then the row-major
little-endian float32 payload.  The format is deliberately trivial so that an
adapter in any language can produce it without extra dependencies.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"MTN1\n"

# A header longer than this is not a header, it is a corrupt file.
_HEADER_LIMIT = 65536


class TensorFormatError(ValueError):
    """Raised when a tensor container cannot be parsed."""


def write_tensor(path, array) -> None:
    """Write ``array`` to ``path`` as a float32 container.

    Input of any float dtype is cast to float32; float32 input round-trips
    bit-identically.
    """
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    header = json.dumps({"dtype": "f32", "shape": list(arr.shape)},
                        separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a container written by :func:`write_tensor`.

    Returns a float32 array with the stored shape.  Raises
    :class:`TensorFormatError` with the file name and byte offset of the
    first problem found.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise TensorFormatError(
                f"{path}: bad magic at byte 0: expected {MAGIC!r}, got {magic!r}")
        header_offset = len(MAGIC)
        raw = fh.readline(_HEADER_LIMIT)
        if not raw.endswith(b"\n"):
            raise TensorFormatError(
                f"{path}: unterminated header line at byte {header_offset}")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TensorFormatError(
                f"{path}: header at byte {header_offset} is not valid JSON: {exc}"
            ) from exc
        if not isinstance(header, dict):
            raise TensorFormatError(
                f"{path}: header at byte {header_offset} must be a JSON object")
        dtype = header.get("dtype")
        if dtype != "f32":
            raise TensorFormatError(
                f"{path}: unsupported dtype {dtype!r} (only 'f32' is defined)")
        shape = header.get("shape")
        if (not isinstance(shape, list) or not shape
                or not all(isinstance(s, int) and s > 0 for s in shape)):
            raise TensorFormatError(
                f"{path}: header shape must be a non-empty list of positive "
                f"integers, got {shape!r}")
        payload_offset = header_offset + len(raw)
        count = 1
        for s in shape:
            count *= s
        payload = fh.read(count * 4 + 1)
        if len(payload) != count * 4:
            kind = "short" if len(payload) < count * 4 else "trailing bytes in"
            raise TensorFormatError(
                f"{path}: {kind} payload at byte {payload_offset}: shape {shape} "
                f"needs {count * 4} bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if not np.isfinite(arr).all():
        bad = int(np.flatnonzero(~np.isfinite(arr.reshape(-1)))[0])
        raise TensorFormatError(
            f"{path}: non-finite value at flat index {bad} "
            f"(byte {payload_offset + bad * 4})")
    # frombuffer returns a read-only view over the payload; hand out a
    # writable array so masking can copy-and-edit it.
    return arr.copy()
