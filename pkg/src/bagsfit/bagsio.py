"""Little-endian binary container for image-shaped data.

Layout::

    "BAGS"            4 bytes magic
    version           u32 (currently 1)
    width, height     u32, u32
    kind              4 ASCII bytes: RIMG (range image), LABL (label map),
                      PROB (probability maps)
    n_channels        u32
    n_channels x      4 ASCII bytes name, 1 byte dtype code
                      ('f' float32, 'B' uint8, 'I' uint32), 3 zero bytes
    n_meta            u32
    n_meta x          float64 metadata values
    payload           each channel as a row-major height x width plane,
                      in descriptor order

RIMG stores one ``DPTH`` channel with metadata ``fx fy cx cy`` followed by the
16 row-major entries of the camera-to-world pose. LABL stores ``CLAS`` (u8)
and ``INST`` (u32) with no metadata. PROB stores K float32 channels
``Y000``.. with metadata ``scheme_index multinomial_flag``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .rangeimage import Intrinsics, LabelMap, RangeImage

MAGIC = b"BAGS"
VERSION = 1
_DTYPES = {"f": np.dtype("<f4"), "B": np.dtype("u1"), "I": np.dtype("<u4")}
_CODES = {"f4": "f", "u1": "B", "u4": "I"}


class FormatError(ValueError):
    pass


def write_container(path, kind: str, channels, meta=()) -> None:
    """Write ``channels`` (list of ``(name, array)``) under a 4-letter ``kind``."""
    if len(kind) != 4:
        raise ValueError("kind must be 4 characters")
    shape = channels[0][1].shape
    if any(a.shape != shape or a.ndim != 2 for _, a in channels):
        raise ValueError("channels must be 2-D and equally shaped")
    h, w = shape
    parts = [MAGIC, struct.pack("<III", VERSION, w, h), kind.encode("ascii")]
    parts.append(struct.pack("<I", len(channels)))
    payload = []
    for name, a in channels:
        if len(name) != 4:
            raise ValueError("channel names must be 4 characters")
        code = _CODES.get(f"{a.dtype.kind}{a.dtype.itemsize}")
        if code is None:
            raise ValueError(f"unsupported channel dtype {a.dtype}")
        parts.append(name.encode("ascii") + code.encode("ascii") + b"\0\0\0")
        payload.append(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())
    meta = np.asarray(meta, dtype="<f8").ravel()
    parts.append(struct.pack("<I", meta.size))
    parts.append(meta.tobytes())
    Path(path).write_bytes(b"".join(parts + payload))


def read_container(path, kind: str | None = None):
    """Return ``(kind, {name: array}, meta)``; channel order is preserved."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, w, h = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    found = buf[16:20].decode("ascii")
    if kind is not None and found != kind:
        raise FormatError(f"{path}: expected {kind}, found {found}")
    (n_ch,) = struct.unpack_from("<I", buf, 20)
    off = 24
    desc = []
    for _ in range(n_ch):
        name = buf[off : off + 4].decode("ascii")
        code = chr(buf[off + 4])
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code!r}")
        desc.append((name, _DTYPES[code]))
        off += 8
    (n_meta,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = np.frombuffer(buf, dtype="<f8", count=n_meta, offset=off).copy()
    off += 8 * n_meta
    channels = {}
    for name, dt in desc:
        n = w * h * dt.itemsize
        if off + n > len(buf):
            raise FormatError(f"{path}: truncated payload")
        channels[name] = np.frombuffer(buf, dtype=dt, count=w * h, offset=off).reshape(h, w).copy()
        off += n
    return found, channels, meta


def write_range_image(path, img: RangeImage) -> None:
    meta = np.concatenate([img.intrinsics.as_array(), img.camera_pose.ravel()])
    write_container(path, "RIMG", [("DPTH", img.depth)], meta)


def read_range_image(path) -> RangeImage:
    _, ch, meta = read_container(path, "RIMG")
    if meta.size != 20:
        raise FormatError(f"{path}: range image metadata must hold 20 values")
    return RangeImage(ch["DPTH"], Intrinsics(*meta[:4]), meta[4:].reshape(4, 4))


def write_label_map(path, labels: LabelMap) -> None:
    write_container(path, "LABL", [("CLAS", labels.class_id), ("INST", labels.instance_id)])


def read_label_map(path) -> LabelMap:
    _, ch, _ = read_container(path, "LABL")
    return LabelMap(ch["CLAS"], ch["INST"])
