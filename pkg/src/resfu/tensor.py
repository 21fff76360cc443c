"""Dense feature maps and the .rsft on-disk container.

A FeatureMap is an H x W x C grid of 32-bit floats, stored row-major with the
channel index varying fastest: element (i, j, ch) lives at flat offset
``ch + C * (j + W * i)``.  This is exactly the layout of a C-contiguous numpy
array of shape (H, W, C), which is how the data is held in memory.

The .rsft file format is the same payload behind a fixed 24-byte header:

    offset  size  field
    ------  ----  -----------------------------------------
       0      4   magic, ASCII "RSFT"
       4      1   format version, currently 1
       5      1   dtype code, 0 = float32 little-endian
       6      2   reserved, must be zero
       8      4   ndim as u32 little-endian, always 3
      12     12   dims as three u32 little-endian: H, W, C

followed by exactly 4*H*W*C payload bytes, little-endian float32, in the
offset order above.  Serialization is bit-exact: deserialize(serialize(m))
reproduces every payload byte.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RSFT"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0

_HEADER = struct.Struct("<4sBBH4I")  # magic, version, dtype, reserved, ndim, H, W, C
HEADER_SIZE = _HEADER.size  # 24


class TensorFormatError(Exception):
    """A byte stream does not obey the .rsft container layout."""


class BadMagic(TensorFormatError):
    """Leading bytes are not the RSFT magic."""


class UnsupportedVersion(TensorFormatError):
    """Header carries a format version this reader does not understand."""


class TruncatedPayload(TensorFormatError):
    """Fewer payload bytes than the header dimensions imply."""


class FeatureMap:
    """Immutable H x W x C float32 grid.

    The constructor copies its input into a fresh C-contiguous float32 array
    and freezes it, so a FeatureMap never aliases caller-owned memory and all
    operations on it are non-mutating by construction.
    """

    __slots__ = ("_data",)

    def __init__(self, data):
        # np.array (not asarray) so exactly one owned copy is made even when
        # the input already is a contiguous float32 array
        arr = np.array(data, dtype=np.float32, order="C")
        if arr.ndim != 3:
            raise TensorFormatError(f"feature map needs rank 3, got rank {arr.ndim}")
        if min(arr.shape) < 1:
            raise TensorFormatError(f"feature map dims must be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        """Read-only (H, W, C) float32 view of the contents."""
        return self._data

    @property
    def height(self) -> int:
        return self._data.shape[0]

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def channels(self) -> int:
        return self._data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._data.shape

    def astype64(self) -> np.ndarray:
        """Writable float64 copy, for reference-path arithmetic."""
        return self._data.astype(np.float64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"FeatureMap({self.height}x{self.width}x{self.channels})"


def serialize(fmap: FeatureMap) -> bytes:
    """Encode a FeatureMap as .rsft bytes (24-byte header + payload)."""
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        DTYPE_FLOAT32,
        0,
        3,
        fmap.height,
        fmap.width,
        fmap.channels,
    )
    return header + fmap.data.astype("<f4", copy=False).tobytes()


def read_tensor_at(buf, offset: int) -> tuple[FeatureMap, int]:
    """Decode one embedded tensor starting at `offset`.

    Returns the map and the offset one past its payload; used both for whole
    .rsft files and for tensors embedded in weight bundles.
    """
    view = memoryview(buf)
    if len(view) - offset < 4 or bytes(view[offset : offset + 4]) != MAGIC:
        got = bytes(view[offset : offset + 4])
        raise BadMagic(f"bad magic {got!r} at offset {offset}, expected {MAGIC!r}")
    if len(view) - offset < HEADER_SIZE:
        raise TruncatedPayload(
            f"only {len(view) - offset} bytes at offset {offset}, header needs {HEADER_SIZE}"
        )
    _, version, dtype, reserved, ndim, h, w, c = _HEADER.unpack_from(view, offset)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"format version {version}, reader supports {FORMAT_VERSION}")
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError(f"dtype code {dtype}, only {DTYPE_FLOAT32} (float32) is defined")
    if reserved != 0:
        raise TensorFormatError(f"reserved header bytes must be zero, got {reserved:#06x}")
    if ndim != 3:
        raise TensorFormatError(f"ndim {ndim}, only rank-3 tensors are defined")
    if min(h, w, c) < 1:
        raise TensorFormatError(f"dims must be >= 1, got {h}x{w}x{c}")
    start = offset + HEADER_SIZE
    nbytes = 4 * h * w * c
    if len(view) - start < nbytes:
        raise TruncatedPayload(
            f"payload needs {nbytes} bytes for {h}x{w}x{c}, only {len(view) - start} present"
        )
    flat = np.frombuffer(view, dtype="<f4", count=h * w * c, offset=start)
    return FeatureMap(flat.reshape(h, w, c)), start + nbytes


def deserialize(buf) -> FeatureMap:
    """Decode .rsft bytes; the buffer must contain exactly one tensor."""
    fmap, end = read_tensor_at(buf, 0)
    if end != len(memoryview(buf)):
        raise TensorFormatError(f"{len(memoryview(buf)) - end} trailing bytes after payload")
    return fmap


def save_tensor(path, fmap: FeatureMap) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(fmap))


def load_tensor(path) -> FeatureMap:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
