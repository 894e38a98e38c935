"""Binary tensor codec and in-process message channels.

Frame layout (all integers little-endian)::

    b"SFCL" | version u8 | dtype u8 | rank u8 | rank x dim u32 | payload | crc32 u32

dtype 1 is float32 and 2 is float64; the payload is row-major IEEE-754.
The CRC32 covers every byte before it, header included, so a flipped dim
or dtype byte is caught even when the payload is empty.

A message is an ordered mapping of names to tensors, serialised as a
sequence of ``name_len u16 | name | frame_len u32 | frame`` records.
"""

from __future__ import annotations

import queue
import struct
import zlib

import numpy as np

from .errors import WireError

MAGIC = b"SFCL"
VERSION = 1
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_HEAD = len(MAGIC) + 3


def encode_tensor(x) -> bytes:
    """Serialise a float32/float64 array of rank < 256.

    Raises:
        WireError: for unsupported dtypes, ranks or dims, or non-finite values.
    """
    x = np.asarray(x)
    code = _CODES.get(x.dtype.newbyteorder("="))
    if code is None:
        raise WireError(f"unsupported dtype {x.dtype}")
    if x.ndim > 255:
        raise WireError("rank above 255")
    if any(d >= 2 ** 32 for d in x.shape):
        raise WireError("dimension does not fit in u32")
    if not np.all(np.isfinite(x)):
        raise WireError("refusing to encode non-finite values")
    header = MAGIC + bytes((VERSION, code, x.ndim)) + struct.pack(f"<{x.ndim}I", *x.shape)
    body = header + np.ascontiguousarray(x, dtype=_DTYPES[code]).tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensor(data: bytes) -> np.ndarray:
    """Inverse of ``encode_tensor``; returns a writable native-endian array.

    Raises:
        WireError: on bad magic, version, dtype, length or checksum.
    """
    data = bytes(data)
    if len(data) < _HEAD + 4:
        raise WireError("frame shorter than the fixed header")
    if data[:4] != MAGIC:
        raise WireError("bad magic")
    version, code, rank = data[4], data[5], data[6]
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise WireError(f"unknown dtype code {code}")
    dims_end = _HEAD + 4 * rank
    if len(data) < dims_end + 4:
        raise WireError("frame truncated inside the dims")
    shape = struct.unpack(f"<{rank}I", data[_HEAD:dims_end])
    dtype = _DTYPES[code]
    n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) != dims_end + n_bytes + 4:
        raise WireError("frame length does not match its header")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise WireError("checksum mismatch")
    arr = np.frombuffer(data, dtype=dtype, count=n_bytes // dtype.itemsize, offset=dims_end)
    return arr.reshape(shape).astype(dtype.newbyteorder("="))


def roundtrip(x: np.ndarray) -> np.ndarray:
    """Pass a tensor through the codec, as a link between split stages does."""
    return decode_tensor(encode_tensor(x))


def encode_message(fields: dict) -> bytes:
    out = bytearray()
    for name, value in fields.items():
        key = name.encode("utf-8")
        frame = encode_tensor(value)
        out += struct.pack("<H", len(key)) + key + struct.pack("<I", len(frame)) + frame
    return bytes(out)


def decode_message(data: bytes) -> dict:
    fields = {}
    pos = 0
    while pos < len(data):
        if pos + 2 > len(data):
            raise WireError("truncated message record")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        try:
            name = data[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise WireError("field name is not valid UTF-8") from None
        pos += n
        if pos + 4 > len(data):
            raise WireError("truncated message record")
        (m,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + m > len(data):
            raise WireError("truncated tensor frame")
        fields[name] = decode_tensor(data[pos:pos + m])
        pos += m
    return fields


class Channel:
    """Ordered, lossless, in-process byte channel."""

    def __init__(self):
        self._q: queue.Queue[bytes] = queue.Queue()
        self.bytes_sent = 0

    def send(self, payload: bytes) -> None:
        self.bytes_sent += len(payload)
        self._q.put(payload)

    def recv(self, timeout: float | None = None) -> bytes:
        return self._q.get(timeout=timeout)

    def send_message(self, fields: dict) -> None:
        self.send(encode_message(fields))

    def recv_message(self, timeout: float | None = None) -> dict:
        return decode_message(self.recv(timeout))
