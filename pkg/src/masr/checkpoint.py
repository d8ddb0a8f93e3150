"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MASRCKPT"  u32 version  u64 payload_len  payload  u32 crc32(payload)

The payload holds the step counter, fixed-artifact seeds, the canonical run
config (JSON) and every tensor as ``name, dtype, shape, raw LE bytes`` in
sorted name order, so save -> load -> save is byte-identical.
"""

import struct
import zlib

import numpy as np

MAGIC = b"MASRCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(step, seeds, config_json, tensors):
    parts = [struct.pack("<Q", step)]
    parts.append(struct.pack("<I", len(seeds)))
    for name in sorted(seeds):
        parts.append(_pack_str(name) + struct.pack("<Q", seeds[name]))
    parts.append(_pack_str(config_json))
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor '{name}': unsupported dtype {arr.dtype}")
        parts.append(_pack_str(name) + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    payload = b"".join(parts)
    return (MAGIC + struct.pack("<IQ", VERSION, len(payload)) + payload
            + struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint payload")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def decode_checkpoint(blob):
    head = struct.calcsize("<IQ")
    if len(blob) < len(MAGIC) + head:
        raise CheckpointError("truncated checkpoint header")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a MASR checkpoint (bad magic)")
    version, length = struct.unpack_from("<IQ", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = len(MAGIC) + head
    if len(blob) != start + length + 4:
        raise CheckpointError(f"checkpoint size {len(blob)} != expected {start + length + 4} (truncated?)")
    payload = blob[start:start + length]
    (crc,) = struct.unpack_from("<I", blob, start + length)
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    r = _Reader(payload)
    (step,) = r.unpack("<Q")
    (n_seeds,) = r.unpack("<I")
    seeds = {}
    for _ in range(n_seeds):
        name = r.string()
        (seeds[name],) = r.unpack("<Q")
    config_json = r.string()
    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        name = r.string()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"tensor '{name}': unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q")
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = data.astype(dt.newbyteorder("="))
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes in checkpoint payload")
    return step, seeds, config_json, tensors
