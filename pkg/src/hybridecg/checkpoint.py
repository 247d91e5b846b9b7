"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"HECGCKPT"
    version    u16
    header_len u32
    header     JSON (utf-8): spec, dtype, seed, metadata, block names
    blocks     repeated: name_len u16, name, ndim u8, dims u32 * ndim,
               nbytes u64, raw little-endian array bytes
    crc32      u32 over every preceding byte

Blocks hold trainable parameters followed by batch-norm running statistics.
"""

import json
import struct
import zlib

import numpy as np

from .errors import FormatError, ValidationError
from .model import ArchitectureSpec, build

MAGIC = b"HECGCKPT"
VERSION = 1


def _encode(model, metadata):
    arrays = {**model.parameters(), **model.state_arrays()}
    header = {
        "spec": model.spec.to_dict(),
        "dtype": model.dtype.str.lstrip("<>|="),
        "seed": model.seed,
        "metadata": metadata or {},
        "blocks": list(arrays),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(hbytes))
    out += hbytes
    for name, arr in arrays.items():
        nb = name.encode()
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += struct.pack("<Q", len(data)) + data
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def save_checkpoint(model, path, metadata=None):
    with open(path, "wb") as fh:
        fh.write(_encode(model, metadata))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf, expected_spec=None):
    """Parse checkpoint bytes into ``(model, metadata)``."""
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", offset=0)
    version, hlen = r.unpack("<HI", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(MAGIC))
    hstart = r.pos
    try:
        header = json.loads(r.take(hlen, "header").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", offset=hstart) from exc
    missing = [k for k in ("spec", "dtype", "blocks", "seed", "metadata")
               if not isinstance(header, dict) or k not in header]
    if missing:
        raise FormatError(f"checkpoint header lacks {missing}", offset=hstart)
    spec = ArchitectureSpec.from_dict(header["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise ValidationError("checkpoint architecture does not match the expected spec")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    arrays = {}
    for _ in header["blocks"]:
        start = r.pos
        (nlen,) = r.unpack("<H", "block name length")
        name = r.take(nlen, "block name").decode()
        (ndim,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        (nbytes,) = r.unpack("<Q", f"size of {name}")
        if nbytes != int(np.prod(shape)) * dtype.itemsize:
            raise FormatError(f"block {name} size {nbytes} inconsistent with shape {shape}", offset=start)
        arrays[name] = np.frombuffer(r.take(nbytes, f"data of {name}"), dtype=dtype).reshape(shape)
    body_end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if crc != zlib.crc32(buf[:body_end]):
        raise FormatError("checkpoint checksum mismatch", offset=body_end)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", offset=r.pos)
    model = build(spec, seed=header["seed"], dtype=dtype.newbyteorder("="))
    model.load_arrays(arrays)
    return model, header["metadata"]


def load_checkpoint(path, expected_spec=None):
    """Load a model; checkpoint metadata is attached as ``model.metadata``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    model, metadata = decode_checkpoint(buf, expected_spec)
    model.metadata = metadata
    return model
