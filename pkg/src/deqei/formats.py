"""Binary formats: IMG1 image stacks, DEQ1 checkpoints and 8-bit PGM dumps.

All multi-byte integers and floats are little-endian. Files are written to a
temporary sibling and renamed into place.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "BadMagic",
    "Truncated",
    "ExtentOverflow",
    "UnsupportedVersion",
    "atomic_write",
    "write_img1",
    "read_img1",
    "Checkpoint",
    "write_checkpoint",
    "read_checkpoint",
    "write_pgm",
    "read_pgm",
]

IMG_MAGIC = b"IMG1"
CKPT_MAGIC = b"DEQ1"
CKPT_VERSION = 1
MAX_EXTENT = 1 << 16
MAX_RANK = 8


class FormatError(ValueError):
    pass


class BadMagic(FormatError):
    pass


class Truncated(FormatError):
    pass


class ExtentOverflow(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf, what):
        self.buf = memoryview(buf)
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise Truncated(f"{self.what}: needed {n} bytes at offset {self.pos}, "
                            f"only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def magic(self, expected):
        if len(self.buf) < len(expected) or bytes(self.buf[:len(expected)]) != expected:
            raise BadMagic(f"{self.what}: expected magic {expected!r}")
        self.pos = len(expected)


# ---------------------------------------------------------------- IMG1


def encode_img1(images):
    arr = np.asarray(images)
    if arr.ndim != 4:
        raise ValueError(f"expected (count, C, H, W) images, got shape {arr.shape}")
    head = IMG_MAGIC + struct.pack("<4I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_img1(buf):
    r = _Reader(buf, "IMG1")
    r.magic(IMG_MAGIC)
    count, c, h, w = (r.u32() for _ in range(4))
    if max(c, h, w) > MAX_EXTENT or count * c * h * w > (1 << 32):
        raise ExtentOverflow(f"IMG1: extents {count}x{c}x{h}x{w} exceed limits")
    n = count * c * h * w
    data = r.take(4 * n)
    if r.pos != len(r.buf):
        raise FormatError(f"IMG1: {len(r.buf) - r.pos} trailing bytes")
    return np.frombuffer(data, dtype="<f4").reshape(count, c, h, w).copy()


def write_img1(path, images):
    atomic_write(path, encode_img1(images))


def read_img1(path):
    return decode_img1(Path(path).read_bytes())


# ---------------------------------------------------------------- DEQ1


@dataclass
class Checkpoint:
    """Parameters, optimizer state and RNG position of a training run.

    ``adam`` maps block names (e.g. ``m/conv0.weight``, ``t``) to arrays.
    """

    config_text: str
    params: dict = field(default_factory=dict)
    adam: dict = field(default_factory=dict)
    rng_position: int = 0


def _pack_blocks(blocks):
    out = [struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def _unpack_blocks(r):
    blocks = {}
    for _ in range(r.u32()):
        name = bytes(r.take(r.u32())).decode("utf-8")
        rank = r.u32()
        if rank > MAX_RANK:
            raise ExtentOverflow(f"DEQ1: block {name!r} has rank {rank}")
        shape = tuple(r.u32() for _ in range(rank))
        if any(s > MAX_EXTENT for s in shape):
            raise ExtentOverflow(f"DEQ1: block {name!r} extents {shape} exceed limits")
        n = int(np.prod(shape, dtype=np.int64))
        blocks[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).copy()
    return blocks


def encode_checkpoint(ck):
    text = ck.config_text.encode("utf-8")
    return b"".join([
        CKPT_MAGIC,
        struct.pack("<I", CKPT_VERSION),
        struct.pack("<I", len(text)) + text,
        _pack_blocks(ck.params),
        _pack_blocks(ck.adam),
        struct.pack("<Q", int(ck.rng_position)),
    ])


def decode_checkpoint(buf):
    r = _Reader(buf, "DEQ1")
    r.magic(CKPT_MAGIC)
    version = r.u32()
    if version != CKPT_VERSION:
        raise UnsupportedVersion(f"DEQ1: version {version} (expected {CKPT_VERSION})")
    text = bytes(r.take(r.u32())).decode("utf-8")
    params = _unpack_blocks(r)
    adam = _unpack_blocks(r)
    pos = r.u64()
    if r.pos != len(r.buf):
        raise FormatError(f"DEQ1: {len(r.buf) - r.pos} trailing bytes")
    return Checkpoint(text, params, adam, pos)


def write_checkpoint(path, ck):
    atomic_write(path, encode_checkpoint(ck))


def read_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- PGM


def write_pgm(path, image, comment=None):
    """8-bit binary PGM; values are clamped to [0, 1] and scaled to [0, 255]."""
    img = np.asarray(image, dtype=np.float64)
    img = img.reshape(img.shape[-2:]) if img.ndim > 2 else img
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {np.shape(image)}")
    px = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    note = f"# {comment}\n" if comment else ""
    head = f"P5\n{note}{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii")
    atomic_write(path, head + px.tobytes())


def read_pgm(path):
    buf = Path(path).read_bytes()
    if not buf.startswith(b"P5"):
        raise BadMagic("PGM: expected magic P5")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise Truncated("PGM: incomplete header")
        tokens.append(int(buf[start:pos]))
    w, h, _ = tokens
    pos += 1
    if len(buf) - pos < w * h:
        raise Truncated("PGM: pixel data truncated")
    return np.frombuffer(buf[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()
