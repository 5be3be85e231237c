"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"M2R1" | u32 version | u32 record count
    record*: u32 name_len | name (UTF-8) | u8 dtype tag | u32 rank | u64 extent * rank | payload
    u32 CRC32 of every preceding byte

Parameters are stored under ``param/``, Adam moments under ``adam_m/`` and
``adam_v/``; scalars and text under ``meta/`` (the rng state is JSON bytes).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointFormatError, CheckpointIntegrityError

MAGIC = b"M2R1"
VERSION = 1
_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("u1"): 4}
_DTYPES = {v: k for k, v in _TAGS.items()}


@dataclass
class Checkpoint:
    params: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    adam_t: int = 0
    rng_state: Optional[dict] = None
    config_text: str = ""
    version: int = VERSION

    def records(self) -> list[tuple[str, np.ndarray]]:
        out = [("meta/step", np.array([self.step], dtype=np.int64)),
               ("meta/adam_t", np.array([self.adam_t], dtype=np.int64)),
               ("meta/rng", _text(json.dumps(self.rng_state, sort_keys=True))),
               ("meta/config", _text(self.config_text))]
        for prefix, d in (("param/", self.params), ("adam_m/", self.adam_m), ("adam_v/", self.adam_v)):
            out += [(prefix + k, np.asarray(v)) for k, v in d.items()]
        return out


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy()


def encode(ckpt: Checkpoint) -> bytes:
    recs = ckpt.records()
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(recs))]
    for name, arr in recs:
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise CheckpointFormatError(f"record {name!r}: unsupported dtype {arr.dtype}")
        a = np.asarray(arr, dtype=dt, order="C")
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<BI", _TAGS[dt], a.ndim),
                  struct.pack(f"<{a.ndim}Q", *a.shape), a.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if len(buf) < 16:
        raise CheckpointIntegrityError("checkpoint truncated")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointIntegrityError("checkpoint CRC mismatch (truncated or corrupted)")
    pos = 12
    recs = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BI", body, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            dt = _DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise CheckpointIntegrityError(f"record {name!r} runs past the end of the file")
            recs[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointIntegrityError(f"malformed checkpoint record: {exc}") from exc
    if pos != len(body):
        raise CheckpointIntegrityError("trailing bytes after the last record")
    ck = Checkpoint(version=version)
    for name, arr in recs.items():
        prefix, _, key = name.partition("/")
        if prefix == "param":
            ck.params[key] = arr
        elif prefix == "adam_m":
            ck.adam_m[key] = arr
        elif prefix == "adam_v":
            ck.adam_v[key] = arr
        elif name == "meta/step":
            ck.step = int(arr[0])
        elif name == "meta/adam_t":
            ck.adam_t = int(arr[0])
        elif name == "meta/rng":
            ck.rng_state = json.loads(arr.tobytes().decode("utf-8"))
        elif name == "meta/config":
            ck.config_text = arr.tobytes().decode("utf-8")
    return ck


def save(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
