"""NET3 parameter checkpoints.

Layout (little-endian)::

    b"NET3" | u32 version | repeated until EOF:
        u32 name_len | name bytes (utf-8) | u32 rank | rank x u32 dims | f32 payload

Tensors whose name starts with ``meta:`` carry no payload (dims ``[0]``);
they hold string metadata such as the config hash as ``meta:<key>=<value>``.
"""

import struct
from pathlib import Path

import numpy as np

from ..exceptions import BadCheckpoint, BadMagic, IoFailure, MissingCheckpoint
from .network import PARAM_SHAPES, NetParams

MAGIC = b"NET3"
VERSION = 1


def save_checkpoint(params, path, meta=None):
    """Write ``params`` (as float32) plus optional string ``meta`` entries."""
    if not str(path):
        raise IoFailure("empty checkpoint path")
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for key, value in sorted((meta or {}).items()):
        name = f"meta:{key}={value}".encode()
        chunks += [struct.pack("<I", len(name)), name, struct.pack("<II", 1, 0)]
    for name in PARAM_SHAPES:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode()
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim),
                   struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path):
    """Read a checkpoint; returns ``(NetParams, meta)`` with ``meta`` a str dict."""
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 8:
        raise BadCheckpoint(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise BadCheckpoint(f"{path}: unsupported version {version}")
    pos = 8
    tensors, meta = {}, {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + nlen].decode()
            pos += 4 + nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(data):
                raise BadCheckpoint(f"{path}: payload of {name!r} is truncated")
            if name.startswith("meta:"):
                key, _, value = name[5:].partition("=")
                meta[key] = value
            else:
                tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise BadCheckpoint(f"{path}: malformed record ({exc})") from exc
    try:
        params = NetParams(tensors)
    except ValueError as exc:
        raise BadCheckpoint(f"{path}: {exc}") from exc
    return params, meta
