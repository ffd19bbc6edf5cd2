"""Named-tensor checkpoint container.

Layout, all integers little-endian:

    magic   b"PSCK1\\n"
    u32     metadata length, then that many bytes of UTF-8 JSON
            (carries at least "step" and "config_hash")
    u32     tensor count
    per tensor: u16 name length, name bytes, b"f32 ", u8 rank, u64 extents
    payloads, float32 little-endian, concatenated in header order
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import SchemaError

_MAGIC = b"PSCK1\n"


def save_checkpoint(path, params, step: int, config_hash: str,
                    extra_meta: dict | None = None) -> None:
    meta = {"step": int(step), "config_hash": str(config_hash)}
    if extra_meta:
        meta.update(extra_meta)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    names = list(params.keys())
    arrays = []
    for name in names:
        t = params[name]
        arr = np.ascontiguousarray(getattr(t, "data", t), dtype="<f4")
        arrays.append(arr)

    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(names)))
        for name, arr in zip(names, arrays):
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(b"f32 ")
            f.write(struct.pack("<B", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<Q", ext))
        for arr in arrays:
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise SchemaError(f"checkpoint truncated while reading {what}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(len(_MAGIC), "magic") != _MAGIC:
        raise SchemaError("bad checkpoint magic; not a PSCK1 container")
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    try:
        meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaError(f"unreadable checkpoint metadata: {e}") from e
    (count,) = struct.unpack("<I", take(4, "tensor count"))

    headers = []
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        dtype_tag = take(4, "dtype tag")
        if dtype_tag != b"f32 ":
            raise SchemaError(f"tensor {name!r} has unsupported dtype tag {dtype_tag!r}")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = tuple(struct.unpack("<Q", take(8, "extent"))[0] for _ in range(rank))
        headers.append((name, shape))

    params = {}
    for name, shape in headers:
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        buf = take(4 * n_items, f"payload of {name!r}")
        params[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    if off != len(raw):
        raise SchemaError(f"{len(raw) - off} trailing bytes after payloads")
    return params, meta


def restore_agent(agent, loaded: dict[str, np.ndarray],
                  only_prefix: str | None = None) -> None:
    """Copy loaded arrays into the agent's parameters.

    Full restore requires the name sets to match exactly. With only_prefix
    (e.g. "encoder.") just that subset is copied and everything else keeps its
    fresh initialization; the subset must be complete on both sides.
    """
    params = agent.params()
    if only_prefix is None:
        want = set(params)
        have = set(loaded)
    else:
        want = {k for k in params if k.startswith(only_prefix)}
        have = {k for k in loaded if k.startswith(only_prefix)}
    missing = sorted(want - have)
    extra = sorted(have - want) if only_prefix is None else []
    if missing or extra:
        raise SchemaError(f"checkpoint name mismatch: missing {missing}, "
                          f"unexpected {extra}")
    for name in sorted(want):
        arr = loaded[name]
        if arr.shape != params[name].data.shape:
            raise SchemaError(f"tensor {name!r} has shape {arr.shape}, "
                              f"expected {params[name].data.shape}")
        params[name].data = arr.astype(np.float32, copy=True)
