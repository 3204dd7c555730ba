"""Binary container for named float32 arrays (checkpoints, attention dumps).

Layout (all integers little-endian):

    magic  b"CAPV" | version u32 | header_len u32 | header JSON (utf-8)
    count u32
    per entry: name_len u16 | name utf-8 | tag u8 | ndim u8 | dims u32*ndim
               | raw little-endian float32 data (C order)

The container round-trips bit-exactly: load(save(x)) == x and re-saving a
loaded file reproduces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParameterError, PathError
from .nn import ParamStore

MAGIC = b"CAPV"
FORMAT_VERSION = 1


def save_arrays(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    header: dict | None = None,
    tags: dict[str, bool] | None = None,
) -> None:
    header_json = json.dumps(
        {"format_version": FORMAT_VERSION, **(header or {})},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    tags = tags or {}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_json)))
        fh.write(header_json)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            name_b = name.encode("utf-8")
            if len(name_b) > 0xFFFF:
                raise ParameterError(f"array name too long: {name!r}")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", 1 if tags.get(name, False) else 0))
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes(order="C"))


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict, dict[str, bool]]:
    path = Path(path)
    if not path.exists():
        raise PathError(f"no such checkpoint: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ParameterError(f"{path} is not a capvid container")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != FORMAT_VERSION:
        raise ParameterError(f"unsupported container version {version}")
    (header_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off : off + header_len].decode("utf-8"))
    off += header_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    tags: dict[str, bool] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        tag, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        arrays[name] = arr.copy()
        tags[name] = bool(tag)
    return arrays, header, tags


def save_params(path: str | Path, store: ParamStore) -> None:
    save_arrays(path, store.arrays, header={"meta": store.meta}, tags=store.projection)


def load_params(path: str | Path) -> ParamStore:
    arrays, header, tags = load_arrays(path)
    store = ParamStore(arrays=arrays, projection=tags, meta=header.get("meta", {}))
    return store


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
