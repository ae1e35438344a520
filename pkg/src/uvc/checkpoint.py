"""Self-describing array container used for every checkpoint.

Byte layout (all integers little-endian)::

    magic      8 bytes   b"UVCKPT\\x00\\x00"
    version    u32
    hdr_len    u32       followed by hdr_len bytes of UTF-8 JSON (config, structure, metadata)
    count      u32       number of array records
    record*    name_len u32, name (UTF-8), dtype u8 (4 = float32, 8 = float64),
               ndim u32, dims u64 * ndim, data (little-endian, C order)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .vit import ViTConfig, ViTWeights

MAGIC = b"UVCKPT\x00\x00"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def save_container(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    hdr = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(hdr)), hdr, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.itemsize not in _DTYPES or arr.dtype.kind != "f":
            raise CheckpointError(f"{name}: only float32/float64 arrays are stored, got {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.itemsize])
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", arr.dtype.itemsize, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(data.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hdr_len = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, this build reads version {VERSION}; "
            "re-export it with a matching build")
    pos = 16
    header = json.loads(buf[pos:pos + hdr_len].decode())
    pos += hdr_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        size, ndim = struct.unpack_from("<BI", buf, pos)
        pos += 5
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        dt = _DTYPES[size]
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
        pos += n * size
    return header, arrays


def save_weights(path: str | Path, weights: ViTWeights, kind: str = "weights", meta: dict | None = None,
                 extra: dict[str, np.ndarray] | None = None) -> None:
    header = {
        "kind": kind,
        "config": weights.config.to_dict(),
        "structure": weights.structure(),
        "meta": meta or {},
    }
    arrays = dict(weights.named_arrays())
    for k, v in (extra or {}).items():
        arrays["extra." + k] = v
    save_container(path, header, arrays)


def load_weights(path: str | Path, expect_kind: str | None = None
                 ) -> tuple[ViTWeights, dict, dict[str, np.ndarray]]:
    """Returns (weights, header meta, extra arrays)."""
    header, arrays = load_container(path)
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise CheckpointError(f"{path}: expected a '{expect_kind}' checkpoint, found '{header.get('kind')}'")
    config = ViTConfig.from_dict(header["config"])
    extra = {k[len("extra."):]: v for k, v in arrays.items() if k.startswith("extra.")}
    weights = ViTWeights.from_named(config, {k: v for k, v in arrays.items() if not k.startswith("extra.")},
                                    header["structure"])
    return weights, header.get("meta", {}), extra
