"""Byte-stable artifact container, hashing helpers and run manifests.

npz/zip archives embed timestamps, so checkpoints use a small custom
container: magic, format version, a canonical-JSON manifest, then raw
little-endian arrays in manifest order. Identical inputs produce identical
bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from pathlib import Path

import numpy as np

MAGIC = b"LNAV"
CONTAINER_VERSION = 1

_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8", "i4": "<i4", "u1": "<u1"}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def _dtype_code(arr: np.ndarray) -> str:
    for code, np_dt in _DTYPES.items():
        if arr.dtype == np.dtype(np_dt):
            return code
    raise TypeError(f"unsupported dtype {arr.dtype}")


def pack_arrays(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    """Serialize metadata plus named arrays into one deterministic blob."""
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        code = _dtype_code(arr)
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(raw)
    manifest = canonical_json(
        {"container_version": CONTAINER_VERSION, "meta": meta, "arrays": entries}
    ).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", CONTAINER_VERSION)
    out += struct.pack("<Q", len(manifest))
    out += manifest
    for raw in blobs:
        out += raw
    return bytes(out)


def unpack_arrays(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise ValueError("not a latentnav container (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {version}")
    (mlen,) = struct.unpack_from("<Q", data, 8)
    manifest = json.loads(data[16 : 16 + mlen].decode("utf-8"))
    offset = 16 + mlen
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = dt.itemsize * count
        arr = np.frombuffer(data[offset : offset + nbytes], dtype=dt).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
        offset += nbytes
    return manifest["meta"], arrays


def save_container(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write a container file; returns its sha256."""
    data = pack_arrays(meta, arrays)
    Path(path).write_bytes(data)
    return sha256_bytes(data)


def load_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return unpack_arrays(Path(path).read_bytes())


class RunManifest:
    """Records config snapshot, seeds and artifact hashes for one run.

    The manifest hash covers everything except timestamps, so reruns with
    the same inputs produce the same manifest hash.
    """

    def __init__(self, config: dict, seeds: dict):
        self.config = config
        self.seeds = seeds
        self.artifacts: dict[str, str] = {}
        self.created = time.strftime("%Y-%m-%dT%H:%M:%S")

    def record(self, name: str, path: str | Path) -> str:
        digest = sha256_file(path)
        self.artifacts[name] = digest
        return digest

    def record_hash(self, name: str, digest: str) -> None:
        self.artifacts[name] = digest

    def stable_hash(self) -> str:
        body = canonical_json(
            {"config": self.config, "seeds": self.seeds, "artifacts": self.artifacts}
        )
        return sha256_bytes(body.encode("utf-8"))

    def to_json(self) -> dict:
        return {
            "version": 1,
            "created": self.created,
            "config": self.config,
            "seeds": self.seeds,
            "artifacts": self.artifacts,
            "stable_hash": self.stable_hash(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
