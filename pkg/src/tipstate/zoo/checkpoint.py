"""Binary checkpoint container.

Layout (little-endian)::

    b"TSCK" | u32 format_version | u32 header_len | header (UTF-8 JSON)
    | float64 blobs, concatenated in header order | u32 CRC32 of all prior bytes

The same container carries random-forest baselines (architecture_id "rfc").
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import CorruptFile, VersionMismatch
from .builders import BUILDERS
from .graph import NetworkGraph

MAGIC = b"TSCK"
FORMAT_VERSION = 1


def write_container(path, architecture_id: str, hyperparams: dict,
                    blobs: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    names = list(blobs)
    header = {
        "architecture_id": architecture_id,
        "hyperparams": hyperparams,
        "meta": meta or {},
        "blobs": [{"name": n, "shape": list(np.shape(blobs[n]))} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<II", FORMAT_VERSION, len(hbytes))
    body += hbytes
    for n in names:
        body += np.ascontiguousarray(blobs[n], dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(body))
    return path


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint (bad magic or truncated)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, supported {FORMAT_VERSION}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header ({exc})") from None
    offset = 12 + hlen
    blobs = {}
    for entry in header["blobs"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(data) - 4:
            raise CorruptFile(f"{path}: blob {entry['name']} overruns file")
        blobs[entry["name"]] = np.frombuffer(data[offset:end], dtype="<f8").reshape(entry["shape"])
        offset = end
    if offset != len(data) - 4:
        raise CorruptFile(f"{path}: trailing bytes after blobs")
    return header, blobs


def save_checkpoint(net: NetworkGraph, path, training_seed: int | None = None,
                    extra: dict | None = None) -> Path:
    """Write ``net`` (parameters, running statistics, architecture) to ``path``."""
    meta = {
        "dtype": net.dtype.name,
        "init_seed": net.seed,
        "training_seed": net.seed if training_seed is None else int(training_seed),
        "layers": net.layer_specs(),
        "num_classes": net.num_classes,
        "input_side": net.input_side,
        "classes": list(net.classes),
        **(extra or {}),
    }
    return write_container(path, net.architecture_id, net.hyperparams, net.state(), meta)


def load_checkpoint(path) -> NetworkGraph:
    """Rebuild a network from a checkpoint; the result is in Infer mode."""
    header, blobs = read_container(path)
    meta, hp = header["meta"], dict(header["hyperparams"])
    arch = header["architecture_id"]
    dtype = np.dtype(meta["dtype"])
    if arch in BUILDERS:
        hp.pop("num_classes", None)
        side = hp.pop("input_side", meta["input_side"])
        net = BUILDERS[arch](meta["num_classes"], input_side=side, dtype=dtype,
                             seed=meta["init_seed"], **hp)
        if net.layer_specs() != meta["layers"]:
            raise CorruptFile(f"{path}: rebuilt {arch} does not match stored layer list")
    else:
        net = NetworkGraph.from_specs(meta["layers"], num_classes=meta["num_classes"],
                                      input_side=meta["input_side"], architecture_id=arch,
                                      hyperparams=hp, dtype=dtype, seed=meta["init_seed"])
    net.load_state(blobs)
    net.classes = tuple(meta.get("classes", net.classes))
    return net.eval()
