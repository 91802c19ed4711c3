"""Binary model files: one network per file, weights checksummed.

Layout (little-endian)::

    "SPNW" | version u8 | arch_id length u8 | arch_id | k u8 | C u16 | config-json length u32 | config json
    | array count u32 | checksum u64 | arrays...

Each array is ``ndim u8 | shape u32 * ndim | float64 data``.  The checksum
is blake2b-64 over the arch id and the array section; bitstreams record it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .models import ARCH_IDS, Network, build_network

MAGIC = b"SPNW"
VERSION = 1


class ModelFileError(ValueError):
    pass


def _array_blob(net: Network) -> tuple[bytes, int]:
    parts = []
    params = list(net.named_parameters())
    for _, p in params:
        v = np.ascontiguousarray(p.value, dtype="<f8")
        parts.append(struct.pack("<B", v.ndim) + struct.pack(f"<{v.ndim}I", *v.shape) + v.tobytes())
    return b"".join(parts), len(params)


def weights_checksum(net: Network) -> int:
    blob, _ = _array_blob(net)
    return int.from_bytes(hashlib.blake2b(net.arch_id.encode() + blob, digest_size=8).digest(), "little")


def to_bytes(net: Network) -> bytes:
    blob, count = _array_blob(net)
    cfg = json.dumps(net.config, sort_keys=True).encode()
    arch = net.arch_id.encode("ascii")
    head = (MAGIC + struct.pack("<BB", VERSION, len(arch)) + arch
            + struct.pack("<BHI", net.k, net.C, len(cfg)))
    return head + cfg + struct.pack("<IQ", count, weights_checksum(net)) + blob


def from_bytes(data: bytes) -> Network:
    if len(data) < 6 or data[:4] != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    version, alen = struct.unpack_from("<BB", data, 4)
    if version != VERSION:
        raise ModelFileError(f"unsupported model file version {version}")
    arch = data[6:6 + alen].decode("ascii", errors="replace")
    if arch not in ARCH_IDS:
        raise ModelFileError(f"unknown arch {arch!r}")
    pos = 6 + alen
    try:
        k, C, cfg_len = struct.unpack_from("<BHI", data, pos)
    except struct.error:
        raise ModelFileError("truncated model file") from None
    pos += 7
    try:
        config = json.loads(data[pos:pos + cfg_len])
    except ValueError as e:
        raise ModelFileError(f"corrupt config block: {e}") from None
    pos += cfg_len
    if config.get("k") != k or config.get("C") != C:
        raise ModelFileError("header k/C disagree with config")
    config.pop("stages", None)
    net = build_network(arch, **config)
    if len(data) < pos + 12:
        raise ModelFileError("truncated model file")
    count, checksum = struct.unpack_from("<IQ", data, pos)
    pos += 12
    params = list(net.named_parameters())
    if count != len(params):
        raise ModelFileError(f"expected {len(params)} arrays, file has {count}")
    for name, p in params:
        try:
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        except struct.error:
            raise ModelFileError("truncated model file") from None
        pos += 1 + 4 * ndim
        if tuple(shape) != p.value.shape:
            raise ModelFileError(f"{name}: shape {shape} does not match {p.value.shape}")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise ModelFileError("truncated model file")
        p.value[...] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape)
        pos += nbytes
    if pos != len(data):
        raise ModelFileError("trailing bytes after weights")
    if weights_checksum(net) != checksum:
        raise ModelFileError("weights checksum mismatch")
    return net


def save_model(net: Network, path) -> int:
    """Write ``net``; returns its weights checksum."""
    Path(path).write_bytes(to_bytes(net))
    return weights_checksum(net)


def load_model(path) -> Network:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model not found: {path}")
    return from_bytes(path.read_bytes())


def load_models(paths) -> dict[str, Network]:
    """Load model files (directories are scanned for ``*.spnw``), keyed by arch id."""
    out: dict[str, Network] = {}
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.spnw")) if p.is_dir() else [p]
        if p.is_dir() and not files:
            raise FileNotFoundError(f"model not found: no *.spnw files in {p}")
        for f in files:
            net = load_model(f)
            out[net.arch_id] = net
    return out
