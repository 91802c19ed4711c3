"""Point clouds at integer precision N, PLY I/O and voxelisation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sparse_tensor import CoordSet

MAX_PRECISION = 18


@dataclass
class PointCloud:
    """Integer coordinates in [0, 2^N)^3.

    ``original_count`` is the number of points before deduplication; it is
    what bits-per-point figures divide by.
    """

    points: np.ndarray
    N: int
    original_count: int = -1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.int64).reshape(-1, 3)
        if not 0 <= self.N <= MAX_PRECISION:
            raise ValueError(f"precision N={self.N} outside [0, {MAX_PRECISION}]")
        if self.points.size and (self.points.min() < 0 or self.points.max() >= (1 << self.N)):
            raise ValueError(f"coordinate out of range for N={self.N}")
        if self.original_count < 0:
            self.original_count = len(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def canonical(self) -> "PointCloud":
        """Deduplicated, Morton-sorted copy (original_count preserved)."""
        cs = CoordSet(self.points, self.N)
        return PointCloud(np.array(cs.coords), self.N, self.original_count)

    def coordset(self) -> CoordSet:
        return CoordSet(self.points, self.N)

    def same_points(self, other: "PointCloud") -> bool:
        return self.N == other.N and self.coordset() == other.coordset()


class PLYError(ValueError):
    pass


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(raw: bytes):
    end = raw.find(b"end_header")
    if end < 0:
        raise PLYError("line 1: missing end_header")
    nl = raw.find(b"\n", end)
    body_start = len(raw) if nl < 0 else nl + 1
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PLYError("line 1: expected 'ply' magic")
    fmt = None
    precision = None
    elements = []  # (name, count, [(prop name, dtype or list spec)])
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) == 3 and parts[:2] == ["comment", "precision"] and parts[2].isdigit():
            precision = int(parts[2])
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise PLYError(f"line {lineno}: unsupported format {' '.join(parts[1:])!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PLYError(f"line {lineno}: malformed element declaration")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PLYError(f"line {lineno}: property before any element")
            if parts[1] == "list":
                if len(parts) != 5:
                    raise PLYError(f"line {lineno}: malformed list property")
                elements[-1][2].append((parts[4], ("list", _PLY_TYPES.get(parts[2]), _PLY_TYPES.get(parts[3]))))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                    raise PLYError(f"line {lineno}: unknown property type {parts[1:2]}")
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise PLYError(f"line {lineno}: unexpected keyword {parts[0]!r}")
    if fmt is None:
        raise PLYError("line 2: missing format line")
    if not any(e[0] == "vertex" for e in elements):
        raise PLYError("missing 'element vertex'")
    return fmt, elements, body_start, precision


def read_ply_xyz(path) -> np.ndarray:
    """Raw x, y, z columns of the vertex element as float64 (n, 3)."""
    return _read(path)[0]


def _read(path):
    raw = Path(path).read_bytes()
    fmt, elements, body, precision = _parse_header(raw)
    if fmt == "ascii":
        tokens = raw[body:].split()
        pos = 0
        for name, count, props in elements:
            if any(isinstance(t, tuple) for _, t in props):
                if name == "vertex":
                    raise PLYError("list properties on vertices are not supported")
                for _ in range(count):
                    for _, t in props:
                        if isinstance(t, tuple):
                            pos += int(tokens[pos]) + 1
                        else:
                            pos += 1
                continue
            width = len(props)
            chunk = tokens[pos:pos + width * count]
            if len(chunk) != width * count:
                raise PLYError(f"element {name!r}: expected {count} rows, data ended early")
            if name == "vertex":
                arr = np.array(chunk, dtype=np.float64).reshape(count, width)
                return _xyz(arr, [p for p, _ in props]), precision
            pos += width * count
    else:
        pos = body
        for name, count, props in elements:
            if any(isinstance(t, tuple) for _, t in props):
                raise PLYError(f"element {name!r}: binary list properties are not supported")
            dt = np.dtype([(p, "<" + t) for p, t in props])
            need = dt.itemsize * count
            if pos + need > len(raw):
                raise PLYError(f"element {name!r}: truncated binary data")
            if name == "vertex":
                rec = np.frombuffer(raw, dtype=dt, count=count, offset=pos)
                arr = np.stack([rec[p].astype(np.float64) for p, _ in props], axis=1) if count else np.zeros((0, len(props)))
                return _xyz(arr, [p for p, _ in props]), precision
            pos += need
    raise PLYError("missing 'element vertex'")


def _xyz(arr: np.ndarray, names: list[str]) -> np.ndarray:
    try:
        cols = [names.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise PLYError("vertex element lacks x/y/z properties") from None
    return arr[:, cols]


def read_ply(path, N: int | None = None) -> PointCloud:
    """Read a PLY.  Integral coordinates are taken as-is; anything else is voxelised via ``quantize``.

    Without an explicit ``N`` the ``comment precision`` line written by
    ``write_ply`` is honoured, else the smallest precision that fits.
    """
    xyz, stored = _read(path)
    if N is None and stored is not None:
        N = stored
    integral = xyz.size == 0 or (np.all(np.isfinite(xyz)) and np.all(xyz == np.round(xyz)) and xyz.min() >= 0)
    if integral:
        pts = xyz.astype(np.int64)
        need = int(pts.max()).bit_length() if pts.size else 0
        if N is None:
            N = max(need, 1)
        elif need > N:
            raise ValueError(f"coordinates need {need} bits, precision is {N}")
        return PointCloud(pts, N, len(pts)).canonical()
    if N is None:
        raise ValueError("non-integral PLY needs an explicit precision N")
    return quantize(xyz, N)


def write_ply(path, cloud: PointCloud, binary: bool = False):
    pts = np.asarray(cloud.points, dtype=np.int64)
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"comment precision {cloud.N}\n"
        f"element vertex {len(pts)}\n"
        "property int x\nproperty int y\nproperty int z\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            f.write(pts.astype("<i4").tobytes())
        else:
            f.write("".join(f"{x} {y} {z}\n" for x, y, z in pts.tolist()).encode("ascii"))


def quantize(raw, N: int, bbox=None) -> PointCloud:
    """Map ``bbox`` = (lo, hi) affinely onto [0, 2^N - 1], round to nearest and deduplicate.

    A scalar extent is shared by all axes (the largest side of the box), so
    the cloud keeps its aspect ratio.
    """
    if N > MAX_PRECISION:
        raise ValueError(f"N={N} exceeds {MAX_PRECISION}")
    raw = np.asarray(raw, dtype=np.float64).reshape(-1, 3)
    if bbox is None:
        if raw.shape[0] == 0:
            raise ValueError("degenerate bounding box")
        lo, hi = raw.min(axis=0), raw.max(axis=0)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bbox)
    extent = float(np.max(hi - lo))
    if not np.isfinite(extent) or extent <= 0:
        raise ValueError("degenerate bounding box")
    top = (1 << N) - 1
    q = np.rint((raw - lo) * (top / extent))
    q = np.clip(q, 0, top).astype(np.int64)
    return PointCloud(q, N, raw.shape[0]).canonical()
