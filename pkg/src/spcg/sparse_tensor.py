"""Hash-indexed sparse voxel tensors with dyadic resampling geometry.

Coordinates are kept in Morton order (x/y/z bits interleaved, z least
significant).  The sorted Morton keys double as the hash index: neighbour
lookups are a ``searchsorted`` over the key array.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

MAX_BITS = 20

# Offsets of {0,1}^3 in Morton rank order: rank = 4x + 2y + z.
CHILD_OFFSETS = np.array(
    [[(r >> 2) & 1, (r >> 1) & 1, r & 1] for r in range(8)], dtype=np.int64
)


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_encode(coords: np.ndarray) -> np.ndarray:
    """Morton keys (int64) of non-negative (n, 3) integer coordinates."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    key = (
        (_spread_bits(coords[:, 0]) << np.uint64(2))
        | (_spread_bits(coords[:, 1]) << np.uint64(1))
        | _spread_bits(coords[:, 2])
    )
    return key.astype(np.int64)


def morton_decode(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64).astype(np.uint64)
    out = np.empty((k.shape[0], 3), dtype=np.int64)
    out[:, 0] = _compact_bits(k >> np.uint64(2)).astype(np.int64)
    out[:, 1] = _compact_bits(k >> np.uint64(1)).astype(np.int64)
    out[:, 2] = _compact_bits(k).astype(np.int64)
    return out


def kernel_offsets(k: int) -> np.ndarray:
    """All offsets of a k^3 kernel centred on the origin, lexicographic order."""
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    r = k // 2
    rng = np.arange(-r, r + 1)
    g = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1)
    return g.reshape(-1, 3).astype(np.int64)


class CoordSet:
    """Immutable, Morton-sorted set of unique voxel coordinates at one scale.

    Neighbour tables are cached on the instance, so every submanifold layer
    applied to tensors sharing a CoordSet reuses the same kernel map.
    """

    __slots__ = ("scale", "coords", "keys", "_cache")

    def __init__(self, coords, scale: int, *, assume_canonical: bool = False):
        if scale < 0 or scale > MAX_BITS:
            raise ValueError(f"scale {scale} out of range [0, {MAX_BITS}]")
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if coords.size and (coords.min() < 0 or coords.max() >= (1 << scale)):
            raise ValueError(f"coordinates outside [0, 2^{scale})")
        keys = morton_encode(coords)
        if not assume_canonical:
            keys, first = np.unique(keys, return_index=True)
            coords = coords[first]
        coords.setflags(write=False)
        keys.setflags(write=False)
        self.scale = scale
        self.coords = coords
        self.keys = keys
        self._cache: dict = {}

    def __len__(self) -> int:
        return self.coords.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, CoordSet):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self.keys, other.keys)

    def __hash__(self):
        return hash((self.scale, self.keys.tobytes()))

    def __repr__(self) -> str:
        return f"CoordSet(scale={self.scale}, n={len(self)})"

    @classmethod
    def from_keys(cls, keys: np.ndarray, scale: int) -> "CoordSet":
        keys = np.asarray(keys, dtype=np.int64)
        obj = cls.__new__(cls)
        obj.scale = scale
        obj.coords = morton_decode(keys)
        obj.keys = keys
        obj.coords.setflags(write=False)
        obj._cache = {}
        return obj

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index of each query coordinate, or -1 when absent."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        n = len(self)
        out = np.full(coords.shape[0], -1, dtype=np.int64)
        if n == 0 or coords.shape[0] == 0:
            return out
        valid = np.all((coords >= 0) & (coords < (1 << self.scale)), axis=1)
        q = morton_encode(coords[valid])
        pos = np.searchsorted(self.keys, q)
        pos_c = np.minimum(pos, n - 1)
        hit = self.keys[pos_c] == q
        res = np.where(hit, pos_c, -1)
        out[valid] = res
        return out

    def lookup_keys(self, keys: np.ndarray) -> np.ndarray:
        n = len(self)
        keys = np.asarray(keys, dtype=np.int64)
        if n == 0:
            return np.full(keys.shape[0], -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.keys, keys), n - 1)
        return np.where(self.keys[pos] == keys, pos, -1)

    def contains(self, coords) -> np.ndarray:
        return self.lookup(coords) >= 0

    def neighbor_table(self, k: int) -> np.ndarray:
        """(n, k^3) table of neighbour rows; missing neighbours map to row n."""
        tab = self._cache.get(("nbr", k))
        if tab is None:
            offs = kernel_offsets(k)
            n = len(self)
            q = (self.coords[:, None, :] + offs[None, :, :]).reshape(-1, 3)
            idx = self.lookup(q).reshape(n, offs.shape[0])
            idx[idx < 0] = n
            tab = idx
            self._cache[("nbr", k)] = tab
        return tab

    def kernel_matrix(self, k: int):
        """CSR matrix A (n, n*k^3) with A[u, j*K + s] = 1 iff row j is the s-th kernel neighbour of u.

        A submanifold convolution is then ``A @ (X @ Wcat).reshape(n*K, C_out)``.
        """
        entry = self._cache.get(("kmat", k))
        if entry is None:
            nbr = self.neighbor_table(k)
            entry = _selection_matrix(nbr, len(self))
            self._cache[("kmat", k)] = entry
        return entry

    def parent_keys(self) -> np.ndarray:
        return self.keys >> 3

    def downscaled(self) -> "CoordSet":
        cs = self._cache.get("down")
        if cs is None:
            if self.scale < 1:
                raise ValueError("cannot downscale root")
            cs = CoordSet.from_keys(np.unique(self.keys >> 3), self.scale - 1)
            self._cache["down"] = cs
        return cs

    def upscaled(self) -> "CoordSet":
        cs = self._cache.get("up")
        if cs is None:
            keys = ((self.keys[:, None] << 3) | np.arange(8, dtype=np.int64)[None, :]).ravel()
            cs = CoordSet.from_keys(keys, self.scale + 1)
            self._cache["up"] = cs
        return cs

    def down_matrix(self, fine: "CoordSet"):
        """Selection matrices (A, A^T) gathering each voxel's children out of ``fine``."""
        key = ("downmat", id(fine))
        entry = self._cache.get(key)
        if entry is None or entry[0] is not fine:
            entry = (fine, _selection_matrix(self.child_table(fine), len(fine)))
            self._cache[key] = entry
        return entry[1]

    def child_table(self, fine: "CoordSet") -> np.ndarray:
        """(n, 8) rows of ``fine`` holding the children of each voxel here (n = missing)."""
        key = ("children", id(fine))
        entry = self._cache.get(key)
        if entry is None or entry[0] is not fine:
            ck = ((self.keys[:, None] << 3) | np.arange(8, dtype=np.int64)[None, :]).ravel()
            idx = fine.lookup_keys(ck).reshape(-1, 8)
            idx[idx < 0] = len(fine)
            entry = (fine, idx)
            self._cache[key] = entry
        return entry[1]

    def subset(self, mask: np.ndarray) -> "CoordSet":
        return CoordSet.from_keys(self.keys[np.asarray(mask, dtype=bool)], self.scale)


def _selection_matrix(table: np.ndarray, n_in: int):
    """(A, A^T) in CSR form for a neighbour table whose missing entries equal ``n_in``."""
    n_out, K = table.shape
    u, s = np.nonzero(table < n_in)
    cols = table[u, s] * K + s
    data = np.ones(u.size)
    A = sparse.csr_matrix((data, (u, cols)), shape=(n_out, n_in * K))
    At = sparse.csr_matrix((data, (cols, u)), shape=(n_in * K, n_out))
    return A, At


class OccupancyRole(enum.Enum):
    POV = "POV"
    MP_POV = "MP-POV"


class SparseTensor:
    """Coordinates plus a per-voxel feature matrix of fixed width."""

    __slots__ = ("coordset", "feats", "role")

    def __init__(self, coordset: CoordSet, feats=None, role: OccupancyRole = OccupancyRole.POV):
        n = len(coordset)
        if feats is None:
            feats = np.ones((n, 1))
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ValueError(f"features must have shape ({n}, C), got {feats.shape}")
        if feats.shape[1] < 1:
            raise ValueError("feature width must be >= 1")
        self.coordset = coordset
        self.feats = feats
        self.role = role

    @classmethod
    def from_coords(cls, coords, scale: int, feats=None, role=OccupancyRole.POV) -> "SparseTensor":
        """Canonicalise ``coords`` (dedup + Morton sort); ``feats`` follow their rows."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        cs = CoordSet(coords, scale)
        if feats is not None:
            feats = np.asarray(feats, dtype=np.float64)
            if feats.ndim == 1:
                feats = feats[:, None]
            if feats.shape[0] != coords.shape[0]:
                raise ValueError("one feature row per input coordinate required")
            rows = cs.lookup(coords)
            # keep the first row seen for each unique coordinate
            out = np.empty((len(cs), feats.shape[1]))
            out[rows[::-1]] = feats[::-1]
            feats = out
        return cls(cs, feats, role)

    @property
    def scale(self) -> int:
        return self.coordset.scale

    @property
    def coords(self) -> np.ndarray:
        return self.coordset.coords

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def __len__(self) -> int:
        return len(self.coordset)

    def __repr__(self) -> str:
        return f"SparseTensor(scale={self.scale}, n={len(self)}, C={self.channels}, role={self.role.value})"

    def with_feats(self, feats) -> "SparseTensor":
        return SparseTensor(self.coordset, feats, self.role)

    def items(self):
        """(coordinate tuple, feature row) pairs in canonical order."""
        for c, f in zip(self.coords, self.feats):
            yield tuple(int(v) for v in c), f


def voxel_downscale_geom(t: SparseTensor) -> SparseTensor:
    if t.scale < 1:
        raise ValueError("cannot downscale root")
    cs = t.coordset.downscaled()
    return SparseTensor(cs, np.ones((len(cs), 1)), OccupancyRole.POV)


def voxel_upscale_geom(t: SparseTensor) -> SparseTensor:
    cs = t.coordset.upscaled()
    return SparseTensor(cs, np.ones((len(cs), 1)), OccupancyRole.MP_POV)


def child_offset(child) -> tuple[int, int, int]:
    x, y, z = (int(v) for v in child)
    return (x & 1, y & 1, z & 1)


def morton_rank(offset) -> int:
    x, y, z = offset
    return 4 * x + 2 * y + z


class GroupingVariant(enum.Enum):
    ONE_STAGE = "one_stage"
    THREE_STAGE = "three_stage"
    EIGHT_STAGE = "eight_stage"


@dataclass(frozen=True)
class GroupingArrangement:
    """Partition of the eight child offsets into sequentially coded stages."""

    variant: GroupingVariant
    stages: tuple[tuple[tuple[int, int, int], ...], ...]

    def __post_init__(self):
        flat = [o for s in self.stages for o in s]
        if sorted(flat) != sorted(tuple(int(v) for v in o) for o in CHILD_OFFSETS):
            raise ValueError("stages must partition {0,1}^3 exactly")

    @classmethod
    def of(cls, variant: "GroupingVariant | str") -> "GroupingArrangement":
        variant = GroupingVariant(variant)
        offs = [tuple(int(v) for v in o) for o in CHILD_OFFSETS]
        if variant is GroupingVariant.ONE_STAGE:
            stages = (tuple(offs),)
        elif variant is GroupingVariant.THREE_STAGE:
            stages = (
                tuple(o for o in offs if sum(o) == 0),
                tuple(o for o in offs if sum(o) == 1),
                tuple(o for o in offs if sum(o) >= 2),
            )
        else:
            stages = tuple((o,) for o in offs)
        return cls(variant, stages)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def stage_of_rank(self) -> np.ndarray:
        """Zero-based stage index for each Morton child rank 0..7."""
        out = np.empty(8, dtype=np.int64)
        for s, offs in enumerate(self.stages):
            for o in offs:
                out[morton_rank(o)] = s
        return out


def group_of(offset, arr: GroupingArrangement) -> tuple[int, int]:
    """(group id, stage id), both 1-based.

    Groups are labelled by Morton rank (G1 = (0,0,0) ... G8 = (1,1,1)).
    """
    offset = tuple(int(v) for v in offset)
    if any(v not in (0, 1) for v in offset) or len(offset) != 3:
        raise ValueError(f"offset {offset} not in {{0,1}}^3")
    group = morton_rank(offset) + 1
    for s, offs in enumerate(arr.stages):
        if offset in offs:
            return group, s + 1
    raise AssertionError("unreachable: arrangement is a partition")


def prune(t: SparseTensor, keep) -> SparseTensor:
    if isinstance(keep, CoordSet):
        keep_coords = keep.coords
    else:
        keep_coords = np.asarray(list(keep) if not isinstance(keep, np.ndarray) else keep,
                                 dtype=np.int64).reshape(-1, 3)
    rows = t.coordset.lookup(keep_coords)
    if np.any(rows < 0):
        missing = keep_coords[np.argmax(rows < 0)]
        raise KeyError(f"coordinate {tuple(int(v) for v in missing)} not in tensor")
    mask = np.zeros(len(t), dtype=bool)
    mask[rows] = True
    return SparseTensor(t.coordset.subset(mask), t.feats[mask], t.role)


def build_pyramid(cs: CoordSet) -> list[CoordSet]:
    """Coordinate sets for scales 0..cs.scale (index = scale)."""
    levels = [cs]
    while levels[-1].scale > 0:
        levels.append(levels[-1].downscaled())
    return levels[::-1]


def coords_to_set(coords: Iterable[Sequence[int]]) -> set[tuple[int, int, int]]:
    return {tuple(int(v) for v in c) for c in coords}
