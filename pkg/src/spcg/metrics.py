"""Geometry distortion (D1 point-to-point, D2 point-to-plane) and rate figures."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import PointCloud

EXHAUSTIVE_LIMIT = 2000
NORMAL_NEIGHBORS = 8


def _points(c) -> np.ndarray:
    pts = c.points if isinstance(c, PointCloud) else c
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty cloud")
    return pts


def nearest_brute(query: np.ndarray, ref: np.ndarray):
    """O(n*m) nearest neighbour: (squared distance, index into ref)."""
    d2 = ((query[:, None, :] - ref[None, :, :]) ** 2).sum(-1)
    idx = d2.argmin(axis=1)
    return d2[np.arange(len(query)), idx], idx


def nearest(query: np.ndarray, ref: np.ndarray):
    if len(query) * len(ref) <= EXHAUSTIVE_LIMIT * EXHAUSTIVE_LIMIT and len(ref) <= EXHAUSTIVE_LIMIT:
        return nearest_brute(query, ref)
    d, idx = cKDTree(ref).query(query, k=1)
    # recompute exactly so integer clouds give exact integer squared distances
    diff = query - ref[idx]
    return (diff * diff).sum(1), idx


def estimate_normals(pts: np.ndarray, k: int = NORMAL_NEIGHBORS) -> np.ndarray:
    """Unit normals from PCA over the k nearest neighbours (self included)."""
    if len(pts) < k:
        raise ValueError(f"normal estimation needs at least {k} points, got {len(pts)}")
    _, nb = cKDTree(pts).query(pts, k=k)
    local = pts[nb] - pts[nb].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]  # eigenvector of the smallest eigenvalue


def _psnr(mse: float, peak: float) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(3.0 * peak * peak / mse)


def d1_mse(A, B) -> float:
    a, b = _points(A), _points(B)
    ab, _ = nearest(a, b)
    ba, _ = nearest(b, a)
    return max(float(ab.mean()), float(ba.mean()))


def d1_psnr(A, B, peak: float | None = None) -> float:
    """Symmetric point-to-point PSNR; ``inf`` marks identical clouds."""
    if peak is None:
        peak = _default_peak(A, B)
    return _psnr(d1_mse(A, B), peak)


def _d2_one_way(q: np.ndarray, ref: np.ndarray, ref_normals: np.ndarray) -> float:
    _, idx = nearest(q, ref)
    disp = q - ref[idx]
    proj = (disp * ref_normals[idx]).sum(1)
    return float((proj * proj).mean())


def d2_mse(A, B) -> float:
    a, b = _points(A), _points(B)
    return max(_d2_one_way(a, b, estimate_normals(b)), _d2_one_way(b, a, estimate_normals(a)))


def d2_psnr(A, B, peak: float | None = None) -> float:
    if peak is None:
        peak = _default_peak(A, B)
    return _psnr(d2_mse(A, B), peak)


def _default_peak(A, B) -> float:
    for c in (A, B):
        if isinstance(c, PointCloud):
            return float((1 << c.N) - 1)
    raise ValueError("peak required for raw coordinate arrays")


def bpp(total_bits: float, original_count: int) -> float:
    if original_count <= 0:
        raise ValueError("point count must be positive")
    return total_bits / original_count


@dataclass
class QualityReport:
    d1_psnr: float
    d2_psnr: float | None
    bpp: float | None
    points_ref: int
    points_test: int

    @property
    def identical(self) -> bool:
        return math.isinf(self.d1_psnr)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("d1_psnr", "d2_psnr"):
            if d[k] is not None and math.isinf(d[k]):
                d[k] = "identical"
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def table(self) -> str:
        rows = [(k, "-" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v)))
                for k, v in self.to_dict().items()]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(w)}  {v}" for k, v in rows)


def quality_report(ref: PointCloud, test: PointCloud, bits: float | None = None) -> QualityReport:
    peak = float((1 << ref.N) - 1)
    d2 = None
    if len(ref) >= NORMAL_NEIGHBORS and len(test) >= NORMAL_NEIGHBORS:
        d2 = d2_psnr(ref, test, peak)
    return QualityReport(
        d1_psnr=d1_psnr(ref, test, peak),
        d2_psnr=d2,
        bpp=None if bits is None else bpp(bits, ref.original_count),
        points_ref=len(ref),
        points_test=len(test),
    )
