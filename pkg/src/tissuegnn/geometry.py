"""Point clouds, rigid z-rotations, surface grids, and kNN graph construction.

All operations are pure functions over immutable numpy inputs. Coordinates
are millimeters throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IndexSelectionError, InsufficientPointsError

__all__ = [
    "PointCloud",
    "EdgeList",
    "knn_graph",
    "rotate_z",
    "rotation_z_matrix",
    "grid_surface",
    "subsample_named",
    "mean_nn_distance",
]

FEATURE_WIDTH = 256

_NUMBA_KERNEL = None


def _knn_kernel():
    """JIT insertion-select kNN, exact (distance, index) tie ordering.

    Same per-pair arithmetic as the numpy path, so results are identical;
    returns None when numba is unavailable.
    """
    global _NUMBA_KERNEL
    if _NUMBA_KERNEL is not None:
        return _NUMBA_KERNEL or None
    try:
        from numba import njit
    except ImportError:
        _NUMBA_KERNEL = False
        return None

    @njit(cache=True)
    def kernel(pos, deg, out):
        n = pos.shape[0]
        for i in range(n):
            bd = np.full(deg, np.inf)
            bi = np.full(deg, -1, np.int64)
            for j in range(n):
                if j == i:
                    continue
                dx = pos[i, 0] - pos[j, 0]
                dy = pos[i, 1] - pos[j, 1]
                dz = pos[i, 2] - pos[j, 2]
                d2 = dx * dx + dy * dy + dz * dz
                w = deg - 1
                if d2 < bd[w] or (d2 == bd[w] and (bi[w] < 0 or j < bi[w])):
                    p = w
                    while p > 0 and (d2 < bd[p - 1]
                                     or (d2 == bd[p - 1] and j < bi[p - 1])):
                        bd[p] = bd[p - 1]
                        bi[p] = bi[p - 1]
                        p -= 1
                    bd[p] = d2
                    bi[p] = j
            for p in range(deg):
                out[i, p] = bi[p]

    _NUMBA_KERNEL = kernel
    return kernel


@dataclass
class PointCloud:
    """N surface points: rest positions [N,3] mm and per-point features [N,256].

    `grid_shape` carries (rows, cols) when the cloud was sampled on a regular
    grid; it is metadata only.
    """

    positions: np.ndarray
    features: np.ndarray | None = None
    grid_shape: tuple | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ConfigError(f"positions must be [N,3], got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ConfigError("positions must be finite")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.shape != (len(self.positions), FEATURE_WIDTH):
                raise ConfigError(
                    f"features must be [N,{FEATURE_WIDTH}], got {self.features.shape}"
                )

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class EdgeList:
    """Directed edges (dst receives from src), exactly k-1 per node.

    Edges are grouped by destination in increasing node order, each group
    sorted by (distance, source index); aggregations rely on that layout.
    """

    dst: np.ndarray
    src: np.ndarray
    k: int

    def __post_init__(self):
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.src = np.asarray(self.src, dtype=np.int64)
        if self.dst.shape != self.src.shape:
            raise ConfigError("dst/src length mismatch")

    @property
    def degree(self) -> int:
        return self.k - 1

    def __len__(self):
        return len(self.dst)


def pairwise_sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-coordinate accumulated squared distances [len(a), len(b)].

    Kept as explicit coordinate differences (never the x^2+y^2-2xy identity)
    so the floats match a per-pair brute-force scan bit for bit.
    """
    d2 = np.zeros((a.shape[0], b.shape[0]))
    for c in range(a.shape[1]):
        t = a[:, c, None] - b[None, :, c]
        t *= t
        d2 += t
    return d2


def select_knn_rows(d2: np.ndarray, deg: int) -> np.ndarray:
    """Per row: indices of the `deg` smallest values, ties by lower index.

    Fast path partitions each row; rows whose selection boundary is tied
    fall back to a full stable sort so the result always equals brute force.
    """
    m, n = d2.shape
    part_vals = np.partition(d2, (deg - 1, deg), axis=1)
    dirty = part_vals[:, deg - 1] == part_vals[:, deg]
    pool = np.argpartition(d2, deg - 1, axis=1)[:, :deg]
    pool.sort(axis=1)  # ascending index, so a stable value sort keeps ties right
    vals = np.take_along_axis(d2, pool, axis=1)
    order = np.argsort(vals, axis=1, kind="stable")
    sel = np.take_along_axis(pool, order, axis=1)
    for i in np.flatnonzero(dirty):
        sel[i] = np.argsort(d2[i], kind="stable")[:deg]
    return sel


def knn_graph(positions: np.ndarray, k: int, chunk: int = 512) -> EdgeList:
    """Exhaustive k-nearest-neighbor graph: k-1 neighbors per node.

    Distance ties break toward the lower source index; a node is never its
    own neighbor. Matches a brute-force O(N^2) scan exactly.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if k < 2:
        raise InsufficientPointsError(f"k must be >= 2, got {k}")
    if n < k:
        raise InsufficientPointsError(f"need at least k={k} points, got {n}")
    deg = k - 1
    src = np.empty((n, deg), dtype=np.int64)
    kernel = _knn_kernel()
    if kernel is not None:
        kernel(np.ascontiguousarray(positions), deg, src)
    else:
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            d2 = pairwise_sq_distances(positions[lo:hi], positions)
            d2[np.arange(hi - lo), np.arange(lo, hi)] = np.inf  # exclude self
            src[lo:hi] = select_knn_rows(d2, deg)
    dst = np.repeat(np.arange(n, dtype=np.int64), deg)
    return EdgeList(dst=dst, src=src.reshape(-1), k=k)


def rotation_z_matrix(degrees: float) -> np.ndarray:
    """3x3 rotation about the z axis (counterclockwise, column-vector form)."""
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_z(positions: np.ndarray, degrees: float,
             pivot: np.ndarray | None = None) -> np.ndarray:
    """Rotate points about a vertical axis through `pivot`.

    Default pivot is the centroid of the points' footprint, so rotated
    clouds stay over the same volume. z components are unchanged.
    """
    positions = np.asarray(positions, dtype=np.float64)
    single = positions.ndim == 1
    pts = positions[None, :] if single else positions
    if pivot is None:
        pivot = pts.mean(axis=0)
    pivot_xy = np.asarray(pivot, dtype=np.float64)[:2]
    r2 = rotation_z_matrix(degrees)[:2, :2]
    out = pts.copy()
    out[:, :2] = (pts[:, :2] - pivot_xy) @ r2.T + pivot_xy  # z passes through
    return out[0] if single else out


def grid_surface(rows: int, cols: int, extent: tuple = (100.0, 100.0),
                 z=32.0) -> np.ndarray:
    """rows*cols points spanning the extent on a regular grid.

    `z` is a constant height or a callable z(x, y). Rows advance along x,
    columns along y; point order is row-major.
    """
    if rows < 2 or cols < 2:
        raise ConfigError(f"grid needs rows, cols >= 2, got {rows}x{cols}")
    xs = np.linspace(0.0, extent[0], rows)
    ys = np.linspace(0.0, extent[1], cols)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    gx = gx.reshape(-1)
    gy = gy.reshape(-1)
    if callable(z):
        gz = np.asarray(z(gx, gy), dtype=np.float64)
    else:
        gz = np.full_like(gx, float(z))
    return np.stack([gx, gy, gz], axis=1)


def subsample_named(cloud: PointCloud, indices) -> PointCloud:
    """Select the named points (with features), preserving the given order."""
    indices = np.asarray(indices, dtype=np.int64)
    n = len(cloud)
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise IndexSelectionError(f"index out of range for cloud of {n} points")
    if len(np.unique(indices)) != indices.size:
        raise IndexSelectionError("duplicate index in subsample")
    return PointCloud(
        positions=cloud.positions[indices],
        features=None if cloud.features is None else cloud.features[indices],
        grid_shape=None,
    )


def mean_nn_distance(positions: np.ndarray) -> np.ndarray:
    """Per-point distance to the nearest other point (the d_mean statistic)."""
    positions = np.asarray(positions, dtype=np.float64)
    edges = knn_graph(positions, k=2)
    return np.linalg.norm(positions[edges.dst] - positions[edges.src], axis=1)
