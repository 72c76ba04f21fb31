"""Epsilon-ball seeding metric.

For every streamline ``a`` of tractogram A, streamlines of B whose polyline
passes within ``radius`` of a's seed point are candidates. The distance
assigned to ``a`` is the smallest MDF distance to a candidate, or infinity
when the ball is empty. The relation is not symmetric.

Both tractograms are resampled to K points first; ball intersection and MDF
are evaluated on those resampled polylines. Candidate selection uses a
uniform grid over the resampled points of B, with an exhaustive
point-to-segment oracle in :func:`brute_force_compare`.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import Streamline, point_segment_distances, resample

INFINITE = math.inf
DEFAULT_RADIUS_MM = 1.0
DEFAULT_POINTS = 100


@dataclass(frozen=True)
class MatchResult:
    query_index: int
    distance: float
    matched_index: int | None

    def __post_init__(self):
        if (self.matched_index is None) != math.isinf(self.distance):
            raise ValueError("distance is infinite exactly when there is no match")


@dataclass(frozen=True)
class ResampledSet:
    """Streamlines resampled to a common point count, stacked (n, K, 3)."""

    points: np.ndarray
    seed_indices: np.ndarray

    def __len__(self):
        return len(self.points)

    @property
    def n_points(self):
        return self.points.shape[1]

    @property
    def seed_points(self):
        return self.points[np.arange(len(self)), self.seed_indices]


def prepare(t, n_points=DEFAULT_POINTS):
    """Resample every streamline of ``t`` to ``n_points`` points."""
    pts = np.empty((len(t), n_points, 3))
    seeds = np.zeros(len(t), dtype=np.int64)
    for i, s in enumerate(t):
        r = resample(s, n_points)
        pts[i] = r.points
        seeds[i] = r.seed_index
    return ResampledSet(pts, seeds)


def _mdf_many(a, many):
    """MDF between one (K, 3) polyline and each of ``many`` (m, K, 3)."""
    direct = np.sqrt(((many - a) ** 2).sum(axis=-1)).mean(axis=-1)
    flipped = np.sqrt(((many[:, ::-1] - a) ** 2).sum(axis=-1)).mean(axis=-1)
    return np.minimum(direct, flipped)


def mdf(s, t):
    """Minimum average direct-flip distance between equal-length streamlines."""
    a = np.asarray(s.points if isinstance(s, Streamline) else s, dtype=np.float64)
    b = np.asarray(t.points if isinstance(t, Streamline) else t, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"MDF needs equal point counts, got {len(a)} and {len(b)}")
    return float(_mdf_many(a, b[None])[0])


class PointGridIndex:
    """Uniform grid over the points of a :class:`ResampledSet`.

    Every point is registered in the cell ``floor(coord / cell_size)``.
    Storage is CSR-like: entries sorted by linearized cell key.
    """

    def __init__(self, points, cell_size):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.cell_size = float(cell_size)
        pts = np.asarray(points, dtype=np.float64)
        n, k = pts.shape[:2] if pts.ndim == 3 else (0, 0)
        self.n_streamlines, self.n_points = n, k
        self.points = pts
        if n and k > 1:
            seg = np.sqrt((np.diff(pts, axis=1) ** 2).sum(axis=-1))
            self.half_max_segment = 0.5 * float(seg.max())
        else:
            self.half_max_segment = 0.0
        flat = pts.reshape(-1, 3)
        cells = np.floor(flat / self.cell_size).astype(np.int64)
        if len(cells):
            self._lo = cells.min(axis=0)
            self._shape = cells.max(axis=0) - self._lo + 1
        else:
            self._lo = np.zeros(3, dtype=np.int64)
            self._shape = np.zeros(3, dtype=np.int64)
        keys = self._linearize(cells)
        order = np.argsort(keys, kind="stable")
        self._entries = order  # flat point ids, grouped by cell
        skeys = keys[order]
        self._keys, self._starts, self._counts = np.unique(skeys, return_index=True, return_counts=True)

    def _linearize(self, cells):
        c = cells - self._lo
        return (c[:, 0] * self._shape[1] + c[:, 1]) * self._shape[2] + c[:, 2]

    def __len__(self):
        return len(self._entries)

    @property
    def occupied_cells(self):
        return len(self._keys)

    def cells(self):
        """Mapping (i, j, k) -> list of (streamline_index, point_index)."""
        out = {}
        for key, start, count in zip(self._keys, self._starts, self._counts):
            ids = self._entries[start : start + count]
            c2 = key % self._shape[2]
            c1 = (key // self._shape[2]) % self._shape[1]
            c0 = key // (self._shape[2] * self._shape[1])
            cell = tuple(int(v) for v in np.array([c0, c1, c2]) + self._lo)
            out[cell] = [(int(i // self.n_points), int(i % self.n_points)) for i in ids]
        return out

    def point_ids_near(self, center, reach):
        """Flat point ids in all cells overlapping the cube center +- reach."""
        if not len(self._keys):
            return np.empty(0, dtype=np.int64)
        c = np.asarray(center, dtype=np.float64)
        lo = np.floor((c - reach) / self.cell_size).astype(np.int64) - self._lo
        hi = np.floor((c + reach) / self.cell_size).astype(np.int64) - self._lo
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, self._shape - 1)
        if np.any(hi < lo):
            return np.empty(0, dtype=np.int64)
        ax = [np.arange(lo[d], hi[d] + 1) for d in range(3)]
        keys = ((ax[0][:, None, None] * self._shape[1] + ax[1][None, :, None]) * self._shape[2]
                + ax[2][None, None, :]).ravel()
        pos = np.searchsorted(self._keys, keys)
        inrange = pos < len(self._keys)
        pos, keys = pos[inrange], keys[inrange]
        pos = pos[self._keys[pos] == keys]
        if not len(pos):
            return np.empty(0, dtype=np.int64)
        starts, counts = self._starts[pos], self._counts[pos]
        offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
        return self._entries[np.arange(counts.sum()) + offsets]


def build_index(B, cell_size=DEFAULT_RADIUS_MM):
    """Grid index over a resampled tractogram (ResampledSet or (n, K, 3) array)."""
    pts = B.points if isinstance(B, ResampledSet) else np.asarray(B)
    if pts.size == 0:
        pts = np.empty((0, 0, 3))
    return PointGridIndex(pts, cell_size)


def epsilon_candidates(index, B, center, radius):
    """Indices of B streamlines whose polyline passes within ``radius`` of ``center``.

    Grid cells are over-collected to ``radius`` plus half the longest segment
    of B, then every segment touching a collected point is checked exactly.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = B.points if isinstance(B, ResampledSet) else np.asarray(B)
    # slack keeps the prefilter a strict superset under rounding
    reach = radius + index.half_max_segment + 1e-9
    ids = index.point_ids_near(center, reach)
    if not len(ids):
        return np.empty(0, dtype=np.int64)
    k = index.n_points
    sl, pt = ids // k, ids % k
    p = pts[sl, pt]
    d = p - center
    near = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]) <= reach
    sl, pt = sl[near], pt[near]
    if not len(sl):
        return np.empty(0, dtype=np.int64)
    # segments (pt-1, pt) and (pt, pt+1), clipped to the polyline
    seg_sl = np.concatenate([sl, sl])
    seg_start = np.concatenate([pt - 1, pt])
    ok = (seg_start >= 0) & (seg_start < k - 1)
    seg_sl, seg_start = seg_sl[ok], seg_start[ok]
    dist = point_segment_distances(center, pts[seg_sl, seg_start], pts[seg_sl, seg_start + 1])
    return np.unique(seg_sl[dist <= radius])


def brute_force_candidates(B, center, radius):
    """Exhaustive version of :func:`epsilon_candidates` over every segment of B."""
    pts = B.points if isinstance(B, ResampledSet) else np.asarray(B)
    if len(pts) == 0:
        return np.empty(0, dtype=np.int64)
    dist = point_segment_distances(center, pts[:, :-1], pts[:, 1:])
    return np.flatnonzero(dist.min(axis=1) <= radius)


def _best_match(i, a_points, B_points, cands):
    if not len(cands):
        return MatchResult(i, INFINITE, None)
    dists = _mdf_many(a_points, B_points[cands])
    j = int(np.argmin(dists))
    return MatchResult(i, float(dists[j]), int(cands[j]))


def match_resampled(A, B, radius=DEFAULT_RADIUS_MM, cell_size=None, workers=1):
    """Indexed matching on already-resampled sets."""
    index = build_index(B, cell_size if cell_size is not None else radius)
    centers = A.seed_points

    def run(rows):
        return [
            _best_match(i, A.points[i], B.points, epsilon_candidates(index, B, centers[i], radius))
            for i in rows
        ]

    return _run_chunked(run, len(A), workers)


def brute_force_match_resampled(A, B, radius=DEFAULT_RADIUS_MM, workers=1):
    centers = A.seed_points

    def run(rows):
        return [
            _best_match(i, A.points[i], B.points, brute_force_candidates(B, centers[i], radius))
            for i in rows
        ]

    return _run_chunked(run, len(A), workers)


def _run_chunked(run, n, workers):
    if workers is None or workers <= 1 or n < 2:
        return run(range(n))
    bounds = np.linspace(0, n, min(workers, n) * 4 + 1).astype(int)
    chunks = [range(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(run, chunks))
    return [r for part in parts for r in part]


def compare(A, B, radius=DEFAULT_RADIUS_MM, K=DEFAULT_POINTS, cell_size=None, workers=1):
    """Epsilon-ball seeding metric of every streamline of A against B.

    Parameters
    ----------
    A, B : Tractogram
        Registered tractograms in the same world space.
    radius : float
        Ball radius in millimeters.
    K : int
        Resampling point count.
    cell_size : float, optional
        Grid cell size in mm; defaults to ``radius``.
    workers : int
        Threads for the per-query loop; results do not depend on it.

    Returns
    -------
    list of MatchResult, in A order.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    if len(A) == 0:
        return []
    A_res = prepare(A, K)
    if len(B) == 0:
        return [MatchResult(i, INFINITE, None) for i in range(len(A))]
    return match_resampled(A_res, prepare(B, K), radius, cell_size, workers)


def brute_force_compare(A, B, radius=DEFAULT_RADIUS_MM, K=DEFAULT_POINTS, workers=1):
    """Oracle for :func:`compare`: exhaustive point-to-segment candidate search."""
    if K < 2:
        raise ValueError("K must be at least 2")
    if len(A) == 0:
        return []
    A_res = prepare(A, K)
    if len(B) == 0:
        return [MatchResult(i, INFINITE, None) for i in range(len(A))]
    return brute_force_match_resampled(A_res, prepare(B, K), radius, workers)


def distances(results):
    return np.array([r.distance for r in results], dtype=np.float64)
