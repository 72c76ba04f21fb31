"""Streamline geometry: arc length, resampling, reversal, affines and
conversion between step vectors and spherical angles.

Conventions
-----------
Points are world coordinates in millimeters. Spherical angles follow the
physics convention: zenith is measured from +z, azimuth from +x toward +y,
azimuth in [0, 2*pi) and zenith in [0, pi].
"""

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Streamline:
    """Ordered 3D polyline with the index of the point tracking started from.

    Parameters
    ----------
    points : array_like, shape (N, 3)
        N >= 2 finite points, no two consecutive points identical.
    seed_index : int
        Index into ``points`` of the seed. Defaults to the first point.
    """

    points: np.ndarray
    seed_index: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.dtype.kind != "f":
            pts = pts.astype(np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"streamline points must have shape (N, 3), got {pts.shape}")
        if len(pts) < 2:
            raise ValueError("streamline needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("streamline has non-finite coordinates")
        if np.any(np.all(pts[1:] == pts[:-1], axis=1)):
            raise ValueError("streamline has a zero-length segment")
        seed = int(self.seed_index)
        if not 0 <= seed < len(pts):
            raise ValueError(f"seed_index {seed} out of range for {len(pts)} points")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "seed_index", seed)

    def __len__(self):
        return len(self.points)

    @property
    def seed_point(self):
        return self.points[self.seed_index]


@dataclass(frozen=True)
class Affine:
    """Affine map p -> linear @ p + translation (millimeters)."""

    linear: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(lin)) or not np.all(np.isfinite(tr)):
            raise ValueError("affine has non-finite entries")
        if abs(np.linalg.det(lin)) < 1e-12:
            raise ValueError("affine linear part is singular")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def from_matrix(cls, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def scaling(cls, scale, translation=(0.0, 0.0, 0.0)):
        return cls(np.diag(np.broadcast_to(np.asarray(scale, float), (3,))), translation)

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        inv = np.linalg.inv(self.linear)
        return Affine(inv, -inv @ self.translation)

    def __matmul__(self, other):
        """Composition: ``(self @ other)(p) == self(other(p))``."""
        return Affine(self.linear @ other.linear, self.linear @ other.translation + self.translation)

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.linear.T + self.translation


def segment_lengths(points):
    return np.linalg.norm(np.diff(np.asarray(points, dtype=np.float64), axis=0), axis=1)


def arc_length(s):
    """Total polyline length in millimeters."""
    pts = s.points if isinstance(s, Streamline) else s
    return float(segment_lengths(pts).sum())


def resample(s, n):
    """Resample a streamline to ``n`` points equally spaced in arc length.

    End points are copied bit-exact, and the seed index is moved to the new
    point nearest (by arc length) to the original seed.
    """
    if n < 2:
        raise ValueError("resample needs n >= 2")
    pts = np.asarray(s.points, dtype=np.float64)
    cum = np.concatenate([[0.0], np.cumsum(segment_lengths(pts))])
    total = cum[-1]
    if not total > 0:
        raise ValueError("cannot resample a streamline of zero length")
    targets = np.linspace(0.0, total, n)
    out = np.empty((n, 3))
    for axis in range(3):
        out[:, axis] = np.interp(targets, cum, pts[:, axis])
    out[0] = pts[0]
    out[-1] = pts[-1]
    seed = int(round(cum[s.seed_index] / total * (n - 1)))
    return Streamline(out, seed_index=min(max(seed, 0), n - 1))


def unit_steps(points):
    """Unit step vectors between consecutive points, shape (N-1, 3)."""
    d = np.diff(np.asarray(points, dtype=np.float64), axis=0)
    norms = np.linalg.norm(d, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-length segment has no direction")
    return d / norms[:, None]


def vectors_to_spherical(u):
    """Unit vectors (..., 3) to (azimuth, zenith) angle pairs (..., 2)."""
    u = np.asarray(u, dtype=np.float64)
    az = np.mod(np.arctan2(u[..., 1], u[..., 0]), TWO_PI)
    az = np.where(az >= TWO_PI, 0.0, az)
    zen = np.arccos(np.clip(u[..., 2], -1.0, 1.0))
    return np.stack([az, zen], axis=-1)


def steps_to_spherical(s):
    """Spherical angles of every step of a streamline, shape (N-1, 2).

    Labels are one entry shorter than the streamline; pair row ``i`` with
    point ``i`` and drop the last point.
    """
    pts = s.points if isinstance(s, Streamline) else s
    return vectors_to_spherical(unit_steps(pts))


def spherical_to_unit(angles):
    """(azimuth, zenith) pairs (..., 2) to unit vectors (..., 3)."""
    a = np.asarray(angles, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite spherical angles")
    az, zen = a[..., 0], a[..., 1]
    sz = np.sin(zen)
    return np.stack([sz * np.cos(az), sz * np.sin(az), np.cos(zen)], axis=-1)


def flip(s):
    """Reverse point order; the seed stays on the same physical point."""
    return Streamline(s.points[::-1].copy(), seed_index=len(s) - 1 - s.seed_index)


def apply_affine(s, T):
    return Streamline(T.apply(s.points), seed_index=s.seed_index)


def collapse_duplicates(points):
    """Drop points identical to their predecessor."""
    pts = np.asarray(points)
    if len(pts) < 2:
        return pts
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    return pts[keep]


def point_segment_distances(center, starts, ends):
    """Euclidean distance from ``center`` to each segment [starts[i], ends[i]]."""
    c = np.asarray(center, dtype=np.float64)
    d = ends - starts
    w = c - starts
    dd = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
    t = w[..., 0] * d[..., 0] + w[..., 1] * d[..., 1] + w[..., 2] * d[..., 2]
    t = np.clip(np.divide(t, dd, out=np.zeros_like(t), where=dd > 0), 0.0, 1.0)
    r = starts + t[..., None] * d - c
    return np.sqrt(r[..., 0] * r[..., 0] + r[..., 1] * r[..., 1] + r[..., 2] * r[..., 2])
