"""Synthetic vector-field phantoms with analytic ground-truth streamlines.

The grid is centered on the world origin. Each kind defines a bundle
region with a square cross-section of half-width ``half_width`` mm:

straight
    Box along +x; the region is snapped to voxel faces so the tracking mask's
    0.5 level set coincides with the analytic boundary.
circular
    Annulus around the z axis (radius ``radius`` +- half_width), limited to
    ``arc_degrees`` of arc starting at azimuth 0; field is counterclockwise.
helix
    Cylindrical shell; field is tangent to helices of pitch ``pitch``.
crossing
    Two straight bundles in the x-y plane at +-crossing_angle/2 from +x.

Feature volumes hold the antipodally symmetric tangent encoding
(uxux, uyuy, uzuz, uxuy, uxuz, uyuz), summed over bundles and zero outside
the mask, followed by three channels of grid position scaled to [-1, 1].
The symmetric part alone cannot tell the direction of travel; position
makes the learning task well posed at the ends of each bundle.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import brentq

from .geometry import Affine, Streamline
from .metric import DEFAULT_POINTS, DEFAULT_RADIUS_MM, compare
from .report import summarize
from .tracts import Tractogram
from .volumes import Volume

KINDS = ("straight", "circular", "helix", "crossing")
N_ENCODING = 6
N_POSITION = 3


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "straight"
    dims: tuple = (48, 24, 24)
    voxel_size: float = 2.0
    length: float = 80.0
    half_width: float = 4.0
    radius: float = 20.0
    arc_degrees: float = 270.0
    pitch: float = 20.0
    height: float = 20.0
    crossing_angle: float = 60.0
    noise: float = 0.05
    n_distractors: int = 4
    distractor_sigma: float = 2.0
    n_streamlines: int = 200
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ValueError("dims must be three sizes >= 4")
        if self.voxel_size <= 0 or self.half_width <= 0:
            raise ValueError("voxel_size and half_width must be positive")
        if self.kind in ("circular", "helix") and self.radius <= self.half_width:
            raise ValueError("radius must exceed half_width")

    @classmethod
    def default(cls, kind, **overrides):
        base = {
            "straight": dict(dims=(48, 24, 24)),
            "circular": dict(dims=(30, 30, 12)),
            "helix": dict(dims=(26, 26, 18), radius=15.0),
            "crossing": dict(dims=(48, 48, 12), length=70.0),
        }[kind]
        base.update(overrides)
        return cls(kind=kind, **base)

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @property
    def affine(self):
        c = (np.asarray(self.dims) - 1) / 2.0 * self.voxel_size
        return Affine.scaling(self.voxel_size, -c)

    @property
    def pitch_rate(self):
        """dz / dtheta of the helices."""
        return self.pitch / (2.0 * math.pi)


@dataclass
class Phantom:
    spec: PhantomSpec
    field: Volume
    mask: Volume
    features: Volume
    context: Volume
    truth: Tractogram

    def outputs(self):
        return self.field, self.mask, self.features, self.context, self.truth


# --------------------------------------------------------------------------
# analytic geometry
# --------------------------------------------------------------------------


def encode_tangent(u):
    """Antipodally symmetric 6-channel encoding of direction vectors (..., 3)."""
    u = np.asarray(u, dtype=np.float64)
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    return np.stack([x * x, y * y, z * z, x * y, x * z, y * z], axis=-1)


def _straight_bounds(spec):
    """World [lo, hi] of the voxel-snapped straight box per axis."""
    vs = spec.voxel_size
    centers = [(np.arange(n) - (n - 1) / 2.0) * vs for n in spec.dims]
    half = (spec.length / 2.0, spec.half_width, spec.half_width)
    lo, hi = np.empty(3), np.empty(3)
    for a in range(3):
        inside = centers[a][np.abs(centers[a]) <= half[a] + 1e-9]
        if len(inside) == 0:
            raise ValueError("straight bundle is thinner than one voxel")
        lo[a], hi[a] = inside[0] - vs / 2.0, inside[-1] + vs / 2.0
    return lo, hi


def _bundle_dirs(spec):
    h = math.radians(spec.crossing_angle) / 2.0
    return np.array([[math.cos(h), math.sin(h), 0.0], [math.cos(h), -math.sin(h), 0.0]])


def _perp_axes(d):
    return np.cross([0.0, 0.0, 1.0], d), np.array([0.0, 0.0, 1.0])


def region_membership(spec, pts):
    """Boolean (n_bundles, M) membership of world points in each bundle region."""
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    w = spec.half_width
    if spec.kind == "straight":
        lo, hi = _straight_bounds(spec)
        return np.all((p >= lo) & (p <= hi), axis=1)[None]
    if spec.kind in ("circular", "helix"):
        rho = np.hypot(p[:, 0], p[:, 1])
        ok = np.abs(rho - spec.radius) <= w
        if spec.kind == "circular":
            ok &= np.abs(p[:, 2]) <= w
            if spec.arc_degrees < 360.0:
                theta = np.mod(np.arctan2(p[:, 1], p[:, 0]), 2 * math.pi)
                ok &= theta <= math.radians(spec.arc_degrees)
        else:
            ok &= np.abs(p[:, 2]) <= spec.height / 2.0
        return ok[None]
    out = []
    for d in _bundle_dirs(spec):
        e1, e2 = _perp_axes(d)
        out.append((np.abs(p @ d) <= spec.length / 2.0) & (np.abs(p @ e1) <= w) & (np.abs(p @ e2) <= w))
    return np.array(out)


def tangent(spec, pts, bundle=0):
    """Analytic unit field at world points (M, 3); zero where undefined."""
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if spec.kind == "straight":
        return np.tile([1.0, 0.0, 0.0], (len(p), 1))
    if spec.kind == "crossing":
        return np.tile(_bundle_dirs(spec)[bundle], (len(p), 1))
    c = spec.pitch_rate if spec.kind == "helix" else 0.0
    v = np.stack([-p[:, 1], p[:, 0], np.full(len(p), c)], axis=1)
    rho = np.hypot(p[:, 0], p[:, 1])
    n = np.linalg.norm(v, axis=1)
    out = np.zeros_like(v)
    ok = rho > 1e-9
    out[ok] = v[ok] / n[ok, None]
    return out


# --------------------------------------------------------------------------
# ground-truth curves
# --------------------------------------------------------------------------


def _helix_step(rho, c):
    """Parameter increment giving a 1 mm chord on a helix of radius rho."""
    f = lambda d: (2 * rho * math.sin(d / 2)) ** 2 + (c * d) ** 2 - 1.0
    hi = 1.0 / math.hypot(rho, c) * 2.0
    while f(hi) < 0:
        hi *= 2
    return brentq(f, 1e-12, hi, xtol=1e-15, rtol=1e-15, maxiter=200)


def _line_points(seed, d, lo_t, hi_t):
    k = np.arange(math.ceil(lo_t - 1e-12), math.floor(hi_t + 1e-12) + 1)
    return seed + k[:, None] * d, int(np.flatnonzero(k == 0)[0])


def trace_truth(spec, seed, bundle=0):
    """Exact integral curve through ``seed`` sampled with 1 mm chords.

    The curve runs to the analytic region boundary in both directions and
    keeps the seed as one of its points. Returns a Streamline (seed_index
    set) oriented along the field.
    """
    s = np.asarray(seed, dtype=np.float64)
    if spec.kind == "straight":
        lo, hi = _straight_bounds(spec)
        pts, i0 = _line_points(s, np.array([1.0, 0, 0]), lo[0] - s[0], hi[0] - s[0])
        return Streamline(pts, i0)
    if spec.kind == "crossing":
        d = _bundle_dirs(spec)[bundle]
        a = s @ d
        pts, i0 = _line_points(s, d, -spec.length / 2.0 - a, spec.length / 2.0 - a)
        return Streamline(pts, i0)
    rho = math.hypot(s[0], s[1])
    theta0 = math.atan2(s[1], s[0])
    c = spec.pitch_rate if spec.kind == "helix" else 0.0
    dt = _helix_step(rho, c) if c else 2.0 * math.asin(1.0 / (2.0 * rho))
    if spec.kind == "circular":
        arc = math.radians(spec.arc_degrees)
        if arc >= 2 * math.pi:
            n = int(math.floor(2 * math.pi / dt))
            k = np.arange(0, n + 1)
        else:
            t0 = np.mod(theta0, 2 * math.pi)
            k = np.arange(math.ceil(-t0 / dt - 1e-12), math.floor((arc - t0) / dt + 1e-12) + 1)
    else:
        z0 = s[2]
        half = spec.height / 2.0
        k = np.arange(math.ceil((-half - z0) / (c * dt) - 1e-12), math.floor((half - z0) / (c * dt) + 1e-12) + 1)
    th = theta0 + k * dt
    pts = np.stack([rho * np.cos(th), rho * np.sin(th), s[2] + c * k * dt], axis=1)
    i0 = int(np.flatnonzero(k == 0)[0])
    pts[i0] = s
    return Streamline(pts, i0)


def _random_region_points(spec, n, rng, bundle=0):
    w = spec.half_width
    if spec.kind == "straight":
        lo, hi = _straight_bounds(spec)
        return rng.uniform(lo, hi, size=(n, 3))
    if spec.kind == "crossing":
        d = _bundle_dirs(spec)[bundle]
        e1, e2 = _perp_axes(d)
        a = rng.uniform(-spec.length / 2.0, spec.length / 2.0, n)
        b = rng.uniform(-w, w, n)
        c = rng.uniform(-w, w, n)
        return a[:, None] * d + b[:, None] * e1 + c[:, None] * e2
    r0, r1 = spec.radius - w, spec.radius + w
    rho = np.sqrt(rng.uniform(r0**2, r1**2, n))
    arc = math.radians(spec.arc_degrees) if spec.kind == "circular" else 2 * math.pi
    th = rng.uniform(0.0, arc, n)
    zh = w if spec.kind == "circular" else spec.height / 2.0
    z = rng.uniform(-zh, zh, n)
    return np.stack([rho * np.cos(th), rho * np.sin(th), z], axis=1)


def ground_truth(spec, n=None, rng_seed=None):
    """``n`` randomly seeded truth streamlines with random orientation."""
    n = spec.n_streamlines if n is None else n
    rng = np.random.default_rng(spec.rng_seed if rng_seed is None else rng_seed)
    n_b = 2 if spec.kind == "crossing" else 1
    out = []
    while len(out) < n:
        b = int(rng.integers(n_b))
        seed = _random_region_points(spec, 1, rng, b)[0]
        s = trace_truth(spec, seed, b)
        if len(s) < 2:
            continue
        if rng.random() < 0.5:
            s = Streamline(s.points[::-1].copy(), len(s) - 1 - s.seed_index)
        out.append(s)
    return Tractogram(out, f"phantom:{spec.kind}")


def curve_deviation(spec, seed, points, bundle=0):
    """Distance of each point to the analytic integral curve through ``seed``."""
    s = np.asarray(seed, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    if spec.kind in ("straight", "crossing"):
        d = np.array([1.0, 0, 0]) if spec.kind == "straight" else _bundle_dirs(spec)[bundle]
        r = p - s
        return np.linalg.norm(r - (r @ d)[:, None] * d, axis=1)
    rho0 = math.hypot(s[0], s[1])
    rho = np.hypot(p[:, 0], p[:, 1])
    if spec.kind == "circular":
        return np.hypot(rho - rho0, p[:, 2] - s[2])
    c = spec.pitch_rate
    th0 = math.atan2(s[1], s[0])
    th = np.arctan2(p[:, 1], p[:, 0])
    # height of the helix through the seed at this azimuth, nearest branch
    dz = p[:, 2] - (s[2] + c * (th - th0))
    dz = np.mod(dz + spec.pitch / 2.0, spec.pitch) - spec.pitch / 2.0
    return np.hypot(rho - rho0, dz * math.cos(math.atan2(c, rho0)))


# --------------------------------------------------------------------------
# volumes
# --------------------------------------------------------------------------


def _check_fits(spec, centers):
    """Every bundle must leave at least one empty voxel layer at the grid faces."""
    member = region_membership(spec, centers.reshape(-1, 3)).any(axis=0).reshape(spec.dims)
    if not member.any():
        raise ValueError("bundle region contains no voxel centers")
    faces = [member[0], member[-1], member[:, 0], member[:, -1], member[:, :, 0], member[:, :, -1]]
    if any(f.any() for f in faces):
        raise ValueError(f"{spec.kind} bundle exceeds the grid interior; enlarge dims")
    if spec.kind == "straight":
        lo, hi = _straight_bounds(spec)
        extent = (np.asarray(spec.dims) - 1) / 2.0 * spec.voxel_size
        if np.any(hi > extent - spec.voxel_size / 2.0) or np.any(lo < -extent + spec.voxel_size / 2.0):
            raise ValueError("straight bundle exceeds the grid interior; enlarge dims")
    return member


def build(spec):
    """Field, white-matter mask, feature and context volumes plus ground truth.

    Raises ValueError when the bundle geometry does not fit inside the grid.
    """
    aff = spec.affine
    vol = Volume(np.zeros((*spec.dims, 1), np.float32), aff)
    centers = vol.voxel_centers()
    flat = centers.reshape(-1, 3)
    mask = _check_fits(spec, centers)
    member = region_membership(spec, flat)
    n_b = len(member)

    if spec.kind == "crossing":
        fld = np.zeros((len(flat), 3 * n_b))
        for b in range(n_b):
            fld[member[b], 3 * b : 3 * b + 3] = tangent(spec, flat[member[b]], b)
    else:
        fld = tangent(spec, flat)

    enc = np.zeros((len(flat), N_ENCODING))
    for b in range(n_b):
        enc[member[b]] += encode_tangent(tangent(spec, flat[member[b]], b))
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in spec.dims], indexing="ij"), axis=-1).reshape(-1, 3)
    pos = 2.0 * grid / (np.asarray(spec.dims) - 1) - 1.0
    feats = np.concatenate([enc, pos], axis=1).reshape(*spec.dims, -1)

    rng = np.random.default_rng(spec.rng_seed + 10_000)
    noisy = feats + spec.noise * rng.normal(size=feats.shape)
    distract = []
    for _ in range(spec.n_distractors):
        g = gaussian_filter(rng.normal(size=spec.dims), spec.distractor_sigma, mode="constant")
        distract.append(g / max(g.std(), 1e-12))
    context = np.concatenate([noisy] + [d[..., None] for d in distract], axis=-1)

    return Phantom(
        spec=spec,
        field=Volume(fld.reshape(*spec.dims, -1).astype(np.float32), aff),
        mask=Volume(mask.astype(np.float32)[..., None], aff),
        features=Volume(feats.astype(np.float32), aff),
        context=Volume(context.astype(np.float32), aff),
        truth=ground_truth(spec),
    )


def evaluate_tracking(generated, truth, radius=DEFAULT_RADIUS_MM, K=DEFAULT_POINTS):
    """Epsilon-ball comparison of generated streamlines against ground truth."""
    return summarize(compare(generated, truth, radius, K))
