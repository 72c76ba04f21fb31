"""Streamline generation with a pluggable direction predictor.

Streamlines of one seeding batch advance in lockstep: each step makes one
predictor call over the rows still active. Bidirectional tracking
propagates from the seed, discards the ``warmup_discard`` points nearest
the seed (the seed included), flips what remains, re-primes the predictor
over the flipped points and then propagates the other way.

Termination checks on each candidate point run in this order:
OutOfBounds (outside the grid), ExitedMask (interpolated tracking mask
below ``mask_threshold``, or no usable direction), AngleExceeded, MaxLength.
The candidate point is never appended.
"""

import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateConfigError
from .geometry import Streamline, spherical_to_unit
from .model import conv_project, decode, embed, recurrent_step
from .tracts import Tractogram
from .volumes import trilinear


class TerminationReason(str, Enum):
    EXITED_MASK = "ExitedMask"
    OUT_OF_BOUNDS = "OutOfBounds"
    ANGLE_EXCEEDED = "AngleExceeded"
    MAX_LENGTH = "MaxLength"


@dataclass(frozen=True)
class TrackingConfig:
    step_size: float = 1.0
    min_length: float = 50.0
    max_length: float = 250.0
    max_angle_deg: float = 60.0
    warmup_discard: int = 5
    target_count: int = 1_000_000
    batch_size: int = 1000
    rng_seed: int = 0
    mask_threshold: float = 0.5
    max_failed_batches: int = 100

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.min_length < self.max_length:
            raise ValueError("need 0 < min_length < max_length")
        if self.warmup_discard < 0 or self.batch_size < 1 or self.target_count < 0:
            raise ValueError("warmup_discard, batch_size and target_count must be nonnegative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# --------------------------------------------------------------------------
# predictors
# --------------------------------------------------------------------------


def _normalize_rows(v, tol=1e-9):
    n = np.linalg.norm(v, axis=-1)
    out = np.zeros_like(v)
    ok = n > tol
    out[ok] = v[ok] / n[ok, None]
    return out


class FieldPredictor:
    """Follows a vector-field volume with 3*m channels (m candidate directions).

    Among nonzero candidates the one most aligned with the previous step is
    chosen, and its sign is flipped to agree with that step when ``orient``.
    ``integrator`` is "rk2" (midpoint, default) or "euler".
    """

    stateful = False

    def __init__(self, field, step_size=1.0, integrator="rk2", orient=True):
        if field.channels % 3:
            raise ValueError("field volume needs a multiple of 3 channels")
        if integrator not in ("rk2", "euler"):
            raise ValueError("integrator must be 'rk2' or 'euler'")
        self.field = field
        self.step_size = float(step_size)
        self.integrator = integrator
        self.orient = orient

    def reset(self, points):
        pass

    def prime(self, rows, sequences):
        pass

    def direction(self, points, ref):
        vals, _ = trilinear(self.field, points)
        cand = _normalize_rows(vals.reshape(len(points), -1, 3))
        has_ref = np.linalg.norm(ref, axis=1) > 0.5
        dots = np.einsum("nmk,nk->nm", cand, ref)
        norms = np.linalg.norm(cand, axis=2)
        score = np.where(has_ref[:, None], np.abs(dots), norms)
        score = np.where(norms > 0.5, score, -1.0)
        pick = np.argmax(score, axis=1)
        u = cand[np.arange(len(points)), pick]
        if self.orient:
            d = np.einsum("nk,nk->n", u, ref)
            u = np.where((has_ref & (d < 0))[:, None], -u, u)
        return u

    def predict(self, rows, points, prev_dirs):
        u = self.direction(points, prev_dirs)
        if self.integrator == "euler":
            return u
        ref = np.where(np.linalg.norm(u, axis=1, keepdims=True) > 0.5, u, prev_dirs)
        mid = self.direction(points + 0.5 * self.step_size * u, ref)
        ok = np.linalg.norm(mid, axis=1) > 0.5
        return np.where(ok[:, None], mid, u)


class RecurrentPredictor:
    """Model-driven predictor with per-row GRU state.

    Batch normalization uses the statistics of the rows evaluated together
    in one call. When fewer than two rows are active, the last positions of
    the other rows of the batch (then the row itself, duplicated) pad the
    statistics; their outputs are discarded.

    :meth:`prime` encodes known polylines the way training encodes
    sequences: one batch-norm batch over every primed point, then the GRU
    step by step.
    """

    stateful = True

    def __init__(self, weights, volume):
        self.weights = weights
        self.volume = conv_project(weights, volume) if weights.role == "student" else volume
        if self.volume.channels != weights.config.c_in:
            raise ValueError(f"volume has {self.volume.channels} channels, model expects {weights.config.c_in}")

    def reset(self, points):
        cfg = self.weights.config
        self.last = np.array(points, dtype=np.float64)
        self.hidden = np.zeros((cfg.n_layers, len(points), cfg.hidden))

    def prime(self, rows, sequences):
        rows = np.asarray(rows, dtype=int)
        lens = np.array([len(q) for q in sequences], dtype=int)
        if len(rows) == 0 or lens.sum() == 0:
            return
        pts = np.vstack([q for q in sequences if len(q)])
        X = trilinear(self.volume, pts)[0]
        emb = embed(self.weights, X if len(X) >= 2 else np.vstack([X, X]))[: len(X)]
        offsets = np.concatenate([[0], np.cumsum(lens)])
        for t in range(int(lens.max())):
            on = np.flatnonzero(lens > t)
            r = rows[on]
            _, h = recurrent_step(self.weights, emb[offsets[on] + t], self.hidden[:, r])
            self.hidden[:, r] = h
        for i, q in zip(rows, sequences):
            if len(q):
                self.last[i] = q[-1]

    def predict(self, rows, points, prev_dirs):
        rows = np.asarray(rows)
        feats, _ = trilinear(self.volume, points)
        X = feats
        if len(rows) < 2:
            others = np.setdiff1d(np.arange(len(self.last)), rows)
            X = np.vstack([feats, trilinear(self.volume, self.last[others])[0]]) if len(others) else feats
            if len(X) < 2:
                X = np.vstack([X, X])
        emb = embed(self.weights, X)[: len(rows)]
        out, h = recurrent_step(self.weights, emb, self.hidden[:, rows])
        self.hidden[:, rows] = h
        self.last[rows] = points
        return spherical_to_unit(decode(self.weights, emb, out))


# --------------------------------------------------------------------------
# seeding
# --------------------------------------------------------------------------


def seed_points(mask, n, rng):
    """``n`` world points: a nonzero voxel chosen uniformly, then uniform within its cube."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    vox = np.argwhere(mask.data[..., 0] > 0)
    if len(vox) == 0:
        raise ValueError("seed mask has no nonzero voxel")
    pick = vox[rng.integers(len(vox), size=n)]
    offset = rng.uniform(-0.5, 0.5, size=(n, 3))
    return mask.voxel_to_world.apply(pick + offset)


# --------------------------------------------------------------------------
# propagation
# --------------------------------------------------------------------------


def _cos_limit(cfg):
    return math.cos(math.radians(cfg.max_angle_deg))


def _run(pred, cfg, mask, starts, prev, primes, base_len, angle_grace):
    """Lockstep propagation of one direction.

    ``primes[r]`` lists points encoded into row r's predictor state before
    it steps from ``starts[r]``. ``angle_grace`` (scalar or per row) is the
    number of initial steps exempt from the angle test. Returns
    (new_points per row, reasons).
    """
    n = len(starts)
    h = cfg.step_size
    cmax = _cos_limit(cfg)
    cap = int(math.ceil(cfg.max_length / h)) + 2
    traj = np.empty((n, cap, 3))
    count = np.zeros(n, dtype=int)
    cur = np.array(starts, dtype=np.float64)
    prevd = np.array(prev, dtype=np.float64)
    length = np.array(base_len, dtype=np.float64)
    grace = np.broadcast_to(np.asarray(angle_grace, dtype=int), (n,))
    reasons = [None] * n
    active = np.ones(n, dtype=bool)
    pred.reset(cur)
    primed = [i for i in range(n) if len(primes[i])]
    if primed:
        pred.prime(primed, [primes[i] for i in primed])
    while active.any():
        r = np.flatnonzero(active)
        u = pred.predict(r, cur[r].copy(), prevd[r])
        cand = cur[r] + h * u
        mval, inside = trilinear(mask, cand)
        no_dir = np.linalg.norm(u, axis=1) < 0.5
        has_prev = np.linalg.norm(prevd[r], axis=1) > 0.5
        cosang = np.einsum("nk,nk->n", u, prevd[r])
        angle_bad = has_prev & (cosang < cmax) & (count[r] >= grace[r])
        too_long = length[r] + h > cfg.max_length + 1e-9
        stop = []
        stop.append((~inside, TerminationReason.OUT_OF_BOUNDS))
        stop.append(((mval[:, 0] < cfg.mask_threshold) | no_dir, TerminationReason.EXITED_MASK))
        stop.append((angle_bad, TerminationReason.ANGLE_EXCEEDED))
        stop.append((too_long, TerminationReason.MAX_LENGTH))
        done = np.zeros(len(r), dtype=bool)
        for cond, why in stop:
            hit = cond & ~done
            for i in np.flatnonzero(hit):
                reasons[r[i]] = why
            done |= hit
        # an exhausted buffer can only follow a MaxLength miss from rounding
        full = ~done & (count[r] >= cap)
        for i in np.flatnonzero(full):
            reasons[r[i]] = TerminationReason.MAX_LENGTH
        done |= full
        active[r[done]] = False
        go = r[~done]
        traj[go, count[go]] = cand[~done]
        count[go] += 1
        cur[go] = cand[~done]
        prevd[go] = u[~done]
        length[go] += h
    return [traj[i, : count[i]].copy() for i in range(n)], reasons


def _poly_length(p):
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum()) if len(p) > 1 else 0.0


def track_batch(pred, seeds, cfg, mask):
    """Bidirectional tracking of a batch of seeds.

    Returns a list of (Streamline or None, (reason1, reason2)); None marks a
    rejected (too short) streamline.
    """
    seeds = np.atleast_2d(np.asarray(seeds, dtype=np.float64))
    n = len(seeds)
    none = [np.empty((0, 3))] * n
    d1, why1 = _run(pred, cfg, mask, seeds, np.zeros((n, 3)), none, np.zeros(n), cfg.warmup_discard)

    w = cfg.warmup_discard
    starts = np.empty((n, 3))
    prev = np.zeros((n, 3))
    primes, base, retained = [], np.zeros(n), []
    # a stateful predictor with nothing to prime restarts cold: warmup grace again
    grace2 = np.zeros(n, dtype=int)
    for i in range(n):
        full = np.vstack([seeds[i][None], d1[i]])
        keep = full[w:][::-1]
        retained.append(keep)
        if len(keep):
            starts[i] = keep[-1]
            base[i] = _poly_length(keep)
            # continue along the flipped direction of travel
            j = min(w, len(full) - 1)
            if j + 1 < len(full):
                prev[i] = full[j] - full[j + 1]
            elif j >= 1:
                prev[i] = full[j - 1] - full[j]
            primes.append(keep[:-1] if pred.stateful else keep[:0])
            if pred.stateful and len(keep) < 2:
                grace2[i] = w
        else:
            starts[i] = seeds[i]
            if len(full) > 1:
                prev[i] = full[0] - full[1]
            primes.append(np.empty((0, 3)))
            if pred.stateful:
                grace2[i] = w
        nrm = np.linalg.norm(prev[i])
        prev[i] = prev[i] / nrm if nrm > 0 else 0.0

    d2, why2 = _run(pred, cfg, mask, starts, prev, primes, base, grace2)
    out = []
    for i in range(n):
        pts = np.vstack([retained[i], d2[i]]) if len(retained[i]) else np.vstack([seeds[i][None], d2[i]])
        if len(pts) < 2 or _poly_length(pts) < cfg.min_length:
            out.append((None, (why1[i], why2[i])))
            continue
        seed_idx = int(np.argmin(np.linalg.norm(pts - seeds[i], axis=1)))
        out.append((Streamline(pts, seed_idx), (why1[i], why2[i])))
    return out


def propagate_one_direction(pred, start, cfg, mask, prev=None):
    """Propagate a single row from ``start``; returns (points incl. start, reason)."""
    start = np.asarray(start, dtype=np.float64)
    p = np.zeros((1, 3)) if prev is None else np.asarray(prev, dtype=np.float64).reshape(1, 3)
    pts, why = _run(pred, cfg, mask, start[None], p, [np.empty((0, 3))], np.zeros(1), 0)
    return np.vstack([start[None], pts[0]]), why[0]


def track_bidirectional(pred, seed, cfg, mask):
    """Bidirectional tracking from one seed; returns a Streamline or None (rejected)."""
    return track_batch(pred, np.asarray(seed, dtype=np.float64)[None], cfg, mask)[0][0]


def generate_tractogram(pred, cfg, mask, seed_mask=None, log_fn=None):
    """Seed and track batches until at least ``target_count`` streamlines are kept.

    Returns (Tractogram, log). The log lists per-batch accept/reject counts
    and a termination-reason histogram per direction.

    Raises
    ------
    DegenerateConfigError
        After ``max_failed_batches`` consecutive batches without acceptance.
    """
    seed_mask = mask if seed_mask is None else seed_mask
    rng = np.random.default_rng(cfg.rng_seed)
    kept = []
    zero = {r.value: 0 for r in TerminationReason}
    hist = {"direction1": dict(zero), "direction2": dict(zero)}
    batches = []
    failed = 0
    while len(kept) < cfg.target_count:
        seeds = seed_points(seed_mask, cfg.batch_size, rng)
        res = track_batch(pred, seeds, cfg, mask)
        acc = [s for s, _ in res if s is not None]
        for _, (a, b) in res:
            hist["direction1"][a.value] += 1
            hist["direction2"][b.value] += 1
        batches.append({"accepted": len(acc), "rejected": len(res) - len(acc)})
        if log_fn is not None:
            log_fn(len(batches), len(acc), len(res) - len(acc))
        kept.extend(acc)
        failed = 0 if acc else failed + 1
        if failed >= cfg.max_failed_batches:
            raise DegenerateConfigError(f"no streamline accepted in {failed} consecutive batches")
    total = {k: hist["direction1"][k] + hist["direction2"][k] for k in zero}
    log = {
        "config": cfg.to_dict(),
        "batches": batches,
        "n_accepted": len(kept),
        "n_rejected": sum(b["rejected"] for b in batches),
        "termination": {**hist, "total": total},
    }
    return Tractogram(kept, "tracked"), log
