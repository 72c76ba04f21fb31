"""Teacher and student training: batches and labels, cosine and contrastive
losses with analytic gradients, Adam, early stopping and gradient checks.

A training batch holds B streamlines padded to a common length. Step ``t``
of streamline ``b`` uses the features at point ``t`` and is labelled with
the direction from point ``t`` to ``t + 1``; the last point carries no
label. Padded steps are masked out of every loss and every batch-norm
statistic.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NumericError
from .geometry import Affine, Streamline, spherical_to_unit, steps_to_spherical
from .model import (
    ConvRows, ModelWeights, embed_forward, frozen_names, init_weights, make_student,
    sequence_backward, sequence_forward,
)
from .volumes import Volume, trilinear, trilinear_weights

# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingBatch:
    """Padded streamline batch.

    points : (B, T + 1, 3); lengths : (B,) point counts;
    mask : (B, T) valid steps; labels : (B, T, 2) step angles (zero when padded).
    """

    points: np.ndarray
    lengths: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    @property
    def n_steps(self):
        return int(self.mask.sum())

    def trimmed(self):
        """Drop trailing all-padding steps; results are unchanged by this."""
        t = int(self.lengths.max()) - 1
        return TrainingBatch(self.points[:, : t + 1], self.lengths, self.mask[:, :t], self.labels[:, :t])


def make_batch(streamlines, pad_to=None):
    """Stack streamlines into a :class:`TrainingBatch`.

    ``pad_to`` optionally fixes the step dimension (must cover the longest).
    """
    streamlines = list(streamlines)
    if not streamlines:
        raise ValueError("empty batch")
    lengths = np.array([len(s) for s in streamlines])
    T = int(lengths.max()) - 1 if pad_to is None else int(pad_to)
    if T < lengths.max() - 1:
        raise ValueError(f"pad_to={T} is shorter than the longest streamline")
    B = len(streamlines)
    points = np.zeros((B, T + 1, 3))
    labels = np.zeros((B, T, 2))
    mask = np.zeros((B, T), dtype=bool)
    for b, s in enumerate(streamlines):
        n = len(s)
        points[b, :n] = s.points
        labels[b, : n - 1] = steps_to_spherical(s)
        mask[b, : n - 1] = True
    return TrainingBatch(points, lengths, mask, labels)


def _sample_points(volume, batch):
    """Trilinear features at the start point of every valid step."""
    B, T = batch.mask.shape
    rows = batch.mask.ravel()
    pts = batch.points[:, :T].reshape(-1, 3)[rows]
    feats = np.zeros((B * T, volume.channels))
    feats[rows] = trilinear(volume, pts)[0]
    return feats.reshape(B, T, -1), pts


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _unit_and_jacobian(angles):
    az, zen = angles[..., 0], angles[..., 1]
    ca, sa, cz, sz = np.cos(az), np.sin(az), np.cos(zen), np.sin(zen)
    u = np.stack([sz * ca, sz * sa, cz], axis=-1)
    du_daz = np.stack([-sz * sa, sz * ca, np.zeros_like(az)], axis=-1)
    du_dzen = np.stack([cz * ca, cz * sa, -sz], axis=-1)
    return u, du_daz, du_dzen


def cosine_loss_and_grad(pred, labels, mask):
    """Mean over masked steps of 1 - u(pred) . u(label), and d loss / d pred."""
    pred = np.asarray(pred, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cosine loss over an empty mask")
    if not np.all(np.isfinite(pred[mask])):
        raise NumericError("non-finite predicted angles")
    u, du_a, du_z = _unit_and_jacobian(pred)
    v = spherical_to_unit(np.where(mask[..., None], labels, 0.0))
    dots = (u * v).sum(axis=-1)
    loss = float(((1.0 - dots) * mask).sum() / n)
    w = mask / n
    grad = np.stack([-(du_a * v).sum(-1) * w, -(du_z * v).sum(-1) * w], axis=-1)
    return loss, grad


def cosine_loss(pred, labels, mask):
    return cosine_loss_and_grad(pred, labels, mask)[0]


def sample_negatives(n_rows, n_negatives, rng):
    """Shared negative pool: indices of up to ``n_negatives`` rows, sorted."""
    k = min(int(n_negatives), n_rows)
    return np.sort(rng.choice(n_rows, size=k, replace=False))


def contrastive_loss_and_grad(student_emb, teacher_emb, pool, temperature=0.1):
    """NT-Xent distillation loss over embedding rows, and d loss / d student_emb.

    Row ``i`` must pick teacher row ``i`` out of {teacher row i} and the
    teacher rows in ``pool`` other than ``i``; logits are cosine
    similarities divided by ``temperature``. Teacher rows are constants.
    """
    S = np.asarray(student_emb, dtype=np.float64)
    Tm = np.asarray(teacher_emb, dtype=np.float64)
    M = len(S)
    if M < 2:
        raise ValueError("contrastive loss needs at least 2 positions")
    if S.shape != Tm.shape:
        raise ValueError("student and teacher embeddings differ in shape")
    tau = float(temperature)
    s_norm = np.maximum(np.linalg.norm(S, axis=1), 1e-12)
    t_norm = np.maximum(np.linalg.norm(Tm, axis=1), 1e-12)
    Sn = S / s_norm[:, None]
    Tn = Tm / t_norm[:, None]
    pos = (Sn * Tn).sum(axis=1) / tau
    neg = Sn @ Tn[pool].T / tau
    self_hit = pool[None, :] == np.arange(M)[:, None]
    neg = np.where(self_hit, -np.inf, neg)
    top = np.maximum(pos, neg.max(axis=1))
    e_pos = np.exp(pos - top)
    e_neg = np.exp(neg - top[:, None])
    z = e_pos + e_neg.sum(axis=1)
    loss = float(np.mean(np.log(z) + top - pos))
    p_pos = e_pos / z
    p_neg = e_neg / z[:, None]
    d_sn = ((p_pos - 1.0)[:, None] * Tn + p_neg @ Tn[pool]) / (tau * M)
    d_s = (d_sn - Sn * (Sn * d_sn).sum(axis=1, keepdims=True)) / s_norm[:, None]
    return loss, d_s


def contrastive_loss(student_emb, teacher_emb, mask=None, temperature=0.1, n_negatives=256, rng_seed=0):
    """NT-Xent over masked positions; embeddings (B, T, E) with mask, or rows (M, E)."""
    S, Tm = np.asarray(student_emb), np.asarray(teacher_emb)
    if mask is not None:
        m = np.asarray(mask, bool)
        S, Tm = S[m], Tm[m]
    if len(S) < 2:
        raise ValueError("contrastive loss needs at least 2 positions")
    pool = sample_negatives(len(S), n_negatives, np.random.default_rng(rng_seed))
    return contrastive_loss_and_grad(S, Tm, pool, temperature)[0]


# --------------------------------------------------------------------------
# Adam and early stopping
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, skip=()):
    """Bias-corrected Adam update of ``params`` in place for every name in ``grads``.

    Names in ``skip`` are left untouched and get no moments.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(grads):
        if name in skip:
            continue
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p, dtype=np.float64)
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        params[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def save_adam_state(state, path):
    arrays = {f"m/{k}": v for k, v in state.m.items()}
    arrays.update({f"v/{k}": v for k, v in state.v.items()})
    hyper = json.dumps({"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
                        "eps": state.eps, "step": state.step})
    with open(path, "wb") as fh:
        np.savez(fh, __hyper__=np.array(hyper), **arrays)


def load_adam_state(path):
    with np.load(path) as z:
        hyper = json.loads(str(z["__hyper__"]))
        state = AdamState(**hyper)
        for key in z.files:
            if key.startswith("m/"):
                state.m[key[2:]] = z[key].copy()
            elif key.startswith("v/"):
                state.v[key[2:]] = z[key].copy()
    return state


class EarlyStopper:
    """Keeps the best-validation snapshot; stops after ``patience`` epochs without improvement."""

    def __init__(self, patience=200):
        self.patience = int(patience)
        self.best_loss = math.inf
        self.best_epoch = -1
        self.best_tensors = None
        self.epochs_since_best = 0

    def update(self, epoch, val_loss, tensors):
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = float(val_loss)
            self.best_epoch = int(epoch)
            self.best_tensors = {k: v.copy() for k, v in tensors.items()}
            self.epochs_since_best = 0
        else:
            self.epochs_since_best += 1
        return self.epochs_since_best >= self.patience


# --------------------------------------------------------------------------
# loss + gradient evaluation
# --------------------------------------------------------------------------


def teacher_loss_and_grads(weights, feature_volume, batch):
    """Cosine loss of the teacher on ``batch`` and its parameter gradients."""
    batch = batch.trimmed()
    feats, _ = _sample_points(feature_volume, batch)
    pred, _, cache = sequence_forward(weights, feats, batch.mask)
    loss, dpred = cosine_loss_and_grad(pred, batch.labels, batch.mask)
    grads, _ = sequence_backward(weights, cache, dpred)
    return loss, grads


class StudentInputs:
    """Projected-feature sampling for one batch, differentiable in the conv kernel."""

    def __init__(self, context_volume, batch, kernel_size):
        B, T = batch.mask.shape
        self.rows = batch.mask.ravel()
        pts = batch.points[:, :T].reshape(-1, 3)[self.rows]
        idx, w, _ = trilinear_weights(context_volume, pts)
        self.voxels, self.inverse = np.unique(idx, return_inverse=True)
        self.inverse = self.inverse.reshape(idx.shape)
        self.w = w
        self.conv = ConvRows(context_volume.data, self.voxels, kernel_size)
        self.shape = (B, T)

    def forward(self, weights):
        self.proj = self.conv.forward(weights["student.conv.weight"], weights["student.conv.bias"])
        vals = np.einsum("mk,mkc->mc", self.w, self.proj[self.inverse])
        B, T = self.shape
        feats = np.zeros((B * T, vals.shape[1]))
        feats[self.rows] = vals
        return feats.reshape(B, T, -1)

    def backward(self, dfeats):
        d = dfeats.reshape(-1, dfeats.shape[-1])[self.rows]
        dproj = np.zeros_like(self.proj)
        np.add.at(dproj, self.inverse.ravel(), (self.w[:, :, None] * d[:, None, :]).reshape(-1, d.shape[1]))
        dk, db = self.conv.backward(dproj)
        return {"student.conv.weight": dk, "student.conv.bias": db}


def teacher_embeddings(teacher, feature_volume, batch):
    """Teacher MLP output at every valid step of ``batch`` (M, embed_dim)."""
    feats, _ = _sample_points(feature_volume, batch)
    return embed_forward(teacher, feats.reshape(-1, feats.shape[-1])[batch.mask.ravel()])[0]


def student_loss_and_grads(student, context_volume, batch, teacher_emb=None, lam=1.0,
                           temperature=0.1, pool=None, inputs=None):
    """Total student loss ``cosine + lam * contrastive`` and gradients.

    ``teacher_emb`` rows align with the valid steps of the trimmed batch;
    pass ``teacher_emb=None`` to drop the contrastive term entirely.
    Returns (total, cosine, contrastive, grads).
    """
    batch = batch.trimmed()
    if inputs is None:
        inputs = StudentInputs(context_volume, batch, student.config.kernel)
    feats = inputs.forward(student)
    pred, emb, cache = sequence_forward(student, feats, batch.mask)
    cos, dpred = cosine_loss_and_grad(pred, batch.labels, batch.mask)
    con = 0.0
    demb = None
    if teacher_emb is not None:
        s_rows = emb.reshape(-1, emb.shape[-1])[batch.mask.ravel()]
        if pool is None:
            pool = np.arange(len(s_rows))
        con, dcon = contrastive_loss_and_grad(s_rows, teacher_emb, pool, temperature)
        demb = lam * dcon
    grads, dfeats = sequence_backward(student, cache, dpred, demb)
    grads.update(inputs.backward(dfeats))
    return cos + lam * con, cos, con, grads


def student_validation_loss(student, context_volume, batch, inputs=None):
    batch = batch.trimmed()
    if inputs is None:
        inputs = StudentInputs(context_volume, batch, student.config.kernel)
    pred, _, _ = sequence_forward(student, inputs.forward(student), batch.mask)
    return cosine_loss(pred, batch.labels, batch.mask)


def teacher_validation_loss(teacher, feature_volume, batch):
    batch = batch.trimmed()
    feats, _ = _sample_points(feature_volume, batch)
    pred, _, _ = sequence_forward(teacher, feats, batch.mask)
    return cosine_loss(pred, batch.labels, batch.mask)


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults are desk scale."""

    epochs: int = 500
    batch_size: int = 64
    val_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 200
    rng_seed: int = 0
    lambda_contrastive: float = 1.0
    temperature: float = 0.1
    n_negatives: int = 256
    use_contrastive: bool = True

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class TrainResult:
    weights: ModelWeights
    train_curve: list
    val_curve: list
    best_epoch: int
    best_val_loss: float
    adam_state: AdamState
    stopped_early: bool

    def write_curves(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (a, b) in enumerate(zip(self.train_curve, self.val_curve)):
                w.writerow([i, repr(a), repr(b)])


def _pick(tractogram, k, rng):
    n = len(tractogram)
    if n == 0:
        raise ValueError("subject has no streamlines")
    if k >= n:
        return list(tractogram)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return [tractogram[int(i)] for i in idx]


def _val_batch(tractogram, k, seed):
    return make_batch(_pick(tractogram, k, np.random.default_rng(seed)))


def _check_finite(loss, epoch, what):
    if not math.isfinite(loss):
        raise NumericError(f"{what} loss became {loss} at epoch {epoch}")


def _adam_for(cfg, state):
    if state is not None:
        return state
    return AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def train_teacher(train, val, model_cfg=None, cfg=TrainConfig(), init=None, adam_state=None, log=None):
    """Train a teacher on ``train`` = [(feature_volume, tractogram), ...].

    Each epoch takes one random streamline batch per training subject and
    performs one Adam step on it; validation is the cosine loss over a fixed
    sample of every validation subject. Returns the best-validation
    weights (:class:`TrainResult`).
    """
    if not train or not val:
        raise ValueError("need at least one training and one validation subject")
    if init is None:
        if model_cfg is None:
            raise ValueError("model_cfg or init weights required")
        init = init_weights(model_cfg, "teacher", cfg.rng_seed)
    weights = init.astype(np.float64)
    state = _adam_for(cfg, adam_state)
    rng = np.random.default_rng(cfg.rng_seed + 1)
    val_batches = [(vol, _val_batch(t, cfg.val_size, cfg.rng_seed + 7 + i)) for i, (vol, t) in enumerate(val)]
    stopper = EarlyStopper(cfg.patience)
    train_curve, val_curve = [], []
    stopped = False
    for epoch in range(cfg.epochs):
        losses = []
        for vol, tract in train:
            batch = make_batch(_pick(tract, cfg.batch_size, rng))
            loss, grads = teacher_loss_and_grads(weights, vol, batch)
            _check_finite(loss, epoch, "training")
            adam_step(weights.tensors, grads, state)
            losses.append(loss)
        vl = float(np.mean([teacher_validation_loss(weights, vol, b) for vol, b in val_batches]))
        _check_finite(vl, epoch, "validation")
        train_curve.append(float(np.mean(losses)))
        val_curve.append(vl)
        if log is not None:
            log(epoch, train_curve[-1], vl)
        if stopper.update(epoch, vl, weights.tensors):
            stopped = True
            break
    best = ModelWeights("teacher", weights.config, stopper.best_tensors)
    return TrainResult(best, train_curve, val_curve, stopper.best_epoch, stopper.best_loss, state, stopped)


def train_student(train, val, teacher, cfg=TrainConfig(), context_channels=None, init=None,
                  adam_state=None, log=None):
    """Distil ``teacher`` into a student.

    ``train``/``val`` hold (context_volume, feature_volume, tractogram)
    triples. Only the convolution and the student embedder are updated; the
    GRU and decoder stay bit-identical to the teacher's. Validation uses the
    cosine loss alone.
    """
    if not train or not val:
        raise ValueError("need at least one training and one validation subject")
    teacher = teacher.astype(np.float64)
    if init is None:
        channels = context_channels if context_channels is not None else train[0][0].channels
        init = make_student(teacher, channels, cfg.rng_seed)
    student = init.astype(np.float64)
    frozen = set(frozen_names(student.config))
    for name in frozen:
        if not np.array_equal(student.tensors[name], teacher.tensors["teacher" + name[len("student"):]]):
            raise ValueError(f"{name} differs from the teacher's tensor")
    state = _adam_for(cfg, adam_state)
    rng = np.random.default_rng(cfg.rng_seed + 1)
    neg_rng = np.random.default_rng(cfg.rng_seed + 2)
    val_sets = []
    for i, (ctx, _, t) in enumerate(val):
        b = _val_batch(t, cfg.val_size, cfg.rng_seed + 7 + i).trimmed()
        val_sets.append((ctx, b, StudentInputs(ctx, b, student.config.kernel)))
    stopper = EarlyStopper(cfg.patience)
    train_curve, val_curve = [], []
    stopped = False
    for epoch in range(cfg.epochs):
        losses = []
        for ctx, feat, tract in train:
            batch = make_batch(_pick(tract, cfg.batch_size, rng)).trimmed()
            t_emb = None
            pool = None
            if cfg.use_contrastive:
                t_emb = teacher_embeddings(teacher, feat, batch)
                pool = sample_negatives(len(t_emb), cfg.n_negatives, neg_rng)
            total, _, _, grads = student_loss_and_grads(
                student, ctx, batch, t_emb, cfg.lambda_contrastive, cfg.temperature, pool
            )
            _check_finite(total, epoch, "training")
            adam_step(student.tensors, grads, state, skip=frozen)
            losses.append(total)
        vl = float(np.mean([student_validation_loss(student, ctx, b, inp) for ctx, b, inp in val_sets]))
        _check_finite(vl, epoch, "validation")
        train_curve.append(float(np.mean(losses)))
        val_curve.append(vl)
        if log is not None:
            log(epoch, train_curve[-1], vl)
        if stopper.update(epoch, vl, student.tensors):
            stopped = True
            break
    best = ModelWeights("student", student.config, stopper.best_tensors)
    return TrainResult(best, train_curve, val_curve, stopper.best_epoch, stopper.best_loss, state, stopped)


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------


def _smooth_random_volume(shape, channels, rng, voxel=1.0):
    """Random volume that is a low-order polynomial in space per channel."""
    grid = np.stack(np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij"), axis=-1)
    coef = rng.normal(size=(channels, 3))
    quad = rng.normal(size=(channels, 3)) * 0.5
    data = grid @ coef.T + (grid**2) @ quad.T + rng.normal(size=channels)
    return Volume(data.astype(np.float32), Affine.scaling(voxel))


def _random_streamlines(rng, n, length, dims, step=0.7):
    out = []
    hi = np.asarray(dims, float) - 1.0
    for _ in range(n):
        p = rng.uniform(1.5, hi - 1.5)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        pts = [p]
        for _ in range(length - 1):
            d = d + 0.4 * rng.normal(size=3)
            d /= np.linalg.norm(d)
            nxt = np.clip(pts[-1] + step * d, 0.2, hi - 0.2)
            if np.allclose(nxt, pts[-1]):
                nxt = pts[-1] + 0.1 * d
            pts.append(nxt)
        out.append(Streamline(np.array(pts)))
    return out


def _away_from_kinks(w, batch, rng):
    """Random batch-norm affine parameters that keep every leaky-ReLU input
    at least 0.5 from the kink.

    Normalized activations of M rows are bounded by sqrt(M - 1), so a shift
    of random sign exceeding |scale| * sqrt(M) + 0.5 fixes each unit's branch
    and finite differences never straddle the kink. Both slopes stay covered.
    """
    bound = np.sqrt(batch.n_steps)
    for name in list(w.tensors):
        if name.endswith(".bn.weight"):
            gamma = 1.0 + 0.3 * rng.normal(size=w.tensors[name].shape)
            sign = rng.choice([-1.0, 1.0], size=gamma.shape)
            w.tensors[name] = gamma
            w.tensors[name.replace(".weight", ".bias")] = sign * (np.abs(gamma) * bound + 0.5 + rng.uniform(size=gamma.shape))
    return w


def grad_check_problem(model_cfg, role, rng_seed, n_streamlines=3, n_points=6, dims=(6, 6, 6)):
    """Tiny random problem: (weights, loss_fn, grads_fn) in float64.

    ``loss_fn(weights)`` is the total loss; ``grads_fn(weights)`` its
    analytic gradient dict. The student problem includes the contrastive term.
    """
    rng = np.random.default_rng(rng_seed)
    batch = make_batch(_random_streamlines(rng, n_streamlines, n_points, dims))
    if role == "teacher":
        vol = _smooth_random_volume(dims, model_cfg.c_in, rng)
        w = _away_from_kinks(init_weights(model_cfg, "teacher", rng_seed), batch, rng)

        def loss_fn(wt):
            return teacher_loss_and_grads(wt, vol, batch)[0]

        def grads_fn(wt):
            return teacher_loss_and_grads(wt, vol, batch)[1]

        return w, loss_fn, grads_fn
    if role != "student":
        raise ValueError(f"unknown role {role!r}")
    teacher = init_weights(model_cfg, "teacher", rng_seed + 1000)
    feat = _smooth_random_volume(dims, model_cfg.c_in, rng)
    ctx = _smooth_random_volume(dims, model_cfg.context_channels, rng)
    w = _away_from_kinks(make_student(teacher, model_cfg.context_channels, rng_seed), batch, rng)
    tb = batch.trimmed()
    t_emb = teacher_embeddings(teacher, feat, tb)
    pool = sample_negatives(len(t_emb), 256, np.random.default_rng(rng_seed))
    inputs = StudentInputs(ctx, tb, model_cfg.kernel)

    def loss_fn(wt):
        return student_loss_and_grads(wt, ctx, tb, t_emb, 1.0, 0.1, pool, inputs)[0]

    def grads_fn(wt):
        return student_loss_and_grads(wt, ctx, tb, t_emb, 1.0, 0.1, pool, inputs)[3]

    return w, loss_fn, grads_fn


def finite_difference(weights, loss_fn, name, h=1e-3, entries=None):
    """Central differences of ``loss_fn`` w.r.t. tensor ``name`` (optionally a subset of flat entries)."""
    p = weights.tensors[name]
    flat = p.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = loss_fn(weights)
        flat[i] = old - h
        fm = loss_fn(weights)
        flat[i] = old
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(p.shape)


def relative_error(a, n, floor=1e-6):
    """||a - n|| / max(||a||, ||n||, floor).

    The floor only matters for tensors whose true gradient vanishes, such as
    linear biases directly followed by batch norm; there finite differences
    return pure roundoff.
    """
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def grad_check(model_cfg, rng_seed=0, role="teacher", h=1e-3, corrupt=None):
    """Max over parameter tensors of the relative error between analytic and
    central finite-difference gradients on a tiny random problem.

    Every entry of every tensor is perturbed. ``corrupt`` is a test hook
    that receives and returns the analytic gradient dict.
    Returns (max_error, {tensor_name: error}).
    """
    weights, loss_fn, grads_fn = grad_check_problem(model_cfg, role, rng_seed)
    weights = weights.astype(np.float64)
    grads = grads_fn(weights)
    if corrupt is not None:
        grads = corrupt(grads)
    errors = {}
    for name in weights.names():
        fd = finite_difference(weights, loss_fn, name, h)
        errors[name] = relative_error(grads[name], fd)
    return max(errors.values()), errors
