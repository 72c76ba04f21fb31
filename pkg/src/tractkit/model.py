"""Recurrent tracking network: MLP embedder, stacked GRU, concatenation
decoder and the student's 7x7x7 convolutional projection.

All parameters live in a flat ``{name: ndarray}`` mapping inside
:class:`ModelWeights`; names are canonical, e.g.
``teacher.embed.block0.linear.weight`` or ``student.gru.layer1.weight_hh``.
Linear weights are stored (out, in); GRU gate rows are ordered (r, z, n).

Forward passes return caches consumed by the matching ``*_backward``
functions, which compute exact adjoints. Computation happens in float64;
the weights container stores float32.

Batch normalization always uses the statistics of the batch it is given,
so outputs depend on the batch composition.
"""

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .errors import BadMagicError, ChecksumError, MissingTensorError, ShapeMismatchError, TruncatedDataError, UnknownTensorError
from .volumes import Volume, trilinear

ROLES = ("teacher", "student")
WEIGHTS_MAGIC = b"CRNNWT1\x00"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the full-scale network."""

    c_in: int = 4
    embed_dim: int = 512
    hidden: int = 512
    n_blocks: int = 4
    n_layers: int = 2
    n_out: int = 2
    context_channels: int = 123
    kernel: int = 7
    leaky_slope: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        for name in ("c_in", "embed_dim", "hidden", "n_blocks", "n_layers", "n_out", "context_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    @classmethod
    def tiny(cls, c_in=4, context_channels=5):
        return cls(c_in=c_in, embed_dim=8, hidden=8, context_channels=context_channels)

    @classmethod
    def desk(cls, c_in=4, context_channels=8):
        return cls(c_in=c_in, embed_dim=32, hidden=32, context_channels=context_channels)

    @property
    def padding(self):
        return self.kernel // 2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def tensor_shapes(self, role):
        """Ordered mapping of canonical tensor name to shape for ``role``."""
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        shapes = {}
        if role == "student":
            k = self.kernel
            shapes["student.conv.weight"] = (self.c_in, self.context_channels, k, k, k)
            shapes["student.conv.bias"] = (self.c_in,)
        fan_in = self.c_in
        for i in range(self.n_blocks):
            b = f"{role}.embed.block{i}"
            shapes[f"{b}.linear.weight"] = (self.embed_dim, fan_in)
            shapes[f"{b}.linear.bias"] = (self.embed_dim,)
            shapes[f"{b}.bn.weight"] = (self.embed_dim,)
            shapes[f"{b}.bn.bias"] = (self.embed_dim,)
            fan_in = self.embed_dim
        fan_in = self.embed_dim
        for layer in range(self.n_layers):
            g = f"{role}.gru.layer{layer}"
            shapes[f"{g}.weight_ih"] = (3 * self.hidden, fan_in)
            shapes[f"{g}.weight_hh"] = (3 * self.hidden, self.hidden)
            shapes[f"{g}.bias_ih"] = (3 * self.hidden,)
            shapes[f"{g}.bias_hh"] = (3 * self.hidden,)
            fan_in = self.hidden
        shapes[f"{role}.decoder.weight"] = (self.n_out, self.embed_dim + self.hidden)
        shapes[f"{role}.decoder.bias"] = (self.n_out,)
        return shapes


def frozen_names(cfg):
    """Student tensors shared with (and frozen to) the teacher."""
    return [n for n in cfg.tensor_shapes("student") if ".gru." in n or ".decoder." in n]


class ModelWeights:
    """Named parameter tensors for one role plus the architecture config."""

    def __init__(self, role, config, tensors):
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.role = role
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.config.tensor_shapes(self.role))

    def copy(self):
        return ModelWeights(self.role, self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype):
        return ModelWeights(self.role, self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def n_parameters(self):
        return int(sum(v.size for v in self.tensors.values()))


def init_weights(cfg, role="teacher", rng_seed=0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; batch-norm scale 1, shift 0."""
    rng = np.random.default_rng(rng_seed)
    tensors = {}
    for name, shape in cfg.tensor_shapes(role).items():
        if name.endswith("bn.weight"):
            tensors[name] = np.ones(shape)
        elif name.endswith("bn.bias"):
            tensors[name] = np.zeros(shape)
        else:
            if ".gru." in name:
                fan_in = cfg.hidden
            elif ".conv." in name:
                fan_in = cfg.context_channels * cfg.kernel**3
            else:
                wname = name.replace(".bias", ".weight")
                fan_in = cfg.tensor_shapes(role)[wname][1]
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelWeights(role, cfg, tensors)


def make_student(teacher, context_channels=None, rng_seed=0):
    """Fresh student whose GRU and decoder are bit-identical copies of ``teacher``'s."""
    if teacher.role != "teacher":
        raise ValueError("make_student needs teacher weights")
    cfg = teacher.config
    if context_channels is not None and context_channels != cfg.context_channels:
        cfg = ModelConfig(**{**cfg.to_dict(), "context_channels": int(context_channels)})
    student = init_weights(cfg, "student", rng_seed)
    for name in frozen_names(cfg):
        student.tensors[name] = teacher.tensors["teacher" + name[len("student"):]].copy()
    return student


def _p(weights, name):
    return np.asarray(weights.tensors[f"{weights.role}.{name}"], dtype=np.float64)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --------------------------------------------------------------------------
# embedder
# --------------------------------------------------------------------------


def embed_forward(weights, X, return_preact=False):
    """MLP embedding of feature rows (M, C_in) -> (M, embed_dim).

    Every block is linear -> batch norm (statistics of these M rows) ->
    leaky ReLU. Raises ValueError for M < 2.
    """
    cfg = weights.config
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != weights.tensors[f"{weights.role}.embed.block0.linear.weight"].shape[1]:
        raise ValueError(f"embed expects (M, {cfg.c_in}) features, got {X.shape}")
    if len(X) < 2:
        raise ValueError("batch normalization needs at least 2 rows")
    caches = []
    h = X
    preacts = []
    for i in range(cfg.n_blocks):
        b = f"embed.block{i}"
        W, bias = _p(weights, f"{b}.linear.weight"), _p(weights, f"{b}.linear.bias")
        gamma, beta = _p(weights, f"{b}.bn.weight"), _p(weights, f"{b}.bn.bias")
        a = h @ W.T + bias
        mu = a.mean(axis=0)
        c = a - mu
        var = (c * c).mean(axis=0)
        inv = 1.0 / np.sqrt(var + cfg.bn_eps)
        xhat = c * inv
        y = gamma * xhat + beta
        out = np.where(y > 0, y, cfg.leaky_slope * y)
        caches.append((h, xhat, inv, y))
        preacts.append(y)
        h = out
    if return_preact:
        return h, caches, preacts
    return h, caches


def embed_backward(weights, caches, dY):
    """Returns ({name: grad}, dX)."""
    cfg = weights.config
    grads = {}
    d = dY
    for i in reversed(range(cfg.n_blocks)):
        b = f"embed.block{i}"
        h, xhat, inv, y = caches[i]
        m = len(h)
        dy = np.where(y > 0, d, cfg.leaky_slope * d)
        grads[f"{weights.role}.{b}.bn.weight"] = (dy * xhat).sum(axis=0)
        grads[f"{weights.role}.{b}.bn.bias"] = dy.sum(axis=0)
        dxhat = dy * _p(weights, f"{b}.bn.weight")
        da = inv / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        grads[f"{weights.role}.{b}.linear.weight"] = da.T @ h
        grads[f"{weights.role}.{b}.linear.bias"] = da.sum(axis=0)
        d = da @ _p(weights, f"{b}.linear.weight")
    return grads, d


def embed(weights, X):
    return embed_forward(weights, X)[0]


# --------------------------------------------------------------------------
# GRU
# --------------------------------------------------------------------------


def _gru_cell(x_gates, h, W_hh, b_hh, H):
    gh = h @ W_hh.T + b_hh
    r = _sigmoid(x_gates[:, :H] + gh[:, :H])
    z = _sigmoid(x_gates[:, H : 2 * H] + gh[:, H : 2 * H])
    n = np.tanh(x_gates[:, 2 * H :] + r * gh[:, 2 * H :])
    return (1.0 - z) * n + z * h, (r, z, n, gh[:, 2 * H :])


def recurrent_step(weights, x, hidden):
    """One step of the stacked GRU.

    Parameters
    ----------
    x : ndarray, shape (B, embed_dim)
    hidden : ndarray, shape (n_layers, B, hidden)

    Returns
    -------
    output : (B, hidden), the top layer's new state
    hidden : (n_layers, B, hidden)
    """
    cfg = weights.config
    x = np.asarray(x, dtype=np.float64)
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.shape != (cfg.n_layers, len(x), cfg.hidden):
        raise ValueError(f"hidden must be {(cfg.n_layers, len(x), cfg.hidden)}, got {hidden.shape}")
    if x.ndim != 2 or x.shape[1] != cfg.embed_dim:
        raise ValueError(f"input must be (B, {cfg.embed_dim}), got {x.shape}")
    new = np.empty_like(hidden)
    inp = x
    for layer in range(cfg.n_layers):
        g = f"gru.layer{layer}"
        xg = inp @ _p(weights, f"{g}.weight_ih").T + _p(weights, f"{g}.bias_ih")
        new[layer], _ = _gru_cell(xg, hidden[layer], _p(weights, f"{g}.weight_hh"), _p(weights, f"{g}.bias_hh"), cfg.hidden)
        inp = new[layer]
    return inp, new


def gru_forward(weights, X):
    """Run the stacked GRU over (B, T, embed_dim) from zero state -> (B, T, hidden)."""
    cfg = weights.config
    B, T, _ = X.shape
    H = cfg.hidden
    caches = []
    inp = X
    for layer in range(cfg.n_layers):
        g = f"gru.layer{layer}"
        W_ih, b_ih = _p(weights, f"{g}.weight_ih"), _p(weights, f"{g}.bias_ih")
        W_hh, b_hh = _p(weights, f"{g}.weight_hh"), _p(weights, f"{g}.bias_hh")
        XG = inp @ W_ih.T + b_ih
        h = np.zeros((B, H))
        outs = np.empty((B, T, H))
        steps = []
        for t in range(T):
            h_prev = h
            h, parts = _gru_cell(XG[:, t], h_prev, W_hh, b_hh, H)
            outs[:, t] = h
            steps.append((h_prev, parts))
        caches.append((inp, steps))
        inp = outs
    return inp, caches


def gru_backward(weights, caches, dOut):
    """Adjoint of :func:`gru_forward`; returns ({name: grad}, dX)."""
    cfg = weights.config
    H = cfg.hidden
    grads = {}
    d_above = dOut
    for layer in reversed(range(cfg.n_layers)):
        g = f"gru.layer{layer}"
        W_ih, W_hh = _p(weights, f"{g}.weight_ih"), _p(weights, f"{g}.weight_hh")
        inp, steps = caches[layer]
        B, T, _ = inp.shape
        dXG = np.empty((B, T, 3 * H))
        dGH = np.empty((B, T, 3 * H))
        Hprev = np.empty((B, T, H))
        dh_next = np.zeros((B, H))
        for t in reversed(range(T)):
            h_prev, (r, z, n, ghn) = steps[t]
            dh = d_above[:, t] + dh_next
            dn = dh * (1.0 - z)
            dz = dh * (h_prev - n)
            dan = dn * (1.0 - n * n)
            dar = dan * ghn * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dXG[:, t] = np.concatenate([dar, daz, dan], axis=1)
            dgh = np.concatenate([dar, daz, dan * r], axis=1)
            dGH[:, t] = dgh
            Hprev[:, t] = h_prev
            dh_next = dh * z + dgh @ W_hh
        fx = dXG.reshape(-1, 3 * H)
        fh = dGH.reshape(-1, 3 * H)
        grads[f"{weights.role}.{g}.weight_ih"] = fx.T @ inp.reshape(B * T, -1)
        grads[f"{weights.role}.{g}.bias_ih"] = fx.sum(axis=0)
        grads[f"{weights.role}.{g}.weight_hh"] = fh.T @ Hprev.reshape(B * T, H)
        grads[f"{weights.role}.{g}.bias_hh"] = fh.sum(axis=0)
        d_above = dXG @ W_ih
    return grads, d_above


# --------------------------------------------------------------------------
# decoder
# --------------------------------------------------------------------------


def decode(weights, emb, gru_out):
    """Linear map of concat(emb, gru_out) to raw (azimuth, zenith)."""
    z = np.concatenate([np.asarray(emb, np.float64), np.asarray(gru_out, np.float64)], axis=-1)
    return z @ _p(weights, "decoder.weight").T + _p(weights, "decoder.bias")


# --------------------------------------------------------------------------
# convolutional projection
# --------------------------------------------------------------------------


def _pad(data, p):
    return np.pad(np.asarray(data, dtype=np.float64), ((p, p), (p, p), (p, p), (0, 0)))


def conv_project_array(kernel, bias, data):
    """Shape-preserving 3D correlation of (nx, ny, nz, C_ctx) data.

    ``kernel`` is (C_out, C_ctx, k, k, k) and taps are applied without
    flipping; the border is zero padded by k // 2.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    c_out, c_ctx, k = kernel.shape[:3]
    if data.shape[3] != c_ctx:
        raise ValueError(f"volume has {data.shape[3]} channels, kernel expects {c_ctx}")
    nx, ny, nz, _ = data.shape
    xp = _pad(data, k // 2)
    out = np.zeros((nx * ny * nz, c_out))
    for i in range(k):
        for j in range(k):
            for l in range(k):
                patch = xp[i : i + nx, j : j + ny, l : l + nz].reshape(-1, c_ctx)
                out += patch @ kernel[:, :, i, j, l].T
    out += np.asarray(bias, dtype=np.float64)
    return out.reshape(nx, ny, nz, c_out)


def conv_project(weights, volume):
    """Project a context volume to the student's feature channels (float32 Volume)."""
    if weights.role != "student":
        raise ValueError("only student weights carry a convolutional projection")
    out = conv_project_array(weights["student.conv.weight"], weights["student.conv.bias"], volume.data)
    return Volume(out.astype(np.float32), volume.voxel_to_world)


class ConvRows:
    """Convolution evaluated only at selected voxels, with its adjoint.

    Training only needs the projected volume at voxels that trilinear
    sampling touches; this evaluates exactly those rows of
    :func:`conv_project_array`.
    """

    MAX_PATCH = 1 << 22

    def __init__(self, data, flat_voxels, kernel_size):
        nx, ny, nz, c = data.shape
        p = kernel_size // 2
        self.k = kernel_size
        self.c = c
        self.xp = _pad(data, p).reshape(-1, c)
        cx, cy, cz = np.unravel_index(np.asarray(flat_voxels), (nx, ny, nz))
        sy, sz = ny + 2 * p, nz + 2 * p
        base = (cx * sy + cy) * sz + cz
        r = np.arange(kernel_size)
        taps = ((r[:, None, None] * sy + r[None, :, None]) * sz + r[None, None, :]).ravel()
        self.base = base
        self.taps = taps
        self._cache = None

    def _patches(self):
        # (rows, C * k^3) im2col matrix, built once when small enough
        if self._cache is None and len(self.base) * self.c * len(self.taps) <= self.MAX_PATCH:
            g = self.xp[self.base[:, None] + self.taps[None, :]]  # (rows, k^3, C)
            self._cache = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(len(self.base), -1)
        return self._cache

    def forward(self, kernel, bias):
        k = self.k
        c_out = kernel.shape[0]
        kern = np.asarray(kernel, dtype=np.float64).reshape(c_out, self.c, k**3)
        patches = self._patches()
        if patches is not None:
            out = patches @ kern.reshape(c_out, -1).T
        else:
            out = np.zeros((len(self.base), c_out))
            for t, off in enumerate(self.taps):
                out += self.xp[self.base + off] @ kern[:, :, t].T
        return out + np.asarray(bias, dtype=np.float64)

    def backward(self, dOut):
        """Gradients (kernel, bias) for upstream (n_rows, C_out)."""
        k = self.k
        c_out = dOut.shape[1]
        patches = self._patches()
        if patches is not None:
            dk = (dOut.T @ patches).reshape(c_out, self.c, k**3)
        else:
            dk = np.empty((c_out, self.c, k**3))
            for t, off in enumerate(self.taps):
                dk[:, :, t] = dOut.T @ self.xp[self.base + off]
        return dk.reshape(c_out, self.c, k, k, k), dOut.sum(axis=0)


# --------------------------------------------------------------------------
# whole-sequence forward/backward
# --------------------------------------------------------------------------


def sequence_forward(weights, feats, mask):
    """Network over padded sequences.

    Parameters
    ----------
    feats : ndarray, shape (B, T, C_in)
        Sampled features at each step's start point.
    mask : ndarray of bool, shape (B, T)
        Valid steps; each row must be a prefix of True values.

    Returns
    -------
    pred : (B, T, 2) raw angles
    emb : (B, T, embed_dim), zero at padded steps
    cache : opaque, for :func:`sequence_backward`
    """
    cfg = weights.config
    B, T, C = feats.shape
    rows = np.asarray(mask, bool).ravel()
    E, ecache = embed_forward(weights, feats.reshape(-1, C)[rows])
    emb = np.zeros((B * T, cfg.embed_dim))
    emb[rows] = E
    emb = emb.reshape(B, T, cfg.embed_dim)
    G, gcache = gru_forward(weights, emb)
    pred = decode(weights, emb, G)
    return pred, emb, (rows, ecache, gcache, emb, G, feats.shape)


def sequence_backward(weights, cache, dpred, demb_rows=None):
    """Adjoint of :func:`sequence_forward`.

    ``demb_rows`` optionally adds an upstream gradient on the embedding of
    the valid rows (M, embed_dim), in row-major masked order.

    Returns ({name: grad}, dfeats (B, T, C_in)).
    """
    cfg = weights.config
    rows, ecache, gcache, emb, G, shape = cache
    B, T, C = shape
    Ed = cfg.embed_dim
    Z = np.concatenate([emb, G], axis=-1).reshape(B * T, -1)
    dP = dpred.reshape(B * T, -1)
    grads = {
        f"{weights.role}.decoder.weight": dP.T @ Z,
        f"{weights.role}.decoder.bias": dP.sum(axis=0),
    }
    dZ = dpred @ _p(weights, "decoder.weight")
    g_grads, demb_gru = gru_backward(weights, gcache, dZ[..., Ed:])
    grads.update(g_grads)
    demb = (dZ[..., :Ed] + demb_gru).reshape(B * T, Ed)[rows]
    if demb_rows is not None:
        demb = demb + demb_rows
    e_grads, dX = embed_backward(weights, ecache, demb)
    grads.update(e_grads)
    dfeats = np.zeros((B * T, C))
    dfeats[rows] = dX
    return grads, dfeats.reshape(B, T, C)


def _single_forward(weights, volume, points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
        raise ValueError("points must be (L, 3) with L >= 2")
    feats, _ = trilinear(volume, pts[:-1])
    pred, emb, _ = sequence_forward(weights, feats[None], np.ones((1, len(pts) - 1), bool))
    return pred[0], emb[0]


def teacher_forward(weights, feature_volume, points):
    """Per-step raw angle predictions (L-1, 2) and embeddings (L-1, embed_dim).

    Row ``i`` predicts the step from point ``i`` to ``i+1``; the last point
    has no label and is not evaluated.
    """
    if weights.role != "teacher":
        raise ValueError("teacher_forward needs teacher weights")
    return _single_forward(weights, feature_volume, points)


def student_forward(weights, context_volume, points, projected=None):
    """As :func:`teacher_forward` on the projected context volume.

    Pass ``projected`` (from :func:`conv_project`) to reuse a cached projection.
    """
    if weights.role != "student":
        raise ValueError("student_forward needs student weights")
    if projected is None:
        projected = conv_project(weights, context_volume)
    return _single_forward(weights, projected, points)


# --------------------------------------------------------------------------
# weights container
# --------------------------------------------------------------------------


def _checksum(payload):
    return zlib.adler32(payload) & 0xFFFFFFFF


def save_weights(weights, path, write_config=True):
    """Write the binary container and (optionally) a ``.json`` config sidecar."""
    parts = [struct.pack("<I", len(weights.tensors))]
    for name in weights.names():
        arr = np.ascontiguousarray(weights.tensors[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC + payload + struct.pack("<Q", _checksum(payload)))
    if write_config:
        with open(path + ".json", "w") as fh:
            json.dump({"role": weights.role, "config": weights.config.to_dict()}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_tensors(path):
    """Raw ``{name: float32 array}`` from a container, checksum verified."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(WEIGHTS_MAGIC):
        raise BadMagicError(f"{path}: not a CRNNWT1 weights file")
    if len(raw) < len(WEIGHTS_MAGIC) + 12:
        raise TruncatedDataError(f"{path}: weights file too short")
    payload, (stored,) = raw[8:-8], struct.unpack("<Q", raw[-8:])
    if _checksum(payload) != stored:
        raise ChecksumError(f"{path}: checksum mismatch")
    tensors = {}
    try:
        (count,) = struct.unpack_from("<I", payload, 0)
        pos = 4
        for _ in range(count):
            (n,) = struct.unpack_from("<H", payload, pos)
            name = payload[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", payload, pos)
            dims = struct.unpack_from(f"<{rank}Q", payload, pos + 1)
            pos += 1 + 8 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(payload):
                raise TruncatedDataError(f"{path}: tensor {name} is truncated")
            tensors[name] = np.frombuffer(payload, "<f4", size, pos).reshape(dims).copy()
            pos += 4 * size
    except struct.error as exc:
        raise TruncatedDataError(f"{path}: malformed tensor table") from exc
    return tensors


def infer_config(tensors):
    """Recover a ModelConfig from tensor shapes (any role prefix)."""
    stripped = {n.split(".", 1)[1]: v.shape for n, v in tensors.items()}
    try:
        w0 = stripped["embed.block0.linear.weight"]
        hh = stripped["gru.layer0.weight_hh"]
        dec = stripped["decoder.weight"]
    except KeyError as exc:
        raise MissingTensorError(f"cannot infer architecture, missing {exc.args[0]}") from None
    n_blocks = sum(1 for n in stripped if n.startswith("embed.block") and n.endswith("linear.weight"))
    n_layers = sum(1 for n in stripped if n.startswith("gru.layer") and n.endswith("weight_hh"))
    conv = stripped.get("conv.weight")
    return ModelConfig(
        c_in=w0[1], embed_dim=w0[0], hidden=hh[1], n_blocks=n_blocks, n_layers=n_layers,
        n_out=dec[0], context_channels=conv[1] if conv else ModelConfig.context_channels,
        kernel=conv[2] if conv else ModelConfig.kernel,
    )


def load_weights(path, role=None, config=None):
    """Load a container, validated against the architecture for ``role``.

    The config comes from ``config``, else the ``.json`` sidecar, else the
    tensor shapes. The role defaults to the sidecar's or the name prefix.

    Raises
    ------
    BadMagicError, ChecksumError, TruncatedDataError
        Container damage.
    MissingTensorError, UnknownTensorError, ShapeMismatchError
        Mismatch against the declared architecture; the message names the
        first offending tensor.
    """
    tensors = read_tensors(path)
    side = path + ".json"
    meta = None
    if os.path.exists(side):
        with open(side) as fh:
            meta = json.load(fh)
    if role is None:
        role = meta["role"] if meta else next(iter(tensors), "teacher.").split(".", 1)[0]
    if config is None:
        config = ModelConfig.from_dict(meta["config"]) if meta else infer_config(tensors)
    expected = config.tensor_shapes(role)
    for name in expected:
        if name not in tensors:
            raise MissingTensorError(f"{path}: missing tensor {name}")
    for name in tensors:
        if name not in expected:
            raise UnknownTensorError(f"{path}: unknown tensor {name}")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise ShapeMismatchError(f"{path}: {name} has shape {tensors[name].shape}, expected {shape}")
    return ModelWeights(role, config, {n: tensors[n] for n in expected})


__all__ = [
    "ConvRows", "ModelConfig", "ModelWeights", "conv_project", "conv_project_array",
    "decode", "embed", "embed_backward", "embed_forward", "frozen_names", "gru_backward",
    "gru_forward", "infer_config", "init_weights", "load_weights", "make_student",
    "read_tensors", "recurrent_step", "save_weights", "sequence_backward", "sequence_forward",
    "student_forward", "teacher_forward",
]
