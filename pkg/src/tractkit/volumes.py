"""Multichannel 3D volumes, trilinear sampling and a minimal NIfTI-1 codec.

Volume data are held as float32 arrays of shape (nx, ny, nz, C). Voxel
centers sit at integer voxel coordinates; ``voxel_to_world`` maps them to
millimeters.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, TruncatedDataError, UnsupportedDatatypeError
from .geometry import Affine

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352

# datatype code -> numpy dtype character
_NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4"}


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    voxel_to_world: Affine

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim == 3:
            d = d[..., None]
        if d.ndim != 4 or min(d.shape) < 1:
            raise ValueError(f"volume data must be (nx, ny, nz, C), got {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def dims(self):
        return self.data.shape[:3]

    @property
    def channels(self):
        return self.data.shape[3]

    @property
    def voxel_size(self):
        return np.linalg.norm(self.voxel_to_world.linear, axis=0)

    def world_to_voxel(self, points):
        return self.voxel_to_world.inverse().apply(points)

    def voxel_centers(self):
        """World coordinates of all voxel centers, shape (nx, ny, nz, 3)."""
        grid = np.stack(np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij"), axis=-1)
        return self.voxel_to_world.apply(grid.reshape(-1, 3)).reshape(*self.dims, 3)

    def with_data(self, data):
        return Volume(data, self.voxel_to_world)


def _corner_weights(vox, dims):
    """Lower corner indices, fractional offsets and in-bounds flags."""
    dims = np.asarray(dims)
    upper = np.maximum(dims - 2, 0)
    inside = np.all((vox >= 0) & (vox <= dims - 1), axis=-1)
    base = np.clip(np.floor(vox), 0, upper).astype(np.int64)
    frac = np.where(dims > 1, vox - base, 0.0)
    nxt = np.minimum(base + 1, dims - 1)
    return base, nxt, frac, inside


def trilinear_weights(volume, points):
    """Corner flat indices (M, 8), blend weights (M, 8) and in-bounds flags.

    Out-of-bounds rows get all-zero weights, so any linear use of the weights
    yields zeros there.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    vox = volume.world_to_voxel(pts)
    nx, ny, nz = volume.dims
    base, nxt, f, inside = _corner_weights(vox, (nx, ny, nz))
    idx = np.empty((len(pts), 8), dtype=np.int64)
    w = np.empty((len(pts), 8))
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    k = 0
    for cx, wx in ((base[:, 0], 1 - fx), (nxt[:, 0], fx)):
        for cy, wy in ((base[:, 1], 1 - fy), (nxt[:, 1], fy)):
            for cz, wz in ((base[:, 2], 1 - fz), (nxt[:, 2], fz)):
                idx[:, k] = (cx * ny + cy) * nz + cz
                w[:, k] = wx * wy * wz
                k += 1
    w[~inside] = 0.0
    idx[~inside] = 0
    return idx, w, inside


def trilinear(volume, points):
    """Sample a volume at world points.

    Parameters
    ----------
    volume : Volume
    points : array_like, shape (M, 3) or (3,)

    Returns
    -------
    values : ndarray, shape (M, C) (or (C,) for a single point)
        Trilinear blend of the 8 surrounding voxel centers; zeros where any
        corner falls outside the grid.
    in_bounds : ndarray of bool, shape (M,) (or scalar)
    """
    single = np.ndim(points) == 1
    idx, w, inside = trilinear_weights(volume, points)
    flat = volume.data.reshape(-1, volume.channels).astype(np.float64)
    values = np.einsum("mk,mkc->mc", w, flat[idx])
    if single:
        return values[0], bool(inside[0])
    return values, inside


def trilinear_backward(volume_shape, idx, w, dvalues):
    """Adjoint of :func:`trilinear`: scatter value gradients onto voxels."""
    nx, ny, nz, c = volume_shape
    grad = np.zeros((nx * ny * nz, c))
    np.add.at(grad, idx.ravel(), (w[:, :, None] * dvalues[:, None, :]).reshape(-1, c))
    return grad.reshape(nx, ny, nz, c)


# --------------------------------------------------------------------------
# NIfTI-1
# --------------------------------------------------------------------------

_HEADER_FMT = (
    "i10s18sihcb"  # sizeof_hdr, data_type, db_name, extents, session_error, regular, dim_info
    "8h"  # dim
    "3fh"  # intent_p1..3, intent_code
    "hhh"  # datatype, bitpix, slice_start
    "8f"  # pixdim
    "f"  # vox_offset
    "ff"  # scl_slope, scl_inter
    "hcb"  # slice_end, slice_code, xyzt_units
    "ffff"  # cal_max, cal_min, slice_duration, toffset
    "ii"  # glmax, glmin
    "80s24s"  # descrip, aux_file
    "hh"  # qform_code, sform_code
    "6f"  # quatern_b..d, qoffset_x..z
    "12f"  # srow_x, srow_y, srow_z
    "16s4s"  # intent_name, magic
)
assert struct.calcsize("<" + _HEADER_FMT) == NIFTI_HEADER_SIZE


def _detect_endian(raw):
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == NIFTI_HEADER_SIZE:
            return endian
    raise BadMagicError("sizeof_hdr is not 348 in either byte order")


def read_nifti(path):
    """Read an uncompressed single-file (or .hdr-style magic) NIfTI-1 volume."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise TruncatedDataError(f"{path}: file shorter than a NIfTI-1 header")
    endian = _detect_endian(raw)
    h = struct.unpack(endian + _HEADER_FMT, raw[:NIFTI_HEADER_SIZE])
    magic = h[-1]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagicError(f"{path}: missing NIfTI-1 magic, got {magic!r}")
    dim = h[7:15]
    datatype = h[19]
    pixdim = h[22:30]
    vox_offset = h[30]
    scl_slope, scl_inter = h[31], h[32]
    sform_code = h[45]
    srow = np.array(h[52:64], dtype=np.float64).reshape(3, 4)

    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported NIfTI datatype code {datatype}")
    ndim = dim[0]
    if ndim not in (3, 4):
        raise UnsupportedDatatypeError(f"{path}: dim[0] must be 3 or 4, got {ndim}")
    shape = [int(d) for d in dim[1:4]]
    channels = int(dim[4]) if ndim == 4 else 1
    if min(shape) < 1 or channels < 1:
        raise UnsupportedDatatypeError(f"{path}: invalid dimensions {dim}")

    dtype = np.dtype(endian + _NIFTI_DTYPES[datatype])
    count = shape[0] * shape[1] * shape[2] * channels
    offset = int(vox_offset) if vox_offset >= NIFTI_HEADER_SIZE else NIFTI_VOX_OFFSET
    if len(raw) < offset + count * dtype.itemsize:
        raise TruncatedDataError(f"{path}: expected {count} samples after byte {offset}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    # file order: x fastest, channel slowest
    data = data.reshape((channels, shape[2], shape[1], shape[0])).transpose(3, 2, 1, 0)
    data = data.astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        data = data * np.float32(scl_slope if scl_slope != 0 else 1.0) + np.float32(scl_inter)

    if sform_code > 0:
        affine = Affine(srow[:, :3], srow[:, 3])
    else:
        affine = Affine.scaling([abs(p) if p != 0 else 1.0 for p in pixdim[1:4]])
    return Volume(np.ascontiguousarray(data), affine)


def write_nifti(volume, path):
    """Write a float32 little-endian NIfTI-1 file with the sform set."""
    nx, ny, nz, c = volume.data.shape
    ndim = 4 if c > 1 else 3
    dim = (ndim, nx, ny, nz, c if c > 1 else 1, 1, 1, 1)
    vs = volume.voxel_size
    pixdim = (1.0, vs[0], vs[1], vs[2], 1.0, 1.0, 1.0, 1.0)
    srow = np.hstack([volume.voxel_to_world.linear, volume.voxel_to_world.translation[:, None]])
    header = struct.pack(
        "<" + _HEADER_FMT,
        NIFTI_HEADER_SIZE, b"", b"", 0, 0, b"r", 0,
        *dim,
        0.0, 0.0, 0.0, 0,
        16, 32, 0,
        *pixdim,
        float(NIFTI_VOX_OFFSET),
        1.0, 0.0,
        0, b"\x00", 10,  # xyzt_units: mm + sec
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"tractkit", b"",
        0, 2,  # qform unset, sform aligned
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        *srow.ravel().tolist(),
        b"", b"n+1\x00",
    )
    payload = np.ascontiguousarray(volume.data.transpose(3, 2, 1, 0), dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00\x00\x00\x00")  # no extensions
        fh.write(payload)
