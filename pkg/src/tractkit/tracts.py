"""Tractogram container, TCK read/write, seed sidecar files and subsampling.

TCK layout::

    mrtrix tracks
    datatype: Float32LE
    count: <N>
    file: . <offset>
    END
    <binary: float32 LE triplets; NaN triplet ends a streamline, Inf triplet ends the file>

TCK carries no seed information. Seeds live in a ``.seeds.txt`` sidecar with
one nonnegative integer per line; without it every seed index is 0.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagicError, FormatError, MissingHeaderKeyError, TruncatedDataError, UnsupportedDatatypeError
from .geometry import Streamline, collapse_duplicates

TCK_MAGIC = "mrtrix tracks"


@dataclass(frozen=True)
class Tractogram:
    streamlines: list = field(default_factory=list)
    space_note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "streamlines", list(self.streamlines))

    def __len__(self):
        return len(self.streamlines)

    def __iter__(self):
        return iter(self.streamlines)

    def __getitem__(self, i):
        return self.streamlines[i]

    @property
    def seed_indices(self):
        return [s.seed_index for s in self.streamlines]

    def subset(self, indices):
        return Tractogram([self.streamlines[i] for i in indices], self.space_note)


def _header_bytes(count, extra=()):
    lines = [TCK_MAGIC, "datatype: Float32LE", f"count: {count}"]
    lines += [f"{k}: {v}" for k, v in extra]
    offset = 0
    while True:
        text = "\n".join(lines + [f"file: . {offset}", "END"]) + "\n"
        if len(text.encode()) == offset:
            return text.encode()
        offset = len(text.encode())


def write_tck(t, path, extra_header=()):
    """Write a tractogram as TCK (float32 little-endian)."""
    chunks = []
    nan = np.full((1, 3), np.nan, dtype="<f4")
    for s in t.streamlines:
        chunks.append(np.asarray(s.points, dtype="<f4"))
        chunks.append(nan)
    chunks.append(np.full((1, 3), np.inf, dtype="<f4"))
    body = np.concatenate(chunks).tobytes()
    with open(path, "wb") as fh:
        fh.write(_header_bytes(len(t), extra_header))
        fh.write(body)


def _parse_header(raw, path):
    end = raw.find(b"\nEND\n")
    if not raw.startswith(TCK_MAGIC.encode() + b"\n"):
        raise BadMagicError(f"{path}: first line is not '{TCK_MAGIC}'")
    if end < 0:
        raise MissingHeaderKeyError(f"{path}: no END line in header")
    header = {}
    for line in raw[:end].decode("latin-1").splitlines()[1:]:
        if ":" in line:
            key, value = line.split(":", 1)
            header[key.strip()] = value.strip()
    for key in ("datatype", "file"):
        if key not in header:
            raise MissingHeaderKeyError(f"{path}: header lacks '{key}'")
    if header["datatype"] != "Float32LE":
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype {header['datatype']}")
    parts = header["file"].split()
    if len(parts) != 2 or parts[0] != ".":
        raise MissingHeaderKeyError(f"{path}: malformed 'file' entry {header['file']!r}")
    return header, int(parts[1])


def read_tck(path, space_note=""):
    """Read a TCK file.

    Raises
    ------
    BadMagicError, UnsupportedDatatypeError, MissingHeaderKeyError, TruncatedDataError
        For malformed files.
    FormatError
        If a streamline holds non-finite coordinates or fewer than 2 distinct points.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    header, offset = _parse_header(raw, path)
    body = raw[offset:]
    n_floats = len(body) // 4
    data = np.frombuffer(body, dtype="<f4", count=n_floats)
    n_triplets = n_floats // 3
    data = data[: n_triplets * 3].reshape(-1, 3)
    term = np.flatnonzero(np.all(np.isinf(data) & (data > 0), axis=1))
    if len(term) == 0:
        raise TruncatedDataError(f"{path}: binary section has no end-of-file triplet")
    data = data[: term[0]]
    breaks = np.flatnonzero(np.all(np.isnan(data), axis=1))
    if len(breaks) == 0 or breaks[-1] != len(data) - 1:
        if len(data):
            raise TruncatedDataError(f"{path}: last streamline is not NaN-terminated")
    streamlines = []
    start = 0
    for i, b in enumerate(breaks):
        pts = data[start:b]
        start = b + 1
        if not np.all(np.isfinite(pts)):
            raise FormatError(f"{path}: streamline {i} has non-finite coordinates")
        pts = collapse_duplicates(pts)
        if len(pts) < 2:
            raise FormatError(f"{path}: streamline {i} has fewer than 2 distinct points")
        streamlines.append(Streamline(pts.astype(np.float32)))
    if "count" in header and header["count"].isdigit() and int(header["count"]) != len(streamlines):
        raise TruncatedDataError(
            f"{path}: header count {header['count']} but {len(streamlines)} streamlines present"
        )
    return Tractogram(streamlines, space_note)


def write_seeds(t_or_indices, path):
    indices = t_or_indices.seed_indices if isinstance(t_or_indices, Tractogram) else t_or_indices
    with open(path, "w") as fh:
        fh.writelines(f"{int(i)}\n" for i in indices)


def read_seeds(path):
    with open(path) as fh:
        values = [line.strip() for line in fh if line.strip()]
    indices = []
    for v in values:
        i = int(v)
        if i < 0:
            raise FormatError(f"{path}: negative seed index {i}")
        indices.append(i)
    return indices


def attach_seeds(t, indices):
    """Return a copy of ``t`` with per-streamline seed indices."""
    if len(indices) != len(t):
        raise ValueError(f"{len(indices)} seed indices for {len(t)} streamlines")
    return Tractogram(
        [Streamline(s.points, seed_index=i) for s, i in zip(t.streamlines, indices)], t.space_note
    )


def load_tractogram(path, seeds_path=None):
    """Read a TCK and, if given (or present next to it), its seed sidecar."""
    t = read_tck(path)
    if seeds_path is None:
        candidate = os.path.splitext(path)[0] + ".seeds.txt"
        seeds_path = candidate if os.path.exists(candidate) else None
    if seeds_path is not None:
        t = attach_seeds(t, read_seeds(seeds_path))
    return t


def sample(t, k, rng_seed):
    """Uniform sample of ``k`` streamlines without replacement, order kept."""
    if k > len(t):
        raise ValueError(f"cannot sample {k} of {len(t)} streamlines")
    if k < 0:
        raise ValueError("sample size must be nonnegative")
    rng = np.random.default_rng(rng_seed)
    chosen = np.sort(rng.choice(len(t), size=k, replace=False))
    return t.subset(chosen.tolist())
