"""Summary statistics and export of epsilon-ball comparison results.

Per-pair statistics exclude infinite (unmatched) distances from the mean and
median and count them as outliers; cohort statistics average the per-subject
values. Outlier rates are reported in percent.
"""

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .tracts import Tractogram, write_tck

TABLE1_COLUMNS = (
    "Comparison pairs",
    "Mean of Means (mm)",
    "Mean of Medians (mm)",
    "Average outlier streamlines (%)",
)
DEFAULT_BIN_WIDTH_MM = 0.25
REPORT_SCHEMA = "tractkit.report/1"


@dataclass(frozen=True)
class PairStats:
    n_queries: int
    n_outliers: int
    outlier_fraction: float
    mean_mm: float | None
    median_mm: float | None
    std_mm: float | None = None
    bin_edges: list = field(default_factory=list)
    bin_counts: list = field(default_factory=list)
    name: str = ""


@dataclass(frozen=True)
class CohortStats:
    mean_of_means_mm: float
    mean_of_medians_mm: float
    average_outlier_percent: float
    n_subjects: int = 1


def _as_distances(results):
    if len(results) and hasattr(results[0], "distance"):
        return np.array([r.distance for r in results], dtype=np.float64)
    return np.asarray(results, dtype=np.float64)


def summarize(results, bin_width=DEFAULT_BIN_WIDTH_MM, name=""):
    """Aggregate one comparison into :class:`PairStats`.

    ``results`` is a sequence of MatchResult or of distances (inf = outlier).
    The histogram spans [0, max finite distance] in ``bin_width`` bins.
    """
    d = _as_distances(results)
    if len(d) == 0:
        raise ValueError("cannot summarize an empty result set")
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    finite = d[np.isfinite(d)]
    n_out = int(len(d) - len(finite))
    if len(finite) == 0:
        return PairStats(len(d), n_out, 1.0, None, None, None, [], [], name)
    top = float(finite.max())
    n_bins = max(1, int(math.ceil(top / bin_width)))
    if n_bins * bin_width <= top:
        n_bins += 1
    edges = np.arange(n_bins + 1) * bin_width
    counts, _ = np.histogram(finite, bins=edges)
    return PairStats(
        n_queries=len(d),
        n_outliers=n_out,
        outlier_fraction=n_out / len(d),
        mean_mm=float(finite.mean()),
        median_mm=float(np.median(finite)),
        std_mm=float(finite.std()),
        bin_edges=edges.tolist(),
        bin_counts=counts.astype(int).tolist(),
        name=name,
    )


def aggregate(per_subject, names=None):
    """Cohort means of per-subject means, medians and outlier percentages."""
    per_subject = list(per_subject)
    if not per_subject:
        raise ValueError("aggregate needs at least one subject")
    names = names or [p.name or f"subject {i}" for i, p in enumerate(per_subject)]
    for p, n in zip(per_subject, names):
        if p.mean_mm is None or p.median_mm is None:
            raise ValueError(f"{n}: no finite distances, mean/median undefined")
    k = len(per_subject)
    return CohortStats(
        mean_of_means_mm=sum(p.mean_mm for p in per_subject) / k,
        mean_of_medians_mm=sum(p.median_mm for p in per_subject) / k,
        average_outlier_percent=100.0 * sum(p.outlier_fraction for p in per_subject) / k,
        n_subjects=k,
    )


def _check_lengths(A, results):
    if len(A) != len(results):
        raise ValueError(f"{len(results)} results for {len(A)} streamlines")


def export_outliers(A, results):
    """Unmatched A streamlines (original coordinates) and their indices in A."""
    _check_lengths(A, results)
    d = _as_distances(results)
    idx = [i for i in range(len(A)) if math.isinf(d[i])]
    return A.subset(idx), idx


def export_colored(A, results):
    """A itself plus one best-MDF scalar per streamline (inf when unmatched)."""
    _check_lengths(A, results)
    return Tractogram(A.streamlines, A.space_note), _as_distances(results).tolist()


def write_scalars(values, path):
    with open(path, "w") as fh:
        for v in values:
            fh.write("inf\n" if math.isinf(v) else f"{v:.17g}\n")


def read_scalars(path):
    with open(path) as fh:
        return [float(line) for line in fh if line.strip()]


def write_outliers(A, results, prefix):
    """Write ``prefix.tck`` and ``prefix.idx.txt``; returns the index list."""
    t, idx = export_outliers(A, results)
    write_tck(t, prefix + ".tck")
    with open(prefix + ".idx.txt", "w") as fh:
        fh.writelines(f"{i}\n" for i in idx)
    return idx


def write_colored(A, results, prefix):
    t, values = export_colored(A, results)
    write_tck(t, prefix + ".tck")
    write_scalars(values, prefix + ".txt")
    return values


def file_sha256(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def report_document(stats, config=None):
    """JSON-ready dict for a PairStats, CohortStats, or dict/list of them."""

    def encode(obj):
        if isinstance(obj, PairStats):
            return {"type": "PairStats", **asdict(obj)}
        if isinstance(obj, CohortStats):
            return {"type": "CohortStats", **asdict(obj)}
        if isinstance(obj, dict):
            return {k: encode(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [encode(v) for v in obj]
        return obj

    return {"schema": REPORT_SCHEMA, "config": dict(config or {}), "stats": encode(stats)}


def write_report(stats, path, config=None):
    """Write a stable (sorted keys, no timestamps) JSON report."""
    text = json.dumps(report_document(stats, config), indent=2, sort_keys=True, allow_nan=False)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def _decode(obj):
    if isinstance(obj, dict):
        kind = obj.get("type")
        body = {k: v for k, v in obj.items() if k != "type"}
        if kind == "PairStats":
            return PairStats(**body)
        if kind == "CohortStats":
            return CohortStats(**body)
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def read_report(path):
    """Returns (stats, config)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"{path}: not a tractkit report")
    return _decode(doc["stats"]), doc.get("config", {})


def write_cohort_csv(rows, path):
    """One row per comparison pair, columns exactly as in the reference table.

    ``rows`` is a sequence of (pair_name, CohortStats).
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE1_COLUMNS)
        for pair, c in rows:
            w.writerow([pair, repr(c.mean_of_means_mm), repr(c.mean_of_medians_mm),
                        repr(c.average_outlier_percent)])


def read_cohort_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != TABLE1_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        return [(row[0], CohortStats(float(row[1]), float(row[2]), float(row[3]))) for row in r]


def write_subject_csv(rows, path):
    """One row per (subject, pair): ``rows`` of (subject, pair_name, PairStats)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "pair", "n_queries", "n_outliers",
                    "Mean (mm)", "Median (mm)", "Outlier streamlines (%)"])
        for subject, pair, p in rows:
            w.writerow([subject, pair, p.n_queries, p.n_outliers,
                        "" if p.mean_mm is None else repr(p.mean_mm),
                        "" if p.median_mm is None else repr(p.median_mm),
                        repr(100.0 * p.outlier_fraction)])
