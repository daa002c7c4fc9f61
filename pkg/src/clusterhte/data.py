"""Clustered samples, exposure mappings, CSV ingestion and overlap diagnostics.

A :class:`ClusteredSample` stores its units as flat arrays (``y``, ``t``, ``x``,
``pi``) plus an integer cluster code per unit; the per-cluster view is built on
demand.  Samples are immutable: every transformation returns a new object.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, ParseError, SchemaError

__all__ = [
    "Cluster",
    "ClusteredSample",
    "ExposureMapping",
    "CsvSchema",
    "OverlapDiagnostics",
    "load_clustered_csv",
    "write_clustered_csv",
    "apply_exposure_mapping",
    "overlap_check",
    "canonicalize_exposures",
]

EXPOSURE_RTOL = 1e-9
DEFAULT_MIN_SHARE = 0.02


@dataclass(frozen=True)
class Cluster:
    """Units of one cluster, in input order."""

    id: object
    y: np.ndarray
    t: np.ndarray
    x: np.ndarray
    pi: Optional[np.ndarray]

    @property
    def size(self) -> int:
        return len(self.y)


def canonicalize_exposures(values, rtol=EXPOSURE_RTOL):
    """Snap nearly equal exposure values onto a shared representative.

    Values are sorted and merged into one level whenever consecutive values
    agree to relative tolerance ``rtol``; the first value of each run is the
    representative.  Returns ``(canonical_values, levels)``.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return values.copy(), ()
    uniq = np.unique(values)
    reps = [uniq[0]]
    for v in uniq[1:]:
        if not math.isclose(v, reps[-1], rel_tol=rtol, abs_tol=rtol * 1e-3):
            reps.append(v)
    reps = np.asarray(reps)
    idx = np.searchsorted(reps, values, side="right") - 1
    idx = np.clip(idx, 0, len(reps) - 1)
    return reps[idx], tuple(float(r) for r in reps)


@dataclass(frozen=True, eq=False)
class ClusteredSample:
    """Observed clustered data.

    Parameters
    ----------
    cluster : ndarray of int, shape (N,)
        Cluster code of every unit, in ``0 .. C-1``; units of a cluster are
        stored contiguously.
    y, t : ndarray, shape (N,)
        Outcomes and binary treatments.
    x : ndarray, shape (N, d)
        Pre-treatment covariates.
    pi : ndarray, shape (N,) or None
        Exposure values; ``None`` until an exposure mapping is applied.
    cluster_ids : tuple
        Original cluster labels, indexed by cluster code.
    """

    cluster: np.ndarray
    y: np.ndarray
    t: np.ndarray
    x: np.ndarray
    pi: Optional[np.ndarray] = None
    cluster_ids: tuple = ()
    exposure_levels: tuple = field(default=(), init=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        t = np.asarray(self.t, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        cl = np.asarray(self.cluster, dtype=np.int64)
        n = len(y)
        if n == 0:
            raise DataError("sample has no units")
        if not (len(t) == len(cl) == x.shape[0] == n):
            raise DataError("unit arrays have inconsistent lengths")
        if not np.all(np.isin(t, (0.0, 1.0))):
            bad = int(np.flatnonzero(~np.isin(t, (0.0, 1.0)))[0])
            raise DataError(f"treatment must be 0 or 1 (unit {bad} has {t[bad]!r})")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise DataError("outcomes and covariates must be finite")
        if np.any(np.diff(cl) < 0):
            order = np.argsort(cl, kind="stable")
            cl, y, t, x = cl[order], y[order], t[order], x[order]
            if self.pi is not None:
                object.__setattr__(self, "pi", np.asarray(self.pi, dtype=float)[order])
        ncl = int(cl.max()) + 1
        if cl.min() < 0 or len(np.unique(cl)) != ncl:
            raise DataError("cluster codes must cover 0..C-1 with no empty cluster")
        ids = tuple(self.cluster_ids) if self.cluster_ids else tuple(range(ncl))
        if len(ids) != ncl:
            raise DataError("cluster_ids length does not match number of clusters")
        for arr in (cl, y, t, x):
            arr.setflags(write=False)
        object.__setattr__(self, "cluster", cl)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "cluster_ids", ids)
        if self.pi is not None:
            pi, levels = canonicalize_exposures(self.pi)
            if len(pi) != n or not np.all(np.isfinite(pi)):
                raise DataError("exposure array must be finite with one value per unit")
            if len(levels) >= ncl:
                raise DataError(
                    f"number of exposure levels K={len(levels)} must be below "
                    f"the number of clusters C={ncl}"
                )
            pi.setflags(write=False)
            object.__setattr__(self, "pi", pi)
            object.__setattr__(self, "exposure_levels", levels)

    @classmethod
    def from_arrays(cls, cluster, y, t, x, pi=None):
        """Build a sample from per-unit arrays with arbitrary cluster labels.

        Clusters are ordered by first appearance; unit order within a cluster
        follows the input order.
        """
        labels = list(cluster)
        first = {}
        for lab in labels:
            first.setdefault(lab, len(first))
        codes = np.array([first[lab] for lab in labels], dtype=np.int64)
        order = np.argsort(codes, kind="stable")
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        return cls(
            cluster=codes[order],
            y=np.asarray(y, dtype=float)[order],
            t=np.asarray(t, dtype=float)[order],
            x=x[order],
            pi=None if pi is None else np.asarray(pi, dtype=float)[order],
            cluster_ids=tuple(first),
        )

    @property
    def N(self) -> int:
        return len(self.y)

    @property
    def C(self) -> int:
        return len(self.cluster_ids)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def K(self) -> int:
        return len(self.exposure_levels)

    @property
    def has_exposure(self) -> bool:
        return self.pi is not None

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster, minlength=self.C)

    @property
    def cluster_starts(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.cluster_sizes)))

    @property
    def clusters(self) -> list:
        starts = self.cluster_starts
        out = []
        for c, cid in enumerate(self.cluster_ids):
            sl = slice(starts[c], starts[c + 1])
            out.append(
                Cluster(
                    id=cid,
                    y=self.y[sl],
                    t=self.t[sl],
                    x=self.x[sl],
                    pi=None if self.pi is None else self.pi[sl],
                )
            )
        return out

    def with_outcomes(self, y) -> "ClusteredSample":
        """Return a copy with the outcome vector replaced."""
        return ClusteredSample(
            cluster=self.cluster,
            y=y,
            t=self.t,
            x=self.x,
            pi=self.pi,
            cluster_ids=self.cluster_ids,
        )

    def with_exposures(self, pi) -> "ClusteredSample":
        """Return a copy with the exposure vector replaced."""
        return ClusteredSample(
            cluster=self.cluster,
            y=self.y,
            t=self.t,
            x=self.x,
            pi=pi,
            cluster_ids=self.cluster_ids,
        )

    def require_exposure(self):
        if self.pi is None:
            raise DataError("exposures are not set; apply an exposure mapping first")


@dataclass(frozen=True)
class ExposureMapping:
    """Rule turning a cluster's treatment vector into per-unit exposures.

    ``kind`` is one of ``"treatment_ratio"``, ``"leave_one_out_ratio"`` or
    ``"threshold"``; the threshold mapping needs ``cutpoint`` and yields
    ``1{treatment ratio > cutpoint}``.
    """

    kind: str
    cutpoint: Optional[float] = None

    KINDS = ("treatment_ratio", "leave_one_out_ratio", "threshold")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown exposure mapping {self.kind!r}")
        if self.kind == "threshold" and self.cutpoint is None:
            raise ValueError("threshold mapping needs a cutpoint")

    @classmethod
    def treatment_ratio(cls):
        return cls("treatment_ratio")

    @classmethod
    def leave_one_out_ratio(cls):
        return cls("leave_one_out_ratio")

    @classmethod
    def threshold(cls, cutpoint: float):
        return cls("threshold", float(cutpoint))

    @classmethod
    def parse(cls, text: str) -> "ExposureMapping":
        """Parse ``ratio``, ``loo`` or ``threshold:<cutpoint>``."""
        text = text.strip()
        if text in ("ratio", "treatment_ratio"):
            return cls.treatment_ratio()
        if text in ("loo", "leave_one_out", "leave_one_out_ratio"):
            return cls.leave_one_out_ratio()
        if text.startswith("threshold"):
            _, _, cut = text.partition(":")
            return cls.threshold(float(cut))
        raise ValueError(f"cannot parse exposure mapping {text!r}")

    @property
    def cluster_level(self) -> bool:
        return self.kind != "leave_one_out_ratio"

    @property
    def description(self) -> str:
        if self.kind == "treatment_ratio":
            return "share of treated units in the cluster"
        if self.kind == "leave_one_out_ratio":
            return "share of treated units among the other members of the cluster"
        return f"indicator that the cluster treatment share exceeds {self.cutpoint:g}"

    def map_cluster(self, t) -> np.ndarray:
        """Exposures for a single cluster's treatment vector."""
        t = np.asarray(t, dtype=float)
        n = len(t)
        total = t.sum()
        if self.kind == "leave_one_out_ratio":
            if n < 2:
                raise DataError("leave-one-out exposure undefined for a singleton cluster")
            return (total - t) / (n - 1)
        ratio = total / n
        if self.kind == "threshold":
            ratio = 1.0 if ratio > self.cutpoint else 0.0
        return np.full(n, ratio)


def apply_exposure_mapping(sample: ClusteredSample, mapping: ExposureMapping) -> ClusteredSample:
    """Set every unit's exposure from its cluster's treatment vector."""
    starts = sample.cluster_starts
    pi = np.empty(sample.N)
    for c in range(sample.C):
        sl = slice(starts[c], starts[c + 1])
        pi[sl] = mapping.map_cluster(sample.t[sl])
    return sample.with_exposures(pi)


@dataclass(frozen=True)
class CsvSchema:
    """Column names of a clustered CSV file."""

    cluster: str = "cluster"
    y: str = "y"
    t: str = "t"
    x: Sequence[str] = ("x",)
    pi: Optional[str] = None
    delimiter: str = ","

    def columns(self) -> list:
        cols = [self.cluster, self.y, self.t, *self.x]
        if self.pi:
            cols.append(self.pi)
        return cols


def _parse_float(text, row, column):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"row {row}: column {column!r} is not numeric ({text!r})", row=row)
    if not math.isfinite(value):
        raise ParseError(f"row {row}: column {column!r} is not finite ({text!r})", row=row)
    return value


def load_clustered_csv(path, schema: CsvSchema) -> ClusteredSample:
    """Read a clustered sample from a CSV file with a header row.

    Row numbers in error messages count data rows from 1 (the header is row 0).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        missing = [c for c in schema.columns() if c not in header]
        if missing:
            raise SchemaError(f"missing column(s): {', '.join(missing)}")
        pos = {name: header.index(name) for name in schema.columns()}
        labels, ys, ts, xs, pis = [], [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"row {row_no}: expected {len(header)} fields", row=row_no)
            labels.append(row[pos[schema.cluster]].strip())
            ys.append(_parse_float(row[pos[schema.y]], row_no, schema.y))
            t = _parse_float(row[pos[schema.t]], row_no, schema.t)
            if t not in (0.0, 1.0):
                raise DataError(f"row {row_no}: treatment must be 0 or 1, got {row[pos[schema.t]]!r}")
            ts.append(t)
            xs.append([_parse_float(row[pos[c]], row_no, c) for c in schema.x])
            if schema.pi:
                pis.append(_parse_float(row[pos[schema.pi]], row_no, schema.pi))
    if not ys:
        raise DataError(f"{path} has no data rows")
    return ClusteredSample.from_arrays(
        labels, ys, ts, np.array(xs, dtype=float), pi=pis if schema.pi else None
    )


def write_clustered_csv(sample: ClusteredSample, path, schema: Optional[CsvSchema] = None):
    """Write ``sample`` as CSV; floats use ``repr`` so a reload is bit-exact."""
    if schema is None:
        schema = CsvSchema(
            cluster="cluster",
            y="y",
            t="t",
            x=["x"] if sample.d == 1 else [f"x{j + 1}" for j in range(sample.d)],
            pi="pi" if sample.has_exposure else None,
        )
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=schema.delimiter)
        w.writerow(schema.columns())
        for i in range(sample.N):
            row = [
                sample.cluster_ids[sample.cluster[i]],
                repr(float(sample.y[i])),
                int(sample.t[i]),
                *(repr(float(v)) for v in sample.x[i]),
            ]
            if schema.pi:
                row.append(repr(float(sample.pi[i])))
            w.writerow(row)
    return schema


@dataclass(frozen=True)
class OverlapDiagnostics:
    """Unit counts and shares of every (exposure, treatment) cell."""

    counts: dict
    shares: dict
    min_share: float
    warnings: tuple

    def table(self) -> str:
        lines = [f"{'pi':>10} {'t':>3} {'count':>8} {'share':>8}"]
        for (pi, t), n in sorted(self.counts.items()):
            lines.append(f"{pi:>10.4g} {t:>3d} {n:>8d} {self.shares[(pi, t)]:>8.4f}")
        return "\n".join(lines)


def overlap_check(sample: ClusteredSample, min_share: float = DEFAULT_MIN_SHARE) -> OverlapDiagnostics:
    """Tabulate (exposure, treatment) cells; error on empty cells, warn on thin ones."""
    sample.require_exposure()
    counts, shares, warnings = {}, {}, []
    for pi in sample.exposure_levels:
        at_pi = sample.pi == pi
        for t in (0, 1):
            n = int(np.sum(at_pi & (sample.t == t)))
            counts[(pi, t)] = n
            shares[(pi, t)] = n / sample.N
            if n == 0:
                raise DataError(f"empty overlap cell (pi={pi:g}, t={t}): no units")
            if n / sample.N < min_share:
                warnings.append(
                    f"cell (pi={pi:g}, t={t}) holds {n / sample.N:.2%} of units, "
                    f"below {min_share:.2%}"
                )
    return OverlapDiagnostics(
        counts=counts,
        shares=shares,
        min_share=min(shares.values()),
        warnings=tuple(warnings),
    )
