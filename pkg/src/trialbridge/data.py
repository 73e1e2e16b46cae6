"""Domain types, CSV ingestion, validation, and covariate-range restriction.

A fused dataset stacks two randomized trials: the bridge-supplying trial
(s=0, arms 1 and 2) and the target trial (s=1, arms 2 and 3). Arm 2 is the
shared arm. Storage is columnar for speed; `SubjectRecord` views are
materialized on demand.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ArmTrialMismatch,
    EmptyTrialAfterRestriction,
    InvalidValue,
    MissingColumn,
    MissingSharedArm,
    NonNumericValue,
    NonPositiveTime,
    ValidationError,
)

REQUIRED_COLUMNS = ("id", "s", "a", "t", "delta")
TRIAL_ARMS = {0: (1, 2), 1: (2, 3)}
SHARED_ARM = 2


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str = "real"  # "real" or "binary"

    def __post_init__(self):
        if self.kind not in ("real", "binary"):
            raise ValidationError(f"covariate {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class DatasetSchema:
    """Names and types of the covariate columns, plus the admin-censoring time."""

    covariates: tuple[CovariateSpec, ...] = ()
    admin_censor_time: float = 365.0

    @classmethod
    def from_mapping(cls, covariates, admin_censor_time: float = 365.0) -> "DatasetSchema":
        return cls(
            tuple(CovariateSpec(n, k) for n, k in covariates.items()),
            float(admin_censor_time),
        )

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    def digest(self) -> str:
        text = ";".join(f"{c.name}:{c.kind}" for c in self.covariates)
        text += f";admin={self.admin_censor_time!r}"
        return hashlib.sha256(text.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class SubjectRecord:
    """One participant: trial s, arm a, observed time, event flag, covariates.

    `w` and `v` both expose the full covariate mapping; which names feed the
    censoring model versus the sampling model is decided by model formulas.
    """

    id: str
    s: int
    a: int
    t_star: float
    delta: int
    covariates: dict

    @property
    def w(self) -> dict:
        return self.covariates

    @property
    def v(self) -> dict:
        return self.covariates


class FusedDataset:
    """Immutable two-trial dataset with validated records.

    Invariants: both trials nonempty, each trial contains the shared arm,
    arms are compatible with the trial (s=0: {1,2}; s=1: {2,3}), times are
    positive and no later than `admin_censor_time`.
    """

    def __init__(self, ids, s, a, t_star, delta, covariates, schema: DatasetSchema,
                 provenance: dict | None = None, _validated: bool = False,
                 _partial: bool = False):
        self.ids = np.asarray(ids, dtype=object)
        self.s = np.asarray(s, dtype=np.int64)
        self.a = np.asarray(a, dtype=np.int64)
        self.t_star = np.asarray(t_star, dtype=float)
        self.delta = np.asarray(delta, dtype=np.int64)
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in covariates.items()}
        self.schema = schema
        self.provenance = dict(provenance or {})
        self.provenance.setdefault("schema_hash", schema.digest())
        self.provenance.setdefault("restrictions", [])
        if not _validated:
            self._validate_rows()
        if not _partial:
            self._validate_structure()

    # -- construction -------------------------------------------------------

    @classmethod
    def from_records(cls, records, schema: DatasetSchema, provenance=None) -> "FusedDataset":
        recs = list(records)
        cov = {name: [r.covariates[name] for r in recs] for name in schema.covariate_names}
        return cls(
            [r.id for r in recs],
            [r.s for r in recs],
            [r.a for r in recs],
            [r.t_star for r in recs],
            [r.delta for r in recs],
            cov,
            schema,
            provenance,
        )

    def _subset(self, idx, partial: bool = False) -> "FusedDataset":
        """Row subset; per-row checks are skipped (rows are already valid).
        `partial` also skips the two-trial structural check, for internal
        one-trial views."""
        return FusedDataset(
            self.ids[idx],
            self.s[idx],
            self.a[idx],
            self.t_star[idx],
            self.delta[idx],
            {k: v[idx] for k, v in self.covariates.items()},
            self.schema,
            dict(self.provenance),
            _validated=True,
            _partial=partial,
        )

    # -- validation ---------------------------------------------------------

    def _validate_rows(self):
        n = len(self.ids)
        for arr, name in ((self.s, "s"), (self.a, "a"), (self.t_star, "t"),
                          (self.delta, "delta")):
            if len(arr) != n:
                raise ValidationError(f"column {name!r} has {len(arr)} rows, expected {n}")
        for spec in self.schema.covariates:
            if spec.name not in self.covariates:
                raise MissingColumn(f"covariate column {spec.name!r} missing")
            if len(self.covariates[spec.name]) != n:
                raise ValidationError(f"covariate {spec.name!r} has wrong length")

        bad = np.flatnonzero((self.s != 0) & (self.s != 1))
        if bad.size:
            raise InvalidValue(self._row_msg(bad[0], f"s={self.s[bad[0]]} not in {{0,1}}"))
        for trial, arms in TRIAL_ARMS.items():
            bad = np.flatnonzero((self.s == trial) & ~np.isin(self.a, arms))
            if bad.size:
                i = bad[0]
                raise ArmTrialMismatch(
                    self._row_msg(i, f"arm a={self.a[i]} not allowed in trial s={trial}")
                )
        bad = np.flatnonzero(~np.isfinite(self.t_star) | (self.t_star <= 0))
        if bad.size:
            raise NonPositiveTime(self._row_msg(bad[0], f"t={self.t_star[bad[0]]!r}"))
        tau = self.schema.admin_censor_time
        bad = np.flatnonzero(self.t_star > tau)
        if bad.size:
            i = bad[0]
            raise InvalidValue(self._row_msg(i, f"t={self.t_star[i]!r} exceeds admin censoring time {tau!r}"))
        bad = np.flatnonzero((self.delta != 0) & (self.delta != 1))
        if bad.size:
            raise InvalidValue(self._row_msg(bad[0], f"delta={self.delta[bad[0]]} not in {{0,1}}"))
        for spec in self.schema.covariates:
            col = self.covariates[spec.name]
            bad = np.flatnonzero(~np.isfinite(col))
            if bad.size:
                raise NonNumericValue(self._row_msg(bad[0], f"covariate {spec.name!r} is missing/non-finite"))
            if spec.kind == "binary":
                bad = np.flatnonzero((col != 0) & (col != 1))
                if bad.size:
                    i = bad[0]
                    raise InvalidValue(self._row_msg(i, f"binary covariate {spec.name!r}={col[i]!r}"))

    def _validate_structure(self):
        for trial in (0, 1):
            mask = self.s == trial
            if not mask.any():
                raise ValidationError(f"trial s={trial} has no records")
            if not (mask & (self.a == SHARED_ARM)).any():
                raise MissingSharedArm(f"trial s={trial} has no shared-arm (a={SHARED_ARM}) records")

    def _row_msg(self, i, detail) -> str:
        return f"row {i + 1} (id={self.ids[i]!r}): {detail}"

    # -- views and summaries -------------------------------------------------

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def admin_censor_time(self) -> float:
        return self.schema.admin_censor_time

    @property
    def n_target(self) -> int:
        """Records in the target trial (s=1)."""
        return int(np.sum(self.s == 1))

    @property
    def n_bridge(self) -> int:
        """Records in the bridge-supplying trial (s=0)."""
        return int(np.sum(self.s == 0))

    def record(self, i: int) -> SubjectRecord:
        return SubjectRecord(
            str(self.ids[i]),
            int(self.s[i]),
            int(self.a[i]),
            float(self.t_star[i]),
            int(self.delta[i]),
            {k: float(v[i]) for k, v in self.covariates.items()},
        )

    @property
    def records(self) -> list[SubjectRecord]:
        return [self.record(i) for i in range(len(self))]

    def arm_counts(self) -> dict:
        out = {}
        for trial, arms in TRIAL_ARMS.items():
            for arm in arms:
                out[(trial, arm)] = int(np.sum((self.s == trial) & (self.a == arm)))
        return out

    def trial_mask(self, trial: int, arm: int | None = None) -> np.ndarray:
        mask = self.s == trial
        if arm is not None:
            mask = mask & (self.a == arm)
        return mask

    def take(self, indices) -> "FusedDataset":
        """Row subset by index (used by bootstrap resampling)."""
        return self._subset(np.asarray(indices, dtype=np.intp))


# ---------------------------------------------------------------------------
# CSV ingestion / emission


def load_dataset(csv_source, schema: DatasetSchema) -> FusedDataset:
    """Read a dataset from a CSV path or file-like object.

    The header must contain id,s,a,t,delta plus every covariate named by the
    schema; extra columns are ignored. Lines starting with '#' are skipped.
    """
    if hasattr(csv_source, "read"):
        return _load_from_file(csv_source, schema, source="<stream>")
    with open(csv_source, "r", newline="", encoding="utf-8") as fh:
        return _load_from_file(fh, schema, source=str(csv_source))


def _load_from_file(fh, schema: DatasetSchema, source: str) -> FusedDataset:
    reader = csv.reader(line for line in fh if not line.startswith("#"))
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError("empty CSV") from None
    needed = list(REQUIRED_COLUMNS) + list(schema.covariate_names)
    missing = [c for c in needed if c not in header]
    if missing:
        raise MissingColumn(f"CSV is missing columns {missing}")
    pos = {c: header.index(c) for c in needed}

    ids, s, a, t, delta = [], [], [], [], []
    cov = {name: [] for name in schema.covariate_names}
    for rownum, row in enumerate(reader, start=1):
        if not row:
            continue
        ids.append(row[pos["id"]])
        rid = row[pos["id"]]
        s.append(_parse_int(row[pos["s"]], "s", rownum, rid))
        a.append(_parse_int(row[pos["a"]], "a", rownum, rid))
        t.append(_parse_float(row[pos["t"]], "t", rownum, rid))
        delta.append(_parse_int(row[pos["delta"]], "delta", rownum, rid))
        for name in cov:
            cov[name].append(_parse_float(row[pos[name]], name, rownum, rid))

    provenance = {"source": source}
    return FusedDataset(ids, s, a, t, delta, cov, schema, provenance)


def _parse_float(raw, col, rownum, rid) -> float:
    try:
        return float(raw)
    except ValueError:
        raise NonNumericValue(f"row {rownum} (id={rid!r}): column {col!r}={raw!r}") from None


def _parse_int(raw, col, rownum, rid) -> int:
    val = _parse_float(raw, col, rownum, rid)
    if val != int(val):
        raise NonNumericValue(f"row {rownum} (id={rid!r}): column {col!r}={raw!r} is not an integer")
    return int(val)


def write_dataset(ds: FusedDataset, dest) -> None:
    """Write a dataset as CSV so that load_dataset(write_dataset(ds)) == ds.

    Reals are written with repr (shortest round-trip form); binary covariates
    as bare 0/1.
    """
    if hasattr(dest, "write"):
        _write_to_file(ds, dest)
        return
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        _write_to_file(ds, fh)


def _write_to_file(ds: FusedDataset, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    names = list(ds.schema.covariate_names)
    kinds = {c.name: c.kind for c in ds.schema.covariates}
    writer.writerow(list(REQUIRED_COLUMNS) + names)
    for i in range(len(ds)):
        row = [
            str(ds.ids[i]),
            str(int(ds.s[i])),
            str(int(ds.a[i])),
            repr(float(ds.t_star[i])),
            str(int(ds.delta[i])),
        ]
        for name in names:
            val = float(ds.covariates[name][i])
            row.append(str(int(val)) if kinds[name] == "binary" else repr(val))
        writer.writerow(row)


def dataset_to_csv_text(ds: FusedDataset) -> str:
    buf = io.StringIO()
    _write_to_file(ds, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# covariate restriction


def restrict(ds: FusedDataset, covariate_name: str, lo: float, hi: float) -> FusedDataset:
    """Keep rows with lo <= covariate <= hi; record the restriction in provenance.

    Raises EmptyTrialAfterRestriction if a trial, or any trial-arm cell that
    was populated before, would be emptied.
    """
    if covariate_name not in ds.covariates:
        raise MissingColumn(f"covariate {covariate_name!r} not in dataset")
    col = ds.covariates[covariate_name]
    keep = (col >= lo) & (col <= hi)

    before = ds.arm_counts()
    kept_s, kept_a = ds.s[keep], ds.a[keep]
    after = {
        cell: int(np.sum((kept_s == cell[0]) & (kept_a == cell[1])))
        for cell in before
    }
    emptied = [cell for cell, n in before.items() if n > 0 and after[cell] == 0]
    if emptied:
        raise EmptyTrialAfterRestriction(
            f"restriction {covariate_name} in [{lo}, {hi}] empties trial/arm cells {emptied}"
        )

    out = ds._subset(np.flatnonzero(keep))
    out.provenance["restrictions"] = list(ds.provenance.get("restrictions", [])) + [
        {
            "covariate": covariate_name,
            "lo": float(lo),
            "hi": float(hi),
            "n_before": len(ds),
            "n_after": int(keep.sum()),
            "arm_counts_after": {f"s={s}/a={a}": n for (s, a), n in after.items()},
        }
    ]
    return out
