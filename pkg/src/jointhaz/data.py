"""Long-format panel data in start-stop-event layout.

A :class:`Dataset` holds one row per at-risk interval ``(tstart, tstop]`` with
the event indicator on the final row of a subject and, optionally, a
longitudinal measurement taken at ``tstart``.  Every estimator in the package
consumes a ``Dataset``; per-subject views are exposed as
:class:`SubjectHistory` objects.
"""

import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import pandas as pd

REQUIRED = ("id", "tstart", "tstop", "event")
KINDS = ("id", "time", "event", "numeric", "categorical", "outcome")


class DataError(ValueError):
    """Raised when input data violate the panel layout."""


@dataclass(frozen=True)
class Schema:
    """Column kinds and declared categorical levels.

    ``outcome`` columns are numeric columns in which empty cells are allowed;
    all other columns must be complete.  The first declared level of a
    categorical column is its reference level.
    """

    kinds: dict
    levels: dict = field(default_factory=dict)

    def __post_init__(self):
        for col in REQUIRED:
            if col not in self.kinds:
                raise DataError(f"schema is missing mandatory column {col!r}")
        for col, kind in self.kinds.items():
            if kind not in KINDS:
                raise DataError(f"unknown column kind {kind!r} for {col!r}")
            if kind == "categorical" and not self.levels.get(col):
                raise DataError(f"categorical column {col!r} declares no levels")

    @classmethod
    def from_dict(cls, spec):
        spec = spec.get("columns", spec)
        kinds, levels = {}, {}
        for col, entry in spec.items():
            if isinstance(entry, str):
                kinds[col] = entry
            else:
                kinds[col] = entry["kind"]
                if "levels" in entry:
                    levels[col] = [str(v) for v in entry["levels"]]
        return cls(kinds, levels)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        out = {}
        for col, kind in self.kinds.items():
            if kind == "categorical":
                out[col] = {"kind": kind, "levels": list(self.levels[col])}
            else:
                out[col] = kind
        return {"columns": out}

    @property
    def covariates(self):
        return [c for c, k in self.kinds.items() if k in ("numeric", "categorical")]

    def expand(self, terms):
        """Names of the design columns generated by ``terms``."""
        names = []
        for term in terms:
            kind = self.kinds.get(term)
            if kind is None:
                raise DataError(f"unknown column {term!r}")
            if kind == "categorical":
                names.extend(f"{term}[{lev}]" for lev in self.levels[term][1:])
            elif kind in ("numeric", "outcome"):
                names.append(term)
            else:
                raise DataError(f"column {term!r} of kind {kind!r} cannot be a covariate")
        return names


def encode(frame, schema, terms):
    """Numeric design block for ``terms`` (reference-coded dummies)."""
    cols = []
    for term in terms:
        kind = schema.kinds.get(term)
        if kind == "categorical":
            values = frame[term].astype(str).to_numpy()
            for lev in schema.levels[term][1:]:
                cols.append((values == lev).astype(float))
        elif kind in ("numeric", "outcome"):
            cols.append(frame[term].to_numpy(dtype=float))
        else:
            raise DataError(f"column {term!r} cannot be a covariate")
    if not cols:
        return np.zeros((len(frame), 0))
    return np.column_stack(cols)


def _sort_key(ids):
    numeric = pd.to_numeric(ids, errors="coerce")
    if numeric.notna().all():
        return numeric
    return ids.astype(str)


class Dataset:
    """Immutable, validated start-stop-event panel.

    Parameters
    ----------
    frame : pandas.DataFrame
        One row per interval.  Must contain the columns ``id``, ``tstart``,
        ``tstop`` and ``event`` plus every column declared in ``schema``.
    schema : Schema
        Column kinds; columns not in the schema are dropped.
    """

    def __init__(self, frame, schema):
        missing = [c for c in schema.kinds if c not in frame.columns]
        if missing:
            raise DataError(f"columns declared in schema but absent: {missing}")
        frame = frame[list(schema.kinds)].copy()
        frame = self._coerce(frame, schema)
        key = _sort_key(frame["id"])
        order = np.lexsort((frame["tstart"].to_numpy(), key.to_numpy()))
        frame = frame.iloc[order].reset_index(drop=True)
        self._frame = frame
        self.schema = schema
        self._validate()
        ids = frame["id"].to_numpy()
        change = np.flatnonzero(ids[1:] != ids[:-1]) + 1
        starts = np.concatenate([[0], change])
        stops = np.concatenate([change, [len(frame)]])
        self._ids = ids[starts] if len(frame) else ids[:0]
        self._slices = {i: (int(a), int(b)) for i, a, b in zip(self._ids, starts, stops)}

    @staticmethod
    def _coerce(frame, schema):
        for col, kind in schema.kinds.items():
            series = frame[col]
            if kind == "id":
                if series.isna().any():
                    raise DataError(f"missing id in column {col!r}")
                numeric = pd.to_numeric(series, errors="coerce")
                frame[col] = numeric.astype(np.int64) if numeric.notna().all() and (numeric % 1 == 0).all() else series.astype(str)
            elif kind in ("time", "numeric", "outcome", "event"):
                numeric = pd.to_numeric(series, errors="coerce")
                bad = numeric.isna() & series.notna() & (series.astype(str).str.strip() != "")
                if bad.any():
                    row = int(np.flatnonzero(bad.to_numpy())[0])
                    raise DataError(f"malformed numeric cell at row {row + 1}, column {col!r}: {series.iloc[row]!r}")
                if kind != "outcome" and numeric.isna().any():
                    row = int(np.flatnonzero(numeric.isna().to_numpy())[0])
                    raise DataError(f"missing value at row {row + 1}, column {col!r}")
                if kind != "outcome" and not np.isfinite(numeric.to_numpy(dtype=float)).all():
                    raise DataError(f"non-finite value in column {col!r}")
                frame[col] = numeric.astype(np.int64) if kind == "event" else numeric.astype(float)
            elif kind == "categorical":
                if series.isna().any():
                    row = int(np.flatnonzero(series.isna().to_numpy())[0])
                    raise DataError(f"missing value at row {row + 1}, column {col!r}")
                values = series.astype(str)
                bad = ~values.isin(schema.levels[col])
                if bad.any():
                    row = int(np.flatnonzero(bad.to_numpy())[0])
                    raise DataError(f"unknown categorical level {values.iloc[row]!r} in column {col!r} at row {row + 1}")
                frame[col] = values
        return frame

    def _validate(self):
        f = self._frame
        if not len(f):
            raise DataError("dataset has no rows")
        t0 = f["tstart"].to_numpy()
        t1 = f["tstop"].to_numpy()
        ev = f["event"].to_numpy()
        if (t0 < 0).any():
            raise DataError("negative tstart")
        if not (t0 < t1).all():
            row = int(np.flatnonzero(~(t0 < t1))[0])
            raise DataError(f"tstart >= tstop at row {row + 1}")
        if not np.isin(ev, (0, 1)).all():
            raise DataError("event indicator must be 0 or 1")
        ids = f["id"].to_numpy()
        same = ids[1:] == ids[:-1]
        if (same & (t0[1:] < t1[:-1])).any():
            raise DataError("overlapping intervals")
        if (same & (ev[:-1] == 1)).any():
            raise DataError("event=1 on a non-final row")
        for col, kind in self.schema.kinds.items():
            if kind == "outcome":
                y = f[col].to_numpy(dtype=float)
                if np.isinf(y).any():
                    raise DataError(f"non-finite outcome in column {col!r}")

    # -- accessors -------------------------------------------------------
    @property
    def frame(self):
        return self._frame

    @property
    def ids(self):
        return self._ids

    @property
    def n_subjects(self):
        return len(self._ids)

    @property
    def n_events(self):
        return int(self._frame["event"].sum())

    def __len__(self):
        return len(self._frame)

    def __repr__(self):
        return f"Dataset(n_rows={len(self)}, n_subjects={self.n_subjects}, n_events={self.n_events})"

    def subject_bounds(self):
        """``(start, stop)`` row ranges per subject, in id order."""
        return np.array([self._slices[i] for i in self._ids], dtype=np.int64).reshape(-1, 2)

    def subject_codes(self):
        """Integer subject code (0..n-1) for every row."""
        bounds = self.subject_bounds()
        return np.repeat(np.arange(len(bounds)), bounds[:, 1] - bounds[:, 0])

    def design(self, terms):
        return encode(self._frame, self.schema, terms)

    def history(self, subject_id, outcome=None):
        a, b = self._slices[subject_id]
        return SubjectHistory.from_rows(self._frame.iloc[a:b], self.schema, outcome)

    def histories(self, outcome=None):
        return [self.history(i, outcome) for i in self._ids]

    def subset(self, ids):
        keep = self._frame["id"].isin(list(ids))
        return Dataset(self._frame[keep], self.schema)

    def replace(self, **columns):
        """New dataset with the given columns overwritten."""
        frame = self._frame.copy()
        for name, values in columns.items():
            frame[name] = values
        return Dataset(frame, self.schema)

    def with_column(self, name, values, kind="numeric"):
        frame = self._frame.copy()
        frame[name] = values
        kinds = dict(self.schema.kinds)
        kinds[name] = kind
        return Dataset(frame, Schema(kinds, dict(self.schema.levels)))

    def write_csv(self, path):
        write_csv(self, path)


@dataclass(frozen=True)
class SubjectHistory:
    """One subject's follow-up.

    ``rows`` keeps the subject's start-stop rows, which define the
    last-value-carried-forward paths of the time-varying covariates.
    """

    id: object
    entry: float
    exit: float
    event: int
    times: np.ndarray
    values: np.ndarray
    rows: pd.DataFrame
    schema: Schema
    outcome: str = None

    @classmethod
    def from_rows(cls, rows, schema, outcome=None):
        rows = rows.reset_index(drop=True)
        if outcome is None:
            candidates = [c for c, k in schema.kinds.items() if k == "outcome"]
            outcome = candidates[0] if len(candidates) == 1 else None
        if outcome is not None:
            y = rows[outcome].to_numpy(dtype=float)
            keep = ~np.isnan(y)
            times = rows["tstart"].to_numpy()[keep]
            values = y[keep]
        else:
            times = values = np.empty(0)
        return cls(
            id=rows["id"].iloc[0],
            entry=float(rows["tstart"].iloc[0]),
            exit=float(rows["tstop"].iloc[-1]),
            event=int(rows["event"].iloc[-1]),
            times=times,
            values=values,
            rows=rows,
            schema=schema,
            outcome=outcome,
        )

    @property
    def n_measurements(self):
        return self.times.size

    def to_dataset(self):
        return Dataset(self.rows, self.schema)

    def truncate(self, s):
        """History observed up to and including time ``s``, censored there."""
        rows = self.rows[self.rows["tstart"] <= s].copy()
        if rows.empty:
            raise DataError(f"no follow-up before time {s}")
        rows.loc[rows.index[-1], "tstop"] = min(float(rows["tstop"].iloc[-1]), s)
        rows["event"] = 0
        return SubjectHistory.from_rows(rows, self.schema, self.outcome)

    def append(self, t, value, **covariates):
        """History extended with a measurement at ``t`` and censored at ``t``.

        The new row inherits the last row's covariates unless overridden.  A
        record identical to the last one (same time, same value) is a no-op.
        """
        rows = self.rows.copy()
        last_start = float(rows["tstart"].iloc[-1])
        if t < last_start:
            raise DataError("new measurement precedes the last recorded row")
        rows["event"] = 0
        idx = rows.index[-1]
        if t == last_start:
            rows.loc[idx, self.outcome] = value
            for k, v in covariates.items():
                rows.loc[idx, k] = v
            rows.loc[idx, "tstop"] = t
        else:
            rows.loc[idx, "tstop"] = t
            new = {c: rows[c].iloc[-1] for c in rows.columns}
            new.update(tstart=t, tstop=t, event=0, **{self.outcome: value}, **covariates)
            rows = pd.concat([rows, pd.DataFrame([new])], ignore_index=True)
        return SubjectHistory.from_rows(rows, self.schema, self.outcome)


def lvcf_value(history, covariate, t):
    """Last value carried forward of ``covariate`` at time ``t``.

    The path is right-continuous: a value recorded at ``tstart`` applies from
    that instant on.
    """
    rows = history.rows
    values = rows[covariate]
    starts = rows["tstart"].to_numpy()
    if history.schema.kinds.get(covariate) == "outcome":
        keep = values.notna().to_numpy()
        starts, values = starts[keep], values[keep]
    values = values.to_numpy()
    idx = np.searchsorted(starts, t, side="right") - 1
    if idx < 0:
        raise DataError(f"time {t} precedes the first observation of {covariate!r}")
    return values[idx]


# -- I/O -------------------------------------------------------------------

def load_csv(path, schema):
    """Read a start-stop-event CSV into a validated :class:`Dataset`."""
    if isinstance(schema, (str, os.PathLike)):
        schema = Schema.from_json(schema)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""], encoding="utf-8")
    if (raw == ".").any().any():
        raise DataError("'.' is not a valid missing-value marker; leave the cell empty")
    missing = [c for c in schema.kinds if c not in raw.columns]
    if missing:
        raise DataError(f"header does not match schema; missing columns {missing}")
    frame = raw.copy()
    for col, kind in schema.kinds.items():
        if kind in ("time", "numeric", "outcome"):
            parsed = pd.to_numeric(frame[col], errors="coerce")
            bad = parsed.isna() & frame[col].notna()
            if bad.any():
                row = int(np.flatnonzero(bad.to_numpy())[0])
                raise DataError(f"malformed numeric cell at row {row + 1}, column {col!r}: {frame[col].iloc[row]!r}")
            # exact decimal -> binary conversion
            frame[col] = [float(v) if isinstance(v, str) else np.nan for v in frame[col]]
    return Dataset(frame, schema)


def _format_cell(value):
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return ""
        return "%.17g" % value
    return str(value)


def write_csv(ds, path):
    """Write ``ds`` as CSV with numeric cells at 17 significant digits."""
    frame = ds.frame
    lines = [",".join(frame.columns)]
    cols = [frame[c].tolist() for c in frame.columns]
    for row in zip(*cols):
        lines.append(",".join(_format_cell(v) for v in row))
    text = "\n".join(lines) + "\n"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def load_fixture(name="fixture6"):
    """One of the small datasets shipped with the package."""
    base = resources.files("jointhaz") / "data"
    with resources.as_file(base / f"{name}.csv") as csv, resources.as_file(base / f"{name}.schema.json") as sch:
        return load_csv(str(csv), Schema.from_json(str(sch)))


# -- derived indices -------------------------------------------------------

def household_work_index(items):
    """Relative load of household work from five task items.

    Items coded 1..5 count as shared tasks; 0 marks tasks that do not apply
    (including those done by a third person).  Fewer than four shared tasks
    yields ``nan``.
    """
    items = [int(v) for v in items]
    if len(items) != 5:
        raise ValueError("expected five items")
    if any(v not in range(0, 6) for v in items):
        raise ValueError("items must be coded 0..5; map codes 6 and 7 to 0 first")
    valid = [v for v in items if 1 <= v <= 5]
    if len(valid) < 4:
        return math.nan
    return sum(valid) / len(valid) - 3.0


def gender_attitudes_index(items):
    """Gender role attitudes from three 1..5 items; first and third reversed."""
    items = [int(v) for v in items]
    if len(items) != 3:
        raise ValueError("expected three items")
    if any(v < 1 or v > 5 for v in items):
        raise ValueError("items must lie in 1..5")
    a, b, c = items
    return (6 - a) + b + (6 - c) - 9


# -- transforms ------------------------------------------------------------

@dataclass(frozen=True)
class StandardizationReport:
    """Moments used for z-scoring plus the time-rescaling constant."""

    means: dict = field(default_factory=dict)
    sds: dict = field(default_factory=dict)
    time_scale: float = 1.0

    def apply(self, column, values):
        return (np.asarray(values, dtype=float) - self.means[column]) / self.sds[column]

    def inverse(self, column, values):
        return np.asarray(values, dtype=float) * self.sds[column] + self.means[column]

    def to_dict(self):
        return {"means": dict(self.means), "sds": dict(self.sds), "time_scale": self.time_scale}

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d.get("means", {})), dict(d.get("sds", {})), float(d.get("time_scale", 1.0)))


def standardize(ds, columns):
    """Z-score ``columns`` pooled over all rows (sample sd, ``n - 1``)."""
    frame = ds.frame.copy()
    means, sds = {}, {}
    for col in columns:
        if ds.schema.kinds.get(col) not in ("numeric", "outcome"):
            raise DataError(f"column {col!r} is not numeric")
        x = frame[col].to_numpy(dtype=float)
        obs = x[~np.isnan(x)]
        mu = math.fsum(obs.tolist()) / obs.size
        sd = float(np.std(obs, ddof=1)) if obs.size > 1 else 0.0
        if not sd > 0:
            raise DataError(f"column {col!r} has zero variance")
        means[col], sds[col] = mu, sd
        frame[col] = (x - mu) / sd
    return Dataset(frame, ds.schema), StandardizationReport(means, sds)


def rescale_time(ds):
    """Divide all times by the largest ``tstop`` so follow-up lies in [0, 1]."""
    scale = float(ds.frame["tstop"].max())
    if scale == 1.0:
        return ds, 1.0
    frame = ds.frame.copy()
    frame["tstart"] = frame["tstart"] / scale
    frame["tstop"] = frame["tstop"] / scale
    frame.loc[frame["tstop"].idxmax(), "tstop"] = 1.0
    return Dataset(frame, ds.schema), scale
