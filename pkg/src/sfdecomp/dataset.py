"""Tabular input, per-land normalization and design-matrix construction.

Tables are read from delimited text into an :class:`ObservationTable`, a thin
immutable wrapper around a :class:`pandas.DataFrame` whose index holds the
1-based source row numbers. Every row that is dropped along the way is
recorded as an :class:`Exclusion` so that reports can account for sample loss.
"""

from __future__ import annotations

import csv
import io
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from .errors import (
    CoercionError,
    DesignError,
    DuplicationError,
    EmptySampleError,
    InputError,
    SchemaError,
)

CONTINUOUS = "continuous"
BINARY = "binary"
CATEGORICAL = "categorical"
KINDS = (CONTINUOUS, BINARY, CATEGORICAL)
PERIODS = ("baseline", "followup")

_MISSING = {"", "na", "nan", "null", "none", "."}


class Exclusion(NamedTuple):
    row: int
    reason: str


@dataclass(frozen=True)
class TableSchema:
    """Column kinds plus the unit, cluster and (optional) period designations.

    Columns not listed in ``kinds`` are inferred: continuous when every
    non-missing cell parses as a number, categorical otherwise.
    """

    unit: str
    cluster: str
    period: str | None = None
    kinds: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, kind in self.kinds.items():
            if kind not in KINDS:
                raise SchemaError(f"unknown kind {kind!r} for column {name!r}")


@dataclass(frozen=True)
class ObservationTable:
    frame: pd.DataFrame
    unit: str
    cluster: str
    period: str | None = None
    kinds: Mapping[str, str] = field(default_factory=dict)
    exclusions: tuple[Exclusion, ...] = ()

    @property
    def row_count(self) -> int:
        return len(self.frame)

    @property
    def columns(self) -> list[str]:
        return list(self.frame.columns)

    def kind(self, name: str) -> str:
        return self.kinds.get(name, CONTINUOUS)

    def __getitem__(self, name: str) -> pd.Series:
        return self.frame[name]

    def validate(self) -> None:
        """Check the table invariants, raising on the first violation."""
        df = self.frame
        for col in (self.unit, self.cluster) + ((self.period,) if self.period else ()):
            if col not in df.columns:
                raise SchemaError(f"designated column {col!r} missing from table")
        for name, kind in self.kinds.items():
            if kind == BINARY and name in df.columns:
                vals = df[name].dropna()
                if not vals.isin([0, 1]).all():
                    raise SchemaError(f"binary column {name!r} contains values other than 0/1")
        if df[self.cluster].isna().any():
            rows = list(df.index[df[self.cluster].isna()])
            raise SchemaError(f"missing cluster label at rows {rows[:10]}")
        if self.period is not None:
            bad = ~df[self.period].isin(PERIODS)
            if bad.any():
                raise SchemaError(f"period must be one of {PERIODS}; bad rows {list(df.index[bad])[:10]}")
        keys = [self.unit] + ([self.period] if self.period else [])
        dup = df.duplicated(subset=keys, keep=False)
        if dup.any():
            pairs = sorted({tuple(map(str, r)) for r in df.loc[dup, keys].itertuples(index=False)})
            raise DuplicationError(f"duplicate (unit, period) keys: {pairs[:10]}")

    def with_frame(self, frame: pd.DataFrame, dropped: Iterable[Exclusion] = (), kinds=None):
        return replace(
            self,
            frame=frame,
            kinds=dict(self.kinds if kinds is None else kinds),
            exclusions=self.exclusions + tuple(dropped),
        )

    def select(self, mask, reason: str | None = None) -> "ObservationTable":
        """Keep rows where ``mask`` is true; log the rest when ``reason`` is given."""
        mask = np.asarray(mask, dtype=bool)
        dropped = ()
        if reason is not None:
            dropped = tuple(Exclusion(int(r), reason) for r in self.frame.index[~mask])
        return self.with_frame(self.frame.loc[mask].copy(), dropped)

    def in_period(self, period: str) -> "ObservationTable":
        if self.period is None:
            return self
        return self.select(self.frame[self.period] == period)


def _open_text(source, encoding="utf-8") -> str:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode(encoding)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read().decode(encoding)
    data = source.read()
    return data.decode(encoding) if isinstance(data, (bytes, bytearray)) else data


def _parse_float(text: str) -> float:
    if text.strip().lower() in _MISSING:
        return math.nan
    return float(text)


def load_table(source, schema: TableSchema, delimiter: str = ",", strict: bool = True) -> ObservationTable:
    """Read delimited UTF-8 text into a validated :class:`ObservationTable`.

    ``source`` may be bytes, a path, or an open file. With ``strict=True`` any
    cell that fails coercion raises :class:`CoercionError` listing every
    offending (row, column); otherwise those rows are dropped and logged.
    """
    text = _open_text(source)
    if not text.strip():
        raise InputError("empty input")
    reader = csv.reader(io.StringIO(text, newline=""), delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise InputError("empty input") from None
    records = [r for r in reader if any(cell.strip() for cell in r)]
    if not records:
        raise InputError("input has a header but no data rows")

    if len(set(header)) != len(header):
        dups = [h for h, c in Counter(header).items() if c > 1]
        raise SchemaError(f"duplicate header names: {dups}")
    required = [schema.unit, schema.cluster] + ([schema.period] if schema.period else []) + list(schema.kinds)
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"schema columns missing from header: {missing}")

    issues: list[tuple[int, str, str]] = []
    for i, rec in enumerate(records, start=1):
        if len(rec) != len(header):
            issues.append((i, "<record>", f"{len(rec)} fields, expected {len(header)}"))
    if issues and strict:
        raise CoercionError(issues)
    bad_rows = {r for r, _, _ in issues}
    cells = {h: [rec[j].strip() if j < len(rec) else "" for rec in records] for j, h in enumerate(header)}

    kinds = dict(schema.kinds)
    for h in header:
        if h in kinds or h in (schema.unit, schema.cluster, schema.period):
            continue
        try:
            [_parse_float(v) for v in cells[h]]
            kinds[h] = CONTINUOUS
        except ValueError:
            kinds[h] = CATEGORICAL

    columns: dict[str, list] = {}
    for h in header:
        raw = cells[h]
        if h in (schema.unit, schema.cluster):
            out = []
            for i, v in enumerate(raw, start=1):
                if v.lower() in _MISSING:
                    issues.append((i, h, v))
                out.append(v)
            columns[h] = out
        elif h == schema.period:
            out = []
            for i, v in enumerate(raw, start=1):
                if v.lower() not in PERIODS:
                    issues.append((i, h, v))
                out.append(v.lower())
            columns[h] = out
        elif kinds[h] == CATEGORICAL:
            columns[h] = [None if v.lower() in _MISSING else v for v in raw]
        else:
            out = []
            for i, v in enumerate(raw, start=1):
                try:
                    x = _parse_float(v)
                except ValueError:
                    issues.append((i, h, v))
                    x = math.nan
                else:
                    if kinds[h] == BINARY and not math.isnan(x) and x not in (0.0, 1.0):
                        issues.append((i, h, v))
                        x = math.nan
                out.append(x)
            columns[h] = out

    issues.sort()
    if issues and strict:
        raise CoercionError(issues)
    bad_rows |= {r for r, _, _ in issues}

    index = pd.RangeIndex(1, len(records) + 1, name="row")
    frame = pd.DataFrame(columns, index=index)
    for h in header:
        if kinds.get(h) in (CONTINUOUS, BINARY):
            frame[h] = frame[h].astype(float)
    dropped = tuple(Exclusion(r, "coercion") for r in sorted(bad_rows))
    if bad_rows:
        frame = frame.drop(index=sorted(bad_rows))
    table = ObservationTable(frame, schema.unit, schema.cluster, schema.period, kinds, dropped)
    table.validate()
    return table


def write_table(table: ObservationTable, dest=None, delimiter: str = ",") -> str:
    """Serialize a table to delimited text (17 significant digits for floats)."""
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    cols = table.columns
    writer.writerow(cols)
    for rec in table.frame.itertuples(index=False):
        row = []
        for v in rec:
            if v is None or (isinstance(v, float) and math.isnan(v)):
                row.append("")
            elif isinstance(v, (float, np.floating)):
                fv = float(v)
                row.append(str(int(fv)) if fv.is_integer() and abs(fv) < 1e15 else repr(fv))
            else:
                row.append(str(v))
        writer.writerow(row)
    text = buf.getvalue()
    if dest is not None:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def _as_inputs(inputs) -> tuple[tuple[str, bool], ...]:
    out = []
    for item in inputs:
        if isinstance(item, str):
            out.append((item, True))
        else:
            name, flag = item
            out.append((str(name), bool(flag)))
    return tuple(out)


@dataclass(frozen=True)
class FormulaSpec:
    """Declarative model description.

    ``inputs`` holds ``(column, log_flag)`` pairs; bare strings are logged.
    Variables listed in ``interactions`` are multiplied by the treatment and
    must also enter in levels, either as covariates (frontier/OLS side) or as
    inefficiency determinants (variance side).
    """

    outcome: str
    treatment: str
    cluster: str
    inputs: Sequence = ()
    log_outcome: bool = True
    land_column: str | None = None
    covariates: Sequence[str] = ()
    interactions: Sequence[str] = ()
    ineff_determinants: Sequence[str] = ()
    noise_determinants: Sequence[str] | None = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", _as_inputs(self.inputs))
        for name in ("covariates", "interactions", "ineff_determinants"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.noise_determinants is not None:
            object.__setattr__(self, "noise_determinants", tuple(self.noise_determinants))

    @property
    def input_names(self) -> list[str]:
        return [name for name, _ in self.inputs]

    def referenced_columns(self) -> list[str]:
        cols = [self.outcome, self.treatment, self.cluster, *self.input_names, *self.covariates,
                *self.ineff_determinants, *(self.noise_determinants or ())]
        if self.land_column:
            cols.append(self.land_column)
        return list(dict.fromkeys(cols))

    def validate(self, table: ObservationTable) -> None:
        missing = [c for c in self.referenced_columns() if c not in table.columns]
        if missing:
            raise SchemaError(f"formula references columns absent from table: {missing}")
        z = table[self.treatment].dropna()
        if not z.isin([0, 1]).all():
            raise SchemaError(f"treatment column {self.treatment!r} is not binary")
        levels = set(self.covariates) | set(self.ineff_determinants)
        stray = [c for c in self.interactions if c not in levels]
        if stray:
            raise SchemaError(f"interacted variables must also enter in levels: {stray}")

    def normalized(self, suffix: str = "_per") -> "FormulaSpec":
        """The spec rewritten to point at the columns made by :func:`per_unit_transform`."""
        if not self.land_column:
            raise SchemaError("per-unit normalization needs land_column")
        inputs = tuple((n if n == self.land_column else n + suffix, f) for n, f in self.inputs)
        return replace(self, outcome=self.outcome + suffix, inputs=inputs)


def per_unit_transform(table: ObservationTable, spec: FormulaSpec, suffix: str = "_per") -> ObservationTable:
    """Divide the outcome and every input except land by land, row-wise.

    New columns ``<name><suffix>`` are added; land itself stays unscaled so its
    log coefficient reads as returns to scale minus one. Rows with land <= 0
    are dropped and logged.
    """
    land = spec.land_column
    if not land:
        raise SchemaError("per_unit_transform needs spec.land_column")
    if land not in table.columns:
        raise SchemaError(f"land column {land!r} absent from table")
    lv = table[land].to_numpy(dtype=float)
    keep = ~(lv <= 0)  # NaN land is kept here and handled by listwise deletion later
    out = table.select(keep, reason=f"nonpositive:{land}")
    if out.row_count == 0:
        raise EmptySampleError("every row dropped by per-unit normalization")
    frame = out.frame
    kinds = dict(out.kinds)
    for name in [spec.outcome] + [n for n in spec.input_names if n != land]:
        frame[name + suffix] = frame[name].astype(float) / frame[land].astype(float)
        kinds[name + suffix] = CONTINUOUS
    return replace(out, frame=frame, kinds=kinds)


@dataclass(frozen=True)
class ZeroPolicy:
    """What to do with nonpositive values in a column about to be logged."""

    kind: str = "drop"
    epsilon: float = 0.0

    @classmethod
    def parse(cls, text) -> "ZeroPolicy":
        if isinstance(text, ZeroPolicy):
            return text
        if text is None or text == "drop":
            return cls("drop")
        if isinstance(text, str) and text.startswith("shift"):
            _, _, eps = text.partition(":")
            if not eps:
                raise SchemaError("shift policy needs an epsilon, e.g. 'shift:0.01'")
            return shift_epsilon(float(eps))
        raise SchemaError(f"unknown zero policy {text!r}")

    def __str__(self):
        return "drop" if self.kind == "drop" else f"shift:{self.epsilon!r}"


def shift_epsilon(eps: float) -> ZeroPolicy:
    if not eps > 0:
        raise SchemaError("shift epsilon must be positive")
    return ZeroPolicy("shift", float(eps))


@dataclass(frozen=True)
class DesignMatrices:
    """Estimation-ready arrays.

    ``W_u`` and ``W_v`` default to an intercept column; ``cluster_ids``
    defaults to singleton clusters.
    """

    y: np.ndarray
    X: np.ndarray
    x_names: tuple[str, ...]
    W_u: np.ndarray | None = None
    wu_names: tuple[str, ...] = ("const",)
    W_v: np.ndarray | None = None
    wv_names: tuple[str, ...] = ("const",)
    cluster_ids: np.ndarray | None = None
    treatment: str | None = None
    row_index: np.ndarray | None = None
    excluded: tuple[Exclusion, ...] = ()
    outcome: str = "y"
    log_outcome: bool = False

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = len(y)
        if X.shape[0] != n:
            raise DesignError("X and y have different row counts")
        Wu = np.ones((n, 1)) if self.W_u is None else np.asarray(self.W_u, dtype=float).reshape(n, -1)
        Wv = np.ones((n, 1)) if self.W_v is None else np.asarray(self.W_v, dtype=float).reshape(n, -1)
        cl = np.arange(n) if self.cluster_ids is None else np.asarray(self.cluster_ids)
        rows = np.arange(1, n + 1) if self.row_index is None else np.asarray(self.row_index)
        for name, arr in (("y", y), ("X", X), ("W_u", Wu), ("W_v", Wv)):
            if not np.all(np.isfinite(arr)):
                raise DesignError(f"{name} has non-finite entries")
        for name, arr, names in (("X", X, self.x_names), ("W_u", Wu, self.wu_names), ("W_v", Wv, self.wv_names)):
            if arr.shape[1] != len(names):
                raise DesignError(f"{name} has {arr.shape[1]} columns but {len(names)} names")
        _, cl = np.unique(cl, return_inverse=True)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "W_u", Wu)
        object.__setattr__(self, "W_v", Wv)
        object.__setattr__(self, "cluster_ids", cl.astype(np.int64))
        object.__setattr__(self, "row_index", rows)
        object.__setattr__(self, "x_names", tuple(self.x_names))
        object.__setattr__(self, "wu_names", tuple(self.wu_names))
        object.__setattr__(self, "wv_names", tuple(self.wv_names))

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def n_clusters(self) -> int:
        return int(self.cluster_ids.max()) + 1 if self.n else 0

    def subset(self, mask) -> "DesignMatrices":
        mask = np.asarray(mask, dtype=bool)
        return replace(
            self, y=self.y[mask], X=self.X[mask], W_u=self.W_u[mask], W_v=self.W_v[mask],
            cluster_ids=self.cluster_ids[mask], row_index=self.row_index[mask],
        )


def check_rank(M: np.ndarray, names: Sequence[str], label: str = "X") -> None:
    """Raise :class:`DesignError` naming columns that are linearly dependent."""
    dups = [n for n, c in Counter(names).items() if c > 1]
    if dups:
        raise DesignError(f"{label} has duplicated columns: {dups}", dups)
    if M.shape[0] < M.shape[1]:
        raise DesignError(f"{label} has more columns ({M.shape[1]}) than rows ({M.shape[0]})")
    scale = np.linalg.norm(M, axis=0)
    scale[scale == 0] = 1.0
    _, R, piv = linalg.qr(M / scale, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = max(M.shape) * np.finfo(float).eps * (d[0] if d.size else 0.0) * 10
    rank = int(np.sum(d > tol))
    if rank < M.shape[1]:
        bad = [names[j] for j in sorted(piv[rank:])]
        raise DesignError(f"{label} is rank deficient; collinear columns: {bad}", bad)


def _expand(frame: pd.DataFrame, col: str, kind: str) -> tuple[list[str], list[np.ndarray]]:
    if kind != CATEGORICAL:
        return [col], [frame[col].to_numpy(dtype=float)]
    levels = sorted(frame[col].astype(str).unique())
    names, cols = [], []
    for lev in levels[1:]:
        names.append(f"{col}[{lev}]")
        cols.append((frame[col].astype(str) == lev).to_numpy(dtype=float))
    return names, cols


def build_design(table: ObservationTable, spec: FormulaSpec, zero_policy="drop") -> DesignMatrices:
    """Apply logs, listwise deletion and categorical expansion; assemble X, W_u, W_v.

    X = [const, inputs, Z, covariates, Z x (interactions among covariates)]
    W_u = [const, Z, ineff determinants, Z x (interactions among determinants)]
    W_v = [const, noise determinants]
    """
    spec.validate(table)
    policy = ZeroPolicy.parse(zero_policy)
    frame = table.frame
    keep = np.ones(len(frame), dtype=bool)
    reasons: dict[int, str] = {}

    def drop(mask, reason):
        new = mask & keep
        for r in frame.index[new]:
            reasons.setdefault(int(r), reason)
        keep[new] = False

    for col in spec.referenced_columns():
        s = frame[col]
        drop(s.isna().to_numpy(), f"missing:{col}")

    logged = ([spec.outcome] if spec.log_outcome else []) + [n for n, f in spec.inputs if f]
    values: dict[str, np.ndarray] = {}
    for col in dict.fromkeys(logged):
        v = frame[col].to_numpy(dtype=float).copy()
        if policy.kind == "shift":
            v = v + policy.epsilon
        with np.errstate(invalid="ignore"):
            drop(~(v > 0) & ~np.isnan(v), f"nonpositive:{col}")
        with np.errstate(divide="ignore", invalid="ignore"):
            values[col] = np.log(v)
    for col in values:
        drop(~np.isfinite(values[col]) & keep, f"nonfinite:{col}")

    excluded = tuple(Exclusion(r, reasons[r]) for r in sorted(reasons))
    if not keep.any():
        raise EmptySampleError("no rows remain after exclusions")
    sub = frame.loc[keep]

    def col_values(name):
        return values[name][keep] if name in values else sub[name].to_numpy(dtype=float)

    y = col_values(spec.outcome)
    z = sub[spec.treatment].to_numpy(dtype=float)
    n = len(y)

    x_names, x_cols = ["const"], [np.ones(n)]
    for name, flag in spec.inputs:
        x_names.append(f"ln_{name}" if flag else name)
        x_cols.append(col_values(name))
    x_names.append(spec.treatment)
    x_cols.append(z)
    expanded = {}
    for col in dict.fromkeys([*spec.covariates, *spec.ineff_determinants, *(spec.noise_determinants or ())]):
        if col == spec.treatment:
            expanded[col] = ([col], [z])
        else:
            expanded[col] = _expand(sub, col, table.kind(col))
    for col in spec.covariates:
        x_names += expanded[col][0]
        x_cols += expanded[col][1]
    for col in spec.interactions:
        if col in spec.covariates:
            for nm, c in zip(*expanded[col]):
                x_names.append(f"{spec.treatment}:{nm}")
                x_cols.append(z * c)

    wu_names, wu_cols = ["const", spec.treatment], [np.ones(n), z]
    for col in spec.ineff_determinants:
        wu_names += expanded[col][0]
        wu_cols += expanded[col][1]
    for col in spec.interactions:
        if col in spec.ineff_determinants:
            for nm, c in zip(*expanded[col]):
                wu_names.append(f"{spec.treatment}:{nm}")
                wu_cols.append(z * c)

    wv_names, wv_cols = ["const"], [np.ones(n)]
    for col in spec.noise_determinants or ():
        wv_names += expanded[col][0]
        wv_cols += expanded[col][1]

    X = np.column_stack(x_cols)
    Wu = np.column_stack(wu_cols)
    Wv = np.column_stack(wv_cols)
    check_rank(X, x_names, "X")
    check_rank(Wu, wu_names, "W_u")
    check_rank(Wv, wv_names, "W_v")
    labels = sub[spec.cluster].astype(str).to_numpy()
    return DesignMatrices(
        y=y, X=X, x_names=tuple(x_names), W_u=Wu, wu_names=tuple(wu_names), W_v=Wv,
        wv_names=tuple(wv_names), cluster_ids=labels, treatment=spec.treatment,
        row_index=sub.index.to_numpy(), excluded=excluded, outcome=spec.outcome,
        log_outcome=spec.log_outcome,
    )


def exclusion_counts(exclusions: Iterable[Exclusion]) -> dict[str, int]:
    return dict(sorted(Counter(e.reason for e in exclusions).items()))


def exclusion_report(exclusions: Iterable[Exclusion]) -> str:
    """Tab-separated ``row<TAB>reason`` lines under a header."""
    lines = ["row\treason"] + [f"{e.row}\t{e.reason}" for e in exclusions]
    return "\n".join(lines) + "\n"
