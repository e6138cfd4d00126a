"""Longitudinal panel data model.

A panel holds n subjects observed at time points 0..K+1. Storage is
subject-major: each time-varying variable is an (n, K+2) float array; missing
cells are NaN. Censoring C is kept as an explicit monotone 0/1 array for every
time point. The missingness pattern is fixed by the censoring process:

- L1, L2, L3 at time k are observed iff the subject was uncensored at k-1
  (covariates at the first censored time are still recorded),
- Y and T at time k are observed iff the subject is uncensored at k,
- T is never recorded at the final time point K+1.

CSV layout is long format, one row per (id, time); statics are repeated on
every row and empty fields mean missing. C is written as 0 up to the first
censored time, 1 at that time, and blank afterwards.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataIntegrityError

CSV_HEADER = ["id", "time", "V1", "V2", "V3", "L1", "L2", "L3", "C", "Y", "T"]


@dataclass(frozen=True)
class Trajectory:
    """Single-subject view of a panel; arrays indexed by time point 0..K+1."""

    id: int
    v: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    l3: np.ndarray
    c: np.ndarray
    y: np.ndarray
    t: np.ndarray


@dataclass(frozen=True)
class DesignMatrix:
    """Feature rows for one time point: no missing cells by construction."""

    X: np.ndarray
    columns: tuple
    idx: np.ndarray  # positions into the source panel, one per row


class Panel:
    """Immutable collection of trajectories sharing one horizon K."""

    def __init__(self, ids, v, l1, l2, l3, c, y, t, validate: bool = True):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.v = np.asarray(v, dtype=np.float64)
        self.l1 = np.asarray(l1, dtype=np.float64)
        self.l2 = np.asarray(l2, dtype=np.float64)
        self.l3 = np.asarray(l3, dtype=np.float64)
        self.c = np.asarray(c, dtype=np.int8)
        self.y = np.asarray(y, dtype=np.float64)
        self.t = np.asarray(t, dtype=np.float64)
        if validate:
            self._validate()

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    @property
    def K(self) -> int:
        return self.l1.shape[1] - 2

    @property
    def n_times(self) -> int:
        return self.l1.shape[1]

    def _validate(self) -> None:
        n = self.ids.shape[0]
        if self.ids.ndim != 1 or np.unique(self.ids).size != n:
            raise DataIntegrityError("subject ids must be a 1-d array of unique integers")
        if self.v.shape != (n, 3):
            raise DataIntegrityError("static covariates must have shape (n, 3)")
        shape = self.l1.shape
        if len(shape) != 2 or shape[0] != n or shape[1] < 2:
            raise DataIntegrityError("time-varying arrays must be (n, K+2) with K >= 0")
        for name in ("l2", "l3", "c", "y", "t"):
            if getattr(self, name).shape != shape:
                raise DataIntegrityError(f"array {name} does not match shape {shape}")
        if n == 0:
            return
        if not np.isin(self.v[:, :2], (0.0, 1.0)).all():
            raise DataIntegrityError("V1 and V2 must be binary")
        if not np.isfinite(self.v).all():
            raise DataIntegrityError("static covariates must be finite")
        if not np.isin(self.c, (0, 1)).all():
            raise DataIntegrityError("C must be 0/1 at every time point")
        if (self.c[:, 0] != 0).any():
            raise DataIntegrityError("all subjects must be uncensored at time 0")
        if (np.diff(self.c.astype(np.int16), axis=1) < 0).any():
            raise DataIntegrityError("censoring must be monotone")
        # Presence pattern induced by monotone censoring.
        alive = self.c == 0
        l_expected = np.ones_like(alive)
        l_expected[:, 1:] = alive[:, :-1]
        for name in ("l1", "l2", "l3"):
            present = ~np.isnan(getattr(self, name))
            if not np.array_equal(present, l_expected):
                raise DataIntegrityError(f"{name} must be present exactly while L is observed")
        if not np.array_equal(~np.isnan(self.y), alive):
            raise DataIntegrityError("Y must be present exactly while uncensored")
        t_expected = alive.copy()
        t_expected[:, -1] = False
        present_t = ~np.isnan(self.t)
        if not np.array_equal(present_t, t_expected):
            raise DataIntegrityError("T must be present exactly while uncensored, never at K+1")
        t_obs = self.t[present_t]
        if not np.isin(t_obs, (0.0, 1.0)).all():
            raise DataIntegrityError("observed T values must be binary")
        for name in ("l1", "l2", "l3", "y"):
            arr = getattr(self, name)
            if not np.isfinite(arr[~np.isnan(arr)]).all():
                raise DataIntegrityError(f"observed {name} values must be finite")

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            id=int(self.ids[i]), v=self.v[i],
            l1=self.l1[i], l2=self.l2[i], l3=self.l3[i],
            c=self.c[i], y=self.y[i], t=self.t[i],
        )

    def equals(self, other: "Panel") -> bool:
        if self.ids.shape != other.ids.shape or self.l1.shape != other.l1.shape:
            return False
        if not (np.array_equal(self.ids, other.ids) and np.array_equal(self.c, other.c)):
            return False
        if not np.array_equal(self.v, other.v, equal_nan=True):
            return False
        return all(
            np.array_equal(getattr(self, a), getattr(other, a), equal_nan=True)
            for a in ("l1", "l2", "l3", "y", "t")
        )


def at_risk(panel: Panel, k: int) -> np.ndarray:
    """Positions of subjects uncensored at time point k (C_k = 0)."""
    if not 0 <= k <= panel.K + 1:
        raise DataIntegrityError(f"time point {k} outside 0..{panel.K + 1}")
    return np.flatnonzero(panel.c[:, k] == 0)


def history_features(panel: Panel, k: int, include_current_l: bool = True,
                     include_current_y: bool = False, idx=None) -> DesignMatrix:
    """Covariate history design matrix at time point k.

    Columns in fixed order: statics (V1, V2, V3), then one block per past time
    j = 0..k-1 of (L1_j, L2_j, L3_j, Y_j, T_j), then the current covariates
    (L1_k, L2_k, L3_k) when include_current_l, then Y_k when include_current_y.
    With the defaults the column count is 5k+6 for k >= 1. Rows default to the
    subjects at risk at k; any missing cell in a selected row is an error.
    """
    if not 0 <= k <= panel.K + 1:
        raise DataIntegrityError(f"time point {k} outside 0..{panel.K + 1}")
    if idx is None:
        idx = at_risk(panel, k)
    idx = np.asarray(idx, dtype=np.int64)
    cols: list[np.ndarray] = [panel.v[idx, 0], panel.v[idx, 1], panel.v[idx, 2]]
    names: list[str] = ["V1", "V2", "V3"]
    for j in range(k):
        cols.extend([panel.l1[idx, j], panel.l2[idx, j], panel.l3[idx, j],
                     panel.y[idx, j], panel.t[idx, j]])
        names.extend([f"L1_{j}", f"L2_{j}", f"L3_{j}", f"Y_{j}", f"T_{j}"])
    if include_current_l:
        cols.extend([panel.l1[idx, k], panel.l2[idx, k], panel.l3[idx, k]])
        names.extend([f"L1_{k}", f"L2_{k}", f"L3_{k}"])
    if include_current_y:
        cols.append(panel.y[idx, k])
        names.append(f"Y_{k}")
    X = np.column_stack(cols) if cols else np.empty((idx.size, 0))
    if idx.size and not np.isfinite(X).all():
        bad = np.flatnonzero(~np.isfinite(X).all(axis=0))
        raise DataIntegrityError(
            f"missing cells at time point {k} in columns {[names[j] for j in bad]}")
    return DesignMatrix(X=X, columns=tuple(names), idx=idx)


def _fmt(x) -> str:
    return repr(float(x))


def write_csv(panel: Panel, path) -> None:
    """Write the panel in long format; see module docstring for the schema."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for i in range(panel.n):
            fc = _first_censored(panel.c[i])
            statics = [str(int(panel.v[i, 0])), str(int(panel.v[i, 1])), _fmt(panel.v[i, 2])]
            for k in range(panel.n_times):
                if k < fc:
                    c_field = "0"
                elif k == fc:
                    c_field = "1"
                else:
                    c_field = ""
                row = [str(int(panel.ids[i])), str(k), *statics,
                       _cell(panel.l1[i, k]), _cell(panel.l2[i, k]), _cell(panel.l3[i, k]),
                       c_field, _cell(panel.y[i, k]), _tcell(panel.t[i, k])]
                w.writerow(row)


def _cell(x) -> str:
    return "" if np.isnan(x) else _fmt(x)


def _tcell(x) -> str:
    return "" if np.isnan(x) else str(int(x))


def _first_censored(c_row: np.ndarray) -> int:
    hits = np.flatnonzero(c_row == 1)
    return int(hits[0]) if hits.size else c_row.size  # past the end = never censored


def read_csv(path) -> Panel:
    """Parse a long-format panel CSV; raises DataIntegrityError naming the bad row."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataIntegrityError("empty file: missing header") from None
        if header != CSV_HEADER:
            raise DataIntegrityError(f"malformed header {header!r}")
        rows = list(reader)
    if not rows:
        return Panel(ids=np.empty(0, dtype=np.int64), v=np.empty((0, 3)),
                     l1=np.full((0, 2), np.nan), l2=np.full((0, 2), np.nan),
                     l3=np.full((0, 2), np.nan), c=np.zeros((0, 2), dtype=np.int8),
                     y=np.full((0, 2), np.nan), t=np.full((0, 2), np.nan))

    ids_in_order: list[int] = []
    per_subject: dict[int, dict[int, tuple[int, list[str]]]] = {}
    max_time = -1
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(CSV_HEADER):
            raise DataIntegrityError(f"row {lineno}: expected {len(CSV_HEADER)} fields")
        try:
            sid, k = int(row[0]), int(row[1])
        except ValueError:
            raise DataIntegrityError(f"row {lineno}: id and time must be integers") from None
        if k < 0:
            raise DataIntegrityError(f"row {lineno}: negative time point")
        if sid not in per_subject:
            per_subject[sid] = {}
            ids_in_order.append(sid)
        if k in per_subject[sid]:
            raise DataIntegrityError(f"row {lineno}: duplicate (id, time) = ({sid}, {k})")
        per_subject[sid][k] = (lineno, row)
        max_time = max(max_time, k)

    if max_time < 1:
        raise DataIntegrityError("panel must contain time points 0 and 1 at least")
    n, n_times = len(ids_in_order), max_time + 1
    v = np.empty((n, 3))
    l1, l2, l3, y, t = (np.full((n, n_times), np.nan) for _ in range(5))
    c = np.zeros((n, n_times), dtype=np.int8)

    for i, sid in enumerate(ids_in_order):
        times = per_subject[sid]
        if sorted(times) != list(range(n_times)):
            raise DataIntegrityError(f"subject {sid}: time points must be exactly 0..{max_time}")
        censored = False
        for k in range(n_times):
            lineno, row = times[k]
            statics = _parse_statics(row, lineno)
            if k == 0:
                v[i] = statics
            elif not np.array_equal(v[i], statics, equal_nan=True):
                raise DataIntegrityError(f"row {lineno}: static covariates changed for subject {sid}")
            l1[i, k] = _parse_cell(row[5], lineno, "L1")
            l2[i, k] = _parse_cell(row[6], lineno, "L2")
            l3[i, k] = _parse_cell(row[7], lineno, "L3")
            y[i, k] = _parse_cell(row[9], lineno, "Y")
            t[i, k] = _parse_cell(row[10], lineno, "T")
            c_field = row[8].strip()
            if censored:
                if c_field != "":
                    raise DataIntegrityError(
                        f"row {lineno}: censoring must stay blank after the censoring time")
                c[i, k] = 1
            elif c_field == "0":
                c[i, k] = 0
            elif c_field == "1":
                c[i, k] = 1
                censored = True
            else:
                raise DataIntegrityError(f"row {lineno}: C must be 0 or 1 while uncensored")
    return Panel(ids=np.asarray(ids_in_order, dtype=np.int64), v=v,
                 l1=l1, l2=l2, l3=l3, c=c, y=y, t=t)


def _parse_statics(row: list[str], lineno: int) -> np.ndarray:
    try:
        return np.array([float(row[2]), float(row[3]), float(row[4])])
    except ValueError:
        raise DataIntegrityError(f"row {lineno}: static covariates must be numeric") from None


def _parse_cell(field: str, lineno: int, name: str) -> float:
    field = field.strip()
    if field == "":
        return np.nan
    try:
        return float(field)
    except ValueError:
        raise DataIntegrityError(f"row {lineno}: bad {name} value {field!r}") from None
