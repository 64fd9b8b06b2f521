"""Trial dataset model: CSV ingestion, validation, long-format expansion,
and stratified fold assignment.

Time is discrete on the grid 1..T. Continuous event times must be
discretized upstream; nothing here bins silently. Subjects observed beyond
the horizon are administratively censored at T.
"""

from __future__ import annotations

import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataValidationError, PositivityError, SchemaError

DEFAULT_COLUMNS = {"id": "id", "stratum": "w", "arm": "a", "time": "u", "event": "delta"}


@dataclass
class SchemaConfig:
    """Column mapping for subject-level CSV input.

    ``covariates=None`` auto-detects: every column not claimed by another
    role is treated as a covariate, in file order.
    """

    id: str = "id"
    stratum: str = "w"
    arm: str = "a"
    time: str = "u"
    event: str = "delta"
    covariates: list[str] | None = None
    horizon: int | None = None

    @classmethod
    def from_json(cls, text: str) -> "SchemaConfig":
        raw = json.loads(text)
        known = {k: raw[k] for k in ("id", "stratum", "arm", "time", "event", "covariates", "horizon") if k in raw}
        unknown = set(raw) - set(known)
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**known)


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    x: np.ndarray          # baseline covariates
    w: str                 # stratum label
    a: int                 # arm in {0, 1}
    u: int                 # observed time in 1..T
    delta: int             # event indicator


@dataclass
class TrialDataset:
    """Validated subject-level trial data, immutable after construction.

    Column-oriented storage; ``subjects`` materializes the record view.
    """

    ids: np.ndarray            # (n,) str
    x: np.ndarray              # (n, p) float64
    stratum_idx: np.ndarray    # (n,) int, index into stratum_levels
    arm: np.ndarray            # (n,) int in {0, 1}
    time: np.ndarray           # (n,) int in 1..horizon
    event: np.ndarray          # (n,) int in {0, 1}
    horizon: int
    covariate_names: list[str]
    stratum_levels: list[str]

    def __post_init__(self):
        for arr in (self.x, self.stratum_idx, self.arm, self.time, self.event):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_strata(self) -> int:
        return len(self.stratum_levels)

    @property
    def subjects(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(
                id=str(self.ids[i]),
                x=self.x[i],
                w=self.stratum_levels[self.stratum_idx[i]],
                a=int(self.arm[i]),
                u=int(self.time[i]),
                delta=int(self.event[i]),
            )
            for i in range(self.n)
        ]

    def stratum_dummies(self) -> np.ndarray:
        """One-hot stratum indicators, (n, n_strata). The stratum is part of
        the covariate set available to outcome models."""
        out = np.zeros((self.n, self.n_strata))
        out[np.arange(self.n), self.stratum_idx] = 1.0
        return out

    def to_csv_bytes(self, schema: SchemaConfig | None = None) -> bytes:
        """Serialize; floats use repr precision so parse -> serialize -> parse
        round-trips bit-exactly."""
        schema = schema or SchemaConfig(covariates=self.covariate_names)
        cov_names = schema.covariates or self.covariate_names
        buf = io.StringIO()
        header = [schema.id, schema.stratum, schema.arm, schema.time, schema.event, *cov_names]
        buf.write(",".join(header) + "\n")
        for i in range(self.n):
            row = [
                str(self.ids[i]),
                self.stratum_levels[self.stratum_idx[i]],
                str(int(self.arm[i])),
                str(int(self.time[i])),
                str(int(self.event[i])),
            ]
            row.extend(np.format_float_positional(v, unique=True, trim="0") for v in self.x[i])
            buf.write(",".join(row) + "\n")
        return buf.getvalue().encode("utf-8")


def parse_dataset(csv_bytes: bytes, schema: SchemaConfig | None = None) -> TrialDataset:
    """Parse and validate a subject-level CSV.

    Raises SchemaError for structural problems (empty file, missing columns),
    DataValidationError for bad values (non-binary arm/event, missing or
    non-numeric covariates, out-of-range times), and PositivityError when a
    stratum lacks subjects in one arm.
    """
    schema = schema or SchemaConfig()
    text = csv_bytes.decode("utf-8") if isinstance(csv_bytes, (bytes, bytearray)) else str(csv_bytes)
    if not text.strip():
        raise SchemaError("empty CSV input")
    try:
        df = pd.read_csv(io.StringIO(text), dtype={schema.id: str, schema.stratum: str},
                         float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise SchemaError("empty CSV input") from None
    except pd.errors.ParserError as exc:
        raise SchemaError(f"malformed CSV: {exc}") from None

    required = [schema.id, schema.stratum, schema.arm, schema.time, schema.event]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"missing required columns: {missing}")

    if schema.covariates is None:
        cov_names = [c for c in df.columns if c not in required]
    else:
        cov_names = list(schema.covariates)
        absent = [c for c in cov_names if c not in df.columns]
        if absent:
            raise SchemaError(f"missing covariate columns: {absent}")
    if df.shape[0] == 0:
        raise SchemaError("CSV has a header but no data rows")

    ids = df[schema.id].to_numpy(dtype=str)
    if len(set(ids)) != len(ids):
        raise DataValidationError("duplicate subject ids")

    def _int_column(col, allowed=None):
        vals = pd.to_numeric(df[col], errors="coerce")
        if vals.isna().any():
            rows = (np.flatnonzero(vals.isna()) + 2).tolist()  # 1-based incl. header
            raise DataValidationError(f"non-numeric values in column '{col}' at file rows {rows[:5]}")
        arr = vals.to_numpy()
        if not np.array_equal(arr, np.round(arr)):
            raise DataValidationError(f"non-integer values in column '{col}'")
        arr = arr.astype(int)
        if allowed is not None and not np.isin(arr, allowed).all():
            bad = sorted(set(arr) - set(allowed))
            raise DataValidationError(f"column '{col}' must be in {allowed}, found {bad}")
        return arr

    arm = _int_column(schema.arm, allowed=[0, 1])
    event = _int_column(schema.event, allowed=[0, 1])
    time = _int_column(schema.time)
    if (time < 1).any():
        raise DataValidationError(f"column '{schema.time}' must be >= 1")

    x = np.empty((df.shape[0], len(cov_names)))
    for k, c in enumerate(cov_names):
        vals = pd.to_numeric(df[c], errors="coerce")
        if vals.isna().any():
            rows = (np.flatnonzero(vals.isna()) + 2).tolist()
            raise DataValidationError(f"missing or non-numeric covariate '{c}' at file rows {rows[:5]}")
        x[:, k] = vals.to_numpy(dtype=float)

    horizon = int(schema.horizon) if schema.horizon is not None else int(time.max())
    if horizon < 1:
        raise SchemaError("horizon must be >= 1")
    # administrative censoring at the horizon
    over = time > horizon
    if over.any():
        time = np.where(over, horizon, time)
        event = np.where(over, 0, event)

    stratum_raw = df[schema.stratum].astype(str).to_numpy()
    levels = list(dict.fromkeys(stratum_raw))  # first-appearance order
    level_of = {w: k for k, w in enumerate(levels)}
    stratum_idx = np.array([level_of[w] for w in stratum_raw], dtype=int)

    ds = TrialDataset(
        ids=ids,
        x=x,
        stratum_idx=stratum_idx,
        arm=arm.astype(int),
        time=time.astype(int),
        event=event.astype(int),
        horizon=horizon,
        covariate_names=cov_names,
        stratum_levels=levels,
    )
    check_positivity(ds)
    return ds


def check_positivity(ds: TrialDataset) -> None:
    """Every stratum must contain at least one subject in each arm."""
    for k, w in enumerate(ds.stratum_levels):
        in_w = ds.stratum_idx == k
        for a in (0, 1):
            if not np.any(in_w & (ds.arm == a)):
                raise PositivityError(f"stratum '{w}' has no subjects in arm {a}")


@dataclass
class PersonTime:
    """Long-format person-time rows, one per (subject, t) with t <= min(U, T).

    All rows are at-risk by construction (I_t = 1 exactly when a row exists);
    ``event`` marks L_t = 1{U = t, delta = 1} and ``censor`` marks
    1{U = t, delta = 0}.
    """

    subject: np.ndarray   # (m,) row index into the dataset
    t: np.ndarray         # (m,) time in 1..T
    at_risk: np.ndarray   # (m,) all ones, kept for contract clarity
    event: np.ndarray     # (m,) 0/1
    censor: np.ndarray    # (m,) 0/1
    arm: np.ndarray       # (m,)
    stratum_idx: np.ndarray  # (m,)

    def __len__(self) -> int:
        return len(self.t)


def expand_long(ds: TrialDataset) -> PersonTime:
    """Expand to discrete-time long format: sum_i min(U_i, T) rows."""
    lengths = np.minimum(ds.time, ds.horizon)
    subject = np.repeat(np.arange(ds.n), lengths)
    t = np.concatenate([np.arange(1, m + 1) for m in lengths]) if ds.n else np.empty(0, dtype=int)
    last = t == lengths[subject]
    # U > horizon means administrative censoring at T regardless of delta
    observed_event = (ds.event[subject] == 1) & (ds.time[subject] <= ds.horizon)
    event = (last & observed_event).astype(int)
    censor = (last & ~observed_event).astype(int)
    return PersonTime(
        subject=subject,
        t=t,
        at_risk=np.ones(len(t), dtype=int),
        event=event,
        censor=censor,
        arm=ds.arm[subject],
        stratum_idx=ds.stratum_idx[subject],
    )


@dataclass
class FoldAssignment:
    n_folds: int
    fold_of: dict[str, int] = field(repr=False)
    seed: int = 0

    def fold_index(self, ds: TrialDataset) -> np.ndarray:
        return np.array([self.fold_of[str(i)] for i in ds.ids], dtype=int)


def assign_folds(ds: TrialDataset, n_folds: int, seed: int) -> FoldAssignment:
    """Stratum-by-arm balanced fold assignment for cross-fitting.

    Within every (stratum, arm) cell the fold counts differ by at most one,
    preserving the randomization balance across training splits. Deterministic
    in (dataset order, n_folds, seed).
    """
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    fold_of: dict[str, int] = {}
    if n_folds == 1:
        for i in ds.ids:
            fold_of[str(i)] = 0
        return FoldAssignment(n_folds=1, fold_of=fold_of, seed=seed)

    rng = np.random.default_rng(seed)
    start = 0  # rotate the dealing origin so fold sizes even out across cells
    for k in range(ds.n_strata):
        for a in (0, 1):
            members = np.flatnonzero((ds.stratum_idx == k) & (ds.arm == a))
            if len(members) < n_folds:
                warnings.warn(
                    f"cell (stratum={ds.stratum_levels[k]}, arm={a}) has "
                    f"{len(members)} subjects < {n_folds} folds; capping cell-wise",
                    stacklevel=2,
                )
            perm = rng.permutation(len(members))
            for pos, m in enumerate(members[perm]):
                fold_of[str(ds.ids[m])] = (start + pos) % n_folds
            start = (start + len(members)) % n_folds
    return FoldAssignment(n_folds=n_folds, fold_of=fold_of, seed=seed)
