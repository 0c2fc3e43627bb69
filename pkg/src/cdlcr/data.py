"""Capture histories with covariate observations, and their flat CSV format.

One row per (individual, primary, secondary) occasion::

    id,primary,secondary,captured,covariate,flag

``primary`` and ``secondary`` are 1-based; ``secondary`` is 1 throughout for a
standard design.  ``covariate`` holds the recorded mass or state code on
captured rows.  ``flag`` is empty, ``censored`` (mass at the scale maximum),
``absent`` (mass not recorded) or ``unknown`` (state not determined).
Occasions without a row are treated as not captured.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covariates import SCALE_MAX, UNKNOWN_STATE, DataValidationError

__all__ = ["CaptureData", "read_captures", "write_captures", "file_checksum", "COLUMNS"]

COLUMNS = ("id", "primary", "secondary", "captured", "covariate", "flag")
COVARIATE_KINDS = ("none", "mass", "categorical")


@dataclass
class CaptureData:
    """Dense capture array ``X[i, j, l]`` for the ``n`` observed individuals.

    ``mass`` is NaN wherever no mass was recorded; ``state`` is ``(n, k1)``
    with 0 for unknown.
    """

    X: np.ndarray
    k2: tuple[int, ...]
    covariate: str = "none"
    ids: list[str] = field(default_factory=list)
    mass: np.ndarray | None = None
    state: np.ndarray | None = None
    scale_max: float = SCALE_MAX

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.int8)
        if self.X.ndim == 2:
            self.X = self.X[:, :, None]
        self.k2 = tuple(int(v) for v in self.k2)
        if self.covariate not in COVARIATE_KINDS:
            raise DataValidationError(f"covariate must be one of {COVARIATE_KINDS}")
        n, k1, kmax = self.X.shape
        if len(self.k2) != k1 or max(self.k2, default=1) != kmax:
            raise DataValidationError(f"k2={self.k2} does not match X shape {self.X.shape}")
        if not self.ids:
            self.ids = [str(i + 1) for i in range(n)]
        if len(self.ids) != n:
            raise DataValidationError("one id per individual required")
        if np.any(self.X[:, ~self.secondary_mask()] != 0):
            raise DataValidationError("captures recorded on secondary samples outside the design")
        if n and np.any(self.X.reshape(n, -1).sum(axis=1) == 0):
            raise DataValidationError("every listed individual must be captured at least once")
        if self.covariate == "mass":
            if self.mass is None:
                self.mass = np.full(self.X.shape, np.nan)
            self.mass = np.asarray(self.mass, dtype=float)
            recorded = ~np.isnan(self.mass)
            if np.any(recorded & (self.X == 0)):
                raise DataValidationError("mass recorded on an occasion without capture")
            if np.any(self.mass[recorded] > self.scale_max) or np.any(self.mass[recorded] <= 0):
                raise DataValidationError(f"masses must lie in (0, {self.scale_max}]")
        if self.covariate == "categorical":
            if self.state is None:
                self.state = np.zeros((n, k1), dtype=np.int64)
            self.state = np.asarray(self.state, dtype=np.int64)
            if self.state.shape != (n, k1):
                raise DataValidationError("state must be (n, k1)")
            if np.any((self.state != UNKNOWN_STATE) & (self.X.sum(axis=2) == 0)):
                raise DataValidationError("state recorded in a primary period without capture")

    @classmethod
    def empty(cls, k1: int, k2=1, covariate: str = "none", scale_max: float = SCALE_MAX):
        k2 = tuple(np.broadcast_to(np.asarray(k2), (k1,)).tolist())
        X = np.zeros((0, k1, max(k2)), dtype=np.int8)
        return cls(X=X, k2=k2, covariate=covariate, scale_max=scale_max)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k1(self) -> int:
        return self.X.shape[1]

    @property
    def k2_max(self) -> int:
        return self.X.shape[2]

    def secondary_mask(self) -> np.ndarray:
        return np.arange(self.k2_max)[None, :] < np.asarray(self.k2)[:, None]

    @property
    def caught(self) -> np.ndarray:
        """``(n, k1)`` indicator of capture in each primary period."""
        return self.X.any(axis=2)

    @property
    def first_capture(self) -> np.ndarray:
        return self.caught.argmax(axis=1)

    @property
    def last_capture(self) -> np.ndarray:
        return self.k1 - 1 - self.caught[:, ::-1].argmax(axis=1)

    def mass_values(self) -> np.ndarray:
        if self.mass is None:
            return np.zeros(0)
        return self.mass[~np.isnan(self.mass)]

    def same_as(self, other: "CaptureData") -> bool:
        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b, equal_nan=np.asarray(a).dtype.kind == "f")

        return (
            self.ids == other.ids
            and self.k2 == other.k2
            and self.covariate == other.covariate
            and self.scale_max == other.scale_max
            and np.array_equal(self.X, other.X)
            and eq(self.mass, other.mass)
            and eq(self.state, other.state)
        )


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_captures(data: CaptureData, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(COLUMNS)
        for i, ident in enumerate(data.ids):
            for j in range(data.k1):
                for l in range(data.k2[j]):
                    cap = int(data.X[i, j, l])
                    cov, flag = "", ""
                    if cap and data.covariate == "mass":
                        z = data.mass[i, j, l]
                        if np.isnan(z):
                            flag = "absent"
                        else:
                            cov = _fmt(z)
                            flag = "censored" if z == data.scale_max else ""
                    elif cap and data.covariate == "categorical":
                        s = int(data.state[i, j])
                        if s == UNKNOWN_STATE:
                            flag = "unknown"
                        else:
                            cov = str(s)
                    out.writerow([ident, j + 1, l + 1, cap, cov, flag])
    return path


def read_captures(path, covariate: str = "none", k1: int | None = None, k2=None,
                  scale_max: float = SCALE_MAX) -> CaptureData:
    """Parse and validate a capture CSV.

    The design is taken from ``k1``/``k2`` when given, otherwise from the
    largest primary and per-primary secondary indices present in the file.
    All problems are collected and raised together with their line numbers.
    """
    path = Path(path)
    if covariate not in COVARIATE_KINDS:
        raise DataValidationError(f"covariate must be one of {COVARIATE_KINDS}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = list(enumerate(reader, start=2))
    if header is None:
        raise DataValidationError(f"{path}: empty file")
    header = [h.strip() for h in header]
    missing = [c for c in COLUMNS[:4] if c not in header]
    if missing:
        raise DataValidationError(f"{path}: header lacks columns {missing}")
    col = {name: header.index(name) for name in header}
    if not rows:
        raise DataValidationError(f"{path}: no capture records")

    errors: list[str] = []
    parsed = []
    for lineno, row in rows:
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            row = row + [""] * (len(header) - len(row))
        try:
            ident = row[col["id"]].strip()
            j = int(row[col["primary"]])
            l = int(row[col["secondary"]])
            cap = int(row[col["captured"]])
        except ValueError:
            errors.append(f"line {lineno}: malformed row {row!r}")
            continue
        if not ident:
            errors.append(f"line {lineno}: empty id")
            continue
        if cap not in (0, 1):
            errors.append(f"line {lineno}: captured must be 0 or 1")
            continue
        cov = row[col["covariate"]].strip() if "covariate" in col else ""
        flag = row[col["flag"]].strip().lower() if "flag" in col else ""
        if j < 1 or l < 1:
            errors.append(f"line {lineno}: periods are 1-based, got primary={j} secondary={l}")
            continue
        parsed.append((lineno, ident, j - 1, l - 1, cap, cov, flag))
    if not parsed and not errors:
        raise DataValidationError(f"{path}: no capture records")

    n_primary = k1 if k1 is not None else max((p[2] for p in parsed), default=0) + 1
    if k2 is None:
        k2_arr = np.ones(n_primary, dtype=int)
        for p in parsed:
            if p[2] < n_primary:
                k2_arr[p[2]] = max(k2_arr[p[2]], p[3] + 1)
    else:
        k2_arr = np.broadcast_to(np.asarray(k2, dtype=int), (n_primary,)).copy()
    kmax = int(k2_arr.max())

    ids: list[str] = []
    index: dict[str, int] = {}
    seen: dict[tuple, int] = {}
    for lineno, ident, j, l, cap, cov, flag in parsed:
        if j >= n_primary or l >= k2_arr[j]:
            errors.append(f"line {lineno}: occasion ({j + 1}, {l + 1}) outside the design")
            continue
        key = (ident, j, l)
        if key in seen:
            errors.append(f"line {lineno}: duplicate record (first on line {seen[key]})")
            continue
        seen[key] = lineno
        if cap and ident not in index:
            index[ident] = len(ids)
            ids.append(ident)

    n = len(ids)
    X = np.zeros((n, n_primary, kmax), dtype=np.int8)
    mass = np.full(X.shape, np.nan) if covariate == "mass" else None
    state = np.zeros((n, n_primary), dtype=np.int64) if covariate == "categorical" else None
    for lineno, ident, j, l, cap, cov, flag in parsed:
        if not cap or ident not in index or (ident, j, l) not in seen or seen[(ident, j, l)] != lineno:
            continue
        i = index[ident]
        X[i, j, l] = 1
        if covariate == "mass":
            if flag == "absent":
                continue
            if not cov:
                if flag == "censored":
                    mass[i, j, l] = scale_max
                else:
                    errors.append(f"line {lineno}: captured without a mass (flag 'absent' or 'censored' required)")
                continue
            try:
                z = float(cov)
            except ValueError:
                errors.append(f"line {lineno}: mass {cov!r} is not a number")
                continue
            if z > scale_max:
                errors.append(f"line {lineno}: mass {z} above the scale maximum {scale_max}")
            elif z <= 0:
                errors.append(f"line {lineno}: mass {z} must be positive")
            else:
                mass[i, j, l] = z
        elif covariate == "categorical":
            if flag == "unknown" or not cov or cov.upper() == "NA":
                continue
            try:
                s = int(cov)
            except ValueError:
                errors.append(f"line {lineno}: state {cov!r} is not an integer code")
                continue
            if s < 1:
                errors.append(f"line {lineno}: state codes start at 1")
            elif state[i, j] not in (UNKNOWN_STATE, s):
                errors.append(f"line {lineno}: conflicting states within primary period {j + 1}")
            else:
                state[i, j] = s
    if errors:
        raise DataValidationError(f"{path}: " + "; ".join(errors))
    return CaptureData(X=X, k2=tuple(int(v) for v in k2_arr), covariate=covariate, ids=ids,
                       mass=mass, state=state, scale_max=scale_max)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
