"""Data containers for covariates with arbitrary missingness patterns.

A record carries observed covariates ``X_r`` (pattern mask ``R``), an
outcome pattern ``A`` from a small alphabet, and the outcome values
observed under that pattern ``W_A``.  Survival data is the special case
``A = delta`` with a single observed time shared by both patterns.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MISSING_TOKEN = "NA"  # case-sensitive


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class PatternMask:
    """Binary observation mask over the d covariates; bit j = 1 means X_j observed."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValidationError(f"mask bits must be 0/1, got {self.bits}")

    def __len__(self) -> int:
        return len(self.bits)

    def __str__(self) -> str:
        return "".join(str(b) for b in self.bits)

    @property
    def is_complete(self) -> bool:
        return all(b == 1 for b in self.bits)

    def complement(self) -> "PatternMask":
        return PatternMask(tuple(1 - b for b in self.bits))

    def as_int(self) -> int:
        # little-endian: bit j of the integer corresponds to covariate j
        return sum(b << j for j, b in enumerate(self.bits))

    @classmethod
    def from_int(cls, value: int, d: int) -> "PatternMask":
        return cls(tuple((value >> j) & 1 for j in range(d)))

    @classmethod
    def from_string(cls, s: str) -> "PatternMask":
        return cls(tuple(int(c) for c in s))

    @classmethod
    def complete(cls, d: int) -> "PatternMask":
        return cls((1,) * d)

    def observed_indices(self) -> tuple[int, ...]:
        return tuple(j for j, b in enumerate(self.bits) if b == 1)

    def missing_indices(self) -> tuple[int, ...]:
        return tuple(j for j, b in enumerate(self.bits) if b == 0)


@dataclass(frozen=True)
class ObservedRecord:
    """One observation (X_{i,R_i}, R_i, W_{i,A_i}, A_i).

    ``covariates`` has length d with ``None`` exactly where the mask bit is 0.
    ``outcomes`` holds the values observed under ``outcome_pattern``, in
    schema order.
    """

    covariates: tuple[float | None, ...]
    mask: PatternMask
    outcome_pattern: int
    outcomes: tuple[float, ...]

    def __post_init__(self):
        if len(self.covariates) != len(self.mask):
            raise ValidationError("covariate/mask length mismatch")
        for j, (v, b) in enumerate(zip(self.covariates, self.mask.bits)):
            if (v is None) == bool(b):
                raise ValidationError(f"covariate {j} presence contradicts mask bit")


@dataclass(frozen=True)
class DatasetSchema:
    """Column roles: covariates, outcome columns, and the pattern column.

    ``observed_under`` maps each outcome pattern to the indices of the
    outcome columns observed under it; by default every outcome column is
    observed under every pattern (survival time, realized treatment outcome).
    """

    covariate_names: tuple[str, ...]
    outcome_names: tuple[str, ...]
    pattern_name: str
    alphabet: tuple[int, ...] = (0, 1)
    observed_under: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def outcome_indices(self, a: int) -> tuple[int, ...]:
        if a in self.observed_under:
            return self.observed_under[a]
        return tuple(range(len(self.outcome_names)))

    def outcome_dim(self, a: int) -> int:
        return len(self.outcome_indices(a))

    @property
    def d(self) -> int:
        return len(self.covariate_names)

    @classmethod
    def survival(cls, covariate_names: Sequence[str], time_name: str = "y",
                 status_name: str = "delta") -> "DatasetSchema":
        return cls(tuple(covariate_names), (time_name,), status_name)

    @classmethod
    def treatment(cls, covariate_names: Sequence[str], outcome_name: str = "y",
                  treat_name: str = "a") -> "DatasetSchema":
        return cls(tuple(covariate_names), (outcome_name,), treat_name)

    @classmethod
    def missing_response(cls, covariate_names: Sequence[str], outcome_name: str = "y",
                         observed_name: str = "a") -> "DatasetSchema":
        return cls(tuple(covariate_names), (outcome_name,), observed_name,
                   observed_under={0: (), 1: (0,)})


class MissingDataset:
    """Immutable collection of ObservedRecords with a pattern-cell index.

    Also exposes dense numpy views used by the estimators:
      X      (n, d)  covariates, NaN where missing
      R_int  (n,)    little-endian mask integers
      A      (n,)    outcome patterns
      W      (n, k)  outcome columns, NaN where structurally unobserved
    """

    def __init__(self, records: Sequence[ObservedRecord], schema: DatasetSchema):
        if not records:
            raise ValidationError("empty dataset")
        self.schema = schema
        self.records = tuple(records)
        d = schema.d
        n = len(records)
        k = len(schema.outcome_names)

        X = np.full((n, d), np.nan)
        R_int = np.zeros(n, dtype=np.int64)
        A = np.zeros(n, dtype=np.int64)
        W = np.full((n, k), np.nan)
        for i, rec in enumerate(self.records):
            if len(rec.mask) != d:
                raise ValidationError(f"record {i}: mask length != d")
            a = rec.outcome_pattern
            cols = schema.outcome_indices(a)
            if len(rec.outcomes) != len(cols):
                raise ValidationError(
                    f"record {i}: outcome dim {len(rec.outcomes)} != dim(W_{a}) = {len(cols)}")
            for j, v in enumerate(rec.covariates):
                if v is not None:
                    X[i, j] = v
            R_int[i] = rec.mask.as_int()
            A[i] = a
            for c, v in zip(cols, rec.outcomes):
                W[i, c] = v
        X.setflags(write=False)
        R_int.setflags(write=False)
        A.setflags(write=False)
        W.setflags(write=False)
        self.X, self.R_int, self.A, self.W = X, R_int, A, W

        index: dict[tuple[int, int], list[int]] = {}
        for i in range(n):
            index.setdefault((int(R_int[i]), int(A[i])), []).append(i)
        self.pattern_index = {key: np.asarray(ix, dtype=np.int64) for key, ix in index.items()}

        complete = (1 << d) - 1
        for a in sorted(set(int(v) for v in A)):
            if (complete, a) not in self.pattern_index:
                raise ValidationError(
                    f"no complete-case record for outcome pattern a={a}")

    @classmethod
    def _assemble(cls, records: tuple, schema: DatasetSchema, X: np.ndarray,
                  R_int: np.ndarray, A: np.ndarray, W: np.ndarray) -> "MissingDataset":
        """Trusted fast path from prebuilt arrays (subsetting, generators)."""
        self = cls.__new__(cls)
        self.schema = schema
        self.records = records
        self.X, self.R_int, self.A, self.W = X, R_int, A, W
        key = R_int * (int(A.max()) + 1 if len(A) else 1) + A
        order = np.argsort(key, kind="stable")
        bounds = np.flatnonzero(np.diff(key[order])) + 1
        self.pattern_index = {
            (int(R_int[grp[0]]), int(A[grp[0]])): np.sort(grp)
            for grp in np.split(order, bounds)
        }
        complete = (1 << schema.d) - 1
        for a in sorted(set(int(v) for v in A)):
            if (complete, a) not in self.pattern_index:
                raise ValidationError(f"no complete-case record for outcome pattern a={a}")
        return self

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def d(self) -> int:
        return self.schema.d

    @property
    def complete_int(self) -> int:
        return (1 << self.d) - 1

    def is_complete(self) -> np.ndarray:
        return self.R_int == self.complete_int

    def occurring_patterns(self) -> list[tuple[int, int]]:
        """(mask_int, a) cells present in the data, mask ascending then a."""
        return sorted(self.pattern_index)

    def outcome_values(self, i: int) -> np.ndarray:
        """W_{i,A_i} as an array in schema order."""
        cols = self.schema.outcome_indices(int(self.A[i]))
        return self.W[i, list(cols)]

    def subset(self, indices: np.ndarray) -> "MissingDataset":
        indices = np.asarray(indices, dtype=np.int64)
        if len(indices) == 0:
            raise ValidationError("empty dataset")
        records = tuple(self.records[int(i)] for i in indices)
        return MissingDataset._assemble(records, self.schema, self.X[indices],
                                        self.R_int[indices], self.A[indices],
                                        self.W[indices])


@dataclass(frozen=True)
class OdfSpec:
    """Observed-decomposable function h(X, W, A) = sum_a f_a(X, W_a) 1(A=a).

    Each evaluator maps (full covariate vector, observed outcomes under a)
    to a vector of shared dimension and must not read outcome components
    outside W_a.
    """

    evaluators: dict[int, Callable[[np.ndarray, np.ndarray], np.ndarray]]
    dim: int = 1

    def __call__(self, a: int, x: np.ndarray, w_a: np.ndarray) -> np.ndarray:
        out = np.atleast_1d(np.asarray(self.evaluators[a](x, w_a), dtype=float))
        if out.shape != (self.dim,):
            raise ConfigurationError(f"f_{a} returned shape {out.shape}, expected ({self.dim},)")
        return out


def _parse_float(token: str, row: int, col: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"row {row}: cannot parse '{token}' in column {col}") from None


def load_csv(path: str, schema: DatasetSchema) -> MissingDataset:
    """Read a dataset; missing covariates are the literal token ``NA``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError("empty dataset") from None
        header = [h.strip() for h in header]
        for name in (*schema.covariate_names, *schema.outcome_names, schema.pattern_name):
            if name not in header:
                raise SchemaError(f"column '{name}' not found in header {header}")
        cov_pos = [header.index(c) for c in schema.covariate_names]
        out_pos = [header.index(c) for c in schema.outcome_names]
        pat_pos = header.index(schema.pattern_name)

        records = []
        for rownum, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise ParseError(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
            tok = row[pat_pos].strip()
            a_val = _parse_float(tok, rownum, schema.pattern_name)
            a = int(a_val)
            if a != a_val or a < 0:
                raise SchemaError(f"row {rownum}: outcome pattern must be a nonnegative integer, got '{tok}'")
            covs: list[float | None] = []
            bits = []
            for j, p in enumerate(cov_pos):
                tok = row[p].strip()
                if tok == MISSING_TOKEN:
                    covs.append(None)
                    bits.append(0)
                else:
                    covs.append(_parse_float(tok, rownum, schema.covariate_names[j]))
                    bits.append(1)
            obs_cols = schema.outcome_indices(a)
            outs = []
            for c in obs_cols:
                tok = row[out_pos[c]].strip()
                if tok == MISSING_TOKEN:
                    raise SchemaError(
                        f"row {rownum}: '{MISSING_TOKEN}' in outcome column "
                        f"'{schema.outcome_names[c]}' (outcomes are pattern-observed)")
                outs.append(_parse_float(tok, rownum, schema.outcome_names[c]))
            records.append(ObservedRecord(tuple(covs), PatternMask(tuple(bits)), a, tuple(outs)))

    return MissingDataset(records, schema)


def write_csv(ds: MissingDataset, path: str) -> None:
    """Inverse of load_csv up to float formatting."""
    schema = ds.schema
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*schema.covariate_names, *schema.outcome_names, schema.pattern_name])
        for i, rec in enumerate(ds.records):
            row = [MISSING_TOKEN if v is None else repr(v) for v in rec.covariates]
            obs = set(schema.outcome_indices(rec.outcome_pattern))
            for c in range(len(schema.outcome_names)):
                row.append(repr(float(ds.W[i, c])) if c in obs else MISSING_TOKEN)
            row.append(str(rec.outcome_pattern))
            writer.writerow(row)


def pattern_cells(ds: MissingDataset) -> list[tuple[PatternMask, int, int]]:
    """Occurring (mask, outcome pattern, count) cells, mask-int then a ascending."""
    return [
        (PatternMask.from_int(r, ds.d), a, len(ds.pattern_index[(r, a)]))
        for r, a in ds.occurring_patterns()
    ]


def dataset_from_arrays(X: np.ndarray, A: np.ndarray, W: np.ndarray,
                        schema: DatasetSchema) -> MissingDataset:
    """Build a dataset from dense arrays; NaN in X marks a missing covariate."""
    X = np.asarray(X, dtype=float)
    A = np.asarray(A, dtype=np.int64)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if W.shape[0] != X.shape[0]:
        W = W.T
    n, d = X.shape
    if n == 0:
        raise ValidationError("empty dataset")
    observed = ~np.isnan(X)
    R_int = (observed.astype(np.int64) * (1 << np.arange(d))).sum(axis=1)
    Wfull = np.full((n, len(schema.outcome_names)), np.nan)
    records = []
    for i in range(n):
        a = int(A[i])
        cols = schema.outcome_indices(a)
        Wfull[i, list(cols)] = W[i, : len(cols)]
        covs = tuple(float(X[i, j]) if observed[i, j] else None for j in range(d))
        records.append(ObservedRecord(covs, PatternMask(tuple(int(b) for b in observed[i])),
                                      a, tuple(float(v) for v in Wfull[i, list(cols)])))
    return MissingDataset._assemble(tuple(records), schema, X, R_int, A, Wfull)
