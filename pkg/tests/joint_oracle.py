"""Fully enumerated discrete joints over (x1, x2, r, y, a) used as brute-force
oracles.  The joint is built from a full-data law times a pattern-selection
law whose odds against the complete pattern depend only on (x_r, w_a), so the
complete-case restriction holds by construction and every nuisance has an
exact closed form."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ccmv.datamodel import DatasetSchema, MissingDataset, PatternMask, dataset_from_arrays

PATTERNS = (0b00, 0b01, 0b10, 0b11)  # ints; 0b01 observes x1, 0b10 observes x2
COMPLETE = 0b11
COMBOS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])


def _xr_key(r: int, x: np.ndarray) -> tuple:
    return tuple(x[j] for j in PatternMask.from_int(r, 2).observed_indices())


@dataclass
class DiscreteJoint:
    """p(x, r, y, a) = p(x) p(a|x) p(y|x) P(r | x, w_a, a) with
    P(r|...)/P(11|...) = Q_r(x_r, w_a).

    ``response_style`` = True makes W_0 empty (missing response: the a = 0
    odds and extrapolations do not condition on y); False keeps y observed
    under both arms (binary treatment).
    """

    px: np.ndarray          # (4,) over covariate combos
    pa1: np.ndarray         # (4,) P(A=1|x)
    py1: np.ndarray         # (4,) P(Y=1|x), shared across a
    q: dict                 # (r, a) -> {xr_key or (xr_key, y): odds vs complete}
    response_style: bool = True

    def w_key(self, a: int, y: int):
        return () if (self.response_style and a == 0) else (y,)

    def odds_value(self, r: int, a: int, x: np.ndarray, y: int) -> float:
        if r == COMPLETE:
            return 1.0
        key = _xr_key(r, x)
        wk = self.w_key(a, y)
        return self.q[(r, a)][key + wk]

    def atoms(self):
        """Yield (x (2,), r, y, a, prob) over all 64 cells."""
        for c in range(4):
            x = COMBOS[c]
            for a in (0, 1):
                pa = self.pa1[c] if a == 1 else 1.0 - self.pa1[c]
                for y in (0, 1):
                    py = self.py1[c] if y == 1 else 1.0 - self.py1[c]
                    denom = sum(self.odds_value(r, a, x, y) for r in PATTERNS)
                    for r in PATTERNS:
                        pr = self.odds_value(r, a, x, y) / denom
                        yield x, r, y, a, self.px[c] * pa * py * pr

    # ---- brute-force quantities -------------------------------------------

    def theta_mean_y(self) -> float:
        return float(np.sum(self.px * self.py1))

    def theta_r(self, r: int) -> float:
        """E[Y 1(R=r)] over the full joint."""
        return sum(p * y for x, rr, y, a, p in self.atoms() if rr == r)

    def expect(self, fn) -> float:
        """E[fn(x, r, y, a)] over the joint."""
        return sum(p * fn(x, r, y, a) for x, r, y, a, p in self.atoms())

    def complete_mass(self, x: np.ndarray, a: int, y: int) -> float:
        c = int(x[0] + 2 * x[1])
        pa = self.pa1[c] if a == 1 else 1.0 - self.pa1[c]
        py = self.py1[c] if y == 1 else 1.0 - self.py1[c]
        denom = sum(self.odds_value(r, a, x, y) for r in PATTERNS)
        return float(self.px[c] * pa * py / denom)

    def extrapolation(self, r: int, x_r: tuple, a: int, y: int | None) -> np.ndarray:
        """p(x | x_r, R=1_d, w_a, a) over the 4 combos (w_a empty drops y)."""
        out = np.zeros(4)
        for c in range(4):
            x = COMBOS[c]
            if _xr_key(r, x) != x_r:
                continue
            if y is None:
                out[c] = sum(self.complete_mass(x, a, yy) for yy in (0, 1))
            else:
                out[c] = self.complete_mass(x, a, y)
        return out / out.sum()

    def m_exact(self, f, r: int, a: int, x_r: tuple, y: int | None) -> float:
        """E[f(x, w_a) | x_r, R=r, w_a, a] under the complete-case restriction."""
        probs = self.extrapolation(r, x_r, a, y)
        return float(sum(probs[c] * f(COMBOS[c], y) for c in range(4) if probs[c] > 0))

    # ---- observed dataset + weights ---------------------------------------

    def observed_dataset(self) -> tuple[MissingDataset, np.ndarray]:
        """One record per distinct observed atom, with its marginal mass."""
        acc: dict[tuple, float] = {}
        for x, r, y, a, p in self.atoms():
            mask = PatternMask.from_int(r, 2)
            xobs = tuple(x[j] if b else None for j, b in enumerate(mask.bits))
            wk = self.w_key(a, y)
            acc[(xobs, r, wk, a)] = acc.get((xobs, r, wk, a), 0.0) + p
        schema = (DatasetSchema.missing_response(("x1", "x2")) if self.response_style
                  else DatasetSchema.treatment(("x1", "x2")))
        X, A, W, wts = [], [], [], []
        for (xobs, r, wk, a), p in sorted(acc.items(), key=str):
            X.append([np.nan if v is None else v for v in xobs])
            A.append(a)
            W.append([wk[0] if wk else np.nan])
            wts.append(p)
        ds = dataset_from_arrays(np.array(X), np.array(A), np.array(W), schema)
        return ds, np.array(wts)


class TabularOdds:
    """Exact (optionally corrupted) odds lookups with the model-set duck API."""

    def __init__(self, joint: DiscreteJoint, corrupt: dict | None = None):
        self.joint = joint
        self.corrupt = corrupt or {}
        self.complete_int = COMPLETE

    def patterns_for(self, a: int) -> list[int]:
        return [r for r in PATTERNS if r != COMPLETE]

    def odds_rows(self, r: int, a: int, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        out = np.empty(len(X))
        for i in range(len(X)):
            y = None
            wk = ()
            if not (self.joint.response_style and a == 0):
                y = int(round(W[i, 0]))
                wk = (y,)
            key = _xr_key(r, X[i]) + wk
            base = self.joint.q[(r, a)][key]
            out[i] = self.corrupt.get(r, lambda v, *_: v)(base, key) \
                if r in self.corrupt else base
        return out


class TabularImputer:
    """Exact conditional completion tables from the joint, with optional
    per-pattern corruption of the extrapolation law."""

    family = "discrete"

    def __init__(self, joint: DiscreteJoint, corrupt_patterns: set[int] | None = None,
                 corrupt_shift: float = 0.25):
        self.joint = joint
        self.d = 2
        self.corrupt_patterns = corrupt_patterns or set()
        self.corrupt_shift = corrupt_shift

    def conditional_tables(self, r: int, X_rows: np.ndarray, a: int,
                           W_rows: np.ndarray) -> np.ndarray:
        out = np.empty((len(X_rows), 4))
        for i in range(len(X_rows)):
            y = None
            if not (self.joint.response_style and a == 0):
                y = int(round(W_rows[i, 0]))
            probs = self.joint.extrapolation(r, _xr_key(r, X_rows[i]), a, y)
            if r in self.corrupt_patterns:
                probs = probs + self.corrupt_shift * (probs > 0)
                probs = probs / probs.sum()
            out[i] = probs
        return out


def exact_count_two_pattern_dataset() -> tuple[MissingDataset, np.ndarray]:
    """Treatment-style dataset whose empirical law is an exact discrete joint:
    patterns {11, 10}, P(R=10 | x1, y, a) = sel[x1, y, a] with denominator 16,
    16 records per (x1, x2, y, a) cell."""
    sel = np.zeros((2, 2, 2))
    for x1 in (0, 1):
        for y in (0, 1):
            for a in (0, 1):
                sel[x1, y, a] = (3 + 4 * x1 + 2 * y + x1 * y + 2 * a) / 16.0
    rows_X, rows_A, rows_W = [], [], []
    for x1 in (0, 1):
        for x2 in (0, 1):
            for y in (0, 1):
                for a in (0, 1):
                    n10 = int(round(16 * sel[x1, y, a]))
                    for _ in range(n10):
                        rows_X.append([x1, np.nan])
                        rows_A.append(a)
                        rows_W.append([y])
                    for _ in range(16 - n10):
                        rows_X.append([x1, x2])
                        rows_A.append(a)
                        rows_W.append([y])
    ds = dataset_from_arrays(np.array(rows_X, dtype=float), np.array(rows_A),
                             np.array(rows_W, dtype=float),
                             DatasetSchema.treatment(("x1", "x2")))
    return ds, sel


def default_joint(response_style: bool = True) -> DiscreteJoint:
    px = np.array([0.2, 0.3, 0.15, 0.35])
    pa1 = np.array([0.3, 0.6, 0.5, 0.7])
    py1 = np.array([0.25, 0.5, 0.4, 0.8])
    q: dict = {}
    # odds tables keyed by observed covariate values (+ y when observed)
    q[(0b01, 1)] = {(0.0, 0): 0.7, (0.0, 1): 1.1, (1.0, 0): 0.4, (1.0, 1): 0.9}
    q[(0b10, 1)] = {(0.0, 0): 0.5, (0.0, 1): 0.8, (1.0, 0): 1.2, (1.0, 1): 0.6}
    q[(0b00, 1)] = {(0,): 0.3, (1,): 0.5}
    if response_style:
        q[(0b01, 0)] = {(0.0,): 1.0, (1.0,): 0.5}
        q[(0b10, 0)] = {(0.0,): 0.6, (1.0,): 0.9}
        q[(0b00, 0)] = {(): 0.4}
    else:
        q[(0b01, 0)] = {(0.0, 0): 0.9, (0.0, 1): 0.6, (1.0, 0): 0.5, (1.0, 1): 1.3}
        q[(0b10, 0)] = {(0.0, 0): 0.8, (0.0, 1): 0.7, (1.0, 0): 1.0, (1.0, 1): 0.45}
        q[(0b00, 0)] = {(0,): 0.35, (1,): 0.55}
    return DiscreteJoint(px, pa1, py1, q, response_style)
