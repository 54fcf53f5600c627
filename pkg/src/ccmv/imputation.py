"""Extrapolation-distribution estimation from complete cases and stacked
multiple imputation.

Both imputers sample missing coordinates sequentially (chain rule), which
makes the closed-form sensitivity tilts act per coordinate and keeps the
untilted path (zeta = 1/2, xi = 0) bit-identical to the unperturbed
sampler.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from ccmv.datamodel import ConfigurationError, MissingDataset, PatternMask, ValidationError
from ccmv.numerics import substream

log = logging.getLogger(__name__)

DEFAULT_M = 50

ZETA_NEUTRAL = 0.5
XI_NEUTRAL = 0.0


class IdentificationError(ValueError):
    pass


def tilt_binary(p: float, zeta: float) -> float:
    """Success probability after the accept/redraw perturbation:
    p(1-zeta)/(p + zeta - 2 p zeta); zeta = 1/2 leaves p unchanged."""
    if not (0.0 <= p <= 1.0 and 0.0 <= zeta <= 1.0):
        raise ConfigurationError(f"need p in [0,1] and zeta in [0,1], got {(p, zeta)}")
    if zeta == ZETA_NEUTRAL:
        return p
    denom = p + zeta - 2.0 * p * zeta
    if denom == 0.0:  # (p, zeta) in {(0,0), (1,1)}: limit along zeta is p
        return p
    return p * (1.0 - zeta) / denom


def tilt_binary_rows(p: np.ndarray, zeta: float) -> np.ndarray:
    if zeta == ZETA_NEUTRAL:
        return p
    denom = p + zeta - 2.0 * p * zeta
    out = np.divide(p * (1.0 - zeta), denom, out=p.copy(), where=denom != 0.0)
    return out


def tilt_gaussian(mu: float, var: float, xi: float) -> tuple[float, float]:
    """N(mu, var) reweighted by exp(-xi x^2):
    (mu/(2 var xi + 1), var/(2 var xi + 1)); xi = 0 is the identity."""
    if var <= 0:
        raise ConfigurationError(f"variance must be positive, got {var}")
    if xi < 0:
        raise ConfigurationError(f"xi must be nonnegative, got {xi}")
    c = 2.0 * var * xi + 1.0
    return mu / c, var / c


def _encode_bits(values: np.ndarray, positions: list[int]) -> np.ndarray:
    """Little-endian integer codes for binary covariate rows at ``positions``."""
    code = np.zeros(len(values), dtype=np.int64)
    for k, j in enumerate(positions):
        code |= (values[:, k].astype(np.int64) & 1) << j
    return code


def _combo_matrix(d: int) -> np.ndarray:
    combos = np.arange(1 << d)
    return ((combos[:, None] >> np.arange(d)[None, :]) & 1).astype(float)


def draw_discrete_chain(gen: np.random.Generator, probs: np.ndarray,
                        obs_positions: list[int], obs_values: np.ndarray,
                        missing_positions: list[int], d: int,
                        zeta: float = ZETA_NEUTRAL) -> np.ndarray:
    """Per-row draws of the missing binary coordinates from a full-combo
    conditional table ``probs`` (rows x 2^d), conditioning on the observed
    values and any coordinates already drawn; one uniform per coordinate.

    Rows whose observed-value cell has zero mass fall back to the marginal
    over the observed coordinates (a logged warning).
    """
    n = len(probs)
    combos = np.arange(1 << d)
    table = probs.copy()
    if obs_positions:
        code = _encode_bits(obs_values, obs_positions)
        sel = np.zeros((n, 1 << d), dtype=bool)
        for j in obs_positions:
            bit = (combos >> j) & 1
            want = ((code >> j) & 1)[:, None]
            sel |= bit[None, :] != want
        restricted = np.where(sel, 0.0, table)
        mass = restricted.sum(axis=1)
        empty = mass <= 0.0
        if np.any(empty):
            log.warning("discrete imputation: %d rows fell back to the marginal cell",
                        int(empty.sum()))
            restricted[empty] = table[empty]
        table = restricted

    out = np.zeros((n, len(missing_positions)))
    for k, j in enumerate(missing_positions):
        bit1 = ((combos >> j) & 1).astype(bool)
        num = table[:, bit1].sum(axis=1)
        den = table.sum(axis=1)
        p1 = np.divide(num, den, out=np.zeros(n), where=den > 0)
        p1 = tilt_binary_rows(p1, zeta)
        draw = (gen.random(n) < p1).astype(float)
        out[:, k] = draw
        # condition the table on the realized coordinate
        keep = bit1[None, :] == (draw[:, None] > 0.5)
        table = np.where(keep, table, 0.0)
    return out


class DiscreteImputer:
    """Nonparametric complete-case pmf over binary covariates, stratified by
    (discrete W_a, a) cells."""

    family = "discrete"

    def __init__(self, ds: MissingDataset):
        X, W, A = ds.X, ds.W, ds.A
        complete = ds.is_complete()
        d = ds.d
        obs_vals = X[complete]
        if obs_vals.size and not np.all(np.isin(obs_vals[np.isfinite(obs_vals)], (0.0, 1.0))):
            raise ConfigurationError("discrete family requires binary 0/1 covariates")
        finite_w = W[np.isfinite(W)]
        if finite_w.size and not np.allclose(finite_w, np.round(finite_w)):
            raise ConfigurationError(
                "discrete family requires discrete outcome values (use the gaussian family)")
        self.d = d
        self.schema = ds.schema
        self.tables: dict[tuple[int, tuple[int, ...]], np.ndarray] = {}
        self.pooled: dict[int, np.ndarray] = {}
        for a in sorted(set(int(v) for v in A)):
            sel = complete & (A == a)
            if not np.any(sel):
                raise IdentificationError(f"no complete cases for outcome pattern a={a}")
            codes = _encode_bits(X[sel], list(range(d)))
            wcols = list(ds.schema.outcome_indices(a))
            wkeys = [tuple(int(round(v)) for v in row) for row in W[np.where(sel)[0]][:, wcols]]
            pooled = np.bincount(codes, minlength=1 << d).astype(float)
            self.pooled[a] = pooled / pooled.sum()
            for key in sorted(set(wkeys)):
                mask = np.array([k == key for k in wkeys])
                counts = np.bincount(codes[mask], minlength=1 << d).astype(float)
                self.tables[(a, key)] = counts / counts.sum()

    def _cell_probs(self, a: int, w_rows: np.ndarray) -> np.ndarray:
        wcols = list(self.schema.outcome_indices(a))
        probs = np.empty((len(w_rows), 1 << self.d))
        for i, row in enumerate(w_rows[:, wcols]):
            key = tuple(int(round(v)) for v in row)
            tab = self.tables.get((a, key))
            if tab is None:
                log.warning("discrete imputation: unseen cell (a=%d, w=%s), pooling within a",
                            a, key)
                tab = self.pooled[a]
            probs[i] = tab
        return probs

    def draw_batch(self, gen: np.random.Generator, r: int, X_rows: np.ndarray, a: int,
                   W_rows: np.ndarray, zeta: float = ZETA_NEUTRAL,
                   xi: float = XI_NEUTRAL) -> np.ndarray:
        mask = PatternMask.from_int(r, self.d)
        obs = list(mask.observed_indices())
        miss = list(mask.missing_indices())
        probs = self._cell_probs(a, W_rows)
        return draw_discrete_chain(gen, probs, obs, X_rows[:, obs], miss, self.d, zeta)

    def conditional_tables(self, r: int, X_rows: np.ndarray, a: int,
                           W_rows: np.ndarray) -> np.ndarray:
        """Exact conditional pmf over all 2^d completions (rows x 2^d)."""
        mask = PatternMask.from_int(r, self.d)
        obs = list(mask.observed_indices())
        probs = self._cell_probs(a, W_rows)
        if obs:
            combos = np.arange(1 << self.d)
            code = _encode_bits(X_rows[:, obs], obs)
            bad = np.zeros((len(X_rows), 1 << self.d), dtype=bool)
            for j in obs:
                bit = (combos >> j) & 1
                bad |= bit[None, :] != ((code >> j) & 1)[:, None]
            restricted = np.where(bad, 0.0, probs)
            mass = restricted.sum(axis=1)
            empty = mass <= 0.0
            if np.any(empty):
                log.warning("discrete imputation: %d rows fell back to the marginal cell",
                            int(empty.sum()))
                restricted[empty] = probs[empty]
            probs = restricted
        return probs / probs.sum(axis=1, keepdims=True)


class GaussianImputer:
    """Linear-Gaussian complete-case model for X given W_a.

    Discrete outcomes stratify the fit per (W_a, a) cell (saturated means and
    per-cell covariance); continuous outcomes enter the mean linearly with a
    pooled per-a covariance.
    """

    family = "gaussian"

    def __init__(self, ds: MissingDataset):
        X, W, A = ds.X, ds.W, ds.A
        complete = ds.is_complete()
        self.d = ds.d
        self.schema = ds.schema
        finite_w = W[np.isfinite(W)]
        self.stratified = finite_w.size == 0 or bool(np.allclose(finite_w, np.round(finite_w)))
        self.jittered = False
        self.cells: dict[tuple[int, tuple[int, ...]], tuple[np.ndarray, np.ndarray]] = {}
        self.pooled: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.regression: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for a in sorted(set(int(v) for v in A)):
            sel = np.where(complete & (A == a))[0]
            if len(sel) < self.d + 2:
                raise IdentificationError(
                    f"gaussian family needs >= d+2 complete cases for a={a}, have {len(sel)}")
            Xa, Wa = X[sel], W[sel][:, list(ds.schema.outcome_indices(a))]
            self.pooled[a] = (Xa.mean(axis=0), self._safe_cov(Xa - Xa.mean(axis=0)))
            if self.stratified:
                keys = [tuple(int(round(v)) for v in row) for row in Wa]
                for key in sorted(set(keys)):
                    rows = Xa[np.array([k == key for k in keys])]
                    mu = rows.mean(axis=0)
                    self.cells[(a, key)] = (mu, self._safe_cov(rows - mu))
            else:
                Z = np.column_stack([np.ones(len(sel)), Wa])
                B, *_ = np.linalg.lstsq(Z, Xa, rcond=None)
                resid = Xa - Z @ B
                self.regression[a] = (B, self._safe_cov(resid))

    def _safe_cov(self, centered: np.ndarray) -> np.ndarray:
        cov = centered.T @ centered / max(len(centered), 1)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            self.jittered = True
            log.warning("singular covariance, adding 1e-8 ridge jitter")
            cov = cov + 1e-8 * np.eye(cov.shape[0])
        return cov

    def _moments(self, a: int, W_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-row mean (rows x d) and shared-per-row covariance stack."""
        wcols = list(self.schema.outcome_indices(a))
        Wa = W_rows[:, wcols]
        n = len(W_rows)
        means = np.empty((n, self.d))
        covs = np.empty((n, self.d, self.d))
        if self.stratified:
            for i, row in enumerate(Wa):
                key = tuple(int(round(v)) for v in row)
                cell = self.cells.get((a, key))
                if cell is None:
                    log.warning("gaussian imputation: unseen cell (a=%d, w=%s), pooling within a",
                                a, key)
                    cell = self.pooled[a]
                means[i], covs[i] = cell
        else:
            B, cov = self.regression[a]
            means[:] = np.column_stack([np.ones(n), Wa]) @ B
            covs[:] = cov
        return means, covs

    def draw_batch(self, gen: np.random.Generator, r: int, X_rows: np.ndarray, a: int,
                   W_rows: np.ndarray, zeta: float = ZETA_NEUTRAL,
                   xi: float = XI_NEUTRAL) -> np.ndarray:
        """Sequential conditional draws of the missing coordinates with
        optional gaussian tilting; one standard normal per coordinate."""
        mask = PatternMask.from_int(r, self.d)
        obs = list(mask.observed_indices())
        miss = list(mask.missing_indices())
        means, covs = self._moments(a, W_rows)
        n = len(X_rows)
        out = np.zeros((n, len(miss)))
        known_pos = list(obs)
        known_vals = X_rows[:, obs].copy() if obs else np.zeros((n, 0))
        # covariance identical across rows within a stratified cell; group rows
        # by cell so the Schur complements are computed once per group
        if self.stratified:
            cell_ids = np.array([id(self.cells.get((a, tuple(int(round(v)) for v in row)),
                                                   self.pooled[a]))
                                 for row in W_rows[:, list(self.schema.outcome_indices(a))]])
        else:
            cell_ids = np.zeros(n)
        for gid in np.unique(cell_ids):
            rows = np.where(cell_ids == gid)[0]
            mu = means[rows]
            cov = covs[rows[0]]
            vals = known_vals[rows]
            pos = list(known_pos)
            for k, j in enumerate(miss):
                if pos:
                    Soo = cov[np.ix_(pos, pos)]
                    Sjo = cov[j, pos]
                    beta = np.linalg.solve(Soo, Sjo)
                    var_j = float(cov[j, j] - Sjo @ beta)
                    m_j = mu[:, j] + (vals - mu[:, pos]) @ beta
                else:
                    var_j = float(cov[j, j])
                    m_j = mu[:, j]
                var_j = max(var_j, 1e-12)
                c = 2.0 * var_j * xi + 1.0
                m_t = m_j / c
                sd_t = np.sqrt(var_j / c)
                draw = m_t + sd_t * gen.standard_normal(len(rows))
                out[rows, k] = draw
                vals = np.column_stack([vals, draw])
                pos = pos + [j]
        return out

    def conditional_mean(self, r: int, X_rows: np.ndarray, a: int,
                         W_rows: np.ndarray) -> np.ndarray:
        """Closed-form E[X_miss | X_obs, 1_d, W_a, a] (rows x n_missing)."""
        mask = PatternMask.from_int(r, self.d)
        obs = list(mask.observed_indices())
        miss = list(mask.missing_indices())
        means, covs = self._moments(a, W_rows)
        out = np.empty((len(X_rows), len(miss)))
        for i in range(len(X_rows)):
            mu, cov = means[i], covs[i]
            if obs:
                beta = np.linalg.solve(cov[np.ix_(obs, obs)], cov[np.ix_(obs, miss)])
                out[i] = mu[miss] + (X_rows[i, obs] - mu[obs]) @ beta
            else:
                out[i] = mu[miss]
        return out


def fit_imputation(ds: MissingDataset, family: str):
    """Fit the complete-case extrapolation model; family in
    {"discrete", "gaussian"} (the survival EM family lives in simgen)."""
    if family == "discrete":
        return DiscreteImputer(ds)
    if family == "gaussian":
        return GaussianImputer(ds)
    raise ConfigurationError(f"unknown imputation family '{family}'")


@dataclass
class StackedDataset:
    """M completed copies pooled into one (M n)-row dataset, j-major i-minor."""

    schema: object
    X: np.ndarray        # (M n, d), completed
    R_int: np.ndarray
    A: np.ndarray
    W: np.ndarray
    source_id: np.ndarray
    imp_id: np.ndarray
    M: int

    @property
    def n_rows(self) -> int:
        return len(self.X)

    def export_csv(self, path: str) -> None:
        schema = self.schema
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source_id", "imp_id", *schema.covariate_names,
                             *schema.outcome_names, schema.pattern_name])
            for i in range(self.n_rows):
                a = int(self.A[i])
                obs = set(schema.outcome_indices(a))
                row = [int(self.source_id[i]), int(self.imp_id[i])]
                row += [repr(float(v)) for v in self.X[i]]
                row += [repr(float(self.W[i, c])) if c in obs else "NA"
                        for c in range(len(schema.outcome_names))]
                row.append(a)
                writer.writerow(row)


def impute_stacked(model, ds: MissingDataset, M: int, seed: int,
                   zeta: float = ZETA_NEUTRAL, xi: float = XI_NEUTRAL) -> StackedDataset:
    """Draw M completed copies of the dataset from the extrapolation model."""
    if M < 1:
        raise ConfigurationError(f"M must be >= 1, got {M}")
    n, d = ds.n, ds.d
    Xs = np.empty((M * n, d))
    complete = ds.complete_int
    groups = [(r, a, ds.pattern_index[(r, a)]) for (r, a) in ds.occurring_patterns()
              if r != complete]
    for j in range(M):
        gen = substream(seed, j)
        Xj = ds.X.copy()
        for r, a, idx in groups:
            miss = list(PatternMask.from_int(r, d).missing_indices())
            draws = model.draw_batch(gen, r, ds.X[idx], a, ds.W[idx], zeta=zeta, xi=xi)
            for k, col in enumerate(miss):
                Xj[idx, col] = draws[:, k]
        Xs[j * n:(j + 1) * n] = Xj
    rep = lambda arr: np.tile(arr, (M,) + (1,) * (arr.ndim - 1))
    return StackedDataset(ds.schema, Xs, rep(ds.R_int), rep(ds.A), rep(ds.W),
                          np.tile(np.arange(n), M), np.repeat(np.arange(M), n), M)


def impute_for_pattern(model, ds: MissingDataset, r: int, indices: np.ndarray, M: int,
                       seed: int, zeta: float = ZETA_NEUTRAL,
                       xi: float = XI_NEUTRAL) -> np.ndarray:
    """(len(indices), M, d) completions with coordinates missing under pattern
    r redrawn from the extrapolation model, even for complete records."""
    d = ds.d
    miss = list(PatternMask.from_int(r, d).missing_indices())
    out = np.repeat(ds.X[indices][:, None, :], M, axis=1)
    if not miss:
        return out
    A_sub = ds.A[indices]
    for j in range(M):
        gen = substream(seed, r, j)
        for a in sorted(set(int(v) for v in A_sub)):
            rows = np.where(A_sub == a)[0]
            draws = model.draw_batch(gen, r, ds.X[indices[rows]], a, ds.W[indices[rows]],
                                     zeta=zeta, xi=xi)
            for k, col in enumerate(miss):
                out[rows, j, col] = draws[:, k]
    return out


def regression_adjust(model, ds: MissingDataset, f, M: int, seed: int,
                      weights: np.ndarray | None = None,
                      zeta: float = ZETA_NEUTRAL, xi: float = XI_NEUTRAL) -> np.ndarray:
    """Stacked-MI estimate of E[h] for an observed-decomposable h.

    M = 0 requests the exact closed-form variant (discrete family only):
    the per-record regression functions are summed over the conditional pmf
    instead of Monte Carlo draws.
    """
    w = np.full(ds.n, 1.0 / ds.n) if weights is None else np.asarray(weights, dtype=float)
    if M == 0:
        if not isinstance(model, DiscreteImputer):
            raise ConfigurationError("exact mode (M=0) requires the discrete family")
        if zeta != ZETA_NEUTRAL:
            raise ConfigurationError("exact mode does not support tilting")
        combos = _combo_matrix(ds.d)
        total = np.zeros(f.dim)
        for (r, a) in ds.occurring_patterns():
            idx = ds.pattern_index[(r, a)]
            tables = model.conditional_tables(r, ds.X[idx], a, ds.W[idx])
            for row, i in enumerate(idx):
                w_a = ds.outcome_values(int(i))
                mval = np.zeros(f.dim)
                for c in np.nonzero(tables[row] > 0)[0]:
                    mval += tables[row, c] * f(a, combos[c], w_a)
                total += w[int(i)] * mval
        return total

    stacked = impute_stacked(model, ds, M, seed, zeta=zeta, xi=xi)
    total = np.zeros(f.dim)
    for i in range(stacked.n_rows):
        a = int(stacked.A[i])
        src = int(stacked.source_id[i])
        w_a = stacked.W[i, list(ds.schema.outcome_indices(a))]
        total += (w[src] / M) * f(a, stacked.X[i], w_a)
    return total
