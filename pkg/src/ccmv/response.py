"""Mean and average-treatment-effect estimation with missing covariates:
the six (IPW-R/RA-R) x (IPW-A/RA-A/DR-A) combinations and the per-pattern
doubly-robust influence function whose sum is multiply robust."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ccmv.datamodel import ConfigurationError, MissingDataset, PatternMask
from ccmv.imputation import XI_NEUTRAL, ZETA_NEUTRAL, impute_for_pattern, impute_stacked
from ccmv.numerics import fit_logistic, sigmoid

log = logging.getLogger(__name__)

PROP_EPS = 1e-6

R_METHODS = ("ipw-r", "ra-r")
A_METHODS = ("ipw-a", "ra-a", "dr-a")


def _clip_prop(p: np.ndarray) -> np.ndarray:
    if np.any((p < PROP_EPS) | (p > 1.0 - PROP_EPS)):
        log.warning("clipping %d propensity values to [%g, %g]",
                    int(np.sum((p < PROP_EPS) | (p > 1.0 - PROP_EPS))), PROP_EPS, 1 - PROP_EPS)
    return np.clip(p, PROP_EPS, 1.0 - PROP_EPS)


@dataclass
class NuisanceSet:
    """Propensity/outcome-regression evaluators plus the machinery to realize
    the per-pattern CCMV regression functions as Monte Carlo averages over
    extrapolation draws (exact conditional sums when M = 0, discrete family).
    """

    pi: Callable[[np.ndarray], np.ndarray]
    m: dict[int, Callable[[np.ndarray], np.ndarray]]
    imp: object
    M: int
    seed: int
    zeta: float = ZETA_NEUTRAL
    xi: float = XI_NEUTRAL
    _cache: dict = field(default_factory=dict, repr=False)

    def prop(self, X: np.ndarray, side: int) -> np.ndarray:
        p = _clip_prop(np.asarray(self.pi(X), dtype=float))
        return p if side == 1 else 1.0 - p

    def mreg(self, X: np.ndarray, side: int) -> np.ndarray:
        if side not in self.m:
            raise ConfigurationError(f"no outcome regression for arm a={side}")
        return np.asarray(self.m[side](X), dtype=float)

    def reg_tables(self, ds: MissingDataset, r: int, indices: np.ndarray,
                   side: int) -> dict[str, np.ndarray]:
        """M_{m,r,a}, M_{1/prop,r,a}, M_{m/prop,r,a} for the given records,
        each conditioning on the record's own observed (X_r, W_a, a)."""
        key = (r, side, indices.tobytes())
        if key in self._cache:
            return self._cache[key]
        if self.M == 0:
            tables = _exact_tables(self.imp, ds, r, indices)
            combos = _combo_matrix(ds.d)
            mv = self.mreg(combos, side)
            pv = self.prop(combos, side)
            out = {
                "m": tables @ mv,
                "invp": tables @ (1.0 / pv),
                "mop": tables @ (mv / pv),
            }
        else:
            draws = impute_for_pattern(self.imp, ds, r, indices, self.M, self.seed,
                                       zeta=self.zeta, xi=self.xi)
            flat = draws.reshape(-1, ds.d)
            mv = self.mreg(flat, side).reshape(len(indices), self.M)
            pv = self.prop(flat, side).reshape(len(indices), self.M)
            out = {
                "m": mv.mean(axis=1),
                "invp": (1.0 / pv).mean(axis=1),
                "mop": (mv / pv).mean(axis=1),
            }
        self._cache[key] = out
        return out


def _combo_matrix(d: int) -> np.ndarray:
    combos = np.arange(1 << d)
    return ((combos[:, None] >> np.arange(d)[None, :]) & 1).astype(float)


def _exact_tables(imp, ds: MissingDataset, r: int, indices: np.ndarray) -> np.ndarray:
    if not hasattr(imp, "conditional_tables"):
        raise ConfigurationError("exact regression functions (M=0) need a discrete-family model")
    A_sub = ds.A[indices]
    out = np.empty((len(indices), 1 << ds.d))
    for a in sorted(set(int(v) for v in A_sub)):
        rows = np.where(A_sub == a)[0]
        out[rows] = imp.conditional_tables(r, ds.X[indices[rows]], a, ds.W[indices[rows]])
    return out


@dataclass(frozen=True)
class MeanEstimate:
    theta: float
    theta_r: dict[int, float]
    method: str


def fit_nuisances(ds: MissingDataset, imp, odds, M: int, seed: int,
                  mode: str = "stacked", zeta: float = ZETA_NEUTRAL,
                  xi: float = XI_NEUTRAL) -> NuisanceSet:
    """Construct propensity and outcome-regression evaluators.

    mode "mixture" rebuilds them from per-cell Gaussian components and atom
    frequencies (binary outcome, d = 2); mode "stacked" fits logistic/linear
    models on the pooled imputed data.
    """
    if mode == "mixture":
        pi, m = _mixture_nuisances(ds)
    elif mode == "stacked":
        pi, m = _stacked_nuisances(ds, imp, M, seed, zeta=zeta, xi=xi)
    else:
        raise ConfigurationError(f"unknown nuisance mode '{mode}'")
    return NuisanceSet(pi, m, imp, M, seed, zeta=zeta, xi=xi)


def _stacked_nuisances(ds: MissingDataset, imp, M: int, seed: int,
                       zeta: float, xi: float):
    stacked = impute_stacked(imp, ds, max(M, 1), seed, zeta=zeta, xi=xi)
    Xs = stacked.X
    As = (stacked.A == 1).astype(float)
    fit_pi = fit_logistic(Xs, As)

    def pi(X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return sigmoid(fit_pi.coefficients[0] + X @ fit_pi.coefficients[1:])

    m: dict[int, Callable] = {}
    for side in (0, 1):
        rows = np.where(stacked.A == side)[0]
        if len(rows) == 0:
            continue
        ycol = stacked.W[rows][:, list(ds.schema.outcome_indices(side))]
        if ycol.shape[1] != 1:
            continue  # arm carries no scalar outcome (missing response a=0)
        yv = ycol[:, 0]
        if np.all(np.isin(yv, (0.0, 1.0))):
            fit = fit_logistic(Xs[rows], yv)
            coef = fit.coefficients

            def m_side(X: np.ndarray, coef=coef) -> np.ndarray:
                X = np.atleast_2d(X)
                return sigmoid(coef[0] + X @ coef[1:])
        else:
            Z = np.column_stack([np.ones(len(rows)), Xs[rows]])
            coef, *_ = np.linalg.lstsq(Z, yv, rcond=None)

            def m_side(X: np.ndarray, coef=coef) -> np.ndarray:
                X = np.atleast_2d(X)
                return coef[0] + X @ coef[1:]

        m[side] = m_side
    return pi, m


def _norm_pdf(x: np.ndarray, mu: float, var: float) -> np.ndarray:
    return np.exp(-0.5 * (x - mu) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def _mvn_pdf(X: np.ndarray, mu: np.ndarray, cov: np.ndarray) -> np.ndarray:
    diff = X - mu
    prec = np.linalg.inv(cov)
    det = np.linalg.det(cov)
    quad = np.einsum("ni,ij,nj->n", diff, prec, diff)
    return np.exp(-0.5 * quad) / (2.0 * np.pi * np.sqrt(det))


def _mixture_nuisances(ds: MissingDataset):
    """Per-cell Gaussian components composed under CCMV; propensity and
    outcome regressions are ratios of mixture sums (binary outcome, d = 2)."""
    if ds.d != 2:
        raise ConfigurationError("mixture nuisances require d = 2")
    y = ds.W[:, 0]
    if not np.all(np.isin(y[np.isfinite(y)], (0.0, 1.0))):
        raise ConfigurationError("mixture nuisances require a binary outcome")
    complete = ds.complete_int
    n = ds.n

    atom: dict[tuple[int, int, int], float] = {}
    comp11: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    comp_single: dict[tuple[int, int, int], tuple[float, float]] = {}
    for r in sorted({rr for (rr, _) in ds.pattern_index}):
        for a in (0, 1):
            for yv in (0, 1):
                sel = (ds.R_int == r) & (ds.A == a) & (np.nan_to_num(y, nan=-1) == yv)
                cnt = int(sel.sum())
                if cnt == 0:
                    continue
                atom[(r, yv, a)] = cnt / n
                if r == complete:
                    rows = ds.X[sel]
                    mu = rows.mean(axis=0)
                    comp11[(yv, a)] = (mu, (rows - mu).T @ (rows - mu) / cnt)
                elif r not in (0,):
                    j = PatternMask.from_int(r, 2).observed_indices()[0]
                    vals = ds.X[sel][:, j]
                    if cnt >= 2:
                        comp_single[(r, yv, a)] = (float(vals.mean()), float(vals.var()))

    def component_density(X: np.ndarray, r: int, yv: int, a: int) -> np.ndarray:
        mu, cov = comp11[(yv, a)]
        if r in (complete, 0):
            return _mvn_pdf(X, mu, cov)
        j = PatternMask.from_int(r, 2).observed_indices()[0]
        k = 1 - j
        stats = comp_single.get((r, yv, a))
        if stats is None:
            m_obs, v_obs = float(mu[j]), float(cov[j, j])
        else:
            m_obs, v_obs = stats
        beta = cov[k, j] / cov[j, j]
        cond_mu = mu[k] + beta * (X[:, j] - mu[j])
        cond_var = float(cov[k, k] - beta * cov[j, k])
        return _norm_pdf(X[:, j], m_obs, v_obs) * _norm_pdf(X[:, k], cond_mu, cond_var)

    keys = sorted(atom)

    def mixture_sum(X: np.ndarray, want) -> np.ndarray:
        total = np.zeros(len(X))
        for (r, yv, a) in keys:
            if want(r, yv, a):
                total += atom[(r, yv, a)] * component_density(X, r, yv, a)
        return total

    def pi(X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        num = mixture_sum(X, lambda r, yv, a: a == 1)
        den = num + mixture_sum(X, lambda r, yv, a: a == 0)
        return num / np.maximum(den, 1e-300)

    def make_m(side: int):
        def m_side(X: np.ndarray) -> np.ndarray:
            X = np.atleast_2d(X)
            num = mixture_sum(X, lambda r, yv, a: a == side and yv == 1)
            den = mixture_sum(X, lambda r, yv, a: a == side)
            return num / np.maximum(den, 1e-300)
        return m_side

    return pi, {0: make_m(0), 1: make_m(1)}


def _pattern_odds_on_complete(odds, ds: MissingDataset, idx_c: np.ndarray,
                              a_override: int | None = None) -> dict[int, np.ndarray]:
    """Q_{r, a}(X_r, W_a) on complete records at each record's own a (or a
    fixed a), for every pattern in the model set plus 1 for r = 1_d."""
    out: dict[int, np.ndarray] = {ds.complete_int: np.ones(len(idx_c))}
    A_sub = ds.A[idx_c] if a_override is None else np.full(len(idx_c), a_override)
    for a in sorted(set(int(v) for v in A_sub)):
        rows = np.where(A_sub == a)[0]
        for r in odds.patterns_for(a):
            if r not in out:
                out[r] = np.zeros(len(idx_c))
            out[r][rows] = odds.odds_rows(r, a, ds.X[idx_c[rows]], ds.W[idx_c[rows]])
    return out


def _side_mean(ds: MissingDataset, nuis: NuisanceSet, odds, rmethod: str, amethod: str,
               side: int, weights: np.ndarray) -> dict[int, float]:
    y0 = np.nan_to_num(ds.W[:, 0], nan=0.0)
    theta_r: dict[int, float] = {}

    if rmethod == "ipw-r":
        idx_c = np.where(ds.is_complete())[0]
        q = _pattern_odds_on_complete(odds, ds, idx_c)
        Xc = ds.X[idx_c]
        ind = (ds.A[idx_c] == side).astype(float)
        yv = y0[idx_c]
        mv = nuis.mreg(Xc, side)
        pv = nuis.prop(Xc, side)
        if amethod == "ipw-a":
            base = ind * yv / pv
        elif amethod == "ra-a":
            base = mv
        elif amethod == "dr-a":
            base = ind * (yv - mv) / pv + mv
        else:
            raise ConfigurationError(f"unknown outcome method '{amethod}'")
        for r, qr in q.items():
            theta_r[r] = float(np.sum(weights[idx_c] * base * qr))
        return theta_r

    if rmethod != "ra-r":
        raise ConfigurationError(f"unknown missing-covariate method '{rmethod}'")

    for r in sorted({rr for (rr, _) in ds.pattern_index}):
        idx = np.concatenate([ds.pattern_index[key] for key in sorted(ds.pattern_index)
                              if key[0] == r])
        tab = nuis.reg_tables(ds, r, idx, side)
        ind = (ds.A[idx] == side).astype(float)
        yv = y0[idx]
        if amethod == "ipw-a":
            contrib = ind * yv * tab["invp"]
        elif amethod == "ra-a":
            contrib = tab["m"]
        elif amethod == "dr-a":
            contrib = ind * yv * tab["invp"] + tab["m"] - ind * tab["mop"]
        else:
            raise ConfigurationError(f"unknown outcome method '{amethod}'")
        theta_r[r] = float(np.sum(weights[idx] * contrib))
    return theta_r


def estimate_mean(ds: MissingDataset, nuis: NuisanceSet, odds,
                  method: tuple[str, str], task: str = "mean",
                  weights: np.ndarray | None = None) -> MeanEstimate:
    """Empirical average of the chosen estimator's linear form.

    task "mean" targets E[Y] (response observed when A = 1); task "ate"
    targets E[Y(1)] - E[Y(0)].
    """
    rmethod, amethod = method
    w = np.full(ds.n, 1.0 / ds.n) if weights is None else np.asarray(weights, dtype=float)
    t1 = _side_mean(ds, nuis, odds, rmethod, amethod, 1, w)
    if task == "mean":
        theta_r = t1
    elif task == "ate":
        t0 = _side_mean(ds, nuis, odds, rmethod, amethod, 0, w)
        theta_r = {r: t1.get(r, 0.0) - t0.get(r, 0.0) for r in set(t1) | set(t0)}
    else:
        raise ConfigurationError(f"unknown task '{task}'")
    return MeanEstimate(float(sum(theta_r.values())), theta_r, f"{rmethod}:{amethod}")


def mr_pattern_contributions(ds: MissingDataset, nuis: NuisanceSet, odds,
                             weights: np.ndarray) -> dict[int, float]:
    """theta_r from the 12-term uncentered influence function q_r, for every
    occurring pattern (the complete pattern collapses to the classic DR form).
    """
    y0 = np.nan_to_num(ds.W[:, 0], nan=0.0)
    complete = ds.complete_int
    idx_c = np.where(ds.is_complete())[0]
    Xc = ds.X[idx_c]
    a_c = ds.A[idx_c]
    y_c = y0[idx_c]
    m1_c = nuis.mreg(Xc, 1)
    pi_c = nuis.prop(Xc, 1)
    w_c = weights[idx_c]

    q_all = _pattern_odds_on_complete(odds, ds, idx_c)
    theta_r: dict[int, float] = {}
    for r in sorted({rr for (rr, _) in ds.pattern_index}):
        tab_c = nuis.reg_tables(ds, r, idx_c, 1)
        q = q_all.get(r, np.zeros(len(idx_c)))
        bracket0 = m1_c - tab_c["m"]
        bracket1 = (m1_c + y_c / pi_c - m1_c / pi_c
                    - tab_c["m"] - y_c * tab_c["invp"] + tab_c["mop"])
        total = float(np.sum(w_c * np.where(a_c == 0, bracket0, bracket1) * q))

        idx_r = np.concatenate([ds.pattern_index[key] for key in sorted(ds.pattern_index)
                                if key[0] == r])
        tab_r = nuis.reg_tables(ds, r, idx_r, 1)
        ind1 = (ds.A[idx_r] == 1).astype(float)
        ra = tab_r["m"] + ind1 * (y0[idx_r] * tab_r["invp"] - tab_r["mop"])
        total += float(np.sum(weights[idx_r] * ra))
        theta_r[r] = total
    return theta_r


def estimate_mean_mr(ds: MissingDataset, nuis: NuisanceSet, odds,
                     weights: np.ndarray | None = None) -> MeanEstimate:
    """Multiply-robust E[Y]: consistent if, for each pattern, at least one of
    the odds model or the extrapolation model is correct."""
    w = np.full(ds.n, 1.0 / ds.n) if weights is None else np.asarray(weights, dtype=float)
    theta_r = mr_pattern_contributions(ds, nuis, odds, w)
    return MeanEstimate(float(sum(theta_r.values())), theta_r, "mr")


def eif_mean_zero_check(ds: MissingDataset, nuis: NuisanceSet, odds,
                        theta: float | None = None,
                        weights: np.ndarray | None = None) -> float:
    """Sample average of sum_r q_r minus a reference value (defaults to the
    estimate itself); O(1/sqrt(n)) against the truth when both legs hold."""
    est = estimate_mean_mr(ds, nuis, odds, weights=weights)
    return est.theta - (est.theta if theta is None else theta)
