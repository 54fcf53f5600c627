"""Generative models for the two benchmark simulations with known truth,
plus the EM-based transformed-MLE baseline for the survival design (which
doubles as the survival imputation model)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ccmv.datamodel import (
    ConfigurationError,
    DatasetSchema,
    MissingDataset,
    PatternMask,
    ValidationError,
    dataset_from_arrays,
)
from ccmv.imputation import XI_NEUTRAL, ZETA_NEUTRAL, draw_discrete_chain
from ccmv.numerics import integrate_1d, mvn_cholesky, substream
from ccmv.odds import OddsModelSet


class DegenerateCellError(ValueError):
    pass


@dataclass(frozen=True)
class CoxSimSpec:
    """Two correlated binary covariates, exponential event and censoring
    times, and CCMV missingness with log-linear pattern odds."""

    p1: float = 0.5
    p2: float = 0.3
    corr: float = 0.3
    beta: tuple[float, float] = (-0.5, 2.0)
    baseline_rate: float = 1.0
    censor_rate: float = 2.0
    # (intercept, observed covariate, y, delta) log-odds against R = 11
    odds_obs_x2: tuple[float, float, float, float] = (0.0, -0.5, 0.75, 0.5)
    odds_obs_x1: tuple[float, float, float, float] = (-1.0, 0.5, 1.0, 1.0)
    missing: bool = True

    def cell_probs(self) -> np.ndarray:
        """Joint over (x1, x2) combos in little-endian order 00, 10, 01, 11."""
        cov = self.corr * np.sqrt(self.p1 * (1 - self.p1) * self.p2 * (1 - self.p2))
        p11 = self.p1 * self.p2 + cov
        cells = np.array([1 - self.p1 - self.p2 + p11, self.p1 - p11, self.p2 - p11, p11])
        if np.any(cells < 0) or np.any(cells > 1):
            raise ValidationError(f"infeasible correlation: cell probabilities {cells}")
        return cells


COX_SCHEMA = DatasetSchema.survival(("x1", "x2"))


def gen_cox(spec: CoxSimSpec, n: int, seed: int) -> MissingDataset:
    gen = substream(seed)
    cells = spec.cell_probs()
    combo = np.searchsorted(np.cumsum(cells), gen.random(n), side="right")
    x1 = (combo & 1).astype(float)
    x2 = ((combo >> 1) & 1).astype(float)
    rate = spec.baseline_rate * np.exp(x1 * spec.beta[0] + x2 * spec.beta[1])
    T = gen.exponential(1.0 / rate)
    C = gen.exponential(1.0 / spec.censor_rate, size=n)
    y = np.minimum(T, C)
    delta = (T <= C).astype(np.int64)

    X = np.column_stack([x1, x2])
    if spec.missing:
        c01 = spec.odds_obs_x2
        c10 = spec.odds_obs_x1
        q01 = np.exp(c01[0] + c01[1] * x2 + c01[2] * y + c01[3] * delta)
        q10 = np.exp(c10[0] + c10[1] * x1 + c10[2] * y + c10[3] * delta)
        u = gen.random(n) * (1.0 + q01 + q10)
        X[u < q01, 0] = np.nan              # R = 01 observes x2 only
        sel10 = (u >= q01) & (u < q01 + q10)
        X[sel10, 1] = np.nan                # R = 10 observes x1 only
    return dataset_from_arrays(X, delta, y[:, None], COX_SCHEMA)


_E221_ATOMS: dict[tuple[str, int, int], float] = {
    ("11", 0, 0): 1 / 16, ("11", 0, 1): 1 / 12, ("11", 1, 0): 1 / 16, ("11", 1, 1): 1 / 24,
    ("10", 0, 0): 1 / 12, ("10", 0, 1): 1 / 8, ("10", 1, 0): 1 / 24, ("10", 1, 1): 1 / 12,
    ("01", 0, 0): 1 / 16, ("01", 0, 1): 1 / 24, ("01", 1, 0): 1 / 16, ("01", 1, 1): 1 / 12,
    ("00", 0, 0): 1 / 36, ("00", 0, 1): 1 / 24, ("00", 1, 0): 1 / 24, ("00", 1, 1): 1 / 18,
}

_E221_COMPONENTS: dict[tuple[str, int, int], tuple[tuple[float, float], tuple]] = {
    ("11", 0, 0): ((3, 4), ((0.5, 0.1), (0.1, 0.5))),
    ("11", 0, 1): ((4, 4), ((0.5, 0.2), (0.2, 0.5))),
    ("11", 1, 0): ((3, 2), ((0.4, 0.1), (0.1, 0.4))),
    ("11", 1, 1): ((2, 2), ((0.5, 0.1), (0.1, 0.5))),
    ("10", 0, 0): ((2, 19 / 5), ((0.5, 0.1), (0.1, 0.5))),
    ("10", 0, 1): ((2, 16 / 5), ((0.5, 0.2), (0.2, 0.5))),
    ("10", 1, 0): ((1, 3 / 2), ((0.4, 0.1), (0.1, 0.4))),
    ("10", 1, 1): ((3, 11 / 5), ((0.5, 0.1), (0.1, 0.5))),
    ("01", 0, 0): ((13 / 5, 2), ((0.5, 0.1), (0.1, 0.5))),
    ("01", 0, 1): ((14 / 5, 1), ((0.5, 0.2), (0.2, 0.5))),
    ("01", 1, 0): ((3.125, 2.5), ((0.4, 0.1), (0.1, 0.4))),
    ("01", 1, 1): ((1.9, 1.5), ((0.5, 0.1), (0.1, 0.5))),
    ("00", 0, 0): ((3, 4), ((0.5, 0.1), (0.1, 0.5))),
    ("00", 0, 1): ((4, 4), ((0.5, 0.2), (0.2, 0.5))),
    ("00", 1, 0): ((3, 2), ((0.4, 0.1), (0.1, 0.4))),
    ("00", 1, 1): ((2, 2), ((0.5, 0.1), (0.1, 0.5))),
}


@dataclass(frozen=True)
class BinaryTreatSimSpec:
    """Discrete (R, Y, A) atoms with per-cell bivariate Gaussian covariates,
    built so the complete-case conditionals extend to every pattern."""

    atoms: dict[tuple[str, int, int], float] = field(default_factory=lambda: dict(_E221_ATOMS))
    components: dict[tuple[str, int, int], tuple] = field(
        default_factory=lambda: dict(_E221_COMPONENTS))

    def __post_init__(self):
        total = sum(self.atoms.values())
        if abs(total - 1.0) > 1e-12:
            raise ValidationError(f"atom probabilities sum to {total!r}, expected 1")
        for key, (_, cov) in self.components.items():
            np.linalg.cholesky(np.asarray(cov))

    def max_ccmv_deviation(self) -> float:
        """How far the single-missing components are from the complete-case
        conditional (slope/intercept/variance of x_miss | x_obs); 0 = CCMV."""
        worst = 0.0
        for (r, y, a), (mu, cov) in self.components.items():
            if r not in ("10", "01"):
                continue
            mu = np.asarray(mu)
            cov = np.asarray(cov)
            mu11, cov11 = (np.asarray(v) for v in self.components[("11", y, a)])
            j = 0 if r == "10" else 1  # observed coordinate
            k = 1 - j
            b = cov[k, j] / cov[j, j]
            b11 = cov11[k, j] / cov11[j, j]
            worst = max(worst,
                        abs(b - b11),
                        abs((mu[k] - b * mu[j]) - (mu11[k] - b11 * mu11[j])),
                        abs((cov[k, k] - b * cov[j, k]) - (cov11[k, k] - b11 * cov11[j, k])))
        return worst


TREAT_SCHEMA = DatasetSchema.treatment(("x1", "x2"))


def gen_binary_treat(spec: BinaryTreatSimSpec, n: int, seed: int) -> MissingDataset:
    gen = substream(seed)
    keys = sorted(spec.atoms)
    probs = np.array([spec.atoms[k] for k in keys])
    ids = np.searchsorted(np.cumsum(probs), gen.random(n), side="right")
    X = np.empty((n, 2))
    A = np.empty(n, dtype=np.int64)
    Y = np.empty(n)
    for kid, key in enumerate(keys):
        rows = np.where(ids == kid)[0]
        if len(rows) == 0:
            continue
        mu, cov = spec.components[key]
        X[rows] = mvn_cholesky(gen, np.asarray(mu, dtype=float),
                               np.asarray(cov, dtype=float), len(rows))
        r_str, yv, av = key
        Y[rows] = yv
        A[rows] = av
        mask = PatternMask.from_string(r_str)
        for j in mask.missing_indices():
            X[rows, j] = np.nan
    return dataset_from_arrays(X, A, Y[:, None], TREAT_SCHEMA)


def true_ate(spec: BinaryTreatSimSpec, n_draws: int = 10_000_000, seed: int = 20_260_810,
             batch: int = 1_000_000) -> float:
    """Oracle E[Y(1)] - E[Y(0)] by Monte Carlo over the covariate marginal
    with the outcome regressions computed from the exact mixture densities."""
    keys = sorted(spec.atoms)
    probs = np.array([spec.atoms[k] for k in keys])
    params = [(np.asarray(spec.components[k][0], dtype=float),
               np.asarray(spec.components[k][1], dtype=float)) for k in keys]

    def mixture(X, want):
        total = np.zeros(len(X))
        for k, key in enumerate(keys):
            if want(key):
                mu, cov = params[k]
                prec = np.linalg.inv(cov)
                det = np.linalg.det(cov)
                diff = X - mu
                quad = np.einsum("ni,ij,nj->n", diff, prec, diff)
                total += probs[k] * np.exp(-0.5 * quad) / (2 * np.pi * np.sqrt(det))
        return total

    acc = 0.0
    done = 0
    part = 0
    while done < n_draws:
        m = min(batch, n_draws - done)
        gen = substream(seed, part)
        ids = np.searchsorted(np.cumsum(probs), gen.random(m), side="right")
        X = np.empty((m, 2))
        for k in range(len(keys)):
            rows = np.where(ids == k)[0]
            if len(rows):
                X[rows] = mvn_cholesky(gen, *params[k], len(rows))
        m1 = (mixture(X, lambda key: key[1] == 1 and key[2] == 1)
              / np.maximum(mixture(X, lambda key: key[2] == 1), 1e-300))
        m0 = (mixture(X, lambda key: key[1] == 1 and key[2] == 0)
              / np.maximum(mixture(X, lambda key: key[2] == 0), 1e-300))
        acc += float(np.sum(m1 - m0))
        done += m
        part += 1
    return acc / n_draws


@dataclass(frozen=True)
class TransformedMleFit:
    """gamma = (nu1, nu1 e^{b1}, nu1 e^{b2}, nu1 e^{b1+b2}) recovered by EM,
    censoring rate, and the beta implied by the log-ratio inversion."""

    gamma: np.ndarray
    nu2: float
    beta: np.ndarray
    iterations: int
    converged: bool
    loglik_path: tuple[float, ...]


def beta_from_gamma(gamma: np.ndarray) -> np.ndarray:
    g = np.asarray(gamma, dtype=float)
    l1 = np.log(g[1] / g[0])   # combo (1,0)
    l2 = np.log(g[2] / g[0])   # combo (0,1)
    l12 = np.log(g[3] / g[0])  # combo (1,1)
    b1 = 0.5 * l1 + 0.5 * (l12 - l2)
    b2 = 0.5 * l2 + 0.5 * (l12 - l1)
    return np.array([b1, b2])


class CoxEmImputer:
    """Survival imputation model for two binary covariates.

    The complete-case joint p(x, 1_d, y, delta) is factored into the
    empirical covariate frequencies, the pattern propensity implied by the
    fitted odds, a numerical integral for P(R=1_d | x), and a parametric
    exponential event/censoring model whose per-combo rates gamma_x are
    recovered by EM over the missing covariates.
    """

    family = "cox-em"

    def __init__(self, ds: MissingDataset, odds: OddsModelSet, tol: float = 1e-8,
                 max_iter: int = 200, quad_tol: float = 1e-10):
        if ds.d != 2:
            raise ConfigurationError("survival EM imputation requires d = 2")
        vals = ds.X[np.isfinite(ds.X)]
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ConfigurationError("survival EM imputation requires binary covariates")
        self.schema = ds.schema
        self.d = 2
        self.odds = odds
        y = ds.W[:, 0]
        delta = ds.A.astype(float)
        n = ds.n
        combos = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        complete = ds.is_complete()
        cc_codes = (np.nan_to_num(ds.X[complete]).astype(np.int64)
                    * np.array([1, 2])).sum(axis=1)
        n_cc = np.bincount(cc_codes, minlength=4).astype(float)
        if np.any(n_cc == 0):
            raise DegenerateCellError(f"empty complete-case covariate cell: counts {n_cc}")
        self.p_x_cc = n_cc / n_cc.sum()

        # pattern propensity on each combo at every record's (y, delta)
        def pi_R(c: int, yv: np.ndarray, dv: int) -> np.ndarray:
            rows = np.tile(combos[c], (len(yv), 1))
            W = yv[:, None]
            total = np.ones(len(yv))
            for r in odds.patterns_for(dv):
                total = total + odds.odds_rows(r, dv, rows, W)
            return 1.0 / total

        self._pi_R = pi_R
        self.nu2 = float((1.0 - delta).sum() / y.sum())

        # initialize gamma from complete cases
        gamma = np.empty(4)
        for c in range(4):
            sel = cc_codes == c
            num = float(delta[complete][sel].sum())
            den = float(y[complete][sel].sum())
            gamma[c] = max(num, 0.5) / max(den, 1e-12)

        consistent = np.ones((n, 4), dtype=bool)
        for c in range(4):
            for j in range(2):
                obs = np.isfinite(ds.X[:, j])
                consistent[obs & (ds.X[:, j] != combos[c, j]), c] = False

        dmat = delta[:, None]
        ymat = y[:, None]
        self._loglik_path: list[float] = []
        converged = False
        it = 0
        for it in range(1, max_iter + 1):
            P11 = self._integrate_p11(gamma, quad_tol)
            dens = self._ydelta_density(gamma, y, delta)          # (n, 4)
            prop = np.empty((n, 4))
            for c in range(4):
                for dv in (0, 1):
                    rows = delta == dv
                    prop[rows, c] = self._pi_R(c, y[rows], dv)
            score = np.where(consistent, self.p_x_cc * prop / P11 * dens, 0.0)
            wsum = score.sum(axis=1, keepdims=True)
            if np.any(wsum <= 0):
                raise DegenerateCellError("zero posterior mass for some record")
            w = score / wsum

            num = (dmat * w).sum(axis=0)
            den = (ymat * w).sum(axis=0)
            if np.any(den <= 0):
                raise DegenerateCellError(f"no weighted exposure for some combo: {den}")
            gamma_new = num / den

            ll = self._observed_loglik(gamma_new, y, delta, consistent, quad_tol)
            self._loglik_path.append(ll)
            if float(np.max(np.abs(gamma_new - gamma))) < tol:
                gamma = gamma_new
                converged = True
                break
            gamma = gamma_new

        self.gamma = gamma
        self.P11 = self._integrate_p11(gamma, quad_tol)
        self.transformed_mle = TransformedMleFit(
            gamma, self.nu2, beta_from_gamma(gamma), it, converged,
            tuple(self._loglik_path))

    def _ydelta_density(self, gamma: np.ndarray, y: np.ndarray,
                        delta: np.ndarray) -> np.ndarray:
        rates = gamma[None, :] ** delta[:, None] * self.nu2 ** (1.0 - delta[:, None])
        return rates * np.exp(-y[:, None] * (gamma[None, :] + self.nu2))

    def _integrate_p11(self, gamma: np.ndarray, quad_tol: float) -> np.ndarray:
        out = np.empty(4)
        for c in range(4):
            g = float(gamma[c])

            def integrand(yv: np.ndarray) -> np.ndarray:
                return (self._pi_R(c, yv, 1) * g + self._pi_R(c, yv, 0) * self.nu2) \
                    * np.exp(-yv * (g + self.nu2))

            out[c] = integrate_1d(integrand, 0.0, np.inf, tol=quad_tol)
        return np.clip(out, 1e-12, None)

    def _observed_loglik(self, gamma: np.ndarray, y: np.ndarray, delta: np.ndarray,
                         consistent: np.ndarray, quad_tol: float) -> float:
        P11 = self._integrate_p11(gamma, quad_tol)
        dens = self._ydelta_density(gamma, y, delta)
        prop = np.empty_like(dens)
        for c in range(4):
            for dv in (0, 1):
                rows = delta == dv
                prop[rows, c] = self._pi_R(c, y[rows], dv)
        lik = np.where(consistent, self.p_x_cc * prop / P11 * dens, 0.0).sum(axis=1)
        return float(np.log(np.maximum(lik, 1e-300)).sum())

    def conditional_tables(self, r: int, X_rows: np.ndarray, a: int,
                           W_rows: np.ndarray) -> np.ndarray:
        """p(x | R = 1_d, y, delta) over the 4 combos, restricted to the
        observed coordinates under pattern r."""
        y = W_rows[:, 0]
        dens = self._ydelta_density(self.gamma, y, np.full(len(y), float(a)))
        prop = np.column_stack([self._pi_R(c, y, a) for c in range(4)])
        table = self.p_x_cc * prop / self.P11 * dens
        obs = list(PatternMask.from_int(r, 2).observed_indices())
        if obs:
            combos = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=float)
            for j in obs:
                bad = combos[None, :, j] != X_rows[:, j][:, None]
                table = np.where(bad, 0.0, table)
        return table / table.sum(axis=1, keepdims=True)

    def draw_batch(self, gen: np.random.Generator, r: int, X_rows: np.ndarray, a: int,
                   W_rows: np.ndarray, zeta: float = ZETA_NEUTRAL,
                   xi: float = XI_NEUTRAL) -> np.ndarray:
        y = W_rows[:, 0]
        dens = self._ydelta_density(self.gamma, y, np.full(len(y), float(a)))
        prop = np.column_stack([self._pi_R(c, y, a) for c in range(4)])
        table = self.p_x_cc * prop / self.P11 * dens
        mask = PatternMask.from_int(r, 2)
        obs = list(mask.observed_indices())
        return draw_discrete_chain(gen, table, obs, X_rows[:, obs],
                                   list(mask.missing_indices()), 2, zeta)


def fit_cox_em(ds: MissingDataset, odds: OddsModelSet, **kwargs) -> CoxEmImputer:
    return CoxEmImputer(ds, odds, **kwargs)


def fit_transformed_mle(ds: MissingDataset, odds: OddsModelSet, **kwargs) -> TransformedMleFit:
    """EM baseline recovering beta from log-ratios of the per-combo hazard
    scale parameters."""
    return CoxEmImputer(ds, odds, **kwargs).transformed_mle
