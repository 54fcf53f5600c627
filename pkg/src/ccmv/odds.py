"""Complete-odds models Q_{r,a} fitted as two-class logistic regressions,
IPW weights, exponential-tilting sensitivity, and the d=2 kappa-mixture
odds that relax the complete-case restriction for the doubly-missing
pattern."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from ccmv.datamodel import ConfigurationError, DatasetSchema, MissingDataset, PatternMask
from ccmv.numerics import LogisticFit, fit_logistic

log = logging.getLogger(__name__)

ODDS_CLIP = 1e6


class IdentificationError(ValueError):
    pass


class MissingModelError(KeyError):
    pass


def _interaction_cols(F: np.ndarray) -> np.ndarray:
    cols = [F]
    p = F.shape[1]
    for i in range(p):
        for j in range(i + 1, p):
            cols.append((F[:, i] * F[:, j])[:, None])
    return np.hstack(cols)


def _features(schema: DatasetSchema, r: int, a: int, X: np.ndarray, W: np.ndarray,
              interactions: bool) -> np.ndarray:
    obs = PatternMask.from_int(r, schema.d).observed_indices()
    out_cols = schema.outcome_indices(a)
    F = np.hstack([X[:, list(obs)], W[:, list(out_cols)]])
    if interactions and F.shape[1] > 1:
        F = _interaction_cols(F)
    return F


@dataclass
class OddsModelSet:
    """One fitted two-class logistic per (pattern r != 1_d, outcome pattern a).

    ``marginal_fits`` hold the covariate-free odds P(R=r|W_a,a)/P(R=1_d|W_a,a)
    used by the kappa-mixture decomposition.  ``tilt`` maps each pattern to
    the exponential-tilt vector over its missing coordinates (zero = CCMV).
    """

    schema: DatasetSchema
    fits: dict[tuple[int, int], LogisticFit] = field(default_factory=dict)
    marginal_fits: dict[tuple[int, int], LogisticFit] = field(default_factory=dict)
    tilt: dict[int, np.ndarray] = field(default_factory=dict)
    interactions: bool = False
    _clip_warned: bool = field(default=False, repr=False, compare=False)

    @property
    def d(self) -> int:
        return self.schema.d

    @property
    def complete_int(self) -> int:
        return (1 << self.d) - 1

    def patterns_for(self, a: int) -> list[int]:
        return sorted(r for (r, aa) in self.fits if aa == a)

    def with_tilt(self, rho: float) -> "OddsModelSet":
        tilt = {
            r: np.full(len(PatternMask.from_int(r, self.d).missing_indices()), float(rho))
            for r in {r for (r, _) in self.fits}
        }
        return OddsModelSet(self.schema, self.fits, self.marginal_fits, tilt, self.interactions)

    def odds_rows(self, r: int, a: int, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        """Q_{r,a}(X_r, W_a) * exp(rho_rbar . X_rbar) on complete-covariate rows."""
        if r == self.complete_int:
            return np.ones(len(X))
        if (r, a) not in self.fits:
            raise MissingModelError(f"no fitted odds for pattern {r} / outcome pattern {a}")
        coef = self.fits[(r, a)].coefficients
        F = _features(self.schema, r, a, X, W, self.interactions)
        lp = coef[0] + F @ coef[1:]
        rho = self.tilt.get(r)
        if rho is not None and rho.size:
            miss = PatternMask.from_int(r, self.d).missing_indices()
            lp = lp + X[:, list(miss)] @ rho
        cap = np.log(ODDS_CLIP)
        clipped = lp > cap
        if np.any(clipped):
            if not self._clip_warned:
                log.warning("clipping odds evaluations at %g (pattern %d/a=%d; "
                            "further clips logged at debug level)", ODDS_CLIP, r, a)
                self._clip_warned = True
            else:
                log.debug("clipping %d odds evaluations at %g for pattern %d/a=%d",
                          int(clipped.sum()), ODDS_CLIP, r, a)
            lp = np.minimum(lp, cap)
        return np.exp(lp)

    def marginal_odds_rows(self, r: int, a: int, W: np.ndarray) -> np.ndarray:
        """P(R=r|W_a,a)/P(R=1_d|W_a,a) ignoring covariates."""
        if r == self.complete_int:
            return np.ones(len(W))
        if (r, a) not in self.marginal_fits:
            raise MissingModelError(f"no marginal odds for pattern {r} / outcome pattern {a}")
        coef = self.marginal_fits[(r, a)].coefficients
        out_cols = list(self.schema.outcome_indices(a))
        lp = coef[0] + W[:, out_cols] @ coef[1:] if out_cols else np.full(len(W), coef[0])
        return np.exp(np.minimum(lp, np.log(ODDS_CLIP)))


def fit_odds(ds: MissingDataset, interactions: bool = False) -> OddsModelSet:
    """Fit Q_{r,a} for every occurring (r != 1_d, a) cell against the
    complete cases with the same outcome pattern; features (1, X_r, W_a)."""
    models = OddsModelSet(ds.schema, interactions=interactions)
    complete = ds.complete_int
    for (r, a) in ds.occurring_patterns():
        if r == complete:
            continue
        if (complete, a) not in ds.pattern_index:
            raise IdentificationError(
                f"no complete cases for outcome pattern a={a}, needed by pattern {r}")
        idx_r = ds.pattern_index[(r, a)]
        idx_c = ds.pattern_index[(complete, a)]
        idx = np.concatenate([idx_r, idx_c])
        labels = np.concatenate([np.ones(len(idx_r)), np.zeros(len(idx_c))])
        # incomplete rows only carry their observed coordinates, which is all
        # the feature map reads for pattern r
        Xsub = np.nan_to_num(ds.X[idx], nan=0.0)
        F = _features(ds.schema, r, a, Xsub, ds.W[idx], interactions)
        fit = fit_logistic(F, labels)
        if fit.separation:
            log.warning("separation detected fitting odds for pattern %d / a=%d", r, a)
        models.fits[(r, a)] = fit

        Fm = ds.W[idx][:, list(ds.schema.outcome_indices(a))]
        models.marginal_fits[(r, a)] = fit_logistic(Fm, labels)
    return models


def eval_odds(models: OddsModelSet, rec_x: np.ndarray, a: int, target: PatternMask | int,
              w: np.ndarray) -> float:
    """Tilted CCMV odds for one complete-covariate record; target = 1_d gives 1."""
    x = np.asarray(rec_x, dtype=float)
    if np.any(np.isnan(x)):
        raise ConfigurationError("odds evaluation requires a complete covariate vector")
    r = target.as_int() if isinstance(target, PatternMask) else int(target)
    if r == models.complete_int:
        return 1.0
    Wrow = np.zeros((1, len(models.schema.outcome_names)))
    Wrow[0, list(models.schema.outcome_indices(a))] = np.asarray(w, dtype=float)
    return float(models.odds_rows(r, a, x[None, :], Wrow)[0])


def ipw_weights(models: OddsModelSet, ds: MissingDataset) -> np.ndarray:
    """lambda_i = 1(R_i = 1_d) * sum_r Q_{r,A_i}(X_{i,r}, W_{i,A_i}).

    The r = 1_d term contributes 1, so complete records have lambda_i >= 1;
    lambda_i estimates 1/P(R=1_d | X_i, W_{i,A_i}, A_i).
    """
    lam = np.zeros(ds.n)
    complete = ds.is_complete()
    for a in sorted(set(int(v) for v in ds.A)):
        sel = complete & (ds.A == a)
        if not np.any(sel):
            continue
        total = np.ones(int(sel.sum()))
        for r in models.patterns_for(a):
            total = total + models.odds_rows(r, a, ds.X[sel], ds.W[sel])
        lam[sel] = total
    return lam


@dataclass(frozen=True)
class KappaMixture:
    """Mixture weights over the three identified single-missing extrapolations
    for the doubly-missing pattern (d = 2); (0, 0, 1) is CCMV."""

    kappa1: float
    kappa2: float
    kappa3: float

    def __post_init__(self):
        k = (self.kappa1, self.kappa2, self.kappa3)
        if any(v < 0 for v in k):
            raise ConfigurationError(f"kappa weights must be nonnegative, got {k}")
        if abs(sum(k) - 1.0) > 1e-12:
            raise ConfigurationError(f"kappa weights must sum to 1, got {sum(k)!r}")


def kappa_combine(q01: float, q10: float, b00: float, b01: float, b10: float,
                  kappa: KappaMixture) -> float:
    """P(R=00|x,v)/P(R=11|x,v) from the pattern odds Q (given x_r, v) and the
    covariate-free pattern odds B (given v); sums the three identified terms
    for P(R=00)/P(R in {01,10,11}) and rescales by (1 + Q01 + Q10)."""
    t1 = kappa.kappa1 * (b00 / b01) / (q10 / q01 + 1.0 / q01 + 1.0)
    t2 = kappa.kappa2 * (b00 / b10) / (q01 / q10 + 1.0 / q10 + 1.0)
    t3 = kappa.kappa3 * b00 / (q10 + q01 + 1.0)
    return (t1 + t2 + t3) * (1.0 + q01 + q10)


def kappa_odds_00(models: OddsModelSet, rec_x: np.ndarray, a: int, w: np.ndarray,
                  kappa: KappaMixture) -> float:
    """The kappa-mixture odds for the doubly-missing pattern (d = 2).

    kappa3 = 1 reduces to the CCMV odds Q_{00,a}, which carries no covariate
    dependence and equals the marginal pattern odds given (W_a, a).
    """
    if models.d != 2:
        raise ConfigurationError(f"kappa-mixture odds requires d=2, got d={models.d}")
    x = np.asarray(rec_x, dtype=float)[None, :]
    Wrow = np.zeros((1, len(models.schema.outcome_names)))
    Wrow[0, list(models.schema.outcome_indices(a))] = np.asarray(w, dtype=float)

    q01 = float(models.odds_rows(0b10, a, x, Wrow)[0])  # observes X2 only
    q10 = float(models.odds_rows(0b01, a, x, Wrow)[0])  # observes X1 only
    b00 = float(models.marginal_odds_rows(0b00, a, Wrow)[0])
    b01 = float(models.marginal_odds_rows(0b10, a, Wrow)[0])
    b10 = float(models.marginal_odds_rows(0b01, a, Wrow)[0])
    return kappa_combine(q01, q10, b00, b01, b10, kappa)


def export_coefficients(models: OddsModelSet, path: str) -> None:
    """Audit/export format: (kind, pattern, outcome_pattern, name, value)."""
    schema = models.schema
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "pattern", "outcome_pattern", "name", "value"])
        for (r, a), fit in sorted(models.fits.items()):
            names = _coef_names(schema, r, a, models.interactions)
            for name, v in zip(names, fit.coefficients):
                writer.writerow(["odds", str(PatternMask.from_int(r, schema.d)), a, name, repr(float(v))])
        for (r, a), fit in sorted(models.marginal_fits.items()):
            names = ["intercept"] + [schema.outcome_names[c] for c in schema.outcome_indices(a)]
            for name, v in zip(names, fit.coefficients):
                writer.writerow(["marginal", str(PatternMask.from_int(r, schema.d)), a, name, repr(float(v))])


def _coef_names(schema: DatasetSchema, r: int, a: int, interactions: bool) -> list[str]:
    base = [schema.covariate_names[j] for j in PatternMask.from_int(r, schema.d).observed_indices()]
    base += [schema.outcome_names[c] for c in schema.outcome_indices(a)]
    names = list(base)
    if interactions and len(base) > 1:
        for i in range(len(base)):
            for j in range(i + 1, len(base)):
                names.append(f"{base[i]}*{base[j]}")
    return ["intercept"] + names


def import_coefficients(path: str, schema: DatasetSchema,
                        interactions: bool = False) -> OddsModelSet:
    models = OddsModelSet(schema, interactions=interactions)
    rows: dict[tuple[str, int, int], list[tuple[str, float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["kind"], PatternMask.from_string(row["pattern"]).as_int(),
                   int(row["outcome_pattern"]))
            rows.setdefault(key, []).append((row["name"], float(row["value"])))
    for (kind, r, a), pairs in rows.items():
        expected = (_coef_names(schema, r, a, interactions) if kind == "odds" else
                    ["intercept"] + [schema.outcome_names[c] for c in schema.outcome_indices(a)])
        by_name = dict(pairs)
        if set(by_name) != set(expected):
            raise ConfigurationError(f"coefficient names {sorted(by_name)} do not match schema")
        coef = np.array([by_name[name] for name in expected])
        fit = LogisticFit(coef, True, 0, 0.0)
        (models.fits if kind == "odds" else models.marginal_fits)[(r, a)] = fit
    return models
