import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccmv.datamodel import ConfigurationError, DatasetSchema, dataset_from_arrays
from ccmv.numerics import LogisticFit, substream
from ccmv.odds import (
    KappaMixture,
    OddsModelSet,
    eval_odds,
    export_coefficients,
    fit_odds,
    import_coefficients,
    ipw_weights,
    kappa_combine,
    kappa_odds_00,
)
from ccmv.simgen import CoxSimSpec, gen_cox

from joint_oracle import (
    COMPLETE,
    PATTERNS,
    TabularOdds,
    default_joint,
    exact_count_two_pattern_dataset,
)

SURV = DatasetSchema.survival(("x1", "x2"))
TREAT = DatasetSchema.treatment(("x1", "x2"))


class TestFitOdds:
    def test_recovers_generative_log_odds(self):
        # single-fit coefficient SD at n=5000 reaches 0.26 (y within delta=1),
        # so the +-0.15 recovery bound is applied to the mean over 12 fits
        sums = {key: np.zeros(3) for key in
                [(r, dv) for r in (0b10, 0b01) for dv in (0, 1)]}
        n_rep = 12
        for seed in range(n_rep):
            models = fit_odds(gen_cox(CoxSimSpec(), 5000, seed=500 + seed))
            for key in sums:
                sums[key] += models.fits[key].coefficients
        # pattern 01 (observes x2): log odds = -0.5 x2 + 0.75 y + 0.5 delta;
        # pattern 10 (observes x1): -1 + 0.5 x1 + y + delta; the per-delta
        # fits absorb the delta term into the intercept
        for dv in (0, 1):
            assert np.all(np.abs(sums[(0b10, dv)] / n_rep
                                 - np.array([0.5 * dv, -0.5, 0.75])) < 0.15)
            assert np.all(np.abs(sums[(0b01, dv)] / n_rep
                                 - np.array([-1.0 + dv, 0.5, 1.0])) < 0.15)

    def test_no_missingness_empty_set(self):
        gen = substream(2)
        X = gen.random((50, 2)).round()
        ds = dataset_from_arrays(X, np.repeat([0, 1], 25), gen.random(50)[:, None], SURV)
        models = fit_odds(ds)
        assert not models.fits
        assert eval_odds(models, np.array([1.0, 0.0]), 1, 3, np.array([0.5])) == 1.0


class TestEvalOdds:
    def _models(self):
        models = OddsModelSet(SURV)
        # pattern 10 (observes x1) at delta=1: features (1, x1, y)
        models.fits[(0b01, 1)] = LogisticFit(np.array([0.0, 0.5, 1.0]), True, 1, 0.0)
        return models

    def test_complete_target_is_one(self):
        assert eval_odds(self._models(), np.array([1.0, 1.0]), 1, 3, np.array([0.2])) == 1.0

    def test_hand_value(self):
        # exp(0 + 0.5*1 + 1.0*0.2) = exp(0.7)
        val = eval_odds(self._models(), np.array([1.0, 0.0]), 1, 0b01, np.array([0.2]))
        assert abs(val - np.exp(0.7)) < 1e-12

    def test_zero_tilt_identity(self):
        m = self._models()
        tilted = m.with_tilt(0.0)
        x, w = np.array([1.0, 1.0]), np.array([0.2])
        assert eval_odds(tilted, x, 1, 0b01, w) == eval_odds(m, x, 1, 0b01, w)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
    def test_tilt_monotone_when_missing_is_one(self, rho_a, rho_b):
        m = self._models()
        x = np.array([1.0, 1.0])  # x2 = 1 is the missing coordinate under 10
        w = np.array([0.2])
        va = eval_odds(m.with_tilt(rho_a), x, 1, 0b01, w)
        vb = eval_odds(m.with_tilt(rho_b), x, 1, 0b01, w)
        if rho_b - rho_a > 1e-9:
            assert va < vb
        x0 = np.array([1.0, 0.0])  # missing coordinate = 0: tilt has no effect
        assert eval_odds(m.with_tilt(rho_a), x0, 1, 0b01, w) == \
            eval_odds(m.with_tilt(rho_b), x0, 1, 0b01, w)


class TestIpwWeights:
    def test_incomplete_records_zero(self):
        ds = gen_cox(CoxSimSpec(), 500, seed=3)
        lam = ipw_weights(fit_odds(ds), ds)
        assert np.all(lam[~ds.is_complete()] == 0.0)
        assert np.all(lam[ds.is_complete()] >= 1.0)

    def test_no_missingness_weight_one(self):
        gen = substream(4)
        X = gen.random((40, 2)).round()
        ds = dataset_from_arrays(X, np.repeat([0, 1], 20), gen.random(40)[:, None], SURV)
        lam = ipw_weights(fit_odds(ds), ds)
        assert np.all(lam == 1.0)

    def test_saturated_fit_inverts_selection_probability(self):
        ds, sel = exact_count_two_pattern_dataset()
        models = fit_odds(ds, interactions=True)
        lam = ipw_weights(models, ds)
        complete = ds.is_complete()
        x1 = ds.X[complete, 0].astype(int)
        y = ds.W[complete, 0].astype(int)
        a = ds.A[complete]
        expected = 1.0 / (1.0 - sel[x1, y, a])
        assert np.max(np.abs(lam[complete] - expected)) < 1e-6

    def test_prop1_selection_equivalence(self):
        # directly fitted selection probabilities reconstructed from the odds
        # sum to one and match a two-class selection fit
        ds, sel = exact_count_two_pattern_dataset()
        models = fit_odds(ds, interactions=True)
        lam = ipw_weights(models, ds)
        complete = ds.is_complete()
        q10 = np.zeros(int(complete.sum()))
        for a in (0, 1):
            rows = ds.A[complete] == a
            q10[rows] = models.odds_rows(0b01, a, ds.X[complete][rows], ds.W[complete][rows])
        p_complete = 1.0 / lam[complete]
        p_10 = q10 / lam[complete]
        assert np.max(np.abs(p_complete + p_10 - 1.0)) < 1e-10
        x1 = ds.X[complete, 0].astype(int)
        y = ds.W[complete, 0].astype(int)
        a = ds.A[complete]
        assert np.max(np.abs(p_10 - sel[x1, y, a])) < 1e-6


class TestEnumeratedJointIdentities:
    def test_lemma1_and_inverse_propensity(self):
        joint = default_joint(response_style=False)
        ds, wts = joint.observed_dataset()
        odds = TabularOdds(joint)
        lam = ipw_weights(odds, ds)
        complete = ds.is_complete()
        # eq PS: lambda * P(R=1_d | x, w_a, a) = 1 on every complete atom
        for i in np.where(complete)[0]:
            x = ds.X[i]
            y = int(ds.W[i, 0])
            a = int(ds.A[i])
            denom = sum(joint.odds_value(r, a, x, y) for r in PATTERNS)
            assert abs(lam[i] - denom) < 1e-12

        # Lemma 1 with f(x, w) = (1 + x1)(2y - 1): brute force against the
        # complete-case reweighted form for every (r, a)
        f = lambda x, y: (1.0 + x[0]) * (2.0 * y - 1.0)
        for r in PATTERNS:
            for a in (0, 1):
                brute = joint.expect(
                    lambda x, rr, y, aa: f(x, y) if (rr == r and aa == a) else 0.0)
                ipw_form = joint.expect(
                    lambda x, rr, y, aa: f(x, y) * joint.odds_value(r, a, x, y)
                    if (rr == COMPLETE and aa == a) else 0.0)
                assert abs(brute - ipw_form) < 1e-12


class TestKappaMixture:
    def test_weight_validation(self):
        with pytest.raises(ConfigurationError):
            KappaMixture(0.5, 0.6, 0.1)
        with pytest.raises(ConfigurationError):
            KappaMixture(-0.1, 0.6, 0.5)

    def test_requires_d2(self):
        models = OddsModelSet(DatasetSchema.survival(("x1", "x2", "x3")))
        with pytest.raises(ConfigurationError):
            kappa_odds_00(models, np.ones(3), 1, np.array([0.1]), KappaMixture(0, 0, 1))

    def test_ccmv_reduction(self):
        # with kappa3 = 1 the mixture reproduces the fitted CCMV odds for the
        # doubly-missing pattern
        gen = substream(9)
        n = 400
        X = gen.random((n, 2)).round()
        y = gen.random(n).round()
        A = gen.integers(0, 2, n)
        u = gen.random(n)
        X[u < 0.2, 0] = np.nan
        X[(u >= 0.2) & (u < 0.4), 1] = np.nan
        X[(u >= 0.4) & (u < 0.5), :] = np.nan
        ds = dataset_from_arrays(X, A, y[:, None], TREAT)
        models = fit_odds(ds)
        x = np.array([1.0, 0.0])
        for a in (0, 1):
            w = np.array([1.0])
            val = kappa_odds_00(models, x, a, w, KappaMixture(0.0, 0.0, 1.0))
            ccmv = eval_odds(models, x, a, 0b00, w)
            assert abs(val - ccmv) < 1e-10

    def test_mixture_joint_brute_force(self):
        # build a d=2 joint satisfying the kappa-mixture restriction and check
        # the combined odds against direct enumeration
        kappa = KappaMixture(0.3, 0.3, 0.4)
        p_x_11 = np.array([[0.3, 0.2], [0.1, 0.4]])  # p(x1, x2 | R=11, v)
        mass = {0b11: 0.4, 0b01: 0.25, 0b10: 0.2, 0b00: 0.15}
        cond_x2_01 = np.array([0.35, 0.65])  # p(x2 | R=01, v), CCMV keeps x1|x2
        cond_x1_10 = np.array([0.55, 0.45])  # p(x1 | R=10, v)

        p11 = p_x_11 * mass[0b11]
        px1_given_x2 = p_x_11 / p_x_11.sum(axis=0, keepdims=True)
        px2_given_x1 = p_x_11 / p_x_11.sum(axis=1, keepdims=True)
        p01 = px1_given_x2 * cond_x2_01[None, :] * mass[0b01]
        p10 = px2_given_x1 * cond_x1_10[:, None] * mass[0b10]
        mix = (kappa.kappa1 * p01 / mass[0b01] + kappa.kappa2 * p10 / mass[0b10]
               + kappa.kappa3 * p_x_11)
        p00 = mix * mass[0b00]

        for x1 in (0, 1):
            for x2 in (0, 1):
                q01 = p01[x1, x2] / p11[x1, x2]
                q10 = p10[x1, x2] / p11[x1, x2]
                # the odds given x2 only / x1 only are the CCMV inputs
                q01_marg = p01[:, x2].sum() / p11[:, x2].sum()
                q10_marg = p10[x1, :].sum() / p11[x1, :].sum()
                assert abs(q01 - q01_marg) < 1e-12
                assert abs(q10 - q10_marg) < 1e-12
                got = kappa_combine(q01_marg, q10_marg,
                                    mass[0b00] / mass[0b11], mass[0b01] / mass[0b11],
                                    mass[0b10] / mass[0b11], kappa)
                assert abs(got - p00[x1, x2] / p11[x1, x2]) < 1e-8


class TestCoefficientCsv:
    def test_round_trip(self, tmp_path):
        ds = gen_cox(CoxSimSpec(), 800, seed=21)
        models = fit_odds(ds)
        path = str(tmp_path / "coefs.csv")
        export_coefficients(models, path)
        loaded = import_coefficients(path, ds.schema)
        for key, fit in models.fits.items():
            assert np.allclose(loaded.fits[key].coefficients, fit.coefficients)
        for key, fit in models.marginal_fits.items():
            assert np.allclose(loaded.marginal_fits[key].coefficients, fit.coefficients)
        lam_a = ipw_weights(models, ds)
        lam_b = ipw_weights(loaded, ds)
        assert np.allclose(lam_a, lam_b)
