import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, sparse

from conftest import random_design, random_knn_W
from spregimes.errors import RankError
from spregimes.regimes import RegimeAssignment
from spregimes.spatial_fit import (
    FitResult,
    LogDet,
    aic,
    build_regime_design,
    fit_model,
    log_det_factor,
    ols_fit,
    regime_term_names,
    sae_fit,
    sar_fit,
    sarar_fit,
    significance_stars,
)
from spregimes.synthetic import SyntheticScenario, simulate
from spregimes.weights import SpatialWeightMatrix


def _xy(ds):
    return np.column_stack([np.ones(ds.n), np.log(ds.inputs)]), np.log(ds.response)


def _dense_sae_logl(X, y, W, lam):
    # independent dense concentrated log-likelihood of the error model
    n = y.size
    A = np.eye(n) - lam * W
    Xs, ys = A @ X, A @ y
    beta = np.linalg.lstsq(Xs, ys, rcond=None)[0]
    e = ys - Xs @ beta
    s2 = e @ e / n
    return -n / 2 * (math.log(2 * math.pi) + 1 + math.log(s2)) + np.linalg.slogdet(A)[1]


@pytest.fixture(scope="module")
def sae_data():
    sc = SyntheticScenario(n=300, betas=[[1.0, 0.5, 0.3]], lam=0.5, sigma_eps=0.3, seed=11)
    _, W, ds = simulate(sc)
    X, y = _xy(ds)
    return X, y, W


class TestLogDet:
    def test_two_by_two(self):
        W = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert log_det_factor(W, 0.5) == pytest.approx(math.log(0.75), abs=1e-14)
        assert log_det_factor(W, 0.5, method="lu") == pytest.approx(math.log(0.75), abs=1e-14)

    @pytest.mark.parametrize("a", [-0.9, -0.3, 0.0, 0.4, 0.99])
    def test_eig_lu_dense_agree(self, rng, a):
        W = random_knn_W(rng, 80, 4)
        ref = np.linalg.slogdet(np.eye(80) - a * W.toarray())[1]
        assert LogDet(W, "eig")(a) == pytest.approx(ref, abs=1e-9)
        assert LogDet(W, "lu")(a) == pytest.approx(ref, abs=1e-9)

    def test_block_diagonal_is_additive(self, rng):
        A = random_knn_W(rng, 20, 3).W
        B = random_knn_W(rng, 30, 3).W
        W = sparse.block_diag([A, B])
        assert log_det_factor(W, 0.6) == pytest.approx(log_det_factor(A, 0.6) + log_det_factor(B, 0.6), abs=1e-10)

    @pytest.mark.parametrize("a", [1.0, -1.0, 1.5])
    def test_out_of_range(self, a):
        with pytest.raises(ValueError):
            log_det_factor(np.zeros((2, 2)), a)

    def test_empty(self):
        assert LogDet(sparse.csr_array((5, 5)))(0.7) == 0.0


class TestDesign:
    def test_block_design_example(self):
        X = np.array([[1.0, 2.0], [1.0, 3.0], [1.0, 4.0]])
        out = build_regime_design(X, np.array([1, 2, 1]))
        np.testing.assert_array_equal(out, [[1, 2, 0, 0], [0, 0, 1, 3], [1, 4, 0, 0]])
        assert regime_term_names(["a", "b"], 2) == (["a", "b", "a", "b"], ["1", "1", "2", "2"])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 4))
    def test_block_design_sums_back(self, seed, c):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((20, 3))
        lab = rng.integers(1, c + 1, 20)
        D = build_regime_design(X, lab, c)
        np.testing.assert_allclose(D.reshape(20, c, 3).sum(axis=1), X)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            build_regime_design(np.ones((2, 1)), np.array([1, 3]), c=2)

    @pytest.mark.parametrize(
        "p, stars", [(0.0005, "***"), (0.005, "**"), (0.03, "*"), (0.07, "."), (0.5, ""), (math.nan, "")]
    )
    def test_stars(self, p, stars):
        assert significance_stars(p) == stars


class TestOls:
    def test_closed_form(self, rng):
        X = random_design(rng, 50, 3)
        y = X @ [1.0, 2.0, 3.0] + rng.standard_normal(50)
        f = ols_fit(X, y)
        rss = np.sum((y - X @ f.beta) ** 2)
        assert f.logL == pytest.approx(-25 * (math.log(2 * math.pi) + 1 + math.log(rss / 50)))
        assert aic(f) == pytest.approx(2 * 4 - 2 * f.logL)
        assert f.n_params == 4 and f.dof == 47

    def test_rank_error(self):
        X = np.ones((10, 2))
        with pytest.raises(RankError):
            ols_fit(X, np.arange(10.0))

    def test_regime_blocks_equal_separate_fits(self, rng):
        X = random_design(rng, 60, 2)
        y = rng.standard_normal(60)
        lab = np.repeat([1, 2, 3], 20)
        f = fit_model("OLS", X, y, regimes=RegimeAssignment(lab))
        for g in range(3):
            rows = lab == g + 1
            b = np.linalg.lstsq(X[rows], y[rows], rcond=None)[0]
            np.testing.assert_allclose(f.beta[2 * g : 2 * g + 2], b, rtol=1e-10)
        assert f.label == "OLS-regimes" and f.clusters == ("1", "1", "2", "2", "3", "3")


class TestSpatial:
    def test_empty_w_equals_ols(self, rng):
        X = random_design(rng, 40, 2)
        y = rng.standard_normal(40)
        base = ols_fit(X, y)
        for fit in (sae_fit(X, y, sparse.csr_array((40, 40))), sar_fit(X, y, sparse.csr_array((40, 40)))):
            np.testing.assert_allclose(fit.beta, base.beta, rtol=1e-10)
            assert fit.logL == pytest.approx(base.logL)
            assert (fit.lam or 0.0) == 0.0 and (fit.rho or 0.0) == 0.0

    def test_sae_matches_dense_oracle(self, sae_data):
        X, y, W = sae_data
        f = sae_fit(X, y, W)
        Wd = W.toarray()
        res = optimize.minimize_scalar(
            lambda a: -_dense_sae_logl(X, y, Wd, a), bounds=(-0.99, 0.99), method="bounded", options={"xatol": 1e-9}
        )
        assert f.lam == pytest.approx(res.x, abs=1e-4)
        assert f.logL == pytest.approx(-res.fun, abs=1e-7)
        assert abs(f.lam - 0.5) < 0.15
        assert f.n_params == 5 and f.aic == pytest.approx(10 - 2 * f.logL)

    def test_sae_se_vs_numerical_information(self, sae_data):
        X, y, W = sae_data
        f = sae_fit(X, y, W)
        # GLS covariance at the optimum: sigma2 ((A X)'(A X))^-1
        A = np.eye(y.size) - f.lam * W.toarray()
        cov = f.sigma2 * np.linalg.inv((A @ X).T @ (A @ X))
        np.testing.assert_allclose(f.se, np.sqrt(np.diag(cov)), rtol=0.02)
        assert 0 < f.lam_se < 0.2

    def test_sar_recovers_rho(self):
        sc = SyntheticScenario(n=400, betas=[[1.0, 0.5, 0.3]], rho=0.4, sigma_eps=0.3, seed=2)
        _, W, ds = simulate(sc)
        X, y = _xy(ds)
        f = sar_fit(X, y, W)
        assert abs(f.rho - 0.4) < 0.1
        mu = f.fitted_mean(X, W)
        assert mu.shape == (400,)
        with pytest.raises(NotImplementedError):
            f.elasticities()
        with pytest.raises(ValueError):
            f.fitted_mean(X)

    def test_nesting(self, sae_data):
        X, y, W = sae_data
        sae = sae_fit(X, y, W)
        sar = sar_fit(X, y, W)
        full = sarar_fit(X, y, W, W, nested=[sae, sar])
        assert full.logL >= max(sae.logL, sar.logL) - 1e-6
        assert ols_fit(X, y).logL <= sae.logL + 1e-9
        lab = RegimeAssignment.from_labels((X[:, 1] > 0).astype(int))
        reg = fit_model("SAE", X, y, W, regimes=lab)
        assert reg.logL >= sae.logL - 1e-6
        assert reg.n_params == 2 * 3 + 2

    def test_sarar_identification_caveat(self, sae_data):
        X, y, W = sae_data
        lab = RegimeAssignment.from_labels((X[:, 1] > 0).astype(int))
        f = fit_model("SARAR", X, y, W, regimes=lab)
        assert f.identification_caveat and f.identification_p is not None
        assert f.n_params == 6 + 3

    def test_elasticities_without_lag(self, sae_data):
        X, y, W = sae_data
        f = sae_fit(X, y, W, names=["Intercept", "a", "b"])
        e = f.elasticities()
        assert list(e) == ["Intercept", "a", "b"]
        np.testing.assert_allclose(X @ f.beta, f.fitted_mean(X))

    def test_outputs(self, sae_data):
        X, y, W = sae_data
        f = sae_fit(X, y, W, names=["Intercept", "a", "b"])
        tab = f.coef_table()
        assert list(tab.columns) == ["term", "cluster", "estimate", "se", "statistic", "p_value", "stars"]
        assert tab["term"].tolist()[-1] == "lambda"
        d = f.to_dict()
        assert d["model"] == "SAE" and d["c"] == 1 and len(d["coefficients"]) == 4

    def test_parameter_bounds_checked(self):
        with pytest.raises(ValueError):
            FitResult("SAE", np.zeros(1), np.zeros(1), np.eye(1), ("a",), ("",), 1.0, 0.0, 5, lam=1.0)
        with pytest.raises(ValueError):
            FitResult("GM", np.zeros(1), np.zeros(1), np.eye(1), ("a",), ("",), 1.0, 0.0, 5)

    def test_spatial_weight_matrix_accepted(self, sae_data):
        X, y, W = sae_data
        assert isinstance(W, SpatialWeightMatrix)
        assert sae_fit(X, y, W.W).lam == pytest.approx(sae_fit(X, y, W).lam)
