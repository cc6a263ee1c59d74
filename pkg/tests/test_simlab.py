"""Truth generation, data simulation, nuisance fitting, bias oracle."""

import numpy as np
import pytest

from hoiflab.basis import make_basis
from hoiflab.errors import ConfigError
from hoiflab.gram import exact_gram
from hoiflab.simlab import (
    OracleBias,
    SeriesFunction,
    TruthSpec,
    fit_nuisance,
    fit_series,
    gen_data,
    gen_truth,
    oracle_bias,
    oracle_nuisance,
)


class TestTruth:
    def test_zero_amplitude_is_offset(self):
        spec = TruthSpec(s=0.3, J=50, amplitude=0.0, offset=0.4)
        p = gen_truth(spec)
        X = np.random.default_rng(0).uniform(0, 1, (20, 1))
        np.testing.assert_allclose(p(X), 0.4, atol=1e-14)

    def test_two_term_series(self):
        spec = TruthSpec(s=0.25, J=2, amplitude=1.0, offset=0.1)
        p = gen_truth(spec)
        x = np.array([[0.2]])
        z2 = np.sqrt(2) * np.cos(2 * np.pi * 0.2)
        assert p(x)[0] == pytest.approx(0.1 + 2 ** (-0.75) * z2, abs=1e-12)

    def test_l2_tail_matches_direct_sum(self):
        spec = TruthSpec(s=0.25, J=5000, amplitude=1.0)
        direct = sum(
            (1.0 * j ** (-0.75)) ** 2 for j in range(101, 5001)
        )
        assert spec.l2_tail(100) == pytest.approx(direct, abs=1e-8)

    def test_bernoulli_range_guard(self):
        with pytest.raises(ConfigError, match="range"):
            gen_truth(TruthSpec(s=0.25, J=500, amplitude=1.0, offset=0.5), model="bernoulli")
        gen_truth(TruthSpec(s=0.25, J=50, amplitude=0.03, offset=0.5), model="bernoulli")

    def test_invalid_smoothness(self):
        with pytest.raises(ConfigError):
            TruthSpec(s=1.5, J=10, amplitude=1.0).coefficients()


class TestGenData:
    def test_deterministic_given_rng(self):
        p = gen_truth(TruthSpec(s=0.3, J=20, amplitude=0.3))
        d1 = gen_data(100, 1, "gaussian", p, np.random.default_rng(7),
                      split_fractions={"tr": 0.5, "est": 0.5})
        d2 = gen_data(100, 1, "gaussian", p, np.random.default_rng(7),
                      split_fractions={"tr": 0.5, "est": 0.5})
        assert np.array_equal(d1.A, d2.A)
        assert np.array_equal(d1.splits["tr"], d2.splits["tr"])

    @pytest.mark.slow
    def test_bernoulli_mean(self):
        p = gen_truth(TruthSpec(s=0.3, J=1, amplitude=0.0, offset=0.5), model="bernoulli")
        d = gen_data(100_000, 1, "bernoulli", p, np.random.default_rng(1))
        assert abs(d.A.mean() - 0.5) < 0.01

    @pytest.mark.slow
    def test_gaussian_noise_variance(self):
        p = gen_truth(TruthSpec(s=0.3, J=30, amplitude=0.5))
        d = gen_data(100_000, 1, "gaussian", p, np.random.default_rng(2))
        resid = d.A - p(d.X)
        assert abs(resid.var() - 1.0) < 0.02

    def test_cond_variance_ties_y_to_a(self):
        p = gen_truth(TruthSpec(s=0.3, J=5, amplitude=0.2))
        d = gen_data(50, 1, "gaussian", p, np.random.default_rng(3))
        assert np.array_equal(d.A, d.Y)

    def test_cond_covariance_needs_b(self):
        p = gen_truth(TruthSpec(s=0.3, J=5, amplitude=0.2))
        with pytest.raises(ConfigError):
            gen_data(50, 1, "gaussian", p, np.random.default_rng(4),
                     variant="cond_covariance")


class TestFitNuisance:
    def test_recovers_noiseless_series(self):
        rng = np.random.default_rng(5)
        basis = make_basis("fourier", k=6, d=1)
        beta = rng.standard_normal(6) * 0.3
        X = rng.uniform(0, 1, (200, 1))
        from hoiflab.basis import eval_basis
        from hoiflab.data import SplitData

        A = eval_basis(basis, X) @ beta
        fit = fit_series(A, X, basis)
        np.testing.assert_allclose(fit.coef, beta, atol=1e-10)

    def test_constant_dictionary_mean(self):
        from hoiflab.data import SplitData

        rng = np.random.default_rng(6)
        X = rng.uniform(0, 1, (40, 1))
        A = rng.standard_normal(40)
        D = SplitData(A=A, Y=A, X=X)
        pair = fit_nuisance(D, "fourier", k_star=1, variant="cond_variance")
        assert pair.p_hat.coef[0] == pytest.approx(A.mean(), abs=1e-12)
        assert pair.b_hat is pair.p_hat

    def test_training_too_small(self):
        from hoiflab.data import SplitData

        X = np.linspace(0.05, 0.95, 5)[:, None]
        D = SplitData(A=np.ones(5), Y=np.ones(5), X=X)
        with pytest.raises(ConfigError):
            fit_nuisance(D, "fourier", k_star=5, variant="cond_variance")


class TestOracleBias:
    def test_exact_nuisance_all_zero(self):
        p = gen_truth(TruthSpec(s=0.3, J=10, amplitude=0.5))
        basis = make_basis("fourier", k=4, d=1)
        out = oracle_bias(p, p, p, p, basis, exact_gram(basis))
        assert out.bias_k == out.bias_inf == out.tb_k == 0.0

    def test_in_span_gap_has_no_truncation_bias(self):
        basis = make_basis("fourier", k=6, d=1)
        p = SeriesFunction(basis=basis, coef=np.array([0.5, 0.2, 0, 0, 0, 0.0]))
        p_hat = SeriesFunction(basis=basis, coef=np.array([0.5, 0.0, 0, 0, 0, 0.0]))
        out = oracle_bias(p, p_hat, p, p_hat, basis, exact_gram(basis))
        assert out.tb_k == pytest.approx(0.0, abs=1e-12)
        assert out.bias_k == pytest.approx(0.04, abs=1e-12)

    def test_two_cosine_example(self):
        # gap 0.3 sqrt2 cos(2 pi x) + 0.1 sqrt2 cos(4 pi x); k=2 keeps one term
        J = 4
        tb = make_basis("fourier", k=J, d=1)
        p = SeriesFunction(basis=tb, coef=np.array([0.0, 0.3, 0.0, 0.1]))
        p_hat = SeriesFunction(basis=tb, coef=np.zeros(J))
        basis2 = make_basis("fourier", k=2, d=1)
        out = oracle_bias(p, p_hat, p, p_hat, basis2, exact_gram(basis2))
        assert out.bias_k == pytest.approx(0.09, abs=1e-12)
        assert out.bias_inf == pytest.approx(0.10, abs=1e-12)
        assert out.tb_k == pytest.approx(0.01, abs=1e-12)

    def test_quadrature_path_matches_coefficient_path(self):
        spec = TruthSpec(s=0.3, J=30, amplitude=0.6, offset=0.1)
        p = gen_truth(spec)
        p_hat = SeriesFunction(
            basis=make_basis("fourier", k=8, d=1),
            coef=np.array([0.1, 0.2, 0.1, 0, 0, 0.05, 0, 0.0]),
        )
        basis = make_basis("fourier", k=5, d=1)
        gram = exact_gram(basis)
        exact = oracle_bias(p, p_hat, p, p_hat, basis, gram)

        # wrap callables so the coefficient shortcut cannot trigger
        p_fn = lambda X: p(X)
        ph_fn = lambda X: p_hat(X)
        quad = oracle_bias(p_fn, ph_fn, p_fn, ph_fn, basis, gram, quad_points=400)
        assert quad.bias_k == pytest.approx(exact.bias_k, abs=1e-10)
        assert quad.bias_inf == pytest.approx(exact.bias_inf, abs=1e-10)
        assert quad.proj_p_sq == pytest.approx(exact.proj_p_sq, abs=1e-10)

    def test_residual_projection_sign(self):
        # f = Pi[p - p_hat]: positive where the nuisance under-estimates
        basis = make_basis("fourier", k=1, d=1)
        p = SeriesFunction(basis=basis, coef=np.array([0.7]))
        p_hat = SeriesFunction(basis=basis, coef=np.array([0.5]))
        out = oracle_bias(p, p_hat, p, p_hat, basis, exact_gram(basis))
        vals = out.residual_projection_values(np.array([[0.3]]))
        assert vals[0] == pytest.approx(0.2, abs=1e-12)

    def test_power_ratio(self):
        basis = make_basis("fourier", k=2, d=1)
        p = SeriesFunction(basis=basis, coef=np.array([0.0, 0.4]))
        p_hat = SeriesFunction(basis=basis, coef=np.zeros(2))
        out = oracle_bias(p, p_hat, p, p_hat, basis, exact_gram(basis))
        # cond_covariance: bias_k^2/((k/n) proj^2 proj^2) = n/k at equality
        assert out.power_ratio(k=2, n_est=100) == pytest.approx(50.0)
        # cond_variance: proj_p_sq/(k/n) = 0.16 * 50
        assert out.power_ratio(k=2, n_est=100, variant="cond_variance") == pytest.approx(8.0)


def test_oracle_nuisance_injection():
    p = gen_truth(TruthSpec(s=0.3, J=5, amplitude=0.2))
    pair = oracle_nuisance(p, variant="cond_variance")
    assert pair.p_hat is p and pair.b_hat is p
