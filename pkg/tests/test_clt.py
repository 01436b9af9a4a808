"""Centered-statistic layer: raw values, centering, limit mean/covariance."""

import numpy as np
import pytest
from scipy import integrate
from scipy.linalg import expm

from glss.clt import (CltModel, EmpiricalPoolProvider, FixedPointProvider,
                      GeometryError, MatrixError, TestFunction, centering_term,
                      covariance_entry, glss, glss_contour, omega2_entry,
                      omega_mean, standardize, theta, _inverse_sqrt)
from glss.models import (build_ancillary, build_population, replication_rng,
                         sample_covariance, sample_data)
from glss.stieltjes import ContourSpec, DomainError, contour_build, nested_contour_pair

TestFunction.__test__ = False  # library class, not a test case


def _random_instance(rng, n, lowrank=False):
    A = rng.standard_normal((n, n))
    S = A @ A.T / n
    if lowrank:
        k = rng.integers(1, 4)
        V, _ = np.linalg.qr(rng.standard_normal((n, k)))
        anc = build_ancillary("lowrank", n, weights=rng.uniform(0.5, 2.0, k), vectors=V)
    else:
        B = rng.standard_normal((n, n))
        anc = build_ancillary("dense", n, matrix=0.5 * (B + B.T))
    return S, anc


class TestTestFunction:
    def test_from_name_parses_polynomials(self):
        f = TestFunction.from_name("z^2")
        assert f.kind == "polynomial" and f.coefficients == (0.0, 0.0, 1.0)
        assert TestFunction.from_name("x^2").coefficients == f.coefficients
        assert TestFunction.from_name("1").coefficients == (1.0,)
        assert TestFunction.from_name("z").coefficients == (0.0, 1.0)
        g = TestFunction.from_name("poly:1,0,2")
        assert g.coefficients == (1.0, 0.0, 2.0)

    def test_evaluation_matches_direct_formulas(self):
        z = np.array([0.3 + 0.2j, -1.0 + 1.0j, 2.0])
        f = TestFunction.from_name("z^3")
        assert np.allclose(f(z), z**3)
        g = TestFunction.from_name("poly:1,0,2")
        assert np.allclose(g(z), 1 + 2 * z**2)
        assert np.allclose(TestFunction.from_name("exp")(z), np.exp(z))
        assert np.allclose(TestFunction.from_name("log")(z[:2]), np.log(z[:2]))

    def test_log_requires_positive_spectrum(self):
        f = TestFunction.from_name("log")
        assert f.needs_positive_axis
        with pytest.raises(DomainError):
            f.domain_check(np.array([1.0, -0.5]))
        f.domain_check(np.array([0.2, 3.0]))

    def test_invalid_names_rejected(self):
        for bad in ("z^-1", "sin", "q^2"):
            with pytest.raises((DomainError, ValueError)):
                TestFunction.from_name(bad)


class TestGlss:
    def test_diagonal_worked_example(self):
        S = np.diag([1.0, 4.0])
        B = build_ancillary("dense", 2, matrix=np.diag([2.0, 0.0]))
        assert glss(S, B, TestFunction.from_name("x^2")) == pytest.approx(2.0)

    def test_constant_function_gives_trace(self):
        rng = np.random.default_rng(1)
        S, anc = _random_instance(rng, 7)
        val = glss(S, anc, TestFunction.from_name("1"))
        assert val == pytest.approx(np.trace(anc.matrix()), rel=1e-12)

    def test_cubic_matches_matrix_powers(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            S, anc = _random_instance(rng, 6)
            val = glss(S, anc, TestFunction.from_name("x^3"))
            oracle = np.trace(S @ S @ S @ anc.matrix())
            assert val == pytest.approx(oracle, rel=1e-12)

    def test_lowrank_equals_dense_equivalent(self):
        rng = np.random.default_rng(3)
        S, anc = _random_instance(rng, 8, lowrank=True)
        dense = build_ancillary("dense", 8, matrix=anc.matrix())
        for name in ("1", "z", "z^2", "z^3"):
            f = TestFunction.from_name(name)
            assert glss(S, anc, f) == pytest.approx(glss(S, dense, f), rel=1e-11)

    def test_exp_matches_matrix_exponential(self):
        rng = np.random.default_rng(4)
        S, anc = _random_instance(rng, 6)
        val = glss(S, anc, TestFunction.from_name("exp"))
        assert val == pytest.approx(np.trace(expm(S) @ anc.matrix()), rel=1e-10)

    def test_log_rejects_nonpositive_spectrum(self):
        S = np.diag([1.0, -0.2])
        B = build_ancillary("identity", 2)
        with pytest.raises(DomainError):
            glss(S, B, TestFunction.from_name("log"))


class TestGlssContour:
    def test_agrees_with_spectral_evaluation(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            S, anc = _random_instance(rng, 10)
            for name in ("x", "x^2", "x^3"):
                f = TestFunction.from_name(name)
                a, b = glss(S, anc, f), glss_contour(S, anc, f)
                assert b == pytest.approx(a, rel=1e-6)

    def test_constant_function_trace(self):
        rng = np.random.default_rng(6)
        S, anc = _random_instance(rng, 9)
        val = glss_contour(S, anc, TestFunction.from_name("1"))
        assert val == pytest.approx(np.trace(anc.matrix()), abs=1e-8 * 10)

    def test_residue_removal_drops_top_eigenvalue_weight(self):
        S = np.diag([0.5, 1.0, 4.0])
        B = build_ancillary("dense", 3, matrix=np.diag([1.0, 2.0, 3.0]))
        f = TestFunction.from_name("z^2")
        full = glss_contour(S, B, f)
        inner = ContourSpec(x_l=-0.5, x_r=2.0, v0=1.0, nodes_per_edge=512)
        lam, U = np.linalg.eigh(S)
        with pytest.raises(GeometryError):
            glss_contour(S, B, f, contour=inner)
        partial = _contour_value_excluding_top(S, B, f)
        removed = f(4.0) * 3.0  # f(lam_max) times its B-weight (both diagonal)
        assert full - partial == pytest.approx(removed, rel=1e-7)

    def test_eigenvalue_outside_contour_raises(self):
        S = np.diag([0.5, 1.0, 4.0])
        B = build_ancillary("identity", 3)
        bad = ContourSpec(x_l=-0.5, x_r=3.0, v0=1.0, nodes_per_edge=256)
        with pytest.raises(GeometryError):
            glss_contour(S, B, TestFunction.from_name("z"), contour=bad)


def _contour_value_excluding_top(S, B, f):
    """Contour statistic over a rectangle that encloses all but the top eigenvalue."""
    from glss.stieltjes import contour_integrate

    lam, U = np.linalg.eigh(S)
    beta = np.einsum("ij,ik,kj->j", U, B.matrix(), U)
    spec = ContourSpec(x_l=-0.5, x_r=2.5, v0=1.0, nodes_per_edge=512)

    def values(z):
        return f(z) * ((1.0 / (lam[None, :] - z[:, None])) @ beta)

    val = contour_integrate(values, spec, rel_tol=1e-10)
    return (-val / (2j * np.pi)).real


def _mp_integral(f, c):
    """int f dF^{c, delta_1} for c in (0, 1], by smooth-substitution quadrature."""
    d_minus, d_plus = (1 - np.sqrt(c)) ** 2, (1 + np.sqrt(c)) ** 2
    mid, rad = 0.5 * (d_plus + d_minus), 0.5 * (d_plus - d_minus)

    def integrand(t):
        x = mid + rad * np.sin(t)
        dens = np.sqrt((d_plus - x) * (x - d_minus)) / (2 * np.pi * c * x)
        return f(x) * dens * rad * np.cos(t)

    val, err = integrate.quad(integrand, -np.pi / 2, np.pi / 2, epsabs=1e-12)
    return val


class TestCentering:
    def test_identity_population_quadratic_worked_value(self):
        n = N = 30
        pop = build_population("identity", n)
        diag = np.arange(1, n + 1) / n + 1.0
        anc = build_ancillary("diagonal", n, diagonal=diag)
        prov = FixedPointProvider(pop.spectral_measure(), n / N)
        ctr = contour_build(0.0, 4.0)
        val = centering_term(TestFunction.from_name("z^2"), ctr, pop, anc, prov)
        assert val == pytest.approx(2.0 * diag.sum(), rel=1e-10)

    def test_constant_function_gives_trace(self):
        rng = np.random.default_rng(7)
        n, N = 12, 30
        pop = build_population("diag_ramp", n)
        B = rng.standard_normal((n, n))
        anc = build_ancillary("dense", n, matrix=0.5 * (B + B.T))
        prov = FixedPointProvider(pop.spectral_measure(), n / N)
        d = pop.eigenvalues
        ctr = contour_build(d.min() * (1 - np.sqrt(n / N)) ** 2, d.max() * 4)
        val = centering_term(TestFunction.from_name("1"), ctr, pop, anc, prov)
        assert val == pytest.approx(np.trace(anc.matrix()), abs=1e-7)

    def test_identity_weights_match_limit_moments(self):
        n, N = 20, 40
        c = n / N
        pop = build_population("identity", n)
        anc = build_ancillary("identity", n)
        prov = FixedPointProvider(pop.spectral_measure(), c)
        ctr = contour_build((1 - np.sqrt(c)) ** 2, (1 + np.sqrt(c)) ** 2)
        # first limiting moment is 1; second is 1 + c
        val1 = centering_term(TestFunction.from_name("z"), ctr, pop, anc, prov)
        assert val1 == pytest.approx(n * 1.0, rel=1e-8)
        val2 = centering_term(TestFunction.from_name("z^2"), ctr, pop, anc, prov)
        assert val2 == pytest.approx(n * (1 + c), rel=1e-8)
        assert val2 == pytest.approx(n * _mp_integral(lambda x: x**2, c), rel=1e-8)


class TestTheta:
    def test_constant_function_is_identically_zero(self):
        rng = np.random.default_rng(8)
        f1 = TestFunction.from_name("1")
        for _ in range(6):
            n = int(rng.integers(5, 25))
            N = int(rng.integers(n, 3 * n))
            kind = rng.choice(["identity", "ar1", "diag_ramp"])
            pop = build_population(kind, n)
            B = rng.standard_normal((n, n))
            anc = build_ancillary("dense", n, matrix=0.5 * (B + B.T))
            X = sample_data("gaussian", n, N, rng)
            S = sample_covariance(pop, X)
            model = CltModel(pop, anc, N, [f1], dist="gaussian",
                             single_nodes=256, pair_nodes=64)
            assert abs(model.theta_vector(S)[0]) <= 1e-6

    def test_identity_weights_reduce_to_classical_statistic(self):
        n, N = 30, 60
        c = n / N
        pop = build_population("identity", n)
        anc = build_ancillary("identity", n)
        X = sample_data("gaussian", n, N, replication_rng(5, 3))
        S = sample_covariance(pop, X)
        prov = FixedPointProvider(pop.spectral_measure(), c)
        ctr = contour_build((1 - np.sqrt(c)) ** 2, (1 + np.sqrt(c)) ** 2)
        for name in ("z", "z^2", "poly:0,1,2,1"):
            f = TestFunction.from_name(name)
            th = theta(S, anc, f, ctr, pop, prov)
            lam = np.linalg.eigvalsh(S)
            classical = np.sum(f(lam)) - n * _mp_integral(f, c)
            assert th == pytest.approx(classical, abs=1e-6 * max(1, abs(classical)))


class TestOmegaMean:
    def test_zero_weight_matrix_gives_zero(self):
        n, N = 10, 20
        pop = build_population("diag_ramp", n)
        anc = build_ancillary("dense", n, matrix=np.zeros((n, n)))
        prov = FixedPointProvider(pop.spectral_measure(), n / N)
        ctr = contour_build(0.0, 3.0)
        val = omega_mean(TestFunction.from_name("z^2"), ctr, pop, anc, prov,
                         mu_x=1.0, upsilon_x=2.0, N=N)
        assert val == pytest.approx(0.0, abs=1e-12)

    def test_monte_carlo_mean_matches(self):
        n = N = 40
        pop = build_population("identity", n)
        anc = build_ancillary("diagonal", n, diagonal=np.arange(1, n + 1) / n + 1.0)
        model = CltModel(pop, anc, N, ["z^2"], dist="gaussian",
                         single_nodes=256, pair_nodes=96)
        om = model.omega_vector()[0]
        M = 800
        vals = np.empty(M)
        for i in range(M):
            X = sample_data("gaussian", n, N, replication_rng(21, i))
            vals[i] = model.theta_vector(sample_covariance(pop, X))[0]
        se = vals.std() / np.sqrt(M)
        assert abs(vals.mean() - om) <= 3.5 * se

    def test_kurtosis_term_shifts_heavy_tailed_mean(self):
        n = N = 40
        pop = build_population("identity", n)
        anc = build_ancillary("diagonal", n, diagonal=np.arange(1, n + 1) / n + 1.0)
        gauss = CltModel(pop, anc, N, ["z^2"], dist="gaussian", single_nodes=256)
        heavy = CltModel(pop, anc, N, ["z^2"], dist="student_t", single_nodes=256)
        om_g, om_t = gauss.omega_vector()[0], heavy.omega_vector()[0]
        assert om_t != pytest.approx(om_g, rel=1e-3)
        M = 800
        vals = np.empty(M)
        for i in range(M):
            X = sample_data("student_t", n, N, replication_rng(22, i))
            vals[i] = heavy.theta_vector(sample_covariance(pop, X))[0]
        se = vals.std() / np.sqrt(M)
        assert abs(vals.mean() - om_t) <= 3.5 * se
        # the gaussian-limit mean is several errors away from the heavy mean
        assert abs(vals.mean() - om_g) > abs(vals.mean() - om_t)


class TestCovariance:
    def _setting(self):
        n, N = 24, 40
        pop = build_population("ar1", n, rho=0.5)
        rng = np.random.default_rng(9)
        B = rng.standard_normal((n, n))
        anc = build_ancillary("dense", n, matrix=0.5 * (B + B.T))
        prov = FixedPointProvider(pop.spectral_measure(), n / N)
        pair = nested_contour_pair(0.0, pop.eigenvalues.max() * 4,
                                   nodes_per_edge=96)
        return pop, anc, prov, pair, N

    def test_entry_symmetric_in_test_functions(self):
        pop, anc, prov, pair, N = self._setting()
        f2, f3 = TestFunction.from_name("z^2"), TestFunction.from_name("z^3")
        a = covariance_entry(f2, f3, pair[0], pair[1], pop, anc, prov,
                             mu_x=1.0, upsilon_x=2.0, N=N)
        b = covariance_entry(f3, f2, pair[0], pair[1], pop, anc, prov,
                             mu_x=1.0, upsilon_x=2.0, N=N)
        assert a == pytest.approx(b, rel=1e-8)

    def test_entry_quadratic_in_weight_matrix(self):
        pop, anc, prov, pair, N = self._setting()
        double = build_ancillary("dense", pop.n, matrix=2.0 * anc.matrix())
        f2 = TestFunction.from_name("z^2")
        a = covariance_entry(f2, f2, pair[0], pair[1], pop, anc, prov,
                             mu_x=0.5, upsilon_x=2.0, N=N)
        b = covariance_entry(f2, f2, pair[0], pair[1], pop, double, prov,
                             mu_x=0.5, upsilon_x=2.0, N=N)
        assert b == pytest.approx(4.0 * a, rel=1e-10)

    def test_identical_contours_rejected(self):
        pop, anc, prov, pair, N = self._setting()
        f2 = TestFunction.from_name("z^2")
        with pytest.raises(DomainError):
            covariance_entry(f2, f2, pair[0], pair[0], pop, anc, prov,
                             mu_x=0.0, upsilon_x=2.0, N=N)

    def test_rank_one_projection_variance_closed_form(self):
        # B = b b^T with |b| = 1, Sigma = I, f = z: the raw statistic is a
        # chi-square average whose exact variance is (2 + mu_x sum b_i^4)/N.
        n, N = 30, 50
        rng = np.random.default_rng(10)
        b = rng.standard_normal(n)
        b /= np.linalg.norm(b)
        pop = build_population("identity", n)
        anc = build_ancillary("lowrank", n, weights=np.array([1.0]),
                              vectors=b[:, None])
        prov = FixedPointProvider(pop.spectral_measure(), n / N)
        pair = nested_contour_pair(0.0, (1 + np.sqrt(n / N)) ** 2, nodes_per_edge=96)
        f1 = TestFunction.from_name("z")
        for mu_x in (0.0, 1.0):
            entry = omega2_entry(f1, f1, pair[0], pair[1], pop, anc, prov,
                                 mu_x=mu_x, upsilon_x=2.0, k_n=1)
            exact = 2.0 + mu_x * np.sum(b**4)
            assert (1.0 / N) * entry == pytest.approx(exact / N, rel=1e-6)

    def test_whitened_vector_has_unit_monte_carlo_covariance(self):
        n = N = 80
        pop = build_population("identity", n)
        anc = build_ancillary("diagonal", n, diagonal=np.arange(1, n + 1) / n + 1.0)
        model = CltModel(pop, anc, N, ["z^2", "z^3"], dist="gaussian",
                         single_nodes=256, pair_nodes=96)
        M = 1500
        raw = np.empty((M, 2))
        recs = np.empty((M, 2))
        for i in range(M):
            X = sample_data("gaussian", n, N, replication_rng(23, i))
            S = sample_covariance(pop, X)
            raw[i] = model.theta_vector(S)
            recs[i] = model.standardized(S)
        # the raw pair is almost perfectly correlated; whitening removes that
        assert np.corrcoef(raw.T)[0, 1] > 0.9
        emp = np.cov(recs.T)
        assert np.max(np.abs(emp - np.eye(2))) < 0.15


class TestStandardize:
    def test_scalar_case(self):
        out = standardize([3.0], [1.0], [[4.0]])
        assert out[0] == pytest.approx(1.0)

    def test_identity_covariance(self):
        th, om = np.array([2.0, -1.0]), np.array([0.5, 0.5])
        assert np.allclose(standardize(th, om, np.eye(2)), th - om)

    def test_inverse_root_is_actual_inverse_root(self):
        rng = np.random.default_rng(11)
        A = rng.standard_normal((3, 3))
        O = A @ A.T + 3 * np.eye(3)
        W = _inverse_sqrt(O)
        assert np.allclose(W @ O @ W, np.eye(3), atol=1e-12)

    def test_non_spd_rejected(self):
        with pytest.raises(MatrixError):
            standardize([1.0, 2.0], [0.0, 0.0], np.array([[1.0, 0.0], [0.0, -0.5]]))
        with pytest.raises(MatrixError):
            standardize([1.0], [0.0], [[0.0]])


class TestCltModel:
    def test_mode_heuristic(self):
        n, N = 100, 100
        pop = build_population("identity", n)
        V = np.eye(n)[:, :5]
        low = build_ancillary("lowrank", n, weights=np.ones(5), vectors=V)
        dense = build_ancillary("identity", n)
        assert CltModel(pop, low, N, ["z^2"], dist="gaussian").mode == "low_rank"
        assert CltModel(pop, dense, N, ["z^2"], dist="gaussian").mode == "comparable_rank"
        forced = CltModel(pop, low, N, ["z^2"], dist="gaussian", mode="comparable_rank")
        assert forced.mode == "comparable_rank"

    def test_low_rank_mean_is_zero(self):
        n, N = 60, 80
        pop = build_population("identity", n)
        anc = build_ancillary("lowrank", n, weights=np.arange(1, 4.0),
                              vectors=np.eye(n)[:, :3])
        model = CltModel(pop, anc, N, ["z^2", "z^3"], dist="gaussian")
        assert np.all(model.omega_vector() == 0.0)

    def test_report_is_consistent(self):
        n = N = 30
        pop = build_population("identity", n)
        anc = build_ancillary("diagonal", n, diagonal=np.arange(1, n + 1) / n + 1.0)
        model = CltModel(pop, anc, N, ["z^2"], dist="gaussian",
                         single_nodes=256, pair_nodes=64)
        X = sample_data("gaussian", n, N, replication_rng(31, 0))
        S = sample_covariance(pop, X)
        rep = model.report(S)
        assert rep.theta == pytest.approx(rep.raw_glss - rep.centering, rel=1e-12)
        assert rep.standardized == pytest.approx(
            (rep.theta - rep.omega) / np.sqrt(rep.variance), rel=1e-12)
        assert rep.mode == "comparable_rank"
        assert rep.variance > 0
        assert "cov_min_eig" in rep.diagnostics

    def test_empirical_pool_provider_approximates_fixed_point(self):
        n, N = 60, 75
        pop = build_population("ar1", n, rho=0.5)
        exact = FixedPointProvider(pop.spectral_measure(), n / N)
        pooled = EmpiricalPoolProvider(pop, N, "gaussian", seed=17, draws=100)
        again = EmpiricalPoolProvider(pop, N, "gaussian", seed=17, draws=100)
        z = np.array([0.5 + 1.0j, 3.0 + 1.0j, -0.5 + 0.0j, 12.0 + 0.0j])
        a, b = exact(z), pooled(z)
        assert np.max(np.abs(a - b) / np.abs(a)) < 0.02
        assert np.array_equal(pooled(z), again(z))
