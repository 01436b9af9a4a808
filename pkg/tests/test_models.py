"""Population/ancillary builders, sampling, and file round-trips."""

import numpy as np
import pytest

from glss.models import (
    AncillaryMatrix,
    build_ancillary,
    build_population,
    fourth_moment_constants,
    load_lowrank_csv,
    load_matrix_csv,
    replication_rng,
    sample_covariance,
    sample_data,
    save_lowrank_csv,
    save_matrix_csv,
    spiked_alternative,
    wigner_matrix,
)
from glss.stieltjes import DomainError


class TestPopulations:
    def test_identity(self):
        pop = build_population("identity", 5)
        assert pop.is_diagonal
        assert np.allclose(pop.eigenvalues, 1.0)

    def test_ar1_matches_matrix(self):
        pop = build_population("ar1", 6, rho=0.5)
        M = pop.matrix()
        idx = np.arange(6)
        want = 0.5 ** np.abs(idx[:, None] - idx[None, :])
        assert np.allclose(M, want, atol=1e-12)
        assert np.min(pop.eigenvalues) > 0

    def test_diag_ramp(self):
        pop = build_population("diag_ramp", 4, ramp_offset=0.2)
        i = np.arange(1, 5)
        assert np.allclose(pop.eigenvalues, (i / 4.0) ** 2 + 0.2)

    def test_spiked_axis_aligned(self):
        pop = build_population("spiked", 8, spikes=np.array([5.0, 2.0]))
        assert pop.is_diagonal
        assert np.allclose(pop.eigenvalues[:2], [6.0, 3.0])
        assert np.allclose(pop.eigenvalues[2:], 1.0)

    def test_spiked_custom_vectors(self):
        rng = np.random.default_rng(0)
        Q, _ = np.linalg.qr(rng.standard_normal((8, 2)))
        pop = build_population("spiked", 8, spikes=np.array([5.0, 2.0]),
                               spike_vectors=Q)
        M = pop.matrix()
        want = np.eye(8) + 5.0 * np.outer(Q[:, 0], Q[:, 0]) + 2.0 * np.outer(Q[:, 1], Q[:, 1])
        assert np.allclose(M, want, atol=1e-12)

    def test_spiked_requires_positive_decreasing(self):
        with pytest.raises(DomainError):
            build_population("spiked", 8, spikes=np.array([2.0, 5.0]))
        with pytest.raises(DomainError):
            build_population("spiked", 8, spikes=np.array([-1.0]))

    def test_sqrt_apply_equals_matrix_sqrt(self):
        rng = np.random.default_rng(1)
        pop = build_population("ar1", 5, rho=0.4)
        X = rng.standard_normal((5, 3))
        vals, vecs = np.linalg.eigh(pop.matrix())
        root = (vecs * np.sqrt(vals)) @ vecs.T
        assert np.allclose(pop.sqrt_apply(X), root @ X, atol=1e-10)


class TestSpikedAlternative:
    def test_phi_zero_is_identity(self):
        pop = build_population("spiked", 10, spikes=np.array([9.0, 5.0, 2.0]))
        rot = spiked_alternative(pop, 0.0)
        assert np.allclose(rot.matrix(), pop.matrix(), atol=1e-12)

    def test_rotation_preserves_spectrum_and_orthonormality(self):
        pop = build_population("spiked", 10, spikes=np.array([9.0, 5.0, 2.0]))
        rot = spiked_alternative(pop, 0.7)
        assert np.allclose(np.sort(rot.eigenvalues), np.sort(pop.eigenvalues))
        V = rot.eigenvectors
        assert np.allclose(V.T @ V, np.eye(10), atol=1e-12)

    def test_leading_vector_tilts_by_phi(self):
        pop = build_population("spiked", 6, spikes=np.array([4.0]))
        phi = 0.3
        rot = spiked_alternative(pop, phi)
        v = rot.eigenvectors[:, 0]
        overlap = abs(v @ pop.eigenvectors[:, 0]) if not pop.is_diagonal else abs(v[0])
        assert overlap == pytest.approx(np.cos(phi), abs=1e-12)


class TestAncillary:
    def test_diagonal(self):
        anc = build_ancillary("diagonal", 4, diagonal=np.array([1.0, 2.0, 3.0, 4.0]))
        assert not anc.is_lowrank
        assert np.allclose(anc.matrix(), np.diag([1.0, 2.0, 3.0, 4.0]))

    def test_dense_symmetrizes(self):
        M = np.array([[1.0, 2.0], [0.0, 3.0]])
        with pytest.raises(DomainError):
            build_ancillary("dense", 2, matrix=M)

    def test_lowrank(self):
        rng = np.random.default_rng(2)
        Q, _ = np.linalg.qr(rng.standard_normal((6, 2)))
        anc = build_ancillary("lowrank", 6, weights=np.array([2.0, 1.0]), vectors=Q)
        assert anc.is_lowrank and anc.k == 2
        want = 2.0 * np.outer(Q[:, 0], Q[:, 0]) + np.outer(Q[:, 1], Q[:, 1])
        assert np.allclose(anc.matrix(), want)

    def test_identity_kind(self):
        anc = build_ancillary("identity", 3)
        assert np.allclose(anc.matrix(), np.eye(3))


class TestSampling:
    def test_gaussian_moments(self):
        rng = replication_rng(123, 0)
        X = sample_data("gaussian", 50, 4000, rng)
        assert X.shape == (50, 4000)
        assert abs(X.mean()) < 0.01
        assert abs(X.var() - 1.0) < 0.02

    def test_student_t_scaled_to_unit_variance(self):
        rng = replication_rng(123, 1)
        X = sample_data("student_t", 50, 8000, rng)
        assert abs(X.var() - 1.0) < 0.02
        # raw kurtosis of t(10)/sqrt(5/4) is 4, so excess is 1
        m4 = np.mean(X**4)
        assert abs(m4 - 4.0) < 0.25

    def test_fourth_moment_constants(self):
        assert fourth_moment_constants("gaussian") == (0.0, 2.0)
        mu_x, upsilon_x = fourth_moment_constants("student_t")
        assert abs(mu_x - 1.0) < 1e-12 and upsilon_x == 2.0

    def test_replication_rng_streams(self):
        a1 = replication_rng(9, 4).standard_normal(5)
        a2 = replication_rng(9, 4).standard_normal(5)
        b = replication_rng(9, 5).standard_normal(5)
        c = replication_rng(9, 4, stream=1).standard_normal(5)
        assert np.array_equal(a1, a2)
        assert not np.array_equal(a1, b)
        assert not np.array_equal(a1, c)

    def test_sample_covariance(self):
        pop = build_population("ar1", 8, rho=0.5)
        rng = replication_rng(5, 0)
        X = sample_data("gaussian", 8, 2000, rng)
        S = sample_covariance(pop, X)
        assert S.shape == (8, 8)
        assert np.allclose(S, S.T)
        assert np.max(np.abs(S - pop.matrix())) < 0.3

    def test_sample_covariance_rejects_complex(self):
        pop = build_population("identity", 3)
        with pytest.raises(DomainError):
            sample_covariance(pop, np.ones((3, 5), dtype=complex))

    def test_wigner_symmetric(self):
        W = wigner_matrix(20, replication_rng(3, 0))
        assert np.allclose(W, W.T)
        # off-diagonal variance 1/n
        off = W[np.triu_indices(20, 1)]
        assert abs(off.var() * 20 - 1.0) < 0.5


class TestFileRoundTrips:
    def test_matrix_csv(self, tmp_path):
        M = np.array([[1.0, 0.25], [0.25, 2.0]])
        path = tmp_path / "m.csv"
        save_matrix_csv(path, M)
        assert np.array_equal(load_matrix_csv(path), M)

    def test_lowrank_csv(self, tmp_path):
        rng = np.random.default_rng(4)
        Q, _ = np.linalg.qr(rng.standard_normal((5, 2)))
        anc = build_ancillary("lowrank", 5, weights=np.array([2.0, 0.5]), vectors=Q)
        path = tmp_path / "b.csv"
        save_lowrank_csv(path, anc)
        loaded = load_lowrank_csv(path)
        assert loaded.is_lowrank
        assert np.array_equal(loaded.weights, anc.weights)
        assert np.array_equal(loaded.vectors, anc.vectors)

    def test_ancillary_from_loaded_matrix(self, tmp_path):
        M = np.array([[2.0, 0.1], [0.1, 1.0]])
        path = tmp_path / "b.csv"
        save_matrix_csv(path, M)
        anc = build_ancillary("dense", 2, matrix=load_matrix_csv(path))
        assert isinstance(anc, AncillaryMatrix)
        assert np.allclose(anc.matrix(), M)
