"""Deterministic-equivalent resolvent functionals.

Everything here is algebra in the population eigenbasis.  With population
eigenvalues lam_k, companion transform value mu = m_under(z), and the
diagonal resolvent factors r_k(z) = 1/(1 + mu*lam_k), the mean and
covariance of centered spectral statistics are contour integrals of the
trace moments assembled below.  Two families exist:

* trace moments tr( prod of Sbar(z)^{-p} Sigma^q B ) with
  Sbar(z) = I + m_under(z)*Sigma  (fields p, q, v*, u*, a);
* coordinate-diagonal moments sum_i (M1)_{ii} (M2)_{ii} taken in the
  standard basis (fields dv*, du*, da), which carry the non-Gaussian
  fourth-moment contribution.

All two-point builders return a TwoPointFunctionals whose fields broadcast:
scalars for single evaluations, (K1, K2) grids over contour node pairs for
quadrature.  The spiked/projection variants reproduce the same field layout
from closed-form spike sums so that one covariance assembler serves both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import AncillaryMatrix, PopulationModel
from .stieltjes import DomainError, SpectralMeasure, mp_fixed_point

__all__ = [
    "OnePointFunctionals",
    "TwoPointFunctionals",
    "FunctionalWorkspace",
    "covariance_kernel_one",
    "covariance_kernel_two",
    "SpikedSums",
    "spiked_one_point",
    "spiked_functionals",
    "spiked_mean_integrand",
    "stieltjes_derivative",
    "isotropic_limits",
]


@dataclass(frozen=True)
class OnePointFunctionals:
    """Single-z trace moments and helpers (vectorized over nodes)."""

    z: np.ndarray
    mu: np.ndarray
    p: np.ndarray        # (1/N) tr(Sbar^{-2} Sigma B)
    q: np.ndarray        # (1/N) tr(Sbar^{-3} Sigma^2 B)
    g: np.ndarray        # p / (z^2 (1 - gamma2))
    gamma2: np.ndarray   # (mu^2/N) tr(Sbar^{-2} Sigma^2)
    gamma3: np.ndarray   # (mu/N) tr(Sbar^{-3} Sigma^2)
    b: np.ndarray        # -z * mu


@dataclass(frozen=True)
class TwoPointFunctionals:
    """Pairwise moments; suffix _12 means arguments (z1, z2), _21 swapped."""

    z1: np.ndarray
    z2: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    v1_12: np.ndarray
    v1_21: np.ndarray
    v2_12: np.ndarray
    v2_21: np.ndarray
    v3: np.ndarray
    u1_12: np.ndarray
    u1_21: np.ndarray
    u2: np.ndarray
    a: np.ndarray
    dv1_12: np.ndarray
    dv1_21: np.ndarray
    dv2_12: np.ndarray
    dv2_21: np.ndarray
    dv3: np.ndarray
    du1_12: np.ndarray
    du1_21: np.ndarray
    du2: np.ndarray
    da: np.ndarray

    @property
    def zeta_12(self) -> np.ndarray:
        return self.v1_12 + self.z2**2 * self.mu2**2 * self.g2 * self.u1_12

    @property
    def zeta_21(self) -> np.ndarray:
        return self.v1_21 + self.z1**2 * self.mu1**2 * self.g1 * self.u1_21


def covariance_kernel_one(b: TwoPointFunctionals) -> np.ndarray:
    """Gaussian-part covariance kernel; integrate f(z1) f(z2) against it."""
    dmu = b.mu2 - b.mu1
    dz = b.z2 - b.z1
    zz = b.z1 * b.z2
    w1 = b.z1**2 * b.mu1**2 * b.g1
    w2 = b.z2**2 * b.mu2**2 * b.g2
    t1 = dmu * zz / dz * (b.v3 + w2 * b.v2_21 + w1 * b.v2_12 + w1 * w2 * b.u2)
    t2 = dmu**2 * zz / (b.mu1 * b.mu2 * dz**2) * (
        zz * b.mu1 * b.mu2 * b.zeta_12 * b.zeta_21
        - b.z1 * b.mu1 * b.g1 * b.zeta_12
        - b.z2 * b.mu2 * b.g2 * b.zeta_21
        + b.g1 * b.g2 * b.a)
    return t1 + t2


def covariance_kernel_two(b: TwoPointFunctionals) -> np.ndarray:
    """Fourth-moment covariance kernel (without the kurtosis-excess factor)."""
    w1 = b.z1**2 * b.mu1**2 * b.g1
    w2 = b.z2**2 * b.mu2**2 * b.g2
    return b.z1 * b.z2 * b.mu1 * b.mu2 * (
        b.dv3
        + w2 * b.dv2_21
        + w1 * b.dv2_12
        + w1 * w2 * b.du2
        - b.z1 * b.mu1 * b.g1 * b.dv1_12
        - b.z1 * b.mu1 * w2 * b.g1 * b.du1_12
        - b.z2 * b.mu2 * b.g2 * b.dv1_21
        - b.z2 * b.mu2 * w1 * b.g2 * b.du1_21
        + b.g1 * b.g2 * b.da)


class FunctionalWorkspace:
    """Precomputed spectral data for fast functional evaluation on node grids.

    Handles three ancillary-matrix structures: diagonal in the population
    eigenbasis (detected automatically, covering B a polynomial of Sigma or
    both diagonal), dense non-commuting, and low-rank.
    """

    def __init__(self, pop: PopulationModel, anc: AncillaryMatrix, N: int):
        if anc.n != pop.n:
            raise DomainError("population and ancillary dimensions differ")
        self.pop = pop
        self.anc = anc
        self.N = int(N)
        self.n = pop.n
        self.lam = pop.eigenvalues.astype(float)

        V = pop.eigenvectors
        self.W = None if pop.is_diagonal else (V * V)  # |V_ik|^2, standard x eigen

        self.b_kind = ""
        self.bd = None       # eigenbasis diagonal of B
        self.B_tilde = None  # dense eigenbasis B when non-commuting
        self.b_cols = None   # low-rank eigenbasis columns
        self.s = None        # low-rank weights
        if anc.is_lowrank:
            self.b_kind = "lowrank"
            self.s = anc.weights.astype(float)
            cols = anc.vectors.astype(float)
            self.b_cols = cols if pop.is_diagonal else V.T @ cols
            self.bd = np.sum(self.s * self.b_cols**2, axis=1)
            self.b_std_diag = np.sum(anc.weights * anc.vectors**2, axis=1)
        else:
            B = anc.dense
            Bt = B if pop.is_diagonal else V.T @ B @ V
            off = Bt - np.diag(np.diag(Bt))
            scale = max(1.0, float(np.max(np.abs(Bt))))
            if np.max(np.abs(off)) <= 1e-12 * scale:
                self.b_kind = "commuting"
                self.bd = np.diag(Bt).astype(float).copy()
            else:
                self.b_kind = "dense"
                self.B_tilde = np.asarray(Bt, dtype=float)
                self.bd = np.diag(Bt).astype(float).copy()
            self.b_std_diag = np.diag(B).astype(float).copy()

    # -- node-grid building blocks ------------------------------------------

    def _factors(self, mu: np.ndarray) -> np.ndarray:
        """r[t, k] = 1/(1 + mu_t lam_k)."""
        mu = np.atleast_1d(np.asarray(mu, dtype=complex))
        denom = 1.0 + mu[:, None] * self.lam[None, :]
        if np.any(np.abs(denom) < 1e-13):
            raise DomainError("resolvent pole: 1 + m_under*lambda vanished")
        return 1.0 / denom

    def _delta1(self, R: np.ndarray) -> np.ndarray:
        """(Sbar^{-1} Sigma)_{ii} in the standard basis, one row per node."""
        core = R * self.lam
        return core if self.W is None else core @ self.W.T

    def _delta2(self, R: np.ndarray) -> np.ndarray:
        """(Sbar^{-2} Sigma^2)_{ii} in the standard basis."""
        core = (R * self.lam) ** 2
        return core if self.W is None else core @ self.W.T

    def _delta_b(self, R: np.ndarray) -> np.ndarray:
        """(Sigma^{1/2} Sbar^{-1} B Sbar^{-1} Sigma^{1/2})_{ii} per node row."""
        if self.b_kind == "lowrank":
            out = np.zeros((R.shape[0], self.n), dtype=complex)
            root = np.sqrt(self.lam)
            V = self.pop.eigenvectors
            for s_w, col in zip(self.s, self.b_cols.T):
                core = R * (root * col)       # nodes x eigen
                w = core if V is None else core @ V.T
                out += s_w * w * w
            return out
        if self.W is None:
            # diagonal population: only B's standard diagonal enters
            return (R * self.lam) * R * self.b_std_diag
        if self.b_kind == "commuting":
            core = (R * self.lam) * R * self.bd
            return core @ self.W.T
        # dense non-commuting: one n^2-sized gemm per node
        V = self.pop.eigenvectors
        root = np.sqrt(self.lam)
        E = self.B_tilde * np.outer(root, root)
        out = np.empty((R.shape[0], self.n), dtype=complex)
        for t in range(R.shape[0]):
            M = V @ (E * np.outer(R[t], R[t]))
            out[t] = np.sum(M * V, axis=1)
        return out

    def _v3_grid(self, R1: np.ndarray, R2: np.ndarray,
                 pref: np.ndarray) -> np.ndarray:
        """Grid of (pref) * tr((Sbar1^{-1} Sbar2^{-1} Sigma B)^2)."""
        if self.b_kind == "commuting":
            w = self.lam**2 * self.bd**2
            return pref * ((R1**2 * w) @ (R2**2).T)
        if self.b_kind == "lowrank":
            out = np.zeros((R1.shape[0], R2.shape[0]), dtype=complex)
            cols, s, lam = self.b_cols, self.s, self.lam
            k = s.size
            for ia in range(k):
                for ib in range(k):
                    w = cols[:, ia] * cols[:, ib] * lam
                    G = (R1 * w) @ R2.T
                    out += s[ia] * s[ib] * G * G
            return pref * out
        # dense: loop over z2 nodes, one gemm each
        K = self.B_tilde * self.B_tilde
        P1 = R1 * self.lam
        out = np.empty((R1.shape[0], R2.shape[0]), dtype=complex)
        for j in range(R2.shape[0]):
            M = K * np.outer(R2[j], R2[j])
            out[:, j] = np.sum((P1 @ M) * P1, axis=1)
        return pref * out

    # -- public evaluations ---------------------------------------------------

    def one_point(self, z, mu) -> OnePointFunctionals:
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        mu = np.atleast_1d(np.asarray(mu, dtype=complex))
        R = self._factors(mu)
        lam, bd, N = self.lam, self.bd, self.N
        p = (R**2 * (lam * bd)).sum(axis=1) / N
        q = (R**3 * (lam**2 * bd)).sum(axis=1) / N
        gamma2 = mu**2 * (R**2 * lam**2).sum(axis=1) / N
        gamma3 = mu * (R**3 * lam**2).sum(axis=1) / N
        g = p / (z**2 * (1.0 - gamma2))
        return OnePointFunctionals(z=z, mu=mu, p=p, q=q, g=g,
                                   gamma2=gamma2, gamma3=gamma3, b=-z * mu)

    def pair_grid(self, z1, mu1, z2, mu2) -> TwoPointFunctionals:
        """All two-point moments on the (z1 x z2) node grid."""
        z1 = np.atleast_1d(np.asarray(z1, dtype=complex))
        z2 = np.atleast_1d(np.asarray(z2, dtype=complex))
        mu1 = np.atleast_1d(np.asarray(mu1, dtype=complex))
        mu2 = np.atleast_1d(np.asarray(mu2, dtype=complex))
        lam, bd, N = self.lam, self.bd, self.N
        R1, R2 = self._factors(mu1), self._factors(mu2)
        Z1, Z2 = z1[:, None], z2[None, :]
        M1, M2 = mu1[:, None], mu2[None, :]

        pref_a = 1.0 / (Z1 * Z2**2 * N)
        pref_b = 1.0 / (Z2 * Z1**2 * N)
        pref_c = 1.0 / (Z1**2 * Z2**2 * N)

        v1_12 = pref_a * (R1 @ (R2**2 * (lam**2 * bd)).T)
        v1_21 = pref_b * ((R1**2 * (lam**2 * bd)) @ R2.T)
        v2_core = (R1**2 * (lam**3 * bd)) @ (R2**2).T
        v2_12 = pref_c * v2_core
        v2_21 = pref_c * v2_core
        u1_12 = pref_a * ((R1 * lam**3) @ (R2**2).T)
        u1_21 = pref_b * ((R1**2 * lam**3) @ R2.T)
        u2 = pref_c * ((R1**2 * lam**4) @ (R2**2).T)
        a = (M1 * M2 / N) * ((R1 * lam**2) @ R2.T)
        v3 = self._v3_grid(R1, R2, pref_c)

        d1_1, d1_2 = self._delta1(R1), self._delta1(R2)
        d2_1, d2_2 = self._delta2(R1), self._delta2(R2)
        db_1, db_2 = self._delta_b(R1), self._delta_b(R2)
        dv1_12 = pref_a * (d1_1 @ db_2.T)
        dv1_21 = pref_b * (db_1 @ d1_2.T)
        dv2_12 = pref_c * (d2_1 @ db_2.T)
        dv2_21 = pref_c * (db_1 @ d2_2.T)
        dv3 = pref_c * (db_1 @ db_2.T)
        du1_12 = pref_a * (d1_1 @ d2_2.T)
        du1_21 = pref_b * (d2_1 @ d1_2.T)
        du2 = pref_c * (d2_1 @ d2_2.T)
        da = (M1 * M2 / N) * (d1_1 @ d1_2.T)

        g1 = self.one_point(z1, mu1).g[:, None]
        g2 = self.one_point(z2, mu2).g[None, :]
        return TwoPointFunctionals(
            z1=Z1, z2=Z2, mu1=M1, mu2=M2, g1=g1, g2=g2,
            v1_12=v1_12, v1_21=v1_21, v2_12=v2_12, v2_21=v2_21, v3=v3,
            u1_12=u1_12, u1_21=u1_21, u2=u2, a=a,
            dv1_12=dv1_12, dv1_21=dv1_21, dv2_12=dv2_12, dv2_21=dv2_21,
            dv3=dv3, du1_12=du1_12, du1_21=du1_21, du2=du2, da=da)

    def pair(self, z1, mu1, z2, mu2) -> TwoPointFunctionals:
        """Scalar two-point evaluation (1x1 grids squeezed to 0-d)."""
        g = self.pair_grid([z1], [mu1], [z2], [mu2])
        squeeze = {k: np.asarray(v).reshape(()) for k, v in vars(g).items()}
        return TwoPointFunctionals(**squeeze)

    def mean_integrand(self, z, mu, mu_x: float, upsilon_x: float) -> np.ndarray:
        """Mean-correction integrand; take -(1/2 pi i) contour integral of f * this."""
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        mu = np.atleast_1d(np.asarray(mu, dtype=complex))
        one = self.one_point(z, mu)
        R = self._factors(mu)
        d1, d2, db = self._delta1(R), self._delta2(R), self._delta_b(R)
        N = self.N
        u1_zz = (d1 * d2).sum(axis=1) / (z**3 * N)
        v1_zz = (d1 * db).sum(axis=1) / (z**3 * N)
        denom = 1.0 - one.gamma2
        if np.any(np.abs(denom) < 1e-10):
            raise DomainError("mean integrand singular: bulk denominator vanished")
        first = (upsilon_x - 1.0) * mu**2 / (z * denom) * (
            one.p * one.gamma3 / denom - one.q)
        second = mu_x * z**2 * mu**2 * (mu * one.p * u1_zz / denom - v1_zz)
        return first + second

    def lowrank_pair_grid(self, z1, mu1, z2, mu2) -> tuple[np.ndarray, np.ndarray]:
        """(h1, h2) grids for the low-rank ancillary covariance kernel.

        h1 = (1/k) tr((B Sbar1^{-1} Sigma Sbar2^{-1})^2);
        h2 = mu1 mu2/(k z1 z2) * sum_i over both delta_b diagonals.
        """
        if self.b_kind != "lowrank":
            raise DomainError("low-rank kernel requires a low-rank ancillary matrix")
        z1 = np.atleast_1d(np.asarray(z1, dtype=complex))
        z2 = np.atleast_1d(np.asarray(z2, dtype=complex))
        mu1 = np.atleast_1d(np.asarray(mu1, dtype=complex))
        mu2 = np.atleast_1d(np.asarray(mu2, dtype=complex))
        R1, R2 = self._factors(mu1), self._factors(mu2)
        s, cols, lam = self.s, self.b_cols, self.lam
        k = s.size
        h1 = np.zeros((z1.size, z2.size), dtype=complex)
        for ia in range(k):
            for ib in range(k):
                w = cols[:, ia] * cols[:, ib] * lam
                G = (R1 * w) @ R2.T
                h1 += s[ia] * s[ib] * G * G
        h1 /= k
        db_1, db_2 = self._delta_b(R1), self._delta_b(R2)
        Z1, Z2 = z1[:, None], z2[None, :]
        h2 = (mu1[:, None] * mu2[None, :] / (k * Z1 * Z2)) * (db_1 @ db_2.T)
        return h1, h2

    def lowrank_kernel(self, z1, mu1, z2, mu2, mu_x: float,
                       upsilon_x: float) -> np.ndarray:
        """Covariance kernel grid for the low-rank regime."""
        h1, h2 = self.lowrank_pair_grid(z1, mu1, z2, mu2)
        z1 = np.atleast_1d(np.asarray(z1, dtype=complex))[:, None]
        z2 = np.atleast_1d(np.asarray(z2, dtype=complex))[None, :]
        mu1 = np.atleast_1d(np.asarray(mu1, dtype=complex))[:, None]
        mu2 = np.atleast_1d(np.asarray(mu2, dtype=complex))[None, :]
        return (upsilon_x * (mu2 - mu1) * h1 / (z1 * z2 * (z2 - z1))
                + mu_x * h2)

    def resolvent_trace(self, z, mu) -> np.ndarray:
        """tr((z I + z mu Sigma)^{-1} B), the deterministic centering integrand."""
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        R = self._factors(np.atleast_1d(np.asarray(mu, dtype=complex)))
        return (R @ self.bd) / z


# -- spiked / projection closed forms ---------------------------------------


def _gfun(d: np.ndarray, mu: np.ndarray, kind: int) -> np.ndarray:
    """Spike resolvent factors as (nodes, spikes) tables.

    kind 1: (1+d)/(1+(1+d)mu),  kind 2: (1+d)/(1+(1+d)mu)^2,
    kind 3: (1+d)^2/(1+(1+d)mu)^2,  kind 4: (1+d)^2/(1+(1+d)mu)^3.
    """
    dd = 1.0 + np.asarray(d, dtype=float).ravel()
    base = 1.0 + dd * np.atleast_1d(np.asarray(mu, dtype=complex))[:, None]
    if kind == 1:
        return dd / base
    if kind == 2:
        return dd / base**2
    if kind == 3:
        return dd**2 / base**2
    if kind == 4:
        return dd**2 / base**3
    raise DomainError("unknown spike factor kind")


@dataclass(frozen=True)
class SpikedSums:
    """z-independent coordinate sums feeding the projection-test formulas.

    With P = I - Z0 the complement of the hypothesized eigenprojection and
    v_i the retained spike directions: s0 = sum_k P_{kk}^2,
    s1[i] = sum_k v_{ik}^2 P_{kk}, s2[i,j] = sum_k v_{ik}^2 v_{jk}^2.
    """

    s0: float
    s1: np.ndarray
    s2: np.ndarray

    @classmethod
    def from_projection(cls, basis: np.ndarray,
                        kept: np.ndarray | None = None) -> "SpikedSums":
        """basis: n x r orthonormal columns spanning the hypothesized space.

        The complement diagonal always uses the full basis; the spike sums
        use only the `kept` columns (spikes with positive strength
        estimates), because a dropped spike leaves the formulas through its
        zero strength while the projection stays fixed.
        """
        basis = np.atleast_2d(np.asarray(basis, dtype=float))
        v2_full = basis * basis
        p_diag = 1.0 - v2_full.sum(axis=1)
        v2 = v2_full if kept is None else v2_full[:, kept]
        return cls(s0=float(np.sum(p_diag**2)),
                   s1=v2.T @ p_diag,
                   s2=v2.T @ v2)


def spiked_one_point(z, mu, n: int, N: int, r_n: int, d: np.ndarray):
    """(p, q, g, beta) for the projection statistic's effective weight matrix.

    The weight matrix is (I - Z0) - beta(z) I with
    beta(z) = (n - r_n)/(z N (1 + mu)^2).
    """
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    mu = np.atleast_1d(np.asarray(mu, dtype=complex))
    d = np.asarray(d, dtype=float).ravel()
    nr = n - r_n
    one = 1.0 + mu
    beta = nr / (z * N * one**2)
    g2 = _gfun(d, mu, 2)
    g3 = _gfun(d, mu, 3)
    g4 = _gfun(d, mu, 4)
    p = nr / (N * one**2) * (1.0 - beta) - nr / (z * N**2 * one**2) * g2.sum(axis=-1)
    q = nr / (N * one**3) * (1.0 - beta) - nr / (z * N**2 * one**2) * g4.sum(axis=-1)
    gden = 1.0 - mu**2 * nr / (N * one**2) - mu**2 / N * g3.sum(axis=-1)
    if np.any(np.abs(gden) < 1e-10):
        raise DomainError("spiked resolvent denominator vanished on the contour")
    g = p / (z**2 * gden)
    return p, q, g, beta


def spiked_functionals(z1, mu1, z2, mu2, n: int, N: int, r_n: int,
                       d: np.ndarray, sums: SpikedSums) -> TwoPointFunctionals:
    """Two-point moments of the projection test on a node-pair grid.

    Closed forms for the spiked population Sigma = I + sum_i d_i v_i v_i^T
    and the z-dependent weight matrix (I - Z0) - beta(z) I; they agree with
    the general trace formulas evaluated at that weight matrix.
    """
    z1 = np.atleast_1d(np.asarray(z1, dtype=complex))
    z2 = np.atleast_1d(np.asarray(z2, dtype=complex))
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=complex))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=complex))
    d = np.asarray(d, dtype=float).ravel()
    dd = 1.0 + d
    nr = n - r_n

    Z1, Z2 = z1[:, None], z2[None, :]
    M1, M2 = mu1[:, None], mu2[None, :]
    one1, one2 = 1.0 + M1, 1.0 + M2
    beta1 = nr / (Z1 * N * one1**2)
    beta2 = nr / (Z2 * N * one2**2)

    base1 = 1.0 + dd * mu1[:, None]    # (K1, r)
    base2 = 1.0 + dd * mu2[:, None]    # (K2, r)
    g1_1, g2_1, g3_1 = (_gfun(d, mu1, k) for k in (1, 2, 3))
    g1_2, g2_2, g3_2 = (_gfun(d, mu2, k) for k in (1, 2, 3))

    def cross(t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
        """Sum over spikes of t1[., i] t2[., i] as a (K1, K2) grid."""
        return t1 @ t2.T

    pref_a = 1.0 / (Z1 * Z2**2 * N)
    pref_b = 1.0 / (Z2 * Z1**2 * N)
    pref_c = 1.0 / (Z1**2 * Z2**2 * N)

    v1_12 = pref_a * (nr * (1.0 - beta2) / (one1 * one2**2)
                      - beta2 * cross(1.0 / base1, dd**2 / base2**2))
    v1_21 = pref_b * (nr * (1.0 - beta1) / (one2 * one1**2)
                      - beta1 * cross(dd**2 / base1**2, 1.0 / base2))
    spike_v2 = cross(1.0 / base1**2, dd**3 / base2**2)
    v2_12 = pref_c * (nr * (1.0 - beta2) / (one1**2 * one2**2) - beta2 * spike_v2)
    v2_21 = pref_c * (nr * (1.0 - beta1) / (one1**2 * one2**2) - beta1 * spike_v2)
    u1_12 = pref_a * (nr / (one1 * one2**2)
                      + cross(1.0 / base1, dd**3 / base2**2))
    u1_21 = pref_b * (nr / (one1**2 * one2)
                      + cross(dd**3 / base1**2, 1.0 / base2))
    u2 = pref_c * (nr / (one1**2 * one2**2)
                   + cross(dd**2 / base1**2, dd**2 / base2**2))
    v3 = pref_c * (nr * (1.0 - beta1) * (1.0 - beta2) / (one1**2 * one2**2)
                   + beta1 * beta2 * cross(dd**2 / base1**2, 1.0 / base2**2))
    a = 1.0 + M1 * M2 * (Z1 - Z2) / (M2 - M1)

    s0, s1, s2 = sums.s0, sums.s1, sums.s2

    def quad(t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
        """sum_{i,j} t1[., i] s2[i, j] t2[., j] as a (K1, K2) grid."""
        return t1 @ s2 @ t2.T

    def lin1(table: np.ndarray) -> np.ndarray:
        return (table @ s1)[:, None]

    def lin2(table: np.ndarray) -> np.ndarray:
        return (table @ s1)[None, :]

    dv1_12 = pref_a * ((1.0 - beta2) / (one1 * one2**2) * s0
                       + (1.0 - beta2) / one2**2 * lin1(g1_1)
                       - beta2 / one1 * lin2(g2_2)
                       - beta2 * quad(g1_1, g2_2))
    dv1_21 = pref_b * ((1.0 - beta1) / (one2 * one1**2) * s0
                       + (1.0 - beta1) / one1**2 * lin2(g1_2)
                       - beta1 / one2 * lin1(g2_1)
                       - beta1 * quad(g2_1, g1_2))
    dv2_12 = pref_c * ((1.0 - beta2) / (one1**2 * one2**2) * s0
                       + (1.0 - beta2) / one2**2 * lin1(g3_1)
                       - beta2 / one1**2 * lin2(g2_2)
                       - beta2 * quad(g3_1, g2_2))
    dv2_21 = pref_c * ((1.0 - beta1) / (one1**2 * one2**2) * s0
                       + (1.0 - beta1) / one1**2 * lin2(g3_2)
                       - beta1 / one2**2 * lin1(g2_1)
                       - beta1 * quad(g2_1, g3_2))
    dv3 = pref_c * ((1.0 - beta1) * (1.0 - beta2) / (one1**2 * one2**2) * s0
                    - (1.0 - beta1) * beta2 / one1**2 * lin2(g2_2)
                    - (1.0 - beta2) * beta1 / one2**2 * lin1(g2_1)
                    + beta1 * beta2 * quad(g2_1, g2_2))
    du1_12 = pref_a * (s0 / (one1 * one2**2)
                       + lin1(g1_1) / one2**2
                       + lin2(g3_2) / one1
                       + quad(g1_1, g3_2))
    du1_21 = pref_b * (s0 / (one1**2 * one2)
                       + lin2(g1_2) / one1**2
                       + lin1(g3_1) / one2
                       + quad(g3_1, g1_2))
    du2 = pref_c * (s0 / (one1**2 * one2**2)
                    + lin1(g3_1) / one2**2
                    + lin2(g3_2) / one1**2
                    + quad(g3_1, g3_2))
    da = (M1 * M2 / N) * (s0 / (one1 * one2)
                          + lin1(g1_1) / one2
                          + lin2(g1_2) / one1
                          + quad(g1_1, g1_2))

    _, _, gg1, _ = spiked_one_point(z1, mu1, n, N, r_n, d)
    _, _, gg2, _ = spiked_one_point(z2, mu2, n, N, r_n, d)

    return TwoPointFunctionals(
        z1=Z1, z2=Z2, mu1=M1, mu2=M2, g1=gg1[:, None], g2=gg2[None, :],
        v1_12=v1_12, v1_21=v1_21, v2_12=v2_12, v2_21=v2_21, v3=v3,
        u1_12=u1_12, u1_21=u1_21, u2=u2, a=a,
        dv1_12=dv1_12, dv1_21=dv1_21, dv2_12=dv2_12, dv2_21=dv2_21,
        dv3=dv3, du1_12=du1_12, du1_21=du1_21, du2=du2, da=da)


def spiked_mean_integrand(z, mu, n: int, N: int, r_n: int, d: np.ndarray,
                          sums: SpikedSums, mu_x: float) -> np.ndarray:
    """Mean-correction integrand of the projection statistic (real data).

    The bulk correction factors use the full dimension n, the spike-free
    approximation of the correction integrals for a spiked population.
    """
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    mu = np.atleast_1d(np.asarray(mu, dtype=complex))
    d = np.asarray(d, dtype=float).ravel()
    p, q, _, beta = spiked_one_point(z, mu, n, N, r_n, d)
    one = 1.0 + mu
    gamma2 = n * mu**2 / (N * one**2)
    gamma3 = n * mu / (N * one**3)

    g1t, g2t, g3t = (_gfun(d, mu, k) for k in (1, 2, 3))
    s0, s1, s2 = sums.s0, sums.s1, sums.s2
    pref = 1.0 / (z**3 * N)
    # (z, z) diagonal values of the coordinate-product moments
    u1_zz = pref * (s0 / one**3
                    + (g1t @ s1) / one**2
                    + (g3t @ s1) / one
                    + np.einsum("ik,kl,il->i", g1t, s2, g3t))
    v1_zz = pref * ((1.0 - beta) * s0 / one**3
                    + (1.0 - beta) / one**2 * (g1t @ s1)
                    - beta / one * (g2t @ s1)
                    - beta * np.einsum("ik,kl,il->i", g1t, s2, g2t))
    denom = 1.0 - gamma2
    if np.any(np.abs(denom) < 1e-10):
        raise DomainError("spiked mean integrand singular: bulk denominator vanished")
    first = mu**2 / (z * denom) * (p * gamma3 / denom - q)
    second = mu_x * z**2 * mu**2 * (mu * p * u1_zz / denom - v1_zz)
    return first + second


# -- closed-form limits (isotropic checks) -----------------------------------


def stieltjes_derivative(z: complex, c: float, H: SpectralMeasure,
                         step_scale: float = 1e-5) -> complex:
    """d m_under / dz by central finite difference, step 1e-5*(1+|z|)."""
    h = step_scale * (1.0 + abs(z))
    up = mp_fixed_point(z + h, c, H).m_under
    dn = mp_fixed_point(z - h, c, H).m_under
    return (up - dn) / (2.0 * h)


def isotropic_limits(z1: complex, z2: complex, mu1: complex, mu2: complex,
                     dmu1: complex, dmu2: complex) -> dict:
    """Large-n limits of the trace moments for identity weight matrix.

    Everything is expressed through the companion transform mu(z) and its
    derivative.  u1/u2 hold for any population spectrum with B = I; p/g are
    single-point values returned at z1 and z2.  For diagonal weight
    matrices, p/v1/v2 scale by the mean of B's diagonal and v3 by the mean
    of its square.
    """
    dmu = mu1 - mu2
    return {
        "p1": (mu1 + z1 * dmu1) / dmu1,
        "p2": (mu2 + z2 * dmu2) / dmu2,
        "g1": (mu1 + z1 * dmu1) / (z1**2 * mu1**2),
        "g2": (mu2 + z2 * dmu2) / (z2**2 * mu2**2),
        "u1": (1.0 / (z1 * z2**2)) * ((z1 - z2) / dmu**2
                                      - 1.0 / (dmu2 * dmu)
                                      + 1.0 / (mu2**2 * mu1)),
        "u2": (1.0 / (z1**2 * z2**2)) * (2.0 * (z1 - z2) / dmu**3
                                         - (1.0 / dmu1 + 1.0 / dmu2) / dmu**2
                                         + 1.0 / (mu1**2 * mu2**2)),
        "v1": (1.0 / (z1 * z2**2)) * (mu1 * (z2 - z1) / dmu**2
                                      + mu2 / (dmu2 * dmu)),
        "v2": (1.0 / (z1**2 * z2**2)) * ((z2 - z1) * (mu1 + mu2) / dmu**3
                                         + (mu1 / dmu1 + mu2 / dmu2) / dmu**2),
        "v3": (1.0 / (z1**2 * z2**2)) * (2.0 * (z1 - z2) * mu1 * mu2 / dmu**3
                                         - (mu1**2 / dmu1 + mu2**2 / dmu2) / dmu**2),
    }
