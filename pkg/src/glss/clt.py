"""Weighted spectral statistics: raw values, centering, limit mean/covariance.

The raw statistic is tr f(S) B for a sample covariance S and a fixed weight
matrix B.  Subtracting the deterministic centering (a contour integral of the
deterministic-equivalent resolvent) yields the centered statistic theta, which
is asymptotically normal.  This module computes theta, the limit mean omega,
the limit covariance of a vector of test functions (both the comparable-rank
and the low-rank weight regimes), and the standardized vector; ``CltModel``
wires the pieces together with caching so Monte Carlo replications only pay
for per-sample work.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .functionals import (FunctionalWorkspace, covariance_kernel_one,
                          covariance_kernel_two)
from .models import (AncillaryMatrix, CovMatrix, PopulationModel,
                     fourth_moment_constants, replication_rng,
                     sample_covariance, sample_data)
from .stieltjes import (ContourSpec, DomainError, QuadratureError,
                        SpectralMeasure, contour_build, contour_integrate,
                        contour_nodes, empirical_stieltjes,
                        mp_fixed_point_nodes, nested_contour_pair,
                        support_interval)

IMAG_TOL = 1e-6          # realness guard on assembled statistics
EIG_CONTOUR_MARGIN = 1e-6
MIN_COV_EIG = 1e-10      # standardization refuses below this
WARN_COV_EIG = 1e-6      # diagnostics flag below this
LOWRANK_FRACTION = 0.05  # k/n at or below this selects the low-rank regime


class GeometryError(DomainError):
    """Spectrum and contour are incompatible (eigenvalue on or outside)."""


class MatrixError(ValueError):
    """Covariance matrix unusable for standardization (not SPD)."""


def _as_real(value: complex, label: str) -> float:
    value = complex(value)
    if abs(value.imag) > IMAG_TOL * (1.0 + abs(value.real)):
        raise QuadratureError(
            f"{label} kept an imaginary residue {value.imag:.3e} "
            f"(real part {value.real:.3e})")
    return value.real


# -- test functions -----------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """Scalar function applied to the spectrum: polynomial, log, or exp.

    Polynomials carry ascending coefficients; log and exp take no
    parameters.  Instances are callable on real or complex arrays.
    """

    kind: str
    coefficients: tuple = ()
    name: str = ""

    def __post_init__(self):
        if self.kind == "polynomial":
            coef = tuple(float(c) for c in self.coefficients)
            if not coef:
                raise DomainError("polynomial test function needs coefficients")
            object.__setattr__(self, "coefficients", coef)
        elif self.kind not in ("log", "exp"):
            raise DomainError(f"unknown test function kind {self.kind!r}")
        if not self.name:
            object.__setattr__(self, "name", self._default_name())

    def _default_name(self) -> str:
        if self.kind != "polynomial":
            return self.kind
        return "poly:" + ",".join(repr(c) for c in self.coefficients)

    @property
    def degree(self) -> int:
        if self.kind != "polynomial":
            raise DomainError("degree only defined for polynomials")
        return len(self.coefficients) - 1

    @property
    def needs_positive_axis(self) -> bool:
        return self.kind == "log"

    def __call__(self, z):
        if self.kind == "polynomial":
            return np.polynomial.polynomial.polyval(z, self.coefficients)
        if self.kind == "log":
            return np.log(z)
        return np.exp(z)

    def domain_check(self, eigenvalues: np.ndarray) -> None:
        if self.kind == "log" and np.any(np.asarray(eigenvalues) <= 0):
            raise DomainError("log test function needs a positive spectrum")

    @classmethod
    def monomial(cls, power: int) -> "TestFunction":
        coef = (0.0,) * int(power) + (1.0,)
        var = "z" if power != 1 else "z"
        name = "1" if power == 0 else (var if power == 1 else f"{var}^{power}")
        return cls("polynomial", coef, name)

    @classmethod
    def from_name(cls, text: str) -> "TestFunction":
        """Parse "1", "z", "z^3" (or x-forms), "log", "exp", "poly:c0,c1,..."."""
        text = str(text).strip()
        if text in ("log", "exp"):
            return cls(text)
        if text.startswith("poly:"):
            coef = tuple(float(p) for p in text[5:].split(","))
            return cls("polynomial", coef, text)
        body = text.replace("x", "z")
        if body == "1":
            return cls("polynomial", (1.0,), "1")
        if body == "z":
            return cls("polynomial", (0.0, 1.0), "z")
        if body.startswith("z^"):
            power = int(body[2:])
            if power < 0:
                raise DomainError("negative powers are not analytic at 0")
            return cls.monomial(power)
        raise DomainError(f"cannot parse test function {text!r}")


# -- raw statistic ------------------------------------------------------------


def _as_cov_array(S) -> np.ndarray:
    mat = S.matrix if isinstance(S, CovMatrix) else S
    return np.asarray(mat, dtype=float)


def _eigen_weights(B: AncillaryMatrix, U: np.ndarray) -> np.ndarray:
    """beta_j = (U^T B U)_{jj}, the weight of sample eigenvector j."""
    if B.is_lowrank:
        G = B.vectors.T @ U
        return (B.weights[:, None] * G * G).sum(axis=0)
    return np.einsum("ij,ik,kj->j", U, B.dense, U, optimize=True)


def _glss_polynomial(S: np.ndarray, B: AncillaryMatrix,
                     coef: tuple) -> float:
    if B.is_lowrank:
        V, s = B.vectors, B.weights
        total = coef[0] * float(np.sum(s * np.sum(V * V, axis=0)))
        cur = V
        for c_k in coef[1:]:
            cur = S @ cur
            if c_k != 0.0:
                total += c_k * float(np.einsum("ij,ij,j->", V, cur, s))
        return total
    B_mat = B.dense
    total = coef[0] * float(np.trace(B_mat))
    cur = None
    for c_k in coef[1:]:
        cur = S if cur is None else cur @ S
        if c_k != 0.0:
            total += c_k * float(np.sum(cur * B_mat))
    return total


def glss(S, B: AncillaryMatrix, f: TestFunction) -> float:
    """tr f(S) B, evaluated exactly through S's spectral decomposition.

    Polynomials use progressive matrix powers (no eigendecomposition), which
    is algebraically the same value.
    """
    S_mat = _as_cov_array(S)
    if f.kind == "polynomial":
        return _glss_polynomial(S_mat, B, f.coefficients)
    if isinstance(S, CovMatrix):
        lam, U = S.eigenvalues, S.eigenvectors
    else:
        lam, U = np.linalg.eigh(S_mat)
    f.domain_check(lam)
    beta = _eigen_weights(B, U)
    return float(np.sum(np.asarray(f(lam), dtype=float) * beta))


def glss_contour(S, B: AncillaryMatrix, f: TestFunction,
                 contour: ContourSpec | None = None,
                 rel_tol: float = 1e-8) -> float:
    """tr f(S) B as -(1/2 pi i) closed-path integral of f(z) tr((S-zI)^{-1}B)."""
    S_mat = _as_cov_array(S)
    if isinstance(S, CovMatrix):
        lam, U = S.eigenvalues, S.eigenvectors
    else:
        lam, U = np.linalg.eigh(S_mat)
    if contour is None:
        contour = contour_build(float(lam.min()), float(lam.max()),
                                positive_axis=f.needs_positive_axis)
    for ev in lam:
        if not contour.encloses(complex(ev), margin=EIG_CONTOUR_MARGIN):
            raise GeometryError(
                f"eigenvalue {ev:.6g} is not strictly inside the contour")
    beta = _eigen_weights(B, U)

    def values(z):
        diff = lam[None, :] - z[:, None]
        return f(z) * ((1.0 / diff) @ beta)

    total = contour_integrate(values, contour, rel_tol=rel_tol)
    return _as_real(-total / (2j * np.pi), "contour trace statistic")


# -- companion-transform providers --------------------------------------------


class _CachedProvider:
    """Memoizes node-array evaluations (adaptive quadrature repeats them)."""

    def __init__(self):
        self._cache: dict = {}

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        key = (z.size, hash(z.tobytes()))
        hit = self._cache.get(key)
        if hit is None:
            hit = self._compute(z)
            self._cache[key] = hit
        return hit

    def _compute(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class FixedPointProvider(_CachedProvider):
    """Companion transform from the population spectral law (default)."""

    def __init__(self, H: SpectralMeasure, c_n: float):
        super().__init__()
        self.H = H
        self.c_n = float(c_n)

    def _compute(self, z: np.ndarray) -> np.ndarray:
        return mp_fixed_point_nodes(z, self.c_n, self.H)


class EmpiricalProvider(_CachedProvider):
    """Companion transform of one observed spectrum (test-statistic plug-in)."""

    def __init__(self, eigenvalues: np.ndarray, n: int, N: int):
        super().__init__()
        self.eigenvalues = np.asarray(eigenvalues, dtype=float).ravel()
        self.n = int(n)
        self.N = int(N)

    def _compute(self, z: np.ndarray) -> np.ndarray:
        return empirical_stieltjes(self.eigenvalues, self.n, self.N, z)[1]


class EmpiricalPoolProvider(_CachedProvider):
    """Companion transform averaged over independent sample draws.

    Pools the spectra of `draws` independent sample covariances; the average
    of the per-draw empirical transforms equals the pooled empirical
    transform, so one eigenvalue array serves every node.
    """

    def __init__(self, pop: PopulationModel, N: int, dist: str,
                 seed: int, draws: int = 100, stream: int = 1):
        super().__init__()
        pool = []
        for i in range(draws):
            rng = replication_rng(seed, i, stream=stream)
            X = sample_data(dist, pop.n, N, rng)
            pool.append(np.linalg.eigvalsh(sample_covariance(pop, X)))
        self.eigenvalues = np.concatenate(pool)
        self.n = pop.n * draws
        self.N = N * draws

    def _compute(self, z: np.ndarray) -> np.ndarray:
        return empirical_stieltjes(self.eigenvalues, self.n, self.N, z)[1]


# -- centered statistic and limit mean ----------------------------------------


def centering_term(f: TestFunction, contour: ContourSpec,
                   pop: PopulationModel, B: AncillaryMatrix, provider,
                   rel_tol: float = 1e-8,
                   workspace: FunctionalWorkspace | None = None) -> float:
    """(1/2 pi i) closed-path integral of f(z) tr((zI + z m_under(z) Sigma)^{-1} B).

    The sign is fixed so that for B = I the value equals n times the integral
    of f against the limiting sample spectral law.
    """
    ws = workspace if workspace is not None else FunctionalWorkspace(pop, B, pop.n)

    def values(z):
        return f(z) * ws.resolvent_trace(z, provider(z))

    total = contour_integrate(values, contour, rel_tol=rel_tol)
    return _as_real(total / (2j * np.pi), "centering term")


def theta(S, B: AncillaryMatrix, f: TestFunction, contour: ContourSpec,
          pop: PopulationModel, provider, rel_tol: float = 1e-8,
          workspace: FunctionalWorkspace | None = None) -> float:
    """Centered statistic: tr f(S) B minus the deterministic centering."""
    return glss(S, B, f) - centering_term(f, contour, pop, B, provider,
                                          rel_tol=rel_tol, workspace=workspace)


def omega_mean(f: TestFunction, contour: ContourSpec, pop: PopulationModel,
               B: AncillaryMatrix, provider, mu_x: float, upsilon_x: float,
               N: int, rel_tol: float = 1e-8,
               workspace: FunctionalWorkspace | None = None) -> float:
    """Limit mean of theta in the comparable-rank regime."""
    ws = workspace if workspace is not None else FunctionalWorkspace(pop, B, N)

    def values(z):
        return f(z) * ws.mean_integrand(z, provider(z), mu_x, upsilon_x)

    total = contour_integrate(values, contour, rel_tol=rel_tol)
    return _as_real(-total / (2j * np.pi), "limit mean")


# -- limit covariance ----------------------------------------------------------


def _check_separation(z1, mu1, z2, mu2) -> None:
    gap_z = np.min(np.abs(z1[:, None] - z2[None, :]))
    gap_m = np.min(np.abs(mu1[:, None] - mu2[None, :]))
    if gap_z < 1e-10 or gap_m < 1e-10:
        raise DomainError(
            "contour node collision: |z2-z1| or |m_under2-m_under1| below 1e-10")


def _covariance_pass(ws: FunctionalWorkspace, fs, ft, spec1: ContourSpec,
                     spec2: ContourSpec, provider, mu_x: float,
                     upsilon_x: float, lowrank: bool) -> np.ndarray:
    z1, w1 = contour_nodes(spec1)
    z2, w2 = contour_nodes(spec2)
    mu1, mu2 = provider(z1), provider(z2)
    _check_separation(z1, mu1, z2, mu2)
    if lowrank:
        K = ws.lowrank_kernel(z1, mu1, z2, mu2, mu_x, upsilon_x)
    else:
        bundle = ws.pair_grid(z1, mu1, z2, mu2)
        K = (upsilon_x * covariance_kernel_one(bundle)
             + mu_x * covariance_kernel_two(bundle))
    F1 = np.array([w1 * f(z1) for f in fs])
    F2 = np.array([w2 * f(z2) for f in ft])
    return -(F1 @ K @ F2.T) / (4.0 * np.pi**2)


def covariance_block(fs, ft, spec1: ContourSpec, spec2: ContourSpec,
                     pop: PopulationModel, B: AncillaryMatrix, provider,
                     mu_x: float, upsilon_x: float, N: int,
                     lowrank: bool = False, doublings: int = 1,
                     workspace: FunctionalWorkspace | None = None) -> np.ndarray:
    """Matrix of double-contour covariance entries for test-function lists.

    One kernel grid is shared across all (f_s, f_t) pairs; each contour
    doubling applies the matching extrapolation step elementwise.
    """
    ws = workspace if workspace is not None else FunctionalWorkspace(pop, B, N)
    val = _covariance_pass(ws, fs, ft, spec1, spec2, provider,
                           mu_x, upsilon_x, lowrank)
    for _ in range(max(0, int(doublings))):
        spec1 = replace(spec1, nodes_per_edge=2 * spec1.nodes_per_edge)
        spec2 = replace(spec2, nodes_per_edge=2 * spec2.nodes_per_edge)
        val2 = _covariance_pass(ws, fs, ft, spec1, spec2, provider,
                                mu_x, upsilon_x, lowrank)
        val = val2 + (val2 - val) / 3.0
    out = np.empty(val.shape, dtype=float)
    for idx in np.ndindex(val.shape):
        out[idx] = _as_real(val[idx], "covariance entry")
    return out


def covariance_entry(f_s: TestFunction, f_t: TestFunction, spec1: ContourSpec,
                     spec2: ContourSpec, pop: PopulationModel,
                     B: AncillaryMatrix, provider, mu_x: float,
                     upsilon_x: float, N: int, doublings: int = 1,
                     workspace: FunctionalWorkspace | None = None) -> float:
    """One comparable-rank covariance entry."""
    block = covariance_block([f_s], [f_t], spec1, spec2, pop, B, provider,
                             mu_x, upsilon_x, N, lowrank=False,
                             doublings=doublings, workspace=workspace)
    return float(block[0, 0])


def omega2_entry(f_s: TestFunction, f_t: TestFunction, spec1: ContourSpec,
                 spec2: ContourSpec, pop: PopulationModel,
                 B: AncillaryMatrix, provider, mu_x: float, upsilon_x: float,
                 k_n: int, doublings: int = 1,
                 workspace: FunctionalWorkspace | None = None) -> float:
    """One low-rank covariance entry (per-component scale, not yet k/N-scaled)."""
    del k_n  # the entry itself is already per component
    block = covariance_block([f_s], [f_t], spec1, spec2, pop, B, provider,
                             mu_x, upsilon_x, N=1, lowrank=True,
                             doublings=doublings, workspace=workspace)
    return float(block[0, 0])


def standardize(thetas, omegas, omega_mat) -> np.ndarray:
    """Whitened vector: inverse symmetric square root of the covariance
    applied to (theta - omega)."""
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    omegas = np.atleast_1d(np.asarray(omegas, dtype=float))
    inv_root = _inverse_sqrt(omega_mat)
    return inv_root @ (thetas - omegas)


def _inverse_sqrt(omega_mat) -> np.ndarray:
    O = np.atleast_2d(np.asarray(omega_mat, dtype=float))
    if O.shape[0] != O.shape[1]:
        raise MatrixError("covariance matrix must be square")
    if np.max(np.abs(O - O.T)) > 1e-10 * max(1.0, float(np.max(np.abs(O)))):
        raise MatrixError("covariance matrix must be symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (O + O.T))
    if np.min(vals) <= MIN_COV_EIG:
        raise MatrixError(
            f"covariance matrix not positive definite (min eig {vals.min():.3e})")
    return (vecs / np.sqrt(vals)) @ vecs.T


# -- report and orchestration ---------------------------------------------------


@dataclass
class GlssReport:
    """One statistic's full decomposition with quadrature diagnostics."""

    theta: float
    raw_glss: float
    centering: float
    omega: float
    variance: float
    standardized: float
    mode: str
    diagnostics: dict = field(default_factory=dict)


class CltModel:
    """Pipeline for one (population, weight matrix, test-function list).

    Precomputes the contours, companion-transform nodes, centerings, limit
    mean vector, limit covariance, and the whitening matrix; per-sample calls
    then cost one pass of matrix products.
    """

    def __init__(self, pop: PopulationModel, anc: AncillaryMatrix, N: int,
                 fs, *, dist: str | None = None, mu_x: float | None = None,
                 upsilon_x: float | None = None, provider=None,
                 mode: str | None = None, single_nodes: int | None = None,
                 pair_nodes: int | None = None, pair_doublings: int | None = None,
                 rel_tol: float = 1e-8):
        self.pop = pop
        self.anc = anc
        self.N = int(N)
        self.fs = [f if isinstance(f, TestFunction) else TestFunction.from_name(f)
                   for f in (fs if isinstance(fs, (list, tuple)) else [fs])]
        if not self.fs:
            raise DomainError("need at least one test function")
        self.c_n = pop.n / self.N
        if mu_x is None or upsilon_x is None:
            if dist is None:
                raise DomainError("need either dist or explicit (mu_x, upsilon_x)")
            d_mu, d_ups = fourth_moment_constants(dist)
            mu_x = d_mu if mu_x is None else mu_x
            upsilon_x = d_ups if upsilon_x is None else upsilon_x
        self.mu_x = float(mu_x)
        self.upsilon_x = float(upsilon_x)
        self.rel_tol = float(rel_tol)
        self.workspace = FunctionalWorkspace(pop, anc, self.N)
        if mode is None:
            mode = ("low_rank" if anc.k / pop.n <= LOWRANK_FRACTION
                    else "comparable_rank")
        if mode not in ("low_rank", "comparable_rank"):
            raise DomainError(f"unknown mode {mode!r}")
        self.mode = mode
        self.provider = provider if provider is not None else FixedPointProvider(
            pop.spectral_measure(), self.c_n)

        dense = self.workspace.b_kind == "dense"
        if single_nodes is None:
            single_nodes = 128 if dense else 1024
        if pair_nodes is None:
            pair_nodes = 128 if dense else 192
        if pair_doublings is None:
            pair_doublings = 1
        self.pair_doublings = int(pair_doublings)
        positive = any(f.needs_positive_axis for f in self.fs)
        d_minus, d_plus = support_interval(pop.eigenvalues, self.c_n)
        self.contour = contour_build(d_minus, d_plus,
                                     nodes_per_edge=int(single_nodes),
                                     positive_axis=positive)
        self.pair = nested_contour_pair(d_minus, d_plus,
                                        nodes_per_edge=int(pair_nodes),
                                        positive_axis=positive)
        self._centering: dict[int, float] = {}
        self._omega_vec: np.ndarray | None = None
        self._cov: np.ndarray | None = None
        self._inv_root_mat: np.ndarray | None = None

    # individual pieces, cached

    def centering(self, index: int = 0) -> float:
        if index not in self._centering:
            self._centering[index] = centering_term(
                self.fs[index], self.contour, self.pop, self.anc,
                self.provider, rel_tol=self.rel_tol, workspace=self.workspace)
        return self._centering[index]

    def omega_vector(self) -> np.ndarray:
        if self._omega_vec is None:
            if self.mode == "low_rank":
                self._omega_vec = np.zeros(len(self.fs))
            else:
                self._omega_vec = np.array([
                    omega_mean(f, self.contour, self.pop, self.anc,
                               self.provider, self.mu_x, self.upsilon_x,
                               self.N, rel_tol=self.rel_tol,
                               workspace=self.workspace)
                    for f in self.fs])
        return self._omega_vec

    def covariance_matrix(self) -> np.ndarray:
        """Limit covariance of theta; includes the k/N factor in low-rank mode."""
        if self._cov is None:
            block = covariance_block(
                self.fs, self.fs, self.pair[0], self.pair[1], self.pop,
                self.anc, self.provider, self.mu_x, self.upsilon_x, self.N,
                lowrank=(self.mode == "low_rank"),
                doublings=self.pair_doublings, workspace=self.workspace)
            block = 0.5 * (block + block.T)
            if self.mode == "low_rank":
                block = block * (self.anc.k / self.N)
            self._cov = block
        return self._cov

    def _inv_root(self) -> np.ndarray:
        if self._inv_root_mat is None:
            self._inv_root_mat = _inverse_sqrt(self.covariance_matrix())
        return self._inv_root_mat

    # per-sample evaluations

    def theta_vector(self, S) -> np.ndarray:
        return np.array([glss(S, self.anc, f) - self.centering(i)
                         for i, f in enumerate(self.fs)])

    def standardized(self, S) -> np.ndarray:
        return self._inv_root() @ (self.theta_vector(S) - self.omega_vector())

    def report(self, S, index: int = 0) -> GlssReport:
        """Full decomposition for one test function (marginal standardization)."""
        raw = glss(S, self.anc, self.fs[index])
        cent = self.centering(index)
        th = raw - cent
        om = float(self.omega_vector()[index])
        cov = self.covariance_matrix()
        var = float(cov[index, index])
        if var <= MIN_COV_EIG:
            raise MatrixError(f"nonpositive variance {var:.3e}")
        eigs = np.linalg.eigvalsh(cov)
        diag = {
            "mode": self.mode,
            "f": self.fs[index].name,
            "cov_min_eig": float(eigs.min()),
            "cov_warning": bool(eigs.min() < WARN_COV_EIG),
            "contour": (self.contour.x_l, self.contour.x_r, self.contour.v0),
            "nodes_per_edge": self.contour.nodes_per_edge,
        }
        return GlssReport(theta=th, raw_glss=raw, centering=cent, omega=om,
                          variance=var, standardized=(th - om) / np.sqrt(var),
                          mode=self.mode, diagnostics=diag)
