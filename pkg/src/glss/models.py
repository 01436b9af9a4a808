"""Population / ancillary / data models and seeded sampling.

Sample covariance matrices are S = (1/N) * Sigma^{1/2} X X^T Sigma^{1/2}
with X an n x N real matrix of i.i.d. standardized entries.  Statistics of
the form tr f(S) B are weighted against an ancillary matrix B, given either
dense symmetric or in low-rank form sum_i s_i b_i b_i^T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stieltjes import DomainError, SpectralMeasure

__all__ = [
    "PopulationModel",
    "AncillaryMatrix",
    "CovMatrix",
    "build_population",
    "build_ancillary",
    "spiked_alternative",
    "wigner_matrix",
    "replication_rng",
    "sample_data",
    "sample_covariance",
    "fourth_moment_constants",
    "save_matrix_csv",
    "load_matrix_csv",
    "save_lowrank_csv",
    "load_lowrank_csv",
]

SYMMETRY_TOL = 1e-10
DISTRIBUTIONS = ("gaussian", "student_t")
T_DOF = 10
T_SCALE = float(np.sqrt(T_DOF / (T_DOF - 2.0)))  # divisor restoring unit variance


@dataclass(frozen=True)
class PopulationModel:
    """Population covariance in spectral form Sigma = V diag(lam) V^T.

    eigenvectors=None means the standard basis (diagonal Sigma), which lets
    the heavy paths skip rotations.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray | None = None
    spikes: np.ndarray | None = None  # descending spike strengths d_i, if spiked

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float).ravel()
        if lam.size == 0 or np.any(lam <= 0):
            raise DomainError("population eigenvalues must be positive")
        object.__setattr__(self, "eigenvalues", lam)
        if self.eigenvectors is not None:
            V = np.asarray(self.eigenvectors, dtype=float)
            if V.shape != (lam.size, lam.size):
                raise DomainError("eigenvector matrix shape mismatch")
            object.__setattr__(self, "eigenvectors", V)
        if self.spikes is not None:
            object.__setattr__(self, "spikes", np.asarray(self.spikes, dtype=float).ravel())

    @property
    def n(self) -> int:
        return self.eigenvalues.size

    @property
    def is_diagonal(self) -> bool:
        return self.eigenvectors is None

    def matrix(self) -> np.ndarray:
        if self.is_diagonal:
            return np.diag(self.eigenvalues)
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T

    def sqrt_apply(self, X: np.ndarray) -> np.ndarray:
        """Sigma^{1/2} @ X without forming Sigma^{1/2} when diagonal."""
        root = np.sqrt(self.eigenvalues)
        if self.is_diagonal:
            return root[:, None] * X
        return self.eigenvectors @ (root[:, None] * (self.eigenvectors.T @ X))

    def spectral_measure(self) -> SpectralMeasure:
        return SpectralMeasure.from_eigenvalues(self.eigenvalues)


@dataclass(frozen=True)
class AncillaryMatrix:
    """Weight matrix B, dense symmetric or low-rank sum_i s_i b_i b_i^T."""

    dense: np.ndarray | None = None
    weights: np.ndarray | None = None
    vectors: np.ndarray | None = None  # columns b_i

    def __post_init__(self):
        if self.dense is not None:
            B = np.asarray(self.dense, dtype=float)
            if B.ndim != 2 or B.shape[0] != B.shape[1]:
                raise DomainError("ancillary matrix must be square")
            scale = max(1.0, float(np.max(np.abs(B))))
            if np.max(np.abs(B - B.T)) > SYMMETRY_TOL * scale:
                raise DomainError("ancillary matrix must be symmetric")
            object.__setattr__(self, "dense", 0.5 * (B + B.T))
        else:
            if self.weights is None or self.vectors is None:
                raise DomainError("low-rank ancillary matrix needs weights and vectors")
            s = np.asarray(self.weights, dtype=float).ravel()
            V = np.asarray(self.vectors, dtype=float)
            if V.ndim != 2 or V.shape[1] != s.size or s.size == 0:
                raise DomainError("low-rank vectors must be columns matching the weights")
            object.__setattr__(self, "weights", s)
            object.__setattr__(self, "vectors", V)

    @property
    def is_lowrank(self) -> bool:
        return self.dense is None

    @property
    def n(self) -> int:
        return self.vectors.shape[0] if self.is_lowrank else self.dense.shape[0]

    @property
    def k(self) -> int:
        """Number of low-rank components (n for dense)."""
        return self.weights.size if self.is_lowrank else self.n

    def matrix(self) -> np.ndarray:
        if self.is_lowrank:
            return (self.vectors * self.weights) @ self.vectors.T
        return self.dense


@dataclass(frozen=True)
class CovMatrix:
    """Sample covariance with its eigendecomposition cached eagerly."""

    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    n: int
    N: int

    @classmethod
    def from_matrix(cls, S: np.ndarray, N: int) -> "CovMatrix":
        S = np.asarray(S, dtype=float)
        lam, U = np.linalg.eigh(S)
        return cls(matrix=S, eigenvalues=lam, eigenvectors=U, n=S.shape[0], N=int(N))

    @property
    def aspect(self) -> float:
        return self.n / self.N


def build_population(kind: str, n: int, *, rho: float = 0.5,
                     ramp_offset: float = 0.2, spikes=None, spike_vectors=None,
                     matrix=None) -> PopulationModel:
    """Construct a population covariance model.

    kinds: "identity"; "ar1" with (i,j) entry rho^|i-j|; "diag_ramp" with
    diagonal (i/n)^2 + ramp_offset; "spiked" = identity plus spike strengths
    d_i on orthonormal directions (default: leading coordinate axes);
    "custom" from an explicit symmetric positive definite matrix.
    """
    if kind == "identity":
        return PopulationModel(np.ones(n))
    if kind == "ar1":
        if not 0 <= rho < 1:
            raise DomainError("ar1 correlation must lie in [0, 1)")
        idx = np.arange(n)
        sigma = rho ** np.abs(idx[:, None] - idx[None, :])
        lam, V = np.linalg.eigh(sigma)
        return PopulationModel(lam, V)
    if kind == "diag_ramp":
        i = np.arange(1, n + 1)
        return PopulationModel((i / n) ** 2 + ramp_offset)
    if kind == "spiked":
        d = np.asarray(spikes, dtype=float).ravel()
        if d.size == 0 or np.any(d <= 0) or np.any(np.diff(d) > 0):
            raise DomainError("spike strengths must be positive and non-increasing")
        lam = np.ones(n)
        lam[: d.size] = 1.0 + d
        if spike_vectors is None:
            return PopulationModel(lam, spikes=d)
        Vs = np.asarray(spike_vectors, dtype=float)
        if Vs.shape != (n, d.size):
            raise DomainError("spike vectors must be n x r columns")
        if np.max(np.abs(Vs.T @ Vs - np.eye(d.size))) > 1e-8:
            raise DomainError("spike vectors must be orthonormal")
        V = _complete_basis(Vs)
        return PopulationModel(lam, V, spikes=d)
    if kind == "custom":
        sigma = np.asarray(matrix, dtype=float)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise DomainError("custom population matrix must be square")
        if np.max(np.abs(sigma - sigma.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(sigma))):
            raise DomainError("custom population matrix must be symmetric")
        lam, V = np.linalg.eigh(sigma)
        if np.any(lam <= 0):
            raise DomainError("custom population matrix must be positive definite")
        return PopulationModel(lam, V)
    raise DomainError(f"unknown population kind {kind!r}")


def _complete_basis(Vs: np.ndarray) -> np.ndarray:
    """Orthonormal basis whose first columns are Vs (deterministic completion)."""
    n, r = Vs.shape
    q, _ = np.linalg.qr(np.hstack([Vs, np.eye(n)]))
    basis = q[:, :n]
    # keep the exact spike columns in front
    basis[:, :r] = Vs
    return basis


def build_ancillary(kind: str, n: int, *, matrix=None, weights=None, vectors=None,
                    diagonal=None) -> AncillaryMatrix:
    """Construct an ancillary weight matrix: dense, diagonal, or low-rank."""
    if kind == "dense":
        return AncillaryMatrix(dense=np.asarray(matrix, dtype=float))
    if kind == "diagonal":
        diag = np.asarray(diagonal, dtype=float).ravel()
        if diag.size != n:
            raise DomainError("diagonal length must equal n")
        return AncillaryMatrix(dense=np.diag(diag))
    if kind == "lowrank":
        return AncillaryMatrix(weights=weights, vectors=vectors)
    if kind == "identity":
        return AncillaryMatrix(dense=np.eye(n))
    raise DomainError(f"unknown ancillary kind {kind!r}")


def spiked_alternative(pop: PopulationModel, phi: float) -> PopulationModel:
    """Rotate the leading spike direction by phi into the first bulk direction.

    For a spiked population with spikes d_1 >= ... >= d_r on directions
    v_1..v_r, the alternative keeps d and replaces v_1 by
    cos(phi) v_1 + sin(phi) u, with u the first direction orthogonal to the
    spike span (coordinate r+1 for axis-aligned spikes).
    """
    if pop.spikes is None or pop.spikes.size == 0:
        raise DomainError("spiked_alternative requires a spiked population")
    n, r = pop.n, pop.spikes.size
    if r + 1 > n:
        raise DomainError("no bulk direction available for the rotation")
    if pop.is_diagonal:
        V = np.eye(n)
    else:
        V = pop.eigenvectors.copy()
    v1 = V[:, 0]
    u = V[:, r]  # first bulk direction
    V_new = V.copy()
    V_new[:, 0] = np.cos(phi) * v1 + np.sin(phi) * u
    V_new[:, r] = -np.sin(phi) * v1 + np.cos(phi) * u
    return PopulationModel(pop.eigenvalues.copy(), V_new, spikes=pop.spikes.copy())


def wigner_matrix(n: int, rng: np.random.Generator) -> np.ndarray:
    """Symmetrized Gaussian matrix (A + A^T)/sqrt(2n), spectral radius ~ 2."""
    A = rng.standard_normal((n, n))
    return (A + A.T) / np.sqrt(2.0 * n)


def replication_rng(seed: int, replication: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for (seed, replication, stream).

    Streams are statistically independent and reproducible regardless of
    execution order or thread count.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(replication)))
    return np.random.Generator(np.random.Philox(ss))


def sample_data(dist: str, n: int, N: int, rng: np.random.Generator) -> np.ndarray:
    """n x N matrix of i.i.d. real entries with mean 0 and variance 1."""
    if dist == "gaussian":
        return rng.standard_normal((n, N))
    if dist == "student_t":
        return rng.standard_t(T_DOF, size=(n, N)) / T_SCALE
    raise DomainError(f"unknown data distribution {dist!r} (expected one of {DISTRIBUTIONS})")


def fourth_moment_constants(dist: str) -> tuple[float, float]:
    """(kurtosis excess mu_X = E X^4 - 3, gaussian part upsilon_X = 2) for real data."""
    if dist == "gaussian":
        return 0.0, 2.0
    if dist == "student_t":
        # E T^4 = 3 nu^2 / ((nu-2)(nu-4)) for t_nu; standardized by nu/(nu-2)
        raw = 3.0 * T_DOF**2 / ((T_DOF - 2.0) * (T_DOF - 4.0))
        return raw / (T_DOF / (T_DOF - 2.0)) ** 2 - 3.0, 2.0
    raise DomainError(f"unknown data distribution {dist!r}")


def sample_covariance(pop: PopulationModel, X: np.ndarray) -> np.ndarray:
    """S = (1/N) Sigma^{1/2} X X^T Sigma^{1/2} for an n x N draw X."""
    X = np.asarray(X)
    if np.iscomplexobj(X):
        raise DomainError("data matrix must be real")
    if X.ndim != 2 or X.shape[0] != pop.n:
        raise DomainError("data matrix must be n x N with n matching the population")
    Y = pop.sqrt_apply(X)
    return (Y @ Y.T) / X.shape[1]


def save_matrix_csv(path, M: np.ndarray) -> None:
    """Dense matrix as comma-delimited rows at full precision."""
    np.savetxt(path, np.asarray(M, dtype=float), fmt="%.17g", delimiter=",")


def load_matrix_csv(path) -> np.ndarray:
    M = np.loadtxt(path, delimiter=",", dtype=float)
    return np.atleast_2d(M)


def save_lowrank_csv(path, anc: AncillaryMatrix) -> None:
    """Low-rank ancillary matrix: one row per component, (weight, vector...)."""
    if not anc.is_lowrank:
        raise DomainError("save_lowrank_csv expects a low-rank ancillary matrix")
    rows = np.hstack([anc.weights[:, None], anc.vectors.T])
    np.savetxt(path, rows, fmt="%.17g", delimiter=",")


def load_lowrank_csv(path) -> AncillaryMatrix:
    rows = np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))
    return AncillaryMatrix(weights=rows[:, 0], vectors=rows[:, 1:].T)
