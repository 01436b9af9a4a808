"""Projection test for eigenspaces of spiked covariance matrices.

Given a hypothesized rank-r eigenprojection Z0, the statistic compares
tr f(S)(I - Z0) against a centering built from the empirical companion
transform of S.  Under the null (Z0 spans the true spike directions) the
standardized statistic is asymptotically standard normal; the limit mean
and variance are evaluated by contour quadrature of spiked-population
functionals with plugged-in spike strengths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .clt import EmpiricalProvider, GeometryError, TestFunction, _as_real
from .functionals import (SpikedSums, covariance_kernel_one,
                          covariance_kernel_two, spiked_functionals,
                          spiked_mean_integrand)
from .models import CovMatrix
from .stieltjes import (ContourSpec, DomainError, QuadratureError,
                        contour_build, contour_integrate, contour_nodes,
                        nested_contour_pair)

PROJECTION_TOL = 1e-10
TRACE_TOL = 1e-8
FP_PAIR_NODES = 64
FP_SINGLE_NODES = 256
TAILS = ("two-sided", "upper", "lower")


class VarianceError(ValueError):
    """Plug-in variance came out nonpositive."""


def _as_basis(z0_or_basis, n: int | None = None) -> np.ndarray:
    """Orthonormal column basis from either a basis or a dense projection."""
    M = np.atleast_2d(np.asarray(z0_or_basis, dtype=float))
    if M.ndim != 2:
        raise DomainError("projection input must be a matrix")
    if M.shape[1] == 0:
        return M
    if M.shape[0] == M.shape[1] and (n is None or M.shape[0] == n):
        sym = np.max(np.abs(M - M.T)) <= PROJECTION_TOL
        if sym and np.max(np.abs(M @ M - M)) <= PROJECTION_TOL * M.shape[0]:
            r = int(round(float(np.trace(M))))
            if abs(np.trace(M) - r) > TRACE_TOL:
                raise DomainError("projection trace is not an integer rank")
            if r == 0:
                return np.zeros((M.shape[0], 0))
            vals, vecs = np.linalg.eigh(M)
            return np.ascontiguousarray(vecs[:, ::-1][:, :r])
    gram = M.T @ M
    if np.max(np.abs(gram - np.eye(M.shape[1]))) > PROJECTION_TOL * 10:
        raise DomainError("hypothesis basis columns must be orthonormal "
                          "(or pass a symmetric idempotent projection)")
    return M


@dataclass(frozen=True)
class HypothesisSpec:
    """Null hypothesis: the top spike eigenspace equals span(basis).

    basis columns are ordered by hypothesized spike strength (strongest
    first); they are matched positionally with the descending top sample
    eigenvalues when spike strengths are estimated.
    """

    basis: np.ndarray
    f: TestFunction
    alpha: float = 0.1
    delta: float = 0.1
    tail: str = "two-sided"

    def __post_init__(self):
        basis = _as_basis(self.basis)
        object.__setattr__(self, "basis", basis)
        if isinstance(self.f, str):
            object.__setattr__(self, "f", TestFunction.from_name(self.f))
        if not 0.0 < self.alpha < 1.0:
            raise DomainError("alpha must lie in (0, 1)")
        if self.delta <= 0.0:
            raise DomainError("shrinkage threshold offset delta must be positive")
        if self.tail not in TAILS:
            raise DomainError(f"tail must be one of {TAILS}")
        if self.r_n >= basis.shape[0]:
            raise DomainError("projection rank must be smaller than the dimension")

    @property
    def r_n(self) -> int:
        return self.basis.shape[1]

    def projection(self) -> np.ndarray:
        return self.basis @ self.basis.T


@dataclass(frozen=True)
class FpTestReport:
    delta_stat: float
    mu_hat: float
    rho_hat: float
    z_score: float
    p_value: float
    reject: bool
    d_hat: tuple
    diagnostics: dict = field(default_factory=dict)


def spike_forward(d, c: float) -> np.ndarray:
    """Sample eigenvalue location of a population spike: (1+d)(1+c/d)."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0.0):
        raise DomainError("spike strengths must be positive")
    return (1.0 + d) * (1.0 + c / d)


def _shrink_vector(sample_eigs, c_n: float, delta: float) -> np.ndarray:
    """Per-eigenvalue spike estimates, zero where below the detection edge."""
    lam = np.asarray(sample_eigs, dtype=float).ravel()
    if lam.size > 1 and np.any(np.diff(lam) > 0):
        raise DomainError("sample eigenvalues must be sorted descending")
    if c_n <= 0 or delta <= 0:
        raise DomainError("c_n and delta must be positive")
    threshold = (1.0 + np.sqrt(c_n)) ** 2 + delta
    shifted = lam - c_n - 1.0
    out = np.zeros_like(lam)
    above = lam >= threshold
    disc = shifted[above] ** 2 - 4.0 * c_n
    assert np.all(disc > 0.0)
    out[above] = 0.5 * shifted[above] + 0.5 * np.sqrt(disc)
    return out


def shrink_estimate(sample_eigs, c_n: float, delta: float = 0.1) -> np.ndarray:
    """Debiased spike strengths for eigenvalues above the detection edge.

    Inverts the spike-forward map on each eigenvalue at least delta above
    (1+sqrt(c_n))^2; eigenvalues below produce no entry, so the length of
    the result is the effective detected spike count.
    """
    full = _shrink_vector(sample_eigs, c_n, delta)
    return full[full > 0.0]


def _h_real(lam: np.ndarray, N: int, x: float) -> float:
    return x - 1.0 + float(np.sum(lam / (lam - x))) / N


def _upper_root(lam: np.ndarray, N: int) -> float:
    """Largest root of z(1 + m_under_n(z)); all roots lie in [0, this]."""
    lam_max = float(lam.max(initial=0.0))
    if lam_max <= 0.0:
        return 1.0
    lo = lam_max * (1.0 + 1e-9) + 1e-12
    if _h_real(lam, N, lo) >= 0.0:
        return lo
    hi = lam_max + 1.0 + float(lam.sum()) / N
    for _ in range(200):
        if _h_real(lam, N, hi) > 0.0:
            break
        hi *= 2.0
    else:
        raise GeometryError("no sign change found for the centering pole bound")
    return float(optimize.brentq(lambda x: _h_real(lam, N, x), lo, hi,
                                 xtol=1e-12))


def _lower_root(lam: np.ndarray, N: int) -> float:
    """Smallest pole of the centering integrand: 0 if the spectrum carries
    enough mass to pin a root there, else the unique root below the smallest
    positive eigenvalue.

    Hard-edge eigenvalues can land below the positivity floor (at c_n = 1
    the smallest eigenvalue scales like n^-2 with a heavy left tail); any
    positive mass at or below the floor pins the root against the origin,
    so those spectra report 0 rather than bracketing a root that is not
    there."""
    lam_max = float(lam.max(initial=0.0))
    floor = 1e-12 * max(lam_max, 1.0)
    positive = lam[lam > floor]
    if positive.size >= N or positive.size == 0:
        return 0.0
    if bool(np.any((lam > 0.0) & (lam <= floor))):
        return 0.0
    lo = float(positive.min()) * 1e-12
    hi = float(positive.min()) * (1.0 - 1e-9)
    if _h_real(lam, N, hi) <= 0.0:
        return hi
    if _h_real(lam, N, lo) >= 0.0:
        return 0.0
    return float(optimize.brentq(lambda x: _h_real(lam, N, x), lo, hi,
                                 xtol=1e-15))


def _spike_pole(provider, d_max: float, lo: float) -> float:
    """Real point above lo where 1 + (1+d_max) m_under(z) = 0."""

    def g(x: float) -> float:
        return 1.0 + (1.0 + d_max) * float(np.real(provider(np.array([x + 0j]))[0]))

    a = lo * (1.0 + 1e-9) + 1e-12
    if g(a) >= 0.0:
        return a
    b = 2.0 * max(a, 1.0)
    for _ in range(200):
        if g(b) > 0.0:
            break
        b *= 2.0
    else:
        raise GeometryError("no sign change found for the spike pole bound")
    return float(optimize.brentq(g, a, b, xtol=1e-12))


def _projection_trace(lam, vectors, S, basis, f: TestFunction) -> float:
    """tr f(S) Z0 for Z0 = basis basis^T."""
    if basis.shape[1] == 0:
        return 0.0
    if f.kind == "polynomial" and vectors is None:
        coef = f.coefficients
        total = coef[0] * basis.shape[1]
        cur = basis
        for c in coef[1:]:
            cur = S @ cur
            if c != 0.0:
                total += c * float(np.einsum("ij,ij->", basis, cur))
        return float(total)
    if vectors is None:
        lam, vectors = np.linalg.eigh(S)
    G = basis.T @ vectors
    weights = np.einsum("ij,ij->j", G, G)
    return float(np.sum(f(lam) * weights))


def _integrate_with_retry(values, spec: ContourSpec, rel_tol: float,
                          rebuild=None) -> complex:
    try:
        return contour_integrate(values, spec, rel_tol=rel_tol)
    except QuadratureError:
        if rebuild is None:
            raise
        return contour_integrate(values, rebuild(), rel_tol=rel_tol)


def delta_stat(cov, basis, f: TestFunction, N: int | None = None,
               contour: ContourSpec | None = None, rel_tol: float = 1e-8,
               nodes_per_edge: int = FP_SINGLE_NODES) -> float:
    """Projection statistic tr f(S)(I - Z0) minus its empirical centering.

    The centering is (n - r)/(2 pi i) times the closed-path integral of
    f(z)/(z + z m_under_n(z)) with the companion transform built from S's
    own eigenvalues; the contour must enclose every pole of that integrand
    (all real, between 0 and the largest root above the top eigenvalue).
    """
    if isinstance(cov, CovMatrix):
        S, lam, vectors = cov.matrix, cov.eigenvalues, cov.eigenvectors
        N = cov.N if N is None else N
    else:
        S = np.asarray(cov, dtype=float)
        lam, vectors = np.linalg.eigvalsh(S), None
        if N is None:
            raise DomainError("sample count N is required with a plain matrix")
    f = TestFunction.from_name(f) if isinstance(f, str) else f
    f.domain_check(lam)
    basis = _as_basis(basis, S.shape[0])
    n, r_n = S.shape[0], basis.shape[1]

    raw = float(np.sum(f(lam))) - _projection_trace(lam, vectors, S, basis, f)

    x_star = _upper_root(lam, N)
    pole_lo = _lower_root(lam, N)
    rebuild = None
    if contour is None:
        if f.needs_positive_axis:
            if pole_lo <= 0.0:
                raise GeometryError(
                    "branch-cut test function unusable: centering poles reach 0")
            contour = contour_build(pole_lo, x_star, positive_axis=True,
                                    nodes_per_edge=nodes_per_edge)
        else:
            contour = contour_build(0.0, x_star, nodes_per_edge=nodes_per_edge)

        def rebuild(c=contour):
            x_l = 0.5 * c.x_l if c.x_l > 0.0 else c.x_l - 0.5
            return ContourSpec(x_l=x_l, x_r=c.x_r + 0.5, v0=1.5 * c.v0,
                               nodes_per_edge=2 * c.nodes_per_edge)
    elif not (contour.x_l < pole_lo and x_star < contour.x_r):
        raise GeometryError(
            "contour must strictly enclose the interval carrying every pole "
            f"of the centering integrand ([{pole_lo:.6g}, {x_star:.6g}])")

    def values(z):
        h = z - 1.0 + (lam[None, :] / (lam[None, :] - z[:, None])).sum(axis=1) / N
        return f(z) / h

    total = _integrate_with_retry(values, contour, rel_tol, rebuild)
    centering = _as_real((n - r_n) * total / (2j * np.pi), "projection centering")
    return raw - centering


def fp_mean_var(f: TestFunction, d_hat, basis, n: int, N: int, r_n: int,
                provider, mu_x: float,
                contour: ContourSpec | None = None,
                pair: tuple[ContourSpec, ContourSpec] | None = None,
                rel_tol: float = 1e-8, nodes_per_edge: int = FP_PAIR_NODES,
                doublings: int = 1) -> tuple[float, float]:
    """Plug-in limit mean and variance of the projection statistic.

    d_hat holds the estimated spike strengths aligned with basis columns;
    zero entries mark spikes below the detection edge and are excluded
    together with their basis columns.  mu_x is the fourth-moment excess
    E|X|^4 - 3 of the data entries (0 for gaussian data).
    """
    f = TestFunction.from_name(f) if isinstance(f, str) else f
    basis = _as_basis(basis, n)
    d_full = np.zeros(basis.shape[1]) if d_hat is None else \
        np.asarray(d_hat, dtype=float).ravel()
    if d_full.size < basis.shape[1]:
        # a short list means the weakest hypothesized spikes went undetected
        d_full = np.concatenate([d_full,
                                 np.zeros(basis.shape[1] - d_full.size)])
    elif d_full.size > basis.shape[1]:
        raise DomainError("more spike estimates than basis columns")
    kept = d_full > 0.0
    d = d_full[kept]
    sums = SpikedSums.from_projection(basis, kept=kept)

    c_n = n / N
    hi = (1.0 + np.sqrt(c_n)) ** 2
    if d.size:
        hi = max(hi, float(np.max(spike_forward(d, c_n))) * 1.05)
    if contour is None:
        contour = contour_build(0.0, hi, nodes_per_edge=4 * nodes_per_edge)
    if pair is None:
        pair = nested_contour_pair(0.0, hi, nodes_per_edge=nodes_per_edge)

    mu_hat = mean_from_provider(f, provider, contour, n, N, r_n, d, sums,
                                mu_x, rel_tol)
    passes = variance_kernel_passes(pair, provider, n, N, r_n, d, sums,
                                    mu_x, doublings=doublings)
    return mu_hat, variance_from_passes(passes, f)


def mean_from_provider(f: TestFunction, provider, contour: ContourSpec,
                       n: int, N: int, r_n: int, d, sums: SpikedSums,
                       mu_x: float, rel_tol: float = 1e-8) -> float:
    """Plug-in limit mean: closed-path integral of f times the spiked mean
    integrand, with spike strengths d (positives only) and coordinate sums."""

    def mean_values(z):
        return f(z) * spiked_mean_integrand(z, provider(z), n, N, r_n, d,
                                            sums, mu_x)

    total = contour_integrate(mean_values, contour, rel_tol=rel_tol)
    return _as_real(-total / (2j * np.pi), "projection limit mean")


def variance_kernel_passes(pair: tuple[ContourSpec, ContourSpec], provider,
                           n: int, N: int, r_n: int, d, sums: SpikedSums,
                           mu_x: float, doublings: int = 1) -> list[tuple]:
    """Weighted variance kernels at successive contour resolutions.

    The kernel grids do not depend on the test function, so one list serves
    every f; variance_from_passes contracts it with the f-specific node
    values and extrapolates across the resolutions.
    """
    specs = [pair]
    for _ in range(doublings):
        s1, s2 = specs[-1]
        specs.append((ContourSpec(s1.x_l, s1.x_r, s1.v0, 2 * s1.nodes_per_edge),
                      ContourSpec(s2.x_l, s2.x_r, s2.v0, 2 * s2.nodes_per_edge)))
    passes = []
    for s1, s2 in specs:
        z1, w1 = contour_nodes(s1)
        z2, w2 = contour_nodes(s2)
        _check_node_separation(z1, z2)
        bundle = spiked_functionals(z1, provider(z1), z2, provider(z2),
                                    n, N, r_n, d, sums)
        K = 2.0 * covariance_kernel_one(bundle) + mu_x * covariance_kernel_two(bundle)
        passes.append((z1, w1, z2, w2, K))
    return passes


def variance_from_passes(passes: list[tuple], f: TestFunction) -> float:
    rho = None
    for z1, w1, z2, w2, K in passes:
        F1, F2 = w1 * f(z1), w2 * f(z2)
        val = _as_real(-(F1 @ K @ F2) / (4.0 * np.pi**2),
                       "projection limit variance")
        rho = val if rho is None else val + (val - rho) / 3.0
    return rho


def _check_node_separation(z1: np.ndarray, z2: np.ndarray) -> None:
    gap = np.min(np.abs(z1[:, None] - z2[None, :]))
    if gap < 1e-10:
        raise DomainError("variance contours touch: node pair closer than 1e-10")


def fp_test(data, spec: HypothesisSpec, N: int | None = None,
            mu_x: float | None = None, dist: str | None = None,
            rel_tol: float = 1e-8) -> FpTestReport:
    """Run the projection test on a data matrix or a sample covariance.

    data is either an n x N data matrix (columns are observations), a
    symmetric sample covariance (then N must be supplied), or a CovMatrix.
    mu_x is the fourth-moment excess E|X|^4 - 3; when omitted it is taken
    from the declared entry distribution, or estimated from the data matrix
    by the fourth moment of studentized entries.
    """
    from .models import fourth_moment_constants

    S_mat, X = _split_data(data, N)
    if isinstance(S_mat, CovMatrix):
        cov = S_mat
    else:
        if X is not None:
            N = X.shape[1]
        if N is None:
            raise DomainError("sample count N is required with a covariance input")
        cov = CovMatrix.from_matrix(S_mat, N)
    n, N = cov.n, cov.N
    r_n = spec.r_n
    if r_n >= n:
        raise DomainError("projection rank must be smaller than the dimension")

    if mu_x is None:
        if dist is not None:
            mu_x = fourth_moment_constants(dist)[0]
        elif X is not None:
            mu_x = _fourth_moment_plugin(X)
        else:
            raise DomainError("fourth-moment excess unknown: pass mu_x or dist, "
                              "or supply the data matrix")

    lam = cov.eigenvalues
    c_n = n / N
    top = lam[::-1][:r_n]
    d_full = _shrink_vector(top, c_n, spec.delta)
    kept = d_full > 0.0
    d = d_full[kept]

    x_star = _upper_root(lam, N)
    provider = EmpiricalProvider(lam, n, N)
    hi = x_star
    if d.size:
        hi = max(hi, _spike_pole(provider, float(d.max()), x_star))
    contour = contour_build(0.0, hi, nodes_per_edge=FP_SINGLE_NODES)
    pair = nested_contour_pair(0.0, hi, nodes_per_edge=FP_PAIR_NODES)

    delta = delta_stat(cov, spec.basis, spec.f, contour=contour, rel_tol=rel_tol)
    mu_hat, rho_hat = fp_mean_var(spec.f, d_full, spec.basis, n, N, r_n,
                                  provider, mu_x, contour=contour, pair=pair,
                                  rel_tol=rel_tol)
    if rho_hat <= 0.0:
        raise VarianceError(f"plug-in variance nonpositive: {rho_hat:.3e}")

    z_score = (delta - mu_hat) / np.sqrt(rho_hat)
    if spec.tail == "two-sided":
        p_value = 2.0 * stats.norm.sf(abs(z_score))
    elif spec.tail == "upper":
        p_value = stats.norm.sf(z_score)
    else:
        p_value = stats.norm.cdf(z_score)
    p_value = float(min(1.0, max(0.0, p_value)))

    return FpTestReport(
        delta_stat=float(delta), mu_hat=float(mu_hat), rho_hat=float(rho_hat),
        z_score=float(z_score), p_value=p_value,
        reject=bool(p_value < spec.alpha), d_hat=tuple(d),
        diagnostics={
            "r_n": r_n, "r_hat": int(kept.sum()), "c_n": c_n,
            "x_star": x_star, "mu_x": float(mu_x),
            "top_eigenvalues": tuple(top),
            "contour": (contour.x_l, contour.x_r, contour.v0),
            "tail": spec.tail,
        })


def fp_zscores(cov: CovMatrix, basis, fs, mu_x: float, delta: float = 0.1,
               rel_tol: float = 1e-8) -> dict[str, float]:
    """Standardized projection statistics for several test functions at once.

    Shares the eigendecomposition, the contour geometry and the variance
    kernel grids (none of which depend on f) across the list; meant for
    Monte Carlo loops where running fp_test per f would rebuild all three
    for every function.
    """
    basis = _as_basis(basis, cov.n)
    fs = [TestFunction.from_name(f) if isinstance(f, str) else f for f in fs]
    n, N, r_n = cov.n, cov.N, basis.shape[1]
    lam = cov.eigenvalues
    d_full = _shrink_vector(lam[::-1][:r_n], n / N, delta)
    kept = d_full > 0.0
    d = d_full[kept]
    sums = SpikedSums.from_projection(basis, kept=kept)
    provider = EmpiricalProvider(lam, n, N)
    x_star = _upper_root(lam, N)
    hi = x_star
    if d.size:
        hi = max(hi, _spike_pole(provider, float(d.max()), x_star))
    contour = contour_build(0.0, hi, nodes_per_edge=FP_SINGLE_NODES)
    pair = nested_contour_pair(0.0, hi, nodes_per_edge=FP_PAIR_NODES)
    passes = variance_kernel_passes(pair, provider, n, N, r_n, d, sums, mu_x)
    out = {}
    for f in fs:
        value = delta_stat(cov, basis, f, contour=contour, rel_tol=rel_tol)
        mu = mean_from_provider(f, provider, contour, n, N, r_n, d, sums,
                                mu_x, rel_tol)
        rho = variance_from_passes(passes, f)
        if rho <= 0.0:
            raise VarianceError(f"plug-in variance nonpositive: {rho:.3e}")
        out[f.name] = float((value - mu) / np.sqrt(rho))
    return out


def _split_data(data, N):
    """(covariance-or-None, data-matrix-or-None) from the flexible input."""
    if isinstance(data, CovMatrix):
        return data, None
    M = np.asarray(data, dtype=float)
    if M.ndim != 2:
        raise DomainError("data must be a matrix")
    if M.shape[0] == M.shape[1] and np.max(np.abs(M - M.T)) <= 1e-10 * max(
            1.0, float(np.max(np.abs(M)))):
        return M, None
    if N is not None and M.shape[1] != N:
        raise DomainError("data matrix width disagrees with the declared N")
    return M @ M.T / M.shape[1], M


def _fourth_moment_plugin(X: np.ndarray) -> float:
    """Fourth-moment excess from studentized data-matrix entries."""
    mean = X.mean(axis=1, keepdims=True)
    std = X.std(axis=1, keepdims=True)
    std[std == 0.0] = 1.0
    W = (X - mean) / std
    return float(np.mean(W**4) - 3.0)
