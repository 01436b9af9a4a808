"""Stieltjes transforms of sample-covariance spectra and contour quadrature.

The central object is the fixed-point equation for the Stieltjes transform
m(z) of the limiting spectral distribution of a sample covariance matrix
with population spectral measure H and aspect ratio c = dim/samples:

    m(z) = integral dH(t) / ( t*(1 - c - c*z*m(z)) - z ),   Im z != 0.

The companion transform is m_under(z) = -(1-c)/z + c*m(z).  Both satisfy
the Herglotz property Im(m)*Im(z) > 0 off the real axis, which is what
selects the physical solution branch.
"""

from __future__ import annotations

import cmath
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "SpectralMeasure",
    "StieltjesValue",
    "ContourSpec",
    "DomainError",
    "QuadratureError",
    "mp_fixed_point",
    "mp_fixed_point_nodes",
    "mp_inverse_map",
    "empirical_stieltjes",
    "support_interval",
    "contour_build",
    "nested_contour_pair",
    "contour_nodes",
    "contour_integrate",
    "double_contour_integrate",
]

FIXED_POINT_TOL = 1e-12
COLLISION_TOL = 1e-13


class DomainError(ValueError):
    """Evaluation requested outside the mathematically valid domain."""


class QuadratureError(RuntimeError):
    """Contour quadrature could not produce a trustworthy value."""


@dataclass(frozen=True)
class SpectralMeasure:
    """Discrete probability measure sum_i w_i * delta(t_i) on [0, inf)."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float).ravel()
        weights = np.asarray(self.weights, dtype=float).ravel()
        if atoms.shape != weights.shape or atoms.size == 0:
            raise DomainError("atoms and weights must be matching nonempty 1-d arrays")
        if np.any(atoms < 0):
            raise DomainError("spectral measure atoms must be nonnegative")
        if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0, atol=1e-10):
            raise DomainError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_eigenvalues(cls, eigenvalues) -> "SpectralMeasure":
        eigs = np.asarray(eigenvalues, dtype=float).ravel()
        return cls(eigs, np.full(eigs.size, 1.0 / eigs.size))

    def moment_integral(self, fn) -> complex:
        """sum_i w_i * fn(t_i), with fn vectorized over atoms."""
        return np.sum(self.weights * fn(self.atoms))


@dataclass(frozen=True)
class StieltjesValue:
    """Solved transform at one point z: m, companion m_under, solver residual."""

    z: complex
    m: complex
    m_under: complex
    residual: float

    def __post_init__(self):
        if not (np.isfinite(self.residual) and self.residual <= 1e-8):
            raise DomainError(f"fixed point residual {self.residual:.3e} too large at z={self.z}")
        if self.z.imag != 0.0 and self.m.imag * self.z.imag < 0:
            raise DomainError(f"non-Herglotz branch at z={self.z}")


def _fixed_point_rhs(m: complex, z: complex, c: float, H: SpectralMeasure) -> complex:
    denom = H.atoms * (1.0 - c - c * z * m) - z
    return np.sum(H.weights / denom)


def _companion(m: complex, z: complex, c: float) -> complex:
    return -(1.0 - c) / z + c * m


def _newton_companion(z: complex, c: float, H: SpectralMeasure, mu0: complex,
                      tol: float, max_iter: int = 200) -> complex | None:
    """Newton on F(mu) = -1/mu + c*int t/(1+t*mu) dH - z, warm start mu0."""
    t, w = H.atoms, H.weights
    mu = mu0
    with np.errstate(all="ignore"):
        for _ in range(max_iter):
            one_plus = 1.0 + t * mu
            if np.any(np.abs(one_plus) < 1e-14) or mu == 0 or not np.isfinite(mu):
                return None
            F = -1.0 / mu + c * np.sum(w * t / one_plus) - z
            if abs(F) < 1e-14 * max(1.0, abs(z)):
                return mu
            dF = 1.0 / (mu * mu) - c * np.sum(w * t * t / (one_plus * one_plus))
            if dF == 0 or not np.isfinite(dF):
                return None
            step = F / dF
            mu = mu - step
            if abs(step) < 1e-16 * max(1.0, abs(mu)):
                return mu
    return mu


def _damped_iteration(z: complex, c: float, H: SpectralMeasure,
                      tol: float, max_iter: int = 5000) -> complex | None:
    m = -1.0 / z
    alpha = 0.5
    with np.errstate(all="ignore"):
        for _ in range(max_iter):
            rhs = _fixed_point_rhs(m, z, c, H)
            if not np.isfinite(rhs):
                return None
            if abs(m - rhs) <= tol:
                return rhs
            m = (1.0 - alpha) * m + alpha * rhs
    return None


def _polynomial_roots(z: complex, c: float, H: SpectralMeasure) -> np.ndarray:
    """All roots m of the rationalized fixed-point equation (small atom sets)."""
    # m * prod_j (t_j*(1-c) - c*z*t_j*m - z) - sum_i w_i prod_{j!=i}(...) = 0,
    # each factor linear in m: a_j + b_j m with a_j = t_j(1-c) - z, b_j = -c z t_j.
    a = H.atoms * (1.0 - c) - z
    b = -c * z * H.atoms
    k = a.size
    # prod_j (a_j + b_j m) as coefficient array (ascending powers)
    full = np.array([1.0 + 0j])
    for j in range(k):
        full = np.convolve(full, np.array([a[j], b[j]]))
    poly = np.concatenate(([0.0 + 0j], full))  # times m
    for i in range(k):
        part = np.array([1.0 + 0j])
        for j in range(k):
            if j != i:
                part = np.convolve(part, np.array([a[j], b[j]]))
        part = np.pad(part, (0, poly.size - part.size), constant_values=0)
        poly = poly - H.weights[i] * part
    return np.roots(poly[::-1])


def mp_fixed_point(z: complex, c: float, H: SpectralMeasure,
                   tol: float = FIXED_POINT_TOL, warm_start: complex | None = None) -> StieltjesValue:
    """Solve the spectral fixed point at one z, selecting the Herglotz branch.

    Real z strictly outside the support is allowed; the branch is then fixed
    by analytic continuation from the upper half plane.
    """
    z = complex(z)
    if z == 0:
        raise DomainError("fixed point undefined at z = 0")
    c = float(c)
    if c <= 0:
        raise DomainError("aspect ratio c must be positive")

    if z.imag == 0.0:
        # Real z (outside the support): the branch is ambiguous without an
        # anchor, so use warm-started Newton or continuation from above.
        if warm_start is not None:
            mu = _newton_companion(z, c, H, warm_start, tol)
            if mu is not None and _acceptable(mu, z, c, H, tol):
                return _pack(mu, z, c, H)
        return _continue_to_real_axis(z.real, c, H, tol)

    mu = None
    if warm_start is not None:
        mu = _newton_companion(z, c, H, warm_start, tol)
        if mu is not None and not _acceptable(mu, z, c, H, tol):
            mu = None
    if mu is None:
        m = _damped_iteration(z, c, H, tol)
        if m is not None:
            mu = _companion(m, z, c)
            if not _acceptable(mu, z, c, H, tol):
                mu = None
    if mu is None:
        mu = _newton_companion(z, c, H, _companion(-1.0 / z, z, c), tol)
        if mu is not None and not _acceptable(mu, z, c, H, tol):
            mu = None
    if mu is None and H.atoms.size <= 24:
        # np.roots leaves ~1e-12 residuals on ill-conditioned inputs, so
        # polish each Herglotz candidate with Newton before accepting it
        for root in _polynomial_roots(z, c, H):
            cand = _companion(root, z, c)
            if cand.imag * z.imag < 0:
                continue
            polished = _newton_companion(z, c, H, cand, tol)
            if polished is not None and _acceptable(polished, z, c, H, tol):
                mu = polished
                break
    if mu is None:
        raise DomainError(f"fixed point solver failed at z={z}")
    return _pack(mu, z, c, H)


def _pack(mu: complex, z: complex, c: float, H: SpectralMeasure) -> StieltjesValue:
    m = (mu + (1.0 - c) / z) / c
    residual = abs(m - _fixed_point_rhs(m, z, c, H))
    return StieltjesValue(z=z, m=m, m_under=mu, residual=residual)


def _acceptable(mu: complex, z: complex, c: float, H: SpectralMeasure, tol: float) -> bool:
    m = (mu + (1.0 - c) / z) / c
    if not np.isfinite(m):
        return False
    if z.imag != 0.0 and m.imag * z.imag < 0:
        return False
    if z.imag != 0.0 and mu.imag * z.imag < 0:
        return False
    return abs(m - _fixed_point_rhs(m, z, c, H)) <= max(tol, 1e-12)


def _continue_to_real_axis(x: float, c: float, H: SpectralMeasure, tol: float) -> StieltjesValue:
    """Solve at real x (outside the support) by a ladder of shrinking Im parts."""
    mu = None
    for v in (1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001):
        val = mp_fixed_point(complex(x, v), c, H, tol=tol, warm_start=mu)
        mu = val.m_under
    mu_axis = _newton_companion(complex(x), c, H, mu, tol)
    if mu_axis is None or not _acceptable(mu_axis, complex(x), c, H, tol):
        raise DomainError(f"fixed point continuation to the real axis failed at z={x}")
    return _pack(mu_axis, complex(x), c, H)


def mp_fixed_point_nodes(z_nodes: np.ndarray, c: float, H: SpectralMeasure,
                         tol: float = FIXED_POINT_TOL) -> np.ndarray:
    """Companion transform m_under along an array of nodes with warm starts.

    Nodes are processed in order; each solve starts from its neighbor's
    solution, which keeps the branch continuous across real-axis crossings
    (vertical contour edges).  Returns the m_under array.
    """
    z_nodes = np.asarray(z_nodes, dtype=complex).ravel()
    out = np.empty(z_nodes.size, dtype=complex)
    warm = None
    for i, z in enumerate(z_nodes):
        val = mp_fixed_point(z, c, H, tol=tol, warm_start=warm)
        out[i] = val.m_under
        warm = val.m_under
    return out


def mp_inverse_map(m_under: complex, c: float, H: SpectralMeasure) -> complex:
    """Inverse of the companion transform: z(m_under) = -1/m_under + c*int t/(1+t*m_under) dH."""
    mu = complex(m_under)
    if mu == 0:
        raise DomainError("inverse map undefined at m_under = 0")
    denom = 1.0 + H.atoms * mu
    if np.any(np.abs(denom) < 1e-14):
        raise DomainError("inverse map pole: 1 + t*m_under vanishes at an atom")
    return -1.0 / mu + c * np.sum(H.weights * H.atoms / denom)


def empirical_stieltjes(eigenvalues: np.ndarray, n: int, N: int, z) -> tuple[np.ndarray, np.ndarray]:
    """Empirical transform m_n(z) = mean_j 1/(lambda_j - z) and its companion.

    Vectorized over z.  Raises DomainError when a z node collides with an
    eigenvalue (distance below 1e-13 on the spectrum's scale).
    """
    eigs = np.asarray(eigenvalues, dtype=float).ravel()
    z_arr = np.atleast_1d(np.asarray(z, dtype=complex))
    scale = max(1.0, float(np.max(np.abs(eigs))) if eigs.size else 1.0)
    diff = eigs[None, :] - z_arr[:, None]
    dmin = np.min(np.abs(diff), axis=1)
    if np.any(dmin <= COLLISION_TOL * scale):
        bad = z_arr[int(np.argmin(dmin))]
        raise DomainError(f"z node {bad} collides with an eigenvalue")
    m_n = np.mean(1.0 / diff, axis=1)
    c_n = n / N
    m_under = -(1.0 - c_n) / z_arr + c_n * m_n
    if np.isscalar(z) or np.ndim(z) == 0:
        return m_n[0], m_under[0]
    return m_n, m_under


def support_interval(pop_eigenvalues: np.ndarray, c: float) -> tuple[float, float]:
    """Bounding interval [d_minus, d_plus] for the limiting sample spectrum."""
    eigs = np.asarray(pop_eigenvalues, dtype=float).ravel()
    lam_min, lam_max = float(np.min(eigs)), float(np.max(eigs))
    sqrt_c = np.sqrt(c)
    d_minus = lam_min * (1.0 - sqrt_c) ** 2 if c < 1.0 else 0.0
    d_plus = lam_max * (1.0 + sqrt_c) ** 2
    return d_minus, d_plus


@dataclass(frozen=True)
class ContourSpec:
    """Closed rectangular contour with corners (x_l, x_r) x (-v0, +v0).

    Counterclockwise orientation.  nodes_per_edge is the trapezoid interval
    count on each edge (so the closed path carries 4*(nodes_per_edge+1)
    weighted sample points, corner points duplicated with half weights).
    """

    x_l: float
    x_r: float
    v0: float
    nodes_per_edge: int = 1024

    def __post_init__(self):
        if not (self.x_l < self.x_r and self.v0 > 0):
            raise DomainError("contour rectangle requires x_l < x_r and v0 > 0")
        if 4 * self.nodes_per_edge < 64:
            raise DomainError("contour must carry at least 64 nodes")

    @property
    def corners(self) -> tuple[complex, complex, complex, complex]:
        return (complex(self.x_l, -self.v0), complex(self.x_r, -self.v0),
                complex(self.x_r, self.v0), complex(self.x_l, self.v0))

    def encloses(self, point: complex, margin: float = 0.0) -> bool:
        return (self.x_l + margin < point.real < self.x_r - margin
                and -self.v0 + margin < point.imag < self.v0 - margin)


def contour_build(d_minus: float, d_plus: float, c: float | None = None,
                  v0: float = 1.0, nodes_per_edge: int = 1024,
                  x_l: float | None = None, x_r: float | None = None,
                  positive_axis: bool = False) -> ContourSpec:
    """Rectangle enclosing [d_minus, d_plus] with the default margins.

    positive_axis=True keeps the contour in the right half plane (needed for
    integrands with a branch cut on (-inf, 0]); this requires d_minus > 0.
    """
    if x_r is None:
        x_r = 1.2 * d_plus + 0.5
    if x_l is None:
        if positive_axis:
            if d_minus <= 0:
                raise DomainError("positive-axis contour impossible: support touches 0")
            x_l = 0.5 * d_minus
        else:
            x_l = min(d_minus, 0.0) - 0.5
    return ContourSpec(x_l=float(x_l), x_r=float(x_r), v0=float(v0),
                       nodes_per_edge=int(nodes_per_edge))


def nested_contour_pair(d_minus: float, d_plus: float, *, v0: float = 1.0,
                        nodes_per_edge: int = 1024, positive_axis: bool = False,
                        gap: float = 1.0) -> tuple[ContourSpec, ContourSpec]:
    """Two disjoint contours around the same support: inner and strictly outer."""
    inner = contour_build(d_minus, d_plus, v0=v0, nodes_per_edge=nodes_per_edge,
                          positive_axis=positive_axis)
    outer_x_l = 0.5 * inner.x_l if positive_axis else inner.x_l - gap
    outer = ContourSpec(x_l=outer_x_l, x_r=inner.x_r + gap, v0=2.0 * inner.v0,
                        nodes_per_edge=nodes_per_edge)
    return inner, outer


def contour_nodes(spec: ContourSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sample points and trapezoid weights so that sum(w * f(z)) ~ closed path integral."""
    a, b, c, d = spec.corners
    m = spec.nodes_per_edge
    t = np.linspace(0.0, 1.0, m + 1)
    zs, ws = [], []
    for p, q in ((a, b), (b, c), (c, d), (d, a)):
        zs.append(p + t * (q - p))
        w = np.full(m + 1, (q - p) / m, dtype=complex)
        w[0] *= 0.5
        w[-1] *= 0.5
        ws.append(w)
    return np.concatenate(zs), np.concatenate(ws)


def _quad_pass(values_fn, spec: ContourSpec) -> tuple[complex, float]:
    z, w = contour_nodes(spec)
    f = np.asarray(values_fn(z), dtype=complex)
    if f.shape != z.shape:
        raise QuadratureError("integrand must return one value per node")
    bad = ~np.isfinite(f)
    if np.any(bad):
        node = z[int(np.argmax(bad))]
        raise QuadratureError(f"non-finite integrand at contour node z={node}")
    return complex(np.sum(w * f)), float(np.sum(np.abs(w) * np.abs(f)))


def contour_integrate(values_fn, spec: ContourSpec, rel_tol: float = 1e-8,
                      max_doublings: int = 6) -> complex:
    """Closed-path integral of values_fn along spec with adaptive refinement.

    values_fn(z_array) -> complex array.  The edge node count doubles until
    the change is below rel_tol relative to max(|integral|, L1 mass of the
    integrand); the L1 floor keeps exact cancellations (integral ~ 0) from
    stalling the loop.  The rectangle's corners leave the trapezoid rule
    with O(h^2) error, so each doubling also applies the matching Richardson
    step and convergence is judged on the extrapolated sequence.
    """
    cur_spec = spec
    val, mass = _quad_pass(values_fn, cur_spec)
    extrap_prev = None
    for _ in range(max_doublings):
        finer = replace(cur_spec, nodes_per_edge=2 * cur_spec.nodes_per_edge)
        val2, mass2 = _quad_pass(values_fn, finer)
        extrap = val2 + (val2 - val) / 3.0
        if extrap_prev is not None:
            step = abs(extrap - extrap_prev)
            # exact cancellations converge to 0 at the resolution set by the
            # integrand's L1 mass rather than by the (vanishing) value
            tiny = rel_tol * max(mass2, 1.0)
            if step <= rel_tol * abs(extrap) or (abs(extrap) <= tiny and step <= tiny):
                return extrap
        cur_spec, val, mass, extrap_prev = finer, val2, mass2, extrap
    raise QuadratureError(
        f"contour integral did not reach rel_tol={rel_tol} after {max_doublings} doublings")


def _check_disjoint(spec1: ContourSpec, spec2: ContourSpec) -> None:
    r1 = (spec1.x_l, spec1.x_r, -spec1.v0, spec1.v0)
    r2 = (spec2.x_l, spec2.x_r, -spec2.v0, spec2.v0)
    nested_12 = r2[0] < r1[0] and r1[1] < r2[1] and r2[2] < r1[2] and r1[3] < r2[3]
    nested_21 = r1[0] < r2[0] and r2[1] < r1[1] and r1[2] < r2[2] and r2[3] < r1[3]
    separated = r1[1] < r2[0] or r2[1] < r1[0] or r1[3] < r2[2] or r2[3] < r1[2]
    if not (nested_12 or nested_21 or separated):
        raise DomainError("double-contour paths must be disjoint (nested or separated)")


def double_contour_integrate(values_fn2, spec1: ContourSpec, spec2: ContourSpec,
                             rel_tol: float = 1e-6, max_doublings: int = 2) -> complex:
    """Iterated closed-path integral over disjoint contours.

    values_fn2(z1_array, z2_array) -> matrix F[i, j] of kernel values.  The
    result approximates the iterated integral dz1 dz2; both contours refine
    together until the relative change passes rel_tol (same L1 floor rule as
    the single-contour rule).
    """
    _check_disjoint(spec1, spec2)

    def one_pass(s1, s2):
        z1, w1 = contour_nodes(s1)
        z2, w2 = contour_nodes(s2)
        F = np.asarray(values_fn2(z1, z2), dtype=complex)
        if F.shape != (z1.size, z2.size):
            raise QuadratureError("kernel must return a (len(z1), len(z2)) matrix")
        bad = ~np.isfinite(F)
        if np.any(bad):
            i, j = np.unravel_index(int(np.argmax(bad)), F.shape)
            raise QuadratureError(
                f"non-finite kernel value at nodes z1={z1[i]}, z2={z2[j]}")
        return complex(w1 @ F @ w2), float(np.abs(w1) @ np.abs(F) @ np.abs(w2))

    val, mass = one_pass(spec1, spec2)
    extrap_prev = None
    for _ in range(max_doublings):
        f1 = replace(spec1, nodes_per_edge=2 * spec1.nodes_per_edge)
        f2 = replace(spec2, nodes_per_edge=2 * spec2.nodes_per_edge)
        val2, mass2 = one_pass(f1, f2)
        extrap = val2 + (val2 - val) / 3.0
        if extrap_prev is not None:
            step = abs(extrap - extrap_prev)
            tiny = rel_tol * max(mass2, 1.0)
            if step <= rel_tol * abs(extrap) or (abs(extrap) <= tiny and step <= tiny):
                return extrap
        spec1, spec2, val, mass, extrap_prev = f1, f2, val2, mass2, extrap
    return extrap_prev if extrap_prev is not None else val


def closed_form_isotropic_m(z, c: float):
    """Reference transform for H = delta_1: root of c*z*m^2 + (z + c - 1)*m + 1 = 0.

    Vectorized over z; selects the Herglotz branch (continuation from above
    for real z outside the support).  Used as an independent cross-check of
    the iterative solver.
    """
    z_arr = np.atleast_1d(np.asarray(z, dtype=complex))
    out = np.empty_like(z_arr)
    for i, zz in enumerate(z_arr):
        a, b, d = c * zz, zz + c - 1.0, 1.0
        disc = cmath.sqrt(b * b - 4.0 * a * d)
        r1 = (-b + disc) / (2.0 * a)
        r2 = (-b - disc) / (2.0 * a)
        if zz.imag != 0.0:
            out[i] = r1 if r1.imag * zz.imag > 0 else r2
        else:
            # continuation from above the axis
            zeps = complex(zz.real, 1e-9)
            de = cmath.sqrt((zeps + c - 1.0) ** 2 - 4.0 * c * zeps)
            ra = (-(zeps + c - 1.0) + de) / (2.0 * c * zeps)
            rb = (-(zeps + c - 1.0) - de) / (2.0 * c * zeps)
            ref = ra if ra.imag > 0 else rb
            out[i] = r1 if abs(r1 - ref) < abs(r2 - ref) else r2
    if np.ndim(z) == 0:
        return out[0]
    return out
