"""Constrained ellipse fit (CELF) of back-rotated phase-cycled samples.

After back-rotation by the central-line angle, the ellipse is modelled as::

    c1 x^2 + c3 y^2 - 2 gamma c1 q x + h = 0,    4 c1 c3 = 1, c1 > 0

where q = |cross-point| and the center sits at gamma q on the real axis. The
fit is solved progressively: h in closed form, u = (c1, c3) from a 2x2
generalized eigenproblem G(gamma) u = lambda B u with B = [[0, 2], [2, 0]],
and finally gamma minimising lambda_max(gamma).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from celf.errors import NumericalError
from celf.geometry import PhaseCycleSet, back_rotate, central_line_angle, cross_point

GAMMA_SEARCH_BOUNDS = (0.5, 1.0)
GAMMA_SANE = (0.0, 1.5)
SINGULAR_THRESHOLD = math.pi / 12
_COARSE_POINTS = 51
_GOLDEN_TOL = 1e-10
_INVGOLD = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    """Data matrices of the CELF cost.

    ``d0`` holds rows (x^2, y^2) and ``d1`` rows (2 q x, 0); the constant
    column multiplying h is implicit. ``c0``, ``c1``, ``c2`` are the 2x2
    blocks of the cost after h has been eliminated.
    """

    d0: NDArray[np.float64]
    d1: NDArray[np.float64]
    c0: NDArray[np.float64]
    c1: NDArray[np.float64]
    c2: NDArray[np.float64]

    @property
    def n(self) -> int:
        return int(self.d0.shape[0])

    @property
    def z(self) -> NDArray[np.float64]:
        n = self.n
        return np.eye(n) - np.full((n, n), 1.0 / n)

    def g(self, gamma: float) -> NDArray[np.float64]:
        return self.c0 + gamma * self.c1 + gamma * gamma * self.c2

    @property
    def norm(self) -> float:
        return float(np.abs(self.c0).sum() + np.abs(self.c1).sum() + np.abs(self.c2).sum())


@dataclass(frozen=True, eq=False)
class CelfFit:
    u_star: tuple[float, float]
    h_star: float
    gamma_star: float
    g_star: float
    x_c_star: float
    r_min: float
    r_maj: float
    q_abs: float
    phi: float
    singular: bool
    gamma_via_search: bool
    lambda_max: float
    q: complex
    rotated: PhaseCycleSet

    def __post_init__(self) -> None:
        if not self.g_star < 0:
            raise NumericalError("non-ellipse fit: g* >= 0")
        if not self.u_star[0] > 0:
            raise NumericalError("non-ellipse fit: c1 <= 0")

    @property
    def normalized_geometry(self) -> tuple[float, float, float]:
        """(r_maj, r_min, x_c) divided by the cross-point distance."""
        return (self.r_maj / self.q_abs, self.r_min / self.q_abs, self.x_c_star / self.q_abs)


B_MATRIX = np.array([[0.0, 2.0], [2.0, 0.0]])
D_VECTOR = np.array([1.0, 0.0])


def assemble_matrices(rotated: PhaseCycleSet, q_abs: float) -> DesignMatrices:
    x = rotated.points.real
    y = rotated.points.imag
    d0 = np.column_stack([x * x, y * y])
    d1 = np.column_stack([2.0 * q_abs * x, np.zeros_like(x)])
    # Z is symmetric and idempotent, so D^T Z E = (Z D)^T (Z E)
    z0 = d0 - d0.mean(axis=0)
    z1 = d1 - d1.mean(axis=0)
    c0 = z0.T @ z0
    cross = z0.T @ z1
    c1 = -(cross + cross.T)
    c2 = z1.T @ z1
    return DesignMatrices(d0, d1, c0, c1, c2)


def cost(gamma: float, u, h: float, dm: DesignMatrices) -> float:
    """Summed squared algebraic distance Q(gamma, u, h)."""
    r = (dm.d0 - gamma * dm.d1) @ np.asarray(u, dtype=np.float64) + h
    return float(r @ r)


def h_opt(gamma: float, u, dm: DesignMatrices) -> float:
    return -float(np.mean((dm.d0 - gamma * dm.d1) @ np.asarray(u, dtype=np.float64)))


def t_coefficients(dm: DesignMatrices) -> tuple[float, float, float, float, float]:
    """Coefficients of det(G(gamma) - lambda B) = 0 written as

        4 lambda^2 + (t1 + gamma t2) lambda + gamma^2 t3 + gamma t4 + t5 = 0.

    Expanding the determinant with B = [[0, 2], [2, 0]] gives
    -4 lambda^2 + 2 (G12 + G21) lambda + det G; the t's below are the
    negated coefficients so the quadratic has a leading +4.
    """
    c0, c1, c2 = dm.c0, dm.c1, dm.c2
    t1 = -2.0 * (c0[0, 1] + c0[1, 0])
    t2 = -2.0 * (c1[0, 1] + c1[1, 0])
    t3 = -(c0[1, 1] * c2[0, 0] - c1[0, 1] * c1[1, 0])
    t4 = -(c0[1, 1] * c1[0, 0] - c0[0, 1] * c1[1, 0] - c0[1, 0] * c1[0, 1])
    t5 = -(c0[0, 0] * c0[1, 1] - c0[0, 1] * c0[1, 0])
    return (float(t1), float(t2), float(t3), float(t4), float(t5))


def _lambda_disc(gamma: float, t) -> tuple[float, float, float]:
    t1, t2, t3, t4, t5 = t
    s = t1 + gamma * t2
    c = gamma * gamma * t3 + gamma * t4 + t5
    return s, c, s * s - 16.0 * c


def lambda_max_analytic(gamma: float, t) -> float:
    s, c, disc = _lambda_disc(gamma, t)
    if disc < 0:
        scale = s * s + 16.0 * abs(c)
        if disc < -1e-12 * scale:
            raise NumericalError("no real eigenvalue: negative discriminant")
        disc = 0.0
    return (-s + math.sqrt(disc)) / 8.0


def solve_u(gamma: float, dm: DesignMatrices) -> tuple[float, tuple[float, float]]:
    """Largest generalized eigenvalue of (G(gamma), B) and its normalised eigenvector.

    The eigenvector is scaled so that u^T B u = 1 and u . (1, 0) > 0.
    """
    g = dm.g(gamma)
    g11, g12, g21, g22 = float(g[0, 0]), float(g[0, 1]), float(g[1, 0]), float(g[1, 1])
    s = 2.0 * (g12 + g21)
    det = g11 * g22 - g12 * g21
    disc = s * s + 16.0 * det
    if disc < 0:
        if disc < -1e-12 * (s * s + 16.0 * abs(det)):
            raise NumericalError("no real eigenvalue: negative discriminant")
        disc = 0.0
    lam = (s + math.sqrt(disc)) / 8.0
    if lam < 0:
        # an exact fit sits at lambda = 0; only a clearly negative value is an error
        if lam < -1e-10 * (abs(s) + 4.0 * math.sqrt(abs(det))):
            raise NumericalError("both generalized eigenvalues are negative")
    # null vector of G - lam B from whichever row is better conditioned
    v1 = (-(g12 - 2.0 * lam), g11)
    v2 = (g22, -(g21 - 2.0 * lam))
    u = v1 if math.hypot(*v1) >= math.hypot(*v2) else v2
    ubu = 4.0 * u[0] * u[1]
    if not ubu > 0:
        raise NumericalError("constraint infeasible: u^T B u <= 0")
    k = math.copysign(1.0, u[0]) / math.sqrt(ubu)
    return max(lam, 0.0), (k * u[0], k * u[1])


def gamma_roots(t, dm: DesignMatrices | None = None) -> list[float] | None:
    """Real stationary points of lambda_max(gamma), or None if not available.

    Setting d lambda_max / d gamma = 0 and squaring gives a quadratic
    A gamma^2 + 2 P gamma + R = 0 with A = t2^2 - 16 t3,
    P = t1 t2 - 8 t4 and R = (t1 t2 t4 - t2^2 t5 - 4 t4^2) / t3.
    """
    t1, t2, t3, t4, t5 = t
    scale = dm.norm**2 if dm is not None else max(abs(v) for v in t) or 1.0
    if abs(t3) <= 1e-12 * scale:
        return None
    a = t2 * t2 - 16.0 * t3
    if abs(a) <= 1e-12 * (t2 * t2 + 16.0 * abs(t3)):
        return None
    p = t1 * t2 - 8.0 * t4
    r = (t1 * t2 * t4 - t2 * t2 * t5 - 4.0 * t4 * t4) / t3
    disc = p * p - a * r
    if disc < 0:
        # a noise-free fit touches zero cost at a double root; allow rounding
        if disc < -1e-9 * (p * p + abs(a * r)):
            return None
        disc = 0.0
    root = math.sqrt(disc)
    return [(-p + root) / a, (-p - root) / a]


def _golden_min(f, lo: float, hi: float, tol: float = _GOLDEN_TOL) -> float:
    c = hi - _INVGOLD * (hi - lo)
    d = lo + _INVGOLD * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _INVGOLD * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _INVGOLD * (hi - lo)
            fd = f(d)
    return 0.5 * (lo + hi)


def bounded_gamma_search(t, bounds: tuple[float, float] = GAMMA_SEARCH_BOUNDS) -> float:
    """Coarse scan followed by golden-section refinement of lambda_max over ``bounds``."""
    lo, hi = bounds
    grid = np.linspace(lo, hi, _COARSE_POINTS)
    t1, t2, t3, t4, t5 = t
    s = t1 + grid * t2
    disc = np.maximum(s * s - 16.0 * (grid * grid * t3 + grid * t4 + t5), 0.0)
    vals = (-s + np.sqrt(disc)) / 8.0
    k = int(np.argmin(vals))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, grid.size - 1)]

    def f(g: float) -> float:
        s_, c_, d_ = _lambda_disc(g, t)
        return (-s_ + math.sqrt(max(d_, 0.0))) / 8.0

    g = _golden_min(f, float(a), float(b))
    # keep the scan point if refinement did not improve on it
    return g if f(g) <= vals[k] else float(grid[k])


def gamma_star(t, dm: DesignMatrices | None = None) -> tuple[float, bool]:
    """Minimiser of lambda_max(gamma): analytic root when usable, else bounded search."""
    roots = gamma_roots(t, dm)
    if roots is not None:
        lo, hi = GAMMA_SANE
        best = None
        for g in roots:
            if not (lo < g < hi) or not math.isfinite(g):
                continue
            try:
                val = lambda_max_analytic(g, t)
            except NumericalError:
                continue
            if best is None or val < best[1]:
                best = (g, val)
        if best is not None:
            return best[0], False
    return bounded_gamma_search(t), True


def singularity_measure(rotated: PhaseCycleSet, x_c: float) -> float:
    """Smallest |Phi_1| + |Phi_2| over the two adjacent pairings of an N=4 set.

    Phi is the inclination of the line through the ellipse center and the
    midpoint of a sample pair. Conjugate-symmetric samples are adjacent in
    increment order, and which adjacent pairing is conjugate depends on theta0,
    so both pairings are tried.
    """
    pts = rotated.points
    best = math.inf
    for pairing in (((0, 1), (2, 3)), ((1, 2), (3, 0))):
        total = 0.0
        for i, j in pairing:
            mid = 0.5 * (pts[i] + pts[j])
            dx = mid.real - x_c
            total += abs(math.atan(mid.imag / dx)) if dx != 0 else math.pi / 2
        best = min(best, total)
    return best


def detect_singularity(rotated: PhaseCycleSet, x_c: float) -> bool:
    if rotated.n != 4:
        return False
    return singularity_measure(rotated, x_c) < SINGULAR_THRESHOLD


def _fit_at(gamma: float, via_search: bool, dm: DesignMatrices, q_abs: float):
    lam, u = solve_u(gamma, dm)
    h = h_opt(gamma, u, dm)
    g = h - gamma * gamma * q_abs * q_abs * u[0]
    if not g < 0:
        raise NumericalError("non-ellipse fit: g* >= 0")
    if not u[0] > 0:
        raise NumericalError("non-ellipse fit: c1 <= 0")
    return gamma, via_search, lam, u, h, g


def _feasible_scan(dm: DesignMatrices, q_abs: float):
    """Lowest-cost feasible gamma on the search grid; used when the regular path fails."""
    best = None
    for gamma in np.linspace(*GAMMA_SEARCH_BOUNDS, _COARSE_POINTS):
        try:
            cand = _fit_at(float(gamma), True, dm, q_abs)
        except NumericalError:
            continue
        if best is None or cand[2] < best[2]:
            best = cand
    if best is None:
        raise NumericalError("non-ellipse fit: no feasible gamma")
    return best


def celf_fit(pc: PhaseCycleSet) -> CelfFit:
    """Fit the constrained ellipse to one phase-cycled set.

    Underdetermined N=4 sets (conjugate-symmetric samples) still return a fit,
    flagged ``singular``; the caller decides whether to trust it.
    """
    if pc.n < 4 or pc.n % 2:
        raise ValueError(f"CELF needs an even number N >= 4 of samples, got {pc.n}")
    q = cross_point(pc)
    phi = central_line_angle(q)
    rotated = back_rotate(pc, phi)
    q_abs = abs(q)
    dm = assemble_matrices(rotated, q_abs)
    t = t_coefficients(dm)
    try:
        gamma, via_search = gamma_star(t, dm)
        sol = _fit_at(gamma, via_search, dm, q_abs)
    except NumericalError:
        sol = _feasible_scan(dm, q_abs)
    gamma, via_search, lam, u, h, g = sol
    x_c = gamma * q_abs
    return CelfFit(
        u_star=u,
        h_star=h,
        gamma_star=gamma,
        g_star=g,
        x_c_star=x_c,
        r_min=math.sqrt(-g / u[0]),
        r_maj=math.sqrt(-g / u[1]),
        q_abs=q_abs,
        phi=phi,
        singular=detect_singularity(rotated, x_c),
        gamma_via_search=via_search,
        lambda_max=lam,
        q=q,
        rotated=rotated,
    )
