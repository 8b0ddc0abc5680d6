"""Ellipse representations, the geometric cross-point and back-rotation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from celf.errors import NumericalError

TWO_PI = 2.0 * math.pi
_PAIR_TOL = 1e-9
_COND_LIMIT = 1e12


def _wrap_2pi(x: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.mod(x, TWO_PI)


@dataclass(frozen=True, eq=False)
class PhaseCycleSet:
    """N complex phase-cycled samples with their RF phase increments.

    ``pairs`` lists index pairs whose increments differ by pi. Sets built with
    :meth:`from_samples` are sorted by increment and paired as (i, i + N/2);
    sets built with :meth:`concatenate` keep the pairing of each member.
    """

    points: NDArray[np.complex128]
    delta_theta: NDArray[np.float64]
    pairs: NDArray[np.int64]
    snr: float | None = field(default=None)

    @classmethod
    def from_samples(
        cls,
        points: ArrayLike,
        delta_theta: ArrayLike,
        snr: float | None = None,
    ) -> "PhaseCycleSet":
        pts = np.asarray(points, dtype=np.complex128).ravel()
        dth = np.asarray(delta_theta, dtype=np.float64).ravel()
        if pts.shape != dth.shape:
            raise ValueError(
                f"points and delta_theta differ in length: {pts.size} vs {dth.size}"
            )
        n = pts.size
        if n < 2 or n % 2:
            raise ValueError(f"need an even number of phase cycles, got {n}")
        order = np.argsort(_wrap_2pi(dth), kind="stable")
        pts = pts[order]
        dth = dth[order]
        m = n // 2
        pairs = np.column_stack([np.arange(m), np.arange(m) + m]).astype(np.int64)
        sep = _wrap_2pi(dth[pairs[:, 1]] - dth[pairs[:, 0]])
        if np.any(np.abs(sep - math.pi) > _PAIR_TOL):
            raise ValueError("phase increments i and i+N/2 are not pi-separated")
        return cls(pts, dth, pairs, snr)

    @classmethod
    def concatenate(cls, sets: Sequence["PhaseCycleSet"]) -> "PhaseCycleSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        offsets = np.cumsum([0] + [s.n for s in sets[:-1]])
        return cls(
            np.concatenate([s.points for s in sets]),
            np.concatenate([s.delta_theta for s in sets]),
            np.concatenate([s.pairs + off for s, off in zip(sets, offsets)]),
            None,
        )

    @property
    def n(self) -> int:
        return int(self.points.size)

    def scaled(self, factor: complex) -> "PhaseCycleSet":
        return PhaseCycleSet(self.points * factor, self.delta_theta, self.pairs, self.snr)

    def subset(self, delta_theta: Sequence[float]) -> "PhaseCycleSet":
        """Select the samples whose increments match ``delta_theta`` (mod 2 pi)."""
        have = _wrap_2pi(self.delta_theta)
        idx = []
        for want in _wrap_2pi(np.asarray(delta_theta, dtype=np.float64)):
            diff = np.abs(np.angle(np.exp(1j * (have - want))))
            k = int(np.argmin(diff))
            if diff[k] > 1e-6:
                raise ValueError(f"phase increment {want:.6f} rad not present in set")
            idx.append(k)
        return PhaseCycleSet.from_samples(self.points[idx], self.delta_theta[idx])


@dataclass(frozen=True)
class EllipseQuadratic:
    """Conic nu1 x^2 + nu2 xy + nu3 y^2 + nu4 x + nu5 y + nu6 = 0."""

    nu: tuple[float, float, float, float, float, float]

    def __post_init__(self) -> None:
        if len(self.nu) != 6:
            raise ValueError("a conic needs exactly 6 coefficients")
        object.__setattr__(self, "nu", tuple(float(v) for v in self.nu))

    @property
    def discriminant(self) -> float:
        n1, n2, n3 = self.nu[:3]
        return 4.0 * n1 * n3 - n2 * n2

    def is_ellipse(self) -> bool:
        return self.discriminant > 0.0

    def evaluate(self, points: ArrayLike) -> NDArray[np.float64]:
        z = np.asarray(points, dtype=np.complex128)
        x, y = z.real, z.imag
        n1, n2, n3, n4, n5, n6 = self.nu
        return n1 * x * x + n2 * x * y + n3 * y * y + n4 * x + n5 * y + n6


@dataclass(frozen=True)
class EllipseCanonical:
    """Center, semi-axes and orientation of an ellipse.

    ``orientation_rad`` is the direction of the semi-minor axis, in [0, pi).
    For a bSSFP ellipse that axis lies on the central line, so the base
    (vertical) ellipse has orientation 0.
    """

    center: complex
    r_maj: float
    r_min: float
    orientation_rad: float = 0.0

    def __post_init__(self) -> None:
        if self.r_min < 0 or self.r_maj < self.r_min:
            raise ValueError(
                f"need r_maj >= r_min >= 0, got r_maj={self.r_maj}, r_min={self.r_min}"
            )

    @property
    def degenerate(self) -> bool:
        return self.r_min == 0.0

    @property
    def eccentricity(self) -> float:
        if self.r_maj == 0:
            return 0.0
        return math.sqrt(max(0.0, 1.0 - (self.r_min / self.r_maj) ** 2))

    def residual(self, points: ArrayLike) -> NDArray[np.float64]:
        """Implicit-equation residual ((u/r_min)^2 + (v/r_maj)^2 - 1) in the ellipse frame."""
        z = (np.asarray(points, dtype=np.complex128) - self.center) * np.exp(
            -1j * self.orientation_rad
        )
        return (z.real / self.r_min) ** 2 + (z.imag / self.r_maj) ** 2 - 1.0


def canonical_from_quadratic(e: EllipseQuadratic) -> EllipseCanonical:
    n1, n2, n3, n4, n5, n6 = e.nu
    disc = 4.0 * n1 * n3 - n2 * n2
    if not disc > 0:
        raise ValueError(f"coefficients do not describe an ellipse (4ac-b^2={disc:.3g})")
    # solve grad f = 0 for the center
    xc = (n2 * n5 - 2.0 * n3 * n4) / disc
    yc = (n2 * n4 - 2.0 * n1 * n5) / disc
    g = n6 + 0.5 * (n4 * xc + n5 * yc)
    # eigenvalues of [[n1, n2/2], [n2/2, n3]]
    mean = 0.5 * (n1 + n3)
    half = 0.5 * math.hypot(n1 - n3, n2)
    lam_small, lam_big = mean - half, mean + half
    if lam_small < 0:
        lam_small, lam_big, g = -lam_big, -lam_small, -g
    if not g < 0:
        raise ValueError("conic is an imaginary or point ellipse")
    r_maj = math.sqrt(-g / lam_small)
    r_min = math.sqrt(-g / lam_big)
    # direction of the largest-eigenvalue eigenvector (semi-minor axis)
    if n1 + n3 < 0:
        n1, n2, n3 = -n1, -n2, -n3
    orientation = math.fmod(0.5 * math.atan2(n2, n1 - n3) + math.pi, math.pi)
    if orientation >= math.pi:
        orientation -= math.pi
    return EllipseCanonical(complex(xc, yc), r_maj, r_min, orientation)


def quadratic_from_canonical(e: EllipseCanonical) -> EllipseQuadratic:
    if e.r_min <= 0:
        raise ValueError("degenerate ellipse has no quadratic form")
    c, s = math.cos(e.orientation_rad), math.sin(e.orientation_rad)
    rot = np.array([[c, -s], [s, c]])
    a_mat = rot @ np.diag([e.r_min**-2, e.r_maj**-2]) @ rot.T
    ctr = np.array([e.center.real, e.center.imag])
    lin = -2.0 * a_mat @ ctr
    const = float(ctr @ a_mat @ ctr) - 1.0
    return EllipseQuadratic(
        (a_mat[0, 0], 2.0 * a_mat[0, 1], a_mat[1, 1], lin[0], lin[1], const)
    )


def cross_point(pc: PhaseCycleSet) -> complex:
    """Least-squares intersection of the chords joining pi-separated samples."""
    p = pc.points[pc.pairs[:, 0]]
    r = pc.points[pc.pairs[:, 1]]
    lhs = np.column_stack([r.imag - p.imag, p.real - r.real])
    rhs = p.real * r.imag - r.real * p.imag
    normal = lhs.T @ lhs
    if not np.all(np.isfinite(normal)) or np.linalg.cond(normal) > _COND_LIMIT:
        raise NumericalError("degenerate pairing: chord directions are (nearly) parallel")
    x0, y0 = np.linalg.solve(normal, lhs.T @ rhs)
    return complex(x0, y0)


def central_line_angle(q: complex) -> float:
    if q == 0:
        raise NumericalError("cross-point at origin")
    return math.atan2(q.imag, q.real)


def back_rotate(pc: PhaseCycleSet, phi: float) -> PhaseCycleSet:
    return pc.scaled(complex(math.cos(phi), -math.sin(phi)))
