"""Direct (Fitzgibbon) ellipse fit and the PLANET-style baseline estimator."""

from __future__ import annotations

import enum
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray

from celf.errors import NumericalError
from celf.geometry import EllipseQuadratic, PhaseCycleSet, central_line_angle, cross_point
from celf.params import (
    Estimates,
    NonphysicalError,
    Validity,
    ellipse_to_model,
    nonphysical,
    off_resonance,
    relaxation_times,
)
from celf.signal_model import SequenceParams

# inverse of the 3x3 constraint block [[0, 0, 2], [0, -1, 0], [2, 0, 0]]
_C1_INV = np.array([[0.0, 0.0, 0.5], [0.0, -1.0, 0.0], [0.5, 0.0, 0.0]])


class PlanetVariant(str, enum.Enum):
    PHI_ROT = "rot"
    PHI_GS = "gs"


def _conic_matrix(nu) -> NDArray[np.float64]:
    n1, n2, n3, n4, n5, n6 = nu
    return np.array(
        [[n1, n2 / 2, n4 / 2], [n2 / 2, n3, n5 / 2], [n4 / 2, n5 / 2, n6]], dtype=np.float64
    )


def _conic_coeffs(a: NDArray[np.float64]) -> tuple[float, ...]:
    return (a[0, 0], 2 * a[0, 1], a[1, 1], 2 * a[0, 2], 2 * a[1, 2], a[2, 2])


def _transform(nu, h: NDArray[np.float64]) -> tuple[float, ...]:
    """Coefficients of the conic in coordinates p with p_old = h p (homogeneous)."""
    return _conic_coeffs(h.T @ _conic_matrix(nu) @ h)


def fitzgibbon_fit(points: ArrayLike) -> EllipseQuadratic:
    """Least-squares conic constrained to 4 nu1 nu3 - nu2^2 = 1.

    Uses the block reduction of the 6x6 scatter matrix to a 3x3 eigenproblem
    on centred and scaled coordinates, then maps the conic back.
    """
    z = np.asarray(points, dtype=np.complex128).ravel()
    if z.size < 6:
        raise ValueError(f"insufficient points: direct ellipse fit needs N >= 6, got {z.size}")
    shift = z.mean()
    scale = float(np.sqrt(np.mean(np.abs(z - shift) ** 2)))
    if not scale > 0:
        raise NumericalError("fit failed: all points coincide")
    w = (z - shift) / scale
    x, y = w.real, w.imag
    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("fit failed: points are collinear") from exc
    m = _C1_INV @ (s1 + s2 @ t)
    vals, vecs = np.linalg.eig(m)
    vecs = np.real(vecs)
    cond = 4 * vecs[0] * vecs[2] - vecs[1] ** 2
    cand = [k for k in range(3) if cond[k] > 0 and abs(np.imag(vals[k])) < 1e-9 * (1 + abs(vals[k]))]
    if not cand:
        raise NumericalError("fit failed: no elliptical eigenvector")
    design = np.column_stack([d1, d2])
    nus = [np.concatenate([vecs[:, k], t @ vecs[:, k]]) for k in cand]
    nu_n = min(nus, key=lambda v: float(np.linalg.norm(design @ v)) / float(np.linalg.norm(v)))
    # back to measurement coordinates: p_norm = h p
    h = np.array(
        [[1 / scale, 0, -shift.real / scale], [0, 1 / scale, -shift.imag / scale], [0, 0, 1.0]]
    )
    nu = np.array(_transform(nu_n, h))
    return EllipseQuadratic(tuple(nu / np.linalg.norm(nu)))


def rotate_conic(e: EllipseQuadratic, phi: float) -> EllipseQuadratic:
    """Conic of the point set after multiplying every point by exp(-i phi)."""
    c, s = math.cos(phi), math.sin(phi)
    h = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return EllipseQuadratic(_transform(e.nu, h))


def rotation_angle(e: EllipseQuadratic) -> float:
    """phi_rot = atan(nu2 / (nu1 - nu3)) / 2, then turned so the ellipse is vertical and on +x."""
    n1, n2, n3 = e.nu[:3]
    phi = 0.5 * math.atan(n2 / (n1 - n3)) if n1 != n3 else math.pi / 4
    r = rotate_conic(e, phi).nu
    if abs(r[0]) < abs(r[2]):  # x-extent larger than y-extent: horizontal
        phi += math.pi / 2
    centre_x, _ = _axis_aligned(rotate_conic(e, phi))[:2]
    if centre_x < 0:
        phi += math.pi
    return math.remainder(phi, 2 * math.pi)


def _axis_aligned(e: EllipseQuadratic) -> tuple[float, float, float, float]:
    """(x_c, y_c, semi-axis along x, semi-axis along y), ignoring any residual tilt."""
    n1, n2, n3, n4, n5, n6 = e.nu
    disc = 4 * n1 * n3 - n2 * n2
    if not disc > 0:
        raise NonphysicalError("fitted conic is not an ellipse")
    xc = (n2 * n5 - 2 * n3 * n4) / disc
    yc = (n2 * n4 - 2 * n1 * n5) / disc
    g = n6 + 0.5 * (n4 * xc + n5 * yc)
    if n1 < 0:
        n1, n3, g = -n1, -n3, -g
    if not g < 0:
        raise NonphysicalError("fitted conic is an imaginary ellipse")
    return xc, yc, math.sqrt(-g / n1), math.sqrt(-g / n3)


def _planet_offres(
    rotated: NDArray[np.complex128], y_c: float, dth, a, b, m, x_c, r_min, tr_ms
) -> float:
    rho = (rotated.real - x_c) / r_min
    cos_t = np.clip((rho - b) / (rho * b - 1.0), -1.0, 1.0)
    sin_t = -(rotated.imag - y_c) * (1.0 - b * cos_t) / (m * a)
    theta0 = np.angle(np.sum(np.exp(1j * (np.arctan2(sin_t, cos_t) + dth))))
    return float(theta0) / (2.0 * math.pi * tr_ms * 1e-3)


def planet_estimate(
    pc: PhaseCycleSet,
    seq: SequenceParams,
    actual_flip: float | None = None,
    variant: PlanetVariant | str = PlanetVariant.PHI_GS,
    celf_offres: bool = False,
) -> Estimates:
    """PLANET-style estimate: direct fit, back-rotation, analytic T1/T2.

    ``celf_offres`` swaps the per-point phase average for the CELF
    least-squares off-resonance step (the PLANET+df0 variant).
    """
    variant = PlanetVariant(variant)
    flip = seq.flip_rad if actual_flip is None else float(actual_flip)
    conic = fitzgibbon_fit(pc.points)
    if variant is PlanetVariant.PHI_GS:
        phi = central_line_angle(cross_point(pc))
    else:
        phi = rotation_angle(conic)
    try:
        x_c, y_c, r_x, r_y = _axis_aligned(rotate_conic(conic, phi))
        a, b, m = ellipse_to_model(x_c, r_x, r_y)
        t1, t2 = relaxation_times(a, b, flip, seq.tr_ms)
    except NonphysicalError:
        return nonphysical(flip)
    rotated = pc.points * complex(math.cos(phi), -math.sin(phi))
    if celf_offres:
        _, df0 = off_resonance(rotated.real, x_c, r_x, b, pc.delta_theta, seq.tr_ms)
    else:
        df0 = _planet_offres(rotated, y_c, pc.delta_theta, a, b, m, x_c, r_x, seq.tr_ms)
    validity = Validity.OK if (t1 > 0 and t2 > 0 and math.isfinite(t1)) else Validity.NONPHYSICAL
    return Estimates(
        t1_ms=t1,
        t2_ms=t2,
        off_resonance_hz=df0,
        banding_free=m * complex(math.cos(phi), math.sin(phi)),
        a_star=a,
        b_star=b,
        m_star=m,
        validity=validity,
        t1_fit_ms=t1,
        t2_fit_ms=t2,
        flip_rad=flip,
    )
