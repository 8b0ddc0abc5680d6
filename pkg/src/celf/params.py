"""From fitted ellipse geometry to (a, b, M), T1/T2, off-resonance and synthetic images."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from celf.dictionary import EllipseDictionary, identify
from celf.errors import NumericalError
from celf.fitting import CelfFit, celf_fit
from celf.geometry import PhaseCycleSet, back_rotate, central_line_angle, cross_point
from celf.signal_model import SequenceParams, steady_state_m


class NonphysicalError(NumericalError):
    """Geometry or model parameters outside the physically admissible region."""


class Validity(str, enum.Enum):
    OK = "ok"
    SINGULAR_LOWCONF = "singular_lowconf"
    NONPHYSICAL = "nonphysical"


@dataclass(frozen=True)
class OffResSolve:
    k1: float
    k2: float
    theta0_rad: float
    cos_theta_i: tuple[float, ...]
    # largest amount by which an unclamped cos(theta_i) left [-1, 1]
    clamp_excess: float = 0.0


@dataclass(frozen=True)
class Estimates:
    """Per-voxel result.

    ``t1_ms``/``t2_ms`` are the final (post-dictionary when a dictionary was
    used) values; ``t1_fit_ms``/``t2_fit_ms`` come straight from the fitted
    geometry. Nonphysical relaxation times are kept as computed (possibly
    negative or NaN) so callers can see them; maps store NaN instead.
    """

    t1_ms: float
    t2_ms: float
    off_resonance_hz: float
    banding_free: complex
    a_star: float
    b_star: float
    m_star: float
    validity: Validity
    t1_fit_ms: float = math.nan
    t2_fit_ms: float = math.nan
    flip_rad: float = math.nan
    dict_index: int = -1
    gamma_via_search: bool = False
    singular: bool = False
    offres: OffResSolve | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.validity is Validity.OK


def ellipse_to_model(x_c: float, r_min: float, r_maj: float) -> tuple[float, float, float]:
    """Invert the ellipse property formulas: (x_c, r_min, r_maj) -> (a*, b*, M*)."""
    if not x_c > 0:
        raise NonphysicalError(f"center distance must be positive, got {x_c}")
    rad = x_c * x_c - r_min * r_min + r_maj * r_maj
    if rad < 0:
        raise NonphysicalError("negative radicand in ellipse inversion")
    b = (-r_min * x_c + r_maj * math.sqrt(rad)) / (x_c * x_c + r_maj * r_maj)
    if not -1.0 < b < 1.0:
        raise NonphysicalError(f"b* = {b} outside (-1, 1)")
    a = r_maj / (x_c * math.sqrt(1.0 - b * b) + r_maj * b)
    if not 0.0 < a < 1.0:
        raise NonphysicalError(f"a* = {a} outside (0, 1)")
    m = x_c * (1.0 - b * b) / (1.0 - a * b)
    return a, b, m


def relaxation_times(a: float, b: float, flip_rad: float, tr_ms: float) -> tuple[float, float]:
    """Analytic T1, T2 from (a*, b*). Negative values signal nonphysical input."""
    if not 0.0 < a < 1.0:
        raise NonphysicalError(f"a* = {a} outside (0, 1)")
    if not 0.0 < flip_rad < math.pi:
        raise ValueError(f"flip must lie in (0, pi), got {flip_rad}")
    c = math.cos(flip_rad)
    num = a * (1.0 + c - a * b * c) - b
    den = a * (1.0 + c - a * b) - b * c
    if den == 0 or not num / den > 0:
        raise NonphysicalError("T1 logarithm argument is not positive")
    ln_e1 = math.log(num / den)
    t1 = -tr_ms / ln_e1 if ln_e1 != 0 else math.inf
    return t1, -tr_ms / math.log(a)


def off_resonance(
    rotated_x: ArrayLike,
    x_c: float,
    r_min: float,
    b_star: float,
    delta_thetas: ArrayLike,
    tr_ms: float,
) -> tuple[OffResSolve, float]:
    """Least-squares off-resonance from the back-rotated real coordinates.

    Each point gives cos(theta_i) through rho = (x_i - x_c)/r_min and
    cos(theta_i) = (rho - b)/(rho b - 1); theta_i = theta0 - delta_theta_i is
    then regressed on (cos, sin) of the increments. Noise can push cos(theta_i)
    past +-1; such values are clamped and the excess is reported.
    """
    x = np.asarray(rotated_x, dtype=np.float64)
    dth = np.asarray(delta_thetas, dtype=np.float64)
    if x.size < 2 or x.size != dth.size:
        raise ValueError("need at least two points with matching increments")
    if not r_min > 0:
        raise NonphysicalError("zero semi-minor axis")
    rho = (x - x_c) / r_min
    cos_t = (rho - b_star) / (rho * b_star - 1.0)
    excess = float(np.max(np.abs(cos_t)) - 1.0)
    cos_t = np.clip(cos_t, -1.0, 1.0)
    lhs = np.column_stack([np.cos(dth), np.sin(dth)])
    if np.linalg.matrix_rank(lhs) < 2:
        raise NumericalError("off-resonance system is rank deficient")
    (k1, k2), *_ = np.linalg.lstsq(lhs, cos_t, rcond=None)
    theta0 = math.atan2(k2, k1)
    solve = OffResSolve(float(k1), float(k2), theta0, tuple(cos_t.tolist()), max(excess, 0.0))
    return solve, theta0 / (2.0 * math.pi * tr_ms * 1e-3)


def synthesize_flip(
    estimates: Estimates, seq: SequenceParams, target_flips: ArrayLike
) -> NDArray[np.complex128]:
    """Banding-free signal the same voxel would give at other flip angles."""
    if not estimates.ok:
        raise ValueError(f"cannot synthesize from a {estimates.validity.value} estimate")
    flip0 = seq.flip_rad if math.isnan(estimates.flip_rad) else estimates.flip_rad
    t1, t2 = estimates.t1_ms, estimates.t2_ms
    ref = steady_state_m(t1, t2, 1.0, seq.tr_ms, flip0)
    if ref == 0:
        raise NumericalError("degenerate signal model")
    m0_eff = estimates.banding_free / ref
    return np.array(
        [m0_eff * steady_state_m(t1, t2, 1.0, seq.tr_ms, float(f)) for f in np.ravel(target_flips)],
        dtype=np.complex128,
    )


def _validity(t1: float, t2: float, singular: bool) -> Validity:
    if not (math.isfinite(t1) and math.isfinite(t2) and t1 > 0 and t2 > 0):
        return Validity.NONPHYSICAL
    return Validity.SINGULAR_LOWCONF if singular else Validity.OK


def nonphysical(flip: float, **extra) -> Estimates:
    nan = math.nan
    return Estimates(nan, nan, extra.pop("off_resonance_hz", nan), complex(nan, nan),
                     nan, nan, nan, Validity.NONPHYSICAL, flip_rad=flip, **extra)


def estimate_celf(
    pc: PhaseCycleSet,
    seq: SequenceParams,
    actual_flip: float | None = None,
    dictionary: EllipseDictionary | None = None,
    geometry_fit: CelfFit | None = None,
) -> Estimates:
    """Full CELF estimate for one voxel.

    ``geometry_fit`` supplies the ellipse shape from elsewhere (the 3x3
    aggregate for singular voxels); its |q|-normalised geometry is rescaled by
    this voxel's own cross-point. Off-resonance and the banding-free value
    always come from the voxel's own samples.
    """
    flip = seq.flip_rad if actual_flip is None else float(actual_flip)
    own = celf_fit(pc) if geometry_fit is None else None
    shape = own if own is not None else geometry_fit
    if own is not None:
        q, phi, rotated = own.q, own.phi, own.rotated
    else:
        q = cross_point(pc)
        phi = central_line_angle(q)
        rotated = back_rotate(pc, phi)
    q_abs = abs(q)
    r_maj_n, r_min_n, x_c_n = shape.normalized_geometry
    x_c, r_min, r_maj = x_c_n * q_abs, r_min_n * q_abs, r_maj_n * q_abs
    singular = own is not None and own.singular

    try:
        a, b, m = ellipse_to_model(x_c, r_min, r_maj)
        t1_fit, t2_fit = relaxation_times(a, b, flip, seq.tr_ms)
    except NonphysicalError:
        a = b = m = t1_fit = t2_fit = math.nan

    t1, t2, idx = t1_fit, t2_fit, -1
    if dictionary is not None:
        t1d, t2d, idx = identify(dictionary, shape)
        i = idx
        try:
            a, b, m = ellipse_to_model(
                dictionary.center[i] * q_abs, dictionary.r_min[i] * q_abs, dictionary.r_maj[i] * q_abs
            )
        except NonphysicalError:
            a = b = m = math.nan
        if math.isclose(dictionary.flip_rad, flip, rel_tol=0, abs_tol=1e-12):
            t1, t2 = t1d, t2d
        else:
            try:
                t1, t2 = relaxation_times(a, b, flip, seq.tr_ms)
            except NonphysicalError:
                t1 = t2 = math.nan

    validity = _validity(t1, t2, singular)
    if math.isnan(b):
        return nonphysical(flip, t1_fit_ms=t1_fit, t2_fit_ms=t2_fit, dict_index=idx,
                           gamma_via_search=shape.gamma_via_search, singular=singular)
    solve, df0 = off_resonance(rotated.points.real, x_c, r_min, b, rotated.delta_theta, seq.tr_ms)
    return Estimates(
        t1_ms=t1,
        t2_ms=t2,
        off_resonance_hz=df0,
        banding_free=m * complex(math.cos(phi), math.sin(phi)),
        a_star=a,
        b_star=b,
        m_star=m,
        validity=validity,
        t1_fit_ms=t1_fit,
        t2_fit_ms=t2_fit,
        flip_rad=flip,
        dict_index=idx,
        gamma_via_search=shape.gamma_via_search,
        singular=singular,
        offres=solve,
    )
