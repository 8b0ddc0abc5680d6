"""Phase-cycled bSSFP forward model and the analytic ellipse it traces.

Signal after excitation, for off-resonance phase theta = theta0 - delta_theta::

    S_base = M (1 - a exp(i theta)) / (1 - b cos theta)

with a = E2, E1 = exp(-TR/T1), E2 = exp(-TR/T2) and::

    den = 1 - E1 cos(alpha) - E2^2 (E1 - cos(alpha))
    b   = E2 (1 - E1)(1 + cos(alpha)) / den
    M   = M0 (1 - E1) sin(alpha) / den

The measured sample at TE is K M exp(-TE/T2) (...) exp(i phi). Chemical shift
is not modelled separately; it is absorbed into theta0 and phi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from celf.errors import NumericalError
from celf.geometry import EllipseCanonical, PhaseCycleSet

_DEGENERATE = 1e-15


@dataclass(frozen=True)
class TissueParams:
    t1_ms: float
    t2_ms: float
    m0: float = 1.0
    name: str = ""

    def __post_init__(self) -> None:
        if not self.t1_ms > 0:
            raise ValueError(f"t1_ms must be > 0, got {self.t1_ms}")
        if not self.t2_ms > 0:
            raise ValueError(f"t2_ms must be > 0, got {self.t2_ms}")
        if not self.m0 >= 0:
            raise ValueError(f"m0 must be >= 0, got {self.m0}")


# relaxation times at 3T used throughout the simulation experiments
TISSUES: dict[str, TissueParams] = {
    t.name: t
    for t in (
        TissueParams(350.0, 130.0, 1.0, "fat"),
        TissueParams(370.0, 50.0, 1.0, "bone_marrow"),
        TissueParams(800.0, 40.0, 1.0, "liver"),
        TissueParams(1000.0, 80.0, 1.0, "white_matter"),
        TissueParams(1150.0, 45.0, 1.0, "myocardium"),
        TissueParams(1200.0, 50.0, 1.0, "vessels"),
        TissueParams(1300.0, 110.0, 1.0, "gray_matter"),
        TissueParams(1400.0, 30.0, 1.0, "muscle"),
        TissueParams(4000.0, 1000.0, 1.0, "csf"),
    )
}


def equispaced_increments(n: int) -> tuple[float, ...]:
    return tuple(2.0 * math.pi * k / n for k in range(n))


@dataclass(frozen=True)
class SequenceParams:
    """Acquisition settings. ``delta_theta_rad`` defaults to N equispaced increments."""

    tr_ms: float
    te_ms: float
    flip_rad: float
    n_cycles: int = 4
    delta_theta_rad: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.tr_ms > 0:
            raise ValueError(f"tr_ms must be > 0, got {self.tr_ms}")
        if not 0 < self.te_ms <= self.tr_ms:
            raise ValueError(f"need 0 < te_ms <= tr_ms, got te={self.te_ms}, tr={self.tr_ms}")
        if not 0 < self.flip_rad < math.pi:
            raise ValueError(f"flip_rad must lie in (0, pi), got {self.flip_rad}")
        if self.n_cycles < 4 or self.n_cycles % 2:
            raise ValueError(f"n_cycles must be even and >= 4, got {self.n_cycles}")
        if not self.delta_theta_rad:
            object.__setattr__(self, "delta_theta_rad", equispaced_increments(self.n_cycles))
        else:
            dth = tuple(float(v) for v in self.delta_theta_rad)
            if len(dth) != self.n_cycles:
                raise ValueError(
                    f"delta_theta_rad has {len(dth)} entries, expected {self.n_cycles}"
                )
            object.__setattr__(self, "delta_theta_rad", dth)

    @classmethod
    def from_degrees(
        cls, tr_ms: float, te_ms: float, flip_deg: float, n_cycles: int = 4
    ) -> "SequenceParams":
        return cls(tr_ms, te_ms, math.radians(flip_deg), n_cycles)

    def with_increments(self, delta_theta_rad: ArrayLike) -> "SequenceParams":
        dth = tuple(float(v) for v in np.ravel(delta_theta_rad))
        return SequenceParams(self.tr_ms, self.te_ms, self.flip_rad, len(dth), dth)


@dataclass(frozen=True)
class SignalParams:
    """(M, a, b) of the elliptical signal model.

    ``te_decay`` carries exp(-TE/T2); it multiplies every measured sample and is
    treated as part of the complex scale when fitting.
    """

    big_m: float
    a: float
    b: float
    te_decay: float = 1.0

    @property
    def gamma_ideal(self) -> float:
        """Ratio of ellipse-center distance to cross-point distance, (1-ab)/(1-b^2)."""
        return (1.0 - self.a * self.b) / (1.0 - self.b * self.b)

    @property
    def is_vertical(self) -> bool:
        return self.b < 2.0 * self.a / (1.0 + self.a * self.a)


@dataclass(frozen=True)
class AcquisitionSite:
    theta0_rad: float = 0.0
    phi_rad: float = 0.0
    scale: complex = 1.0 + 0.0j
    noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def _relaxation_terms(t1_ms: float, t2_ms: float, tr_ms: float, flip_rad: float):
    e1 = math.exp(-tr_ms / t1_ms)
    e2 = math.exp(-tr_ms / t2_ms)
    cos_a = math.cos(flip_rad)
    den = 1.0 - e1 * cos_a - e2 * e2 * (e1 - cos_a)
    return e1, e2, cos_a, den


def steady_state_m(t1_ms: float, t2_ms: float, m0: float, tr_ms: float, flip_rad: float) -> float:
    """M of the signal model at a given flip angle (no TE decay)."""
    e1, _, _, den = _relaxation_terms(t1_ms, t2_ms, tr_ms, flip_rad)
    if abs(den) < _DEGENERATE:
        raise NumericalError("degenerate signal model")
    return m0 * (1.0 - e1) * math.sin(flip_rad) / den


def compute_signal_params(
    tissue: TissueParams,
    seq: SequenceParams,
    actual_flip_rad: float | None = None,
) -> SignalParams:
    flip = seq.flip_rad if actual_flip_rad is None else float(actual_flip_rad)
    if not 0 < flip < math.pi:
        raise ValueError(f"actual flip must lie in (0, pi), got {flip}")
    e1, e2, cos_a, den = _relaxation_terms(tissue.t1_ms, tissue.t2_ms, seq.tr_ms, flip)
    if abs(den) < _DEGENERATE:
        raise NumericalError("degenerate signal model")
    b = e2 * (1.0 - e1) * (1.0 + cos_a) / den
    big_m = tissue.m0 * (1.0 - e1) * math.sin(flip) / den
    return SignalParams(big_m, e2, b, math.exp(-seq.te_ms / tissue.t2_ms))


def simulate_measurement(
    sp: SignalParams,
    site: AcquisitionSite,
    seq: SequenceParams,
    delta_theta: float,
) -> complex:
    theta = site.theta0_rad - delta_theta
    den = 1.0 - sp.b * math.cos(theta)
    if abs(den) < _DEGENERATE:
        raise NumericalError("degenerate signal model: 1 - b cos(theta) vanishes")
    base = sp.big_m * (1.0 - sp.a * complex(math.cos(theta), math.sin(theta))) / den
    rot = complex(math.cos(site.phi_rad), math.sin(site.phi_rad))
    return complex(site.scale) * sp.te_decay * base * rot


def snr(points: ArrayLike, sigma: float) -> float:
    """SNR = sum |S_n| / (N sigma)."""
    mags = np.abs(np.asarray(points, dtype=np.complex128))
    if sigma <= 0:
        return math.inf
    return float(mags.sum() / (mags.size * sigma))


def add_noise(
    points: NDArray[np.complex128], sigma: float, rng: np.random.Generator
) -> NDArray[np.complex128]:
    """Add i.i.d. Gaussian noise of std ``sigma`` to real and imaginary parts."""
    z = rng.standard_normal((2, points.size))
    return points + sigma * (z[0] + 1j * z[1])


def simulate_phase_cycle_set(
    tissue: TissueParams,
    seq: SequenceParams,
    site: AcquisitionSite,
    rng_seed: int | None = None,
    actual_flip_rad: float | None = None,
) -> PhaseCycleSet:
    """Simulate one phase-cycled measurement set.

    Noise (PCG64 stream seeded with ``rng_seed``) is added after the coil
    scale, so ``noise_sigma`` is in measured-signal units. The recorded SNR
    uses the noise-free magnitudes.
    """
    sp = compute_signal_params(tissue, seq, actual_flip_rad)
    clean = np.array(
        [simulate_measurement(sp, site, seq, d) for d in seq.delta_theta_rad],
        dtype=np.complex128,
    )
    pts = clean
    if site.noise_sigma > 0:
        pts = add_noise(clean, site.noise_sigma, np.random.default_rng(rng_seed))
    return PhaseCycleSet.from_samples(pts, seq.delta_theta_rad, snr=snr(clean, site.noise_sigma))


def ellipse_from_signal_params(sp: SignalParams) -> EllipseCanonical:
    """Geometry of the base ellipse S_base (no TE decay, scale or rotation)."""
    if not sp.b < 1:
        raise ValueError(f"b must be < 1, got {sp.b}")
    one_b2 = 1.0 - sp.b * sp.b
    r_tan = sp.big_m * sp.a / math.sqrt(one_b2)
    r_rad = sp.big_m * abs(sp.a - sp.b) / one_b2
    center = sp.big_m * (1.0 - sp.a * sp.b) / one_b2
    if r_rad <= r_tan:
        return EllipseCanonical(complex(center, 0.0), r_tan, r_rad, 0.0)
    # horizontal ellipse (outside the physical regime): major axis on the central line
    return EllipseCanonical(complex(center, 0.0), r_rad, r_tan, math.pi / 2)
