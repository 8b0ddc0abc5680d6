import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from celf.geometry import back_rotate
from celf.signal_model import (
    TISSUES,
    AcquisitionSite,
    SequenceParams,
    SignalParams,
    TissueParams,
    compute_signal_params,
    ellipse_from_signal_params,
    simulate_measurement,
    simulate_phase_cycle_set,
    snr,
)

from conftest import WM, noise_free


def test_white_matter_params(seq4):
    sp = compute_signal_params(WM, seq4)
    # independent scalar evaluation
    e1, e2, c = math.exp(-8 / 1000), math.exp(-8 / 80), math.cos(math.radians(40))
    den = 1 - e1 * c - e2**2 * (e1 - c)
    assert sp.a == pytest.approx(e2, rel=1e-15)
    assert sp.b == pytest.approx(e2 * (1 - e1) * (1 + c) / den, rel=1e-14)
    assert sp.big_m == pytest.approx((1 - e1) * math.sin(math.radians(40)) / den, rel=1e-14)
    assert (round(sp.a, 5), round(sp.b, 4), round(sp.big_m, 4)) == (0.90484, 0.2314, 0.0931)


def test_tiny_tr_limit():
    seq = SequenceParams(1e-9, 1e-9, math.radians(40))
    assert compute_signal_params(WM, seq).a == pytest.approx(1.0, abs=1e-10)


def test_measurement_special_cases(seq4):
    sp = compute_signal_params(WM, seq4)
    m = sp.big_m * sp.te_decay
    z0 = simulate_measurement(sp, AcquisitionSite(0.0), seq4, 0.0)
    assert z0 == pytest.approx(m * (1 - sp.a) / (1 - sp.b), rel=1e-14)
    assert abs(z0.imag) < 1e-17
    zpi = simulate_measurement(sp, AcquisitionSite(math.pi), seq4, 0.0)
    assert zpi.real == pytest.approx(m * (1 + sp.a) / (1 + sp.b), rel=1e-14)
    assert abs(zpi.imag) < 1e-15


def test_measurement_matches_high_precision(seq4):
    mpmath.mp.dps = 40
    t1, t2, tr, te = map(mpmath.mpf, (1000, 80, 8, 4))
    alpha = mpmath.radians(40)
    e1, e2 = mpmath.exp(-tr / t1), mpmath.exp(-tr / t2)
    den = 1 - e1 * mpmath.cos(alpha) - e2**2 * (e1 - mpmath.cos(alpha))
    b = e2 * (1 - e1) * (1 + mpmath.cos(alpha)) / den
    m = (1 - e1) * mpmath.sin(alpha) / den
    theta = mpmath.mpf("0.3") - mpmath.pi / 2
    ref = m * mpmath.exp(-te / t2) * (1 - e2 * mpmath.expj(theta)) / (1 - b * mpmath.cos(theta))
    got = simulate_measurement(compute_signal_params(WM, seq4), AcquisitionSite(0.3), seq4, math.pi / 2)
    assert abs(got - complex(ref)) < 1e-13 * abs(complex(ref))


def test_noise_free_points_on_ellipse():
    pc, seq = noise_free(n=8, theta0=1.1)
    sp = compute_signal_params(WM, seq)
    e = ellipse_from_signal_params(sp)
    base = pc.scaled(1 / sp.te_decay)
    assert np.max(np.abs(e.residual(base.points))) < 1e-12


def test_snr_constant_magnitude():
    pts = 3.0 * np.exp(1j * np.linspace(0, 5, 6))
    assert snr(pts, 3.0 / 20) == pytest.approx(20.0)


def test_seeded_sets_are_identical(seq4):
    site = AcquisitionSite(0.3, 0.2, 1.0, 0.01)
    a = simulate_phase_cycle_set(WM, seq4, site, rng_seed=11)
    b = simulate_phase_cycle_set(WM, seq4, site, rng_seed=11)
    assert a.points.tobytes() == b.points.tobytes()
    c = simulate_phase_cycle_set(WM, seq4, site, rng_seed=12)
    assert a.points.tobytes() != c.points.tobytes()


def test_ellipse_center_and_degenerate(seq4):
    sp = compute_signal_params(WM, seq4)
    e = ellipse_from_signal_params(sp)
    assert e.center.real == pytest.approx(sp.big_m * (1 - sp.a * sp.b) / (1 - sp.b**2), rel=1e-15)
    assert e.r_maj >= e.r_min
    flat = ellipse_from_signal_params(SignalParams(1.0, 0.5, 0.5))
    assert flat.r_min == 0 and flat.degenerate
    with pytest.raises(ValueError):
        ellipse_from_signal_params(SignalParams(1.0, 0.5, 1.0))


@pytest.mark.parametrize("name", sorted(TISSUES))
def test_tissues_are_vertical(name, seq4):
    assert compute_signal_params(TISSUES[name], seq4).is_vertical


def test_validation():
    with pytest.raises(ValueError):
        TissueParams(-1, 10)
    with pytest.raises(ValueError):
        SequenceParams(8, 9, 0.5)
    with pytest.raises(ValueError):
        SequenceParams(8, 4, 0.5, n_cycles=5)
    with pytest.raises(ValueError):
        AcquisitionSite(noise_sigma=-1)
    with pytest.raises(ValueError):
        compute_signal_params(WM, SequenceParams(8, 4, 0.5), actual_flip_rad=math.pi)


def test_equispaced_default():
    seq = SequenceParams.from_degrees(8, 4, 40, 6)
    assert np.allclose(np.diff(seq.delta_theta_rad), 2 * math.pi / 6)
    assert seq.delta_theta_rad[0] == 0.0


def test_gamma_ideal_box():
    worst = (math.inf, -math.inf)
    for t1 in np.linspace(200, 5000, 9):
        for t2 in np.linspace(10, 1500, 9):
            if t2 > t1:
                continue
            for flip in np.radians(np.linspace(20, 80, 5)):
                for tr in (4.0, 7.0, 10.0):
                    g = compute_signal_params(TissueParams(t1, t2), SequenceParams(tr, tr / 2, flip)).gamma_ideal
                    worst = (min(worst[0], g), max(worst[1], g))
    assert 0.5 <= worst[0] and worst[1] <= 1.0


@settings(max_examples=60, deadline=None)
@given(
    t1=st.floats(50, 5000),
    ratio=st.floats(0.01, 1.0),
    flip=st.floats(0.05, 3.0),
    tr=st.floats(2, 20),
    theta0=st.floats(-math.pi, math.pi),
    phi=st.floats(-math.pi, math.pi),
    scale=st.floats(0.1, 10),
)
def test_property_points_on_model_ellipse(t1, ratio, flip, tr, theta0, phi, scale):
    tissue = TissueParams(t1, t1 * ratio)
    seq = SequenceParams(tr, tr / 2, flip, 6)
    sp = compute_signal_params(tissue, seq)
    assert 0 < sp.a < 1 and 0 <= sp.b < 1 and sp.big_m >= 0
    pc = simulate_phase_cycle_set(tissue, seq, AcquisitionSite(theta0, phi, scale))
    base = back_rotate(pc, phi).scaled(1 / (scale * sp.te_decay))
    e = ellipse_from_signal_params(sp)
    # residual precision degrades as |center| / r_min grows
    if e.r_min > 1e-4 * abs(e.center):
        assert np.max(np.abs(e.residual(base.points))) < 1e-6


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.01, 100), sigma=st.floats(1e-3, 1))
def test_property_snr_scale_invariant(c, sigma):
    pts = np.array([1 + 2j, -0.5 + 1j, 0.3 - 0.1j, 2.0])
    assert snr(c * pts, c * sigma) == pytest.approx(snr(pts, sigma), rel=1e-12)
