import math

import numpy as np
import pytest
import scipy.linalg

from celf.errors import NumericalError
from celf.geometry import EllipseQuadratic, canonical_from_quadratic
from celf.planet import (
    PlanetVariant,
    fitzgibbon_fit,
    planet_estimate,
    rotate_conic,
    rotation_angle,
)
from celf.signal_model import TISSUES

from conftest import WM, noise_free


def _naive_fitzgibbon(z):
    # original 6x6 scatter-matrix formulation
    x, y = z.real, z.imag
    d = np.column_stack([x * x, x * y, y * y, x, y, np.ones_like(x)])
    s = d.T @ d
    c = np.zeros((6, 6))
    c[0, 2] = c[2, 0] = 2.0
    c[1, 1] = -1.0
    w, v = scipy.linalg.eig(s, c)
    w = w.real
    k = int(np.flatnonzero(np.isfinite(w) & (w > 0))[0])
    a = v[:, k].real
    return a / np.linalg.norm(a)


def _same_conic(nu, ref):
    nu = np.asarray(nu) / np.linalg.norm(nu)
    return min(np.linalg.norm(nu - ref), np.linalg.norm(nu + ref))


def test_exact_ellipse():
    t = np.linspace(0, 2 * math.pi, 9)[:-1]
    pts = 2 * np.cos(t) + 1j * np.sin(t)
    e = fitzgibbon_fit(pts)
    assert np.max(np.abs(e.evaluate(pts))) < 1e-12
    c = canonical_from_quadratic(e)
    assert (c.r_maj, c.r_min) == pytest.approx((2.0, 1.0), rel=1e-12)


def test_matches_naive_formulation():
    rng = np.random.default_rng(5)
    for _ in range(20):
        t = np.sort(rng.uniform(0, 2 * math.pi, 10))
        pts = (3 + 1j) + (2 * np.cos(t) + 0.7j * np.sin(t)) * np.exp(0.4j)
        pts = pts + 0.05 * (rng.normal(size=10) + 1j * rng.normal(size=10))
        assert _same_conic(fitzgibbon_fit(pts).nu, _naive_fitzgibbon(pts)) < 1e-7


def test_requires_six_points():
    with pytest.raises(ValueError, match="insufficient points"):
        fitzgibbon_fit([1, 1j, -1, -1j])


def test_degenerate_inputs_fail():
    with pytest.raises(NumericalError):
        fitzgibbon_fit(np.arange(8) * (1 + 1j))
    with pytest.raises(NumericalError):
        fitzgibbon_fit(np.ones(6, dtype=complex))


def test_rotate_conic_moves_points():
    t = np.linspace(0, 2 * math.pi, 7)[:-1]
    pts = (1 + 2j) + 1.5 * np.cos(t) + 0.5j * np.sin(t)
    e = fitzgibbon_fit(pts)
    r = rotate_conic(e, 0.7)
    assert np.max(np.abs(r.evaluate(pts * np.exp(-0.7j)))) < 1e-10


def test_rotation_angle_puts_ellipse_vertical_on_positive_x():
    pc, _ = noise_free(n=8, theta0=0.6, phi=2.5)
    e = fitzgibbon_fit(pc.points)
    phi = rotation_angle(e)
    assert math.remainder(phi - 2.5, 2 * math.pi) == pytest.approx(0, abs=1e-8)
    c = canonical_from_quadratic(rotate_conic(e, phi))
    assert c.center.real > 0 and abs(c.center.imag) < 1e-10


@pytest.mark.parametrize("variant", list(PlanetVariant))
@pytest.mark.parametrize("n", [6, 8])
@pytest.mark.parametrize("name", sorted(TISSUES))
def test_noise_free_round_trip(variant, n, name):
    tissue = TISSUES[name]
    pc, seq = noise_free(tissue, n=n, theta0=-1.2, phi=0.8, scale=3.0)
    est = planet_estimate(pc, seq, variant=variant)
    assert est.t1_ms == pytest.approx(tissue.t1_ms, rel=1e-6)
    assert est.t2_ms == pytest.approx(tissue.t2_ms, rel=1e-6)
    assert est.off_resonance_hz == pytest.approx(-1.2 / (2 * math.pi * 8e-3), abs=1e-6)


def test_offres_variants_agree_noise_free():
    pc, seq = noise_free(n=8, theta0=2.0)
    a = planet_estimate(pc, seq)
    b = planet_estimate(pc, seq, celf_offres=True)
    assert a.off_resonance_hz == pytest.approx(b.off_resonance_hz, abs=1e-8)


def test_four_points_fail():
    pc, seq = noise_free(n=4)
    with pytest.raises(ValueError, match="insufficient points"):
        planet_estimate(pc, seq)


def test_result_is_rotation_invariant():
    pc, seq = noise_free(WM, n=6, theta0=0.4, phi=0.0)
    rng = np.random.default_rng(2)
    noisy = type(pc)(pc.points + 1e-4 * (rng.normal(size=6) + 1j * rng.normal(size=6)), pc.delta_theta, pc.pairs)
    a = planet_estimate(noisy, seq)
    b = planet_estimate(noisy.scaled(np.exp(1.3j)), seq)
    assert a.t1_ms == pytest.approx(b.t1_ms, rel=1e-6)
    assert a.t2_ms == pytest.approx(b.t2_ms, rel=1e-6)
