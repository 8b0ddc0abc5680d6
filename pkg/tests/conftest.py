from __future__ import annotations

import math

import numpy as np
import pytest

from celf.dictionary import build_dictionary
from celf.signal_model import TISSUES, AcquisitionSite, SequenceParams, simulate_phase_cycle_set

WM = TISSUES["white_matter"]


@pytest.fixture(scope="session")
def seq4() -> SequenceParams:
    return SequenceParams.from_degrees(8.0, 4.0, 40.0, 4)


@pytest.fixture(scope="session")
def dict40(seq4):
    return build_dictionary(seq4)


def noise_free(tissue=WM, n=4, theta0=0.3, phi=0.0, scale=1.0, flip_deg=40.0):
    seq = SequenceParams.from_degrees(8.0, 4.0, flip_deg, n)
    return simulate_phase_cycle_set(tissue, seq, AcquisitionSite(theta0, phi, scale)), seq


def rng(seed=0) -> np.random.Generator:
    return np.random.default_rng(seed)


TWO_PI = 2 * math.pi
