"""Numerical block phantom: nine tissues, off-resonance ramp across, flip ramp down."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from celf.errors import ConfigError
from celf.signal_model import TISSUES, SequenceParams, equispaced_increments

DEFAULT_LAYOUT = (
    ("fat", "white_matter", "gray_matter"),
    ("bone_marrow", "myocardium", "muscle"),
    ("liver", "vessels", "csf"),
)


@dataclass(frozen=True)
class PhantomSpec:
    layout: tuple[tuple[str, ...], ...] = DEFAULT_LAYOUT
    block: int = 36
    off_span_hz: tuple[float, float] = (-62.5, 62.5)
    flip_span_deg: tuple[float, float] = (20.0, 60.0)
    snr_ref: float = 200.0
    ref_tissue: str = "csf"
    tr_ms: float = 8.0
    te_ms: float = 4.0
    nominal_flip_deg: float = 40.0
    n_cycles: int = 8
    phase_rad: float = 0.0
    reps: int = 1

    def __post_init__(self) -> None:
        layout = tuple(tuple(row) for row in self.layout)
        object.__setattr__(self, "layout", layout)
        if len({len(r) for r in layout}) != 1:
            raise ConfigError("phantom layout rows differ in length")
        for name in (t for row in layout for t in row):
            if name not in TISSUES:
                raise ConfigError(f"unknown tissue {name!r}")
        if self.ref_tissue not in TISSUES:
            raise ConfigError(f"unknown reference tissue {self.ref_tissue!r}")
        if self.block < 1 or self.reps < 1:
            raise ConfigError("block size and reps must be positive")
        if not self.snr_ref > 0:
            raise ConfigError("snr_ref must be positive (use inf for noise-free)")
        self.seq  # validates sequence parameters

    @property
    def seq(self) -> SequenceParams:
        return SequenceParams.from_degrees(self.tr_ms, self.te_ms, self.nominal_flip_deg, self.n_cycles)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.layout) * self.block, len(self.layout[0]) * self.block

    @classmethod
    def from_json(cls, path: str | Path) -> "PhantomSpec":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read phantom spec: {exc}") from exc
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown phantom spec keys: {sorted(unknown)}")
        if "snr_ref" in raw and raw["snr_ref"] in (None, "inf"):
            raw["snr_ref"] = math.inf
        for key in ("off_span_hz", "flip_span_deg"):
            if key in raw:
                raw[key] = tuple(raw[key])
        try:
            return cls(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.snr_ref):
            d["snr_ref"] = "inf"
        return d


@dataclass(frozen=True, eq=False)
class Phantom:
    stack: NDArray[np.complex128]  # (N, H, W)
    delta_theta: NDArray[np.float64]
    truth: dict[str, NDArray[np.float64]] = field(repr=False)
    sigma: float
    spec: PhantomSpec


def _ramps(spec: PhantomSpec):
    off = np.linspace(*spec.off_span_hz, spec.block)
    flip = np.radians(np.linspace(*spec.flip_span_deg, spec.block))
    return off, flip


def _clean_stack(spec: PhantomSpec):
    seq = spec.seq
    h, w = spec.shape
    off_blk, flip_blk = _ramps(spec)
    nb = len(spec.layout[0])
    off = np.tile(off_blk, nb)[None, :].repeat(h, 0)
    flip = np.tile(flip_blk, len(spec.layout))[:, None].repeat(w, 1)
    t1 = np.empty((h, w))
    t2 = np.empty((h, w))
    tissue_idx = np.empty((h, w))
    names = list(TISSUES)
    for i, row in enumerate(spec.layout):
        for j, name in enumerate(row):
            sl = np.s_[i * spec.block : (i + 1) * spec.block, j * spec.block : (j + 1) * spec.block]
            t1[sl], t2[sl] = TISSUES[name].t1_ms, TISSUES[name].t2_ms
            tissue_idx[sl] = names.index(name)
    e1 = np.exp(-seq.tr_ms / t1)
    a = np.exp(-seq.tr_ms / t2)
    cos_a = np.cos(flip)
    den = 1.0 - e1 * cos_a - a * a * (e1 - cos_a)
    b = a * (1.0 - e1) * (1.0 + cos_a) / den
    big_m = (1.0 - e1) * np.sin(flip) / den * np.exp(-seq.te_ms / t2)
    theta0 = 2.0 * math.pi * off * seq.tr_ms * 1e-3
    dth = np.asarray(equispaced_increments(spec.n_cycles))
    theta = theta0[None] - dth[:, None, None]
    rot = np.exp(1j * spec.phase_rad)
    stack = big_m * (1.0 - a * np.exp(1j * theta)) / (1.0 - b * np.cos(theta)) * rot
    truth = {
        "t1_ms": t1,
        "t2_ms": t2,
        "off_hz": off,
        "flip_actual_rad": flip,
        "banding_free_re": big_m * rot.real,
        "banding_free_im": big_m * rot.imag,
        "tissue": tissue_idx,
    }
    return stack, dth, truth


def noise_sigma(spec: PhantomSpec, stack: NDArray[np.complex128], truth) -> float:
    """sigma giving the reference tissue a mean SNR of ``snr_ref``."""
    if math.isinf(spec.snr_ref):
        return 0.0
    ref = truth["tissue"] == list(TISSUES).index(spec.ref_tissue)
    if not ref.any():
        raise ConfigError(f"reference tissue {spec.ref_tissue!r} is not in the layout")
    per_voxel = np.abs(stack).mean(axis=0)[ref]
    return float(per_voxel.mean() / spec.snr_ref)


def generate_phantom(spec: PhantomSpec, rng_seed: int, rep: int = 0) -> Phantom:
    """Simulate one noisy repetition of the phantom.

    Noise for repetition ``rep`` comes from a PCG64 stream keyed by
    (rng_seed, rep), so repetitions are independent and reproducible.
    """
    stack, dth, truth = _clean_stack(spec)
    sigma = noise_sigma(spec, stack, truth)
    if sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence((int(rng_seed), int(rep))))
        z = rng.standard_normal((2,) + stack.shape)
        stack = stack + sigma * (z[0] + 1j * z[1])
    return Phantom(stack, dth, truth, sigma, spec)
