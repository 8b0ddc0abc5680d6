"""Voxel-wise parameter maps with singular-voxel repair and optional parallelism."""

from __future__ import annotations

import enum
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from celf.dictionary import EllipseDictionary, build_dictionary
from celf.errors import ConfigError, NumericalError
from celf.fitting import celf_fit
from celf.geometry import PhaseCycleSet, cross_point
from celf.params import Estimates, Validity, estimate_celf
from celf.planet import planet_estimate
from celf.signal_model import SequenceParams

log = logging.getLogger(__name__)

MAP_NAMES = ("t1_ms", "t2_ms", "off_hz", "banding_free_re", "banding_free_im", "flip_actual_rad", "flag")

# flips closer than this (degrees) share a dictionary
FLIP_QUANTUM_DEG = 1e-6


class Flag(enum.IntFlag):
    SINGULAR = 1
    NONPHYSICAL = 2
    GAMMA_SEARCH = 4
    NOMINAL_FLIP = 8
    FIT_FAILED = 16
    SINGULAR_UNREPAIRED = 32


SUBSETS = {
    4: (0.0, math.pi / 2, math.pi, 3 * math.pi / 2),
    6: (0.0, math.pi / 4, math.pi / 2, math.pi, 5 * math.pi / 4, 3 * math.pi / 2),
}


def subset_increments(available: NDArray[np.float64], n_use: int) -> tuple[float, ...]:
    """Phase increments used for an N-cycle fit drawn from the acquired ones."""
    n_avail = len(available)
    if n_use > n_avail:
        raise ConfigError(f"requested N={n_use} but only {n_avail} phase cycles are available")
    if n_use == n_avail:
        return tuple(float(v) for v in available)
    if n_use in SUBSETS:
        return SUBSETS[n_use]
    return tuple(2 * math.pi * k / n_use for k in range(n_use))


def _subset_index(available: NDArray[np.float64], wanted) -> NDArray[np.int64]:
    have = np.mod(available, 2 * math.pi)
    idx = []
    for w in np.mod(np.asarray(wanted), 2 * math.pi):
        d = np.abs(np.angle(np.exp(1j * (have - w))))
        k = int(np.argmin(d))
        if d[k] > 1e-6:
            raise ConfigError(f"phase increment {w:.6f} rad not in the acquired set")
        idx.append(k)
    return np.asarray(idx)


@dataclass(frozen=True)
class FitJob:
    method: str
    seq: SequenceParams
    flip_nominal: float
    planet_variant: str = "gs"
    planet_celf_offres: bool = False


@dataclass(eq=False)
class MapResult:
    maps: dict[str, NDArray[np.float64]]
    n_use: int
    method: str
    warnings: list[str] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps["flag"].shape


class DictionaryBank:
    """Dictionaries keyed by actual flip, on the grid of a template dictionary.

    The template itself serves its own flip; one dictionary is built per
    distinct actual flip (rounded to ``FLIP_QUANTUM_DEG``).
    """

    def __init__(self, template: EllipseDictionary | None, seq: SequenceParams, physical: bool = False):
        self.template = template
        self.seq = seq
        self.physical = physical if template is None else bool(template.metadata.get("physical_only", False))
        self._cache: dict[float, EllipseDictionary] = {}
        if template is not None:
            self._cache[self._key(template.flip_rad)] = template

    @staticmethod
    def _key(flip_rad: float) -> float:
        return round(math.degrees(flip_rad) / FLIP_QUANTUM_DEG) * FLIP_QUANTUM_DEG

    def get(self, flip_rad: float) -> EllipseDictionary:
        k = self._key(flip_rad)
        if k not in self._cache:
            kw = {}
            if self.template is not None and "grid" in self.template.metadata:
                g = self.template.metadata["grid"]
                kw = {"t1_spec": [tuple(s) for s in g["t1_ms"]], "t2_spec": [tuple(s) for s in g["t2_ms"]]}
            log.info("building dictionary for flip %.1f deg", k)
            self._cache[k] = build_dictionary(self.seq, math.radians(k), physical=self.physical, **kw)
        return self._cache[k]


def _voxel(job: FitJob, pc: PhaseCycleSet, flip: float, dictionary) -> Estimates | None:
    try:
        if job.method == "celf":
            return estimate_celf(pc, job.seq, flip, dictionary)
        return planet_estimate(pc, job.seq, flip, job.planet_variant, job.planet_celf_offres)
    except (NumericalError, ValueError):
        return None


# state shared with forked workers; set only while a map is being fitted
_SHARED: dict = {}


def _row_task(rows: tuple[int, int]):
    job, points, dth, flips, bank = (_SHARED[k] for k in ("job", "pts", "dth", "flips", "bank"))
    out = []
    for r in range(*rows):
        row = []
        for c in range(points.shape[1]):
            pc = PhaseCycleSet.from_samples(points[r, c], dth)
            d = bank.get(flips[r, c]) if bank is not None else None
            row.append(_voxel(job, pc, float(flips[r, c]), d))
        out.append(row)
    return rows, out


def _record(maps, r, c, est: Estimates | None, base_flag: int) -> None:
    flag = base_flag
    if est is None:
        flag |= Flag.FIT_FAILED
        for k in ("t1_ms", "t2_ms", "off_hz", "banding_free_re", "banding_free_im"):
            maps[k][r, c] = math.nan
    else:
        if est.validity is Validity.NONPHYSICAL:
            flag |= Flag.NONPHYSICAL
            maps["t1_ms"][r, c] = maps["t2_ms"][r, c] = math.nan
        else:
            maps["t1_ms"][r, c] = est.t1_ms
            maps["t2_ms"][r, c] = est.t2_ms
        if est.gamma_via_search:
            flag |= Flag.GAMMA_SEARCH
        maps["off_hz"][r, c] = est.off_resonance_hz
        maps["banding_free_re"][r, c] = est.banding_free.real
        maps["banding_free_im"][r, c] = est.banding_free.imag
    maps["flag"][r, c] = int(flag)


def fit_map(
    stack: NDArray[np.complex128],
    delta_theta: NDArray[np.float64],
    seq: SequenceParams,
    *,
    method: str = "celf",
    n_use: int = 4,
    dictionary: EllipseDictionary | None = None,
    b1_map: NDArray[np.float64] | None = None,
    threads: int = 1,
    planet_variant: str = "gs",
    planet_celf_offres: bool = False,
    use_dictionary: bool = True,
    repair_singular: bool = True,
) -> MapResult:
    """Fit every voxel of an (N, H, W) stack.

    ``b1_map`` holds the actual flip angle (rad) per voxel; without it the
    nominal flip is used and every voxel carries ``Flag.NOMINAL_FLIP``. CELF
    with N=4 refits singular voxels on their clipped 3x3 neighbourhood.
    """
    if method not in {"celf", "planet"}:
        raise ConfigError(f"unknown method {method!r}")
    if method == "planet" and n_use < 6:
        raise ConfigError(f"insufficient points: PLANET needs N >= 6, got N={n_use}")
    stack = np.asarray(stack, dtype=np.complex128)
    n_avail, h, w = stack.shape
    dth_all = np.asarray(delta_theta, dtype=np.float64)
    idx = _subset_index(dth_all, subset_increments(dth_all, n_use))
    dth = dth_all[idx]
    pts = np.moveaxis(stack[idx], 0, -1)  # (H, W, n)
    sub_seq = seq.with_increments(dth)

    warnings: list[str] = []
    base_flag = 0
    if b1_map is None:
        flips = np.full((h, w), seq.flip_rad)
        base_flag = Flag.NOMINAL_FLIP
        warnings.append("no B1 map supplied: nominal flip angle used for every voxel")
    else:
        flips = np.asarray(b1_map, dtype=np.float64)
        if flips.shape != (h, w):
            raise ConfigError(f"B1 map shape {flips.shape} does not match stack {(h, w)}")
    for msg in warnings:
        log.warning(msg)

    bank = None
    if method == "celf" and use_dictionary:
        bank = DictionaryBank(dictionary, sub_seq)
        for f in np.unique(flips):  # build up front so forked workers inherit them
            bank.get(float(f))._tree

    job = FitJob(method, sub_seq, seq.flip_rad, planet_variant, planet_celf_offres)
    chunk = max(1, math.ceil(h / max(1, threads) / 4))
    tasks = [(r0, min(h, r0 + chunk)) for r0 in range(0, h, chunk)]
    _SHARED.update(job=job, pts=pts, dth=dth, flips=flips, bank=bank)
    try:
        if threads > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as pool:
                results = list(pool.map(_row_task, tasks))
        else:
            results = [_row_task(t) for t in tasks]
    finally:
        _SHARED.clear()

    maps = {k: np.full((h, w), math.nan) for k in MAP_NAMES}
    maps["flip_actual_rad"][:] = flips
    est_grid: list[list[Estimates | None]] = [[None] * w for _ in range(h)]
    for (r0, r1), rows in results:  # index order regardless of completion order
        for dr, row in enumerate(rows):
            for c, est in enumerate(row):
                est_grid[r0 + dr][c] = est
                _record(maps, r0 + dr, c, est, base_flag)

    if method == "celf" and n_use == 4 and repair_singular:
        _repair_singular(maps, est_grid, pts, dth, flips, sub_seq, bank, base_flag)
    return MapResult(maps, n_use, method, warnings)


def _repair_singular(maps, est_grid, pts, dth, flips, seq, bank, base_flag) -> None:
    h, w = flips.shape
    singular = [
        (r, c)
        for r in range(h)
        for c in range(w)
        if est_grid[r][c] is not None and est_grid[r][c].singular
    ]
    for r, c in singular:
        own = PhaseCycleSet.from_samples(pts[r, c], dth)
        d = bank.get(flips[r, c]) if bank is not None else None
        try:
            # each neighbour is divided by its own cross-point so that ellipses
            # of different size and phase line up before pooling
            sets = []
            for rr in range(max(0, r - 1), min(h, r + 2)):
                for cc in range(max(0, c - 1), min(w, c + 2)):
                    pc = PhaseCycleSet.from_samples(pts[rr, cc], dth)
                    sets.append(pc.scaled(1.0 / cross_point(pc)))
            agg = celf_fit(PhaseCycleSet.concatenate(sets))
            est = estimate_celf(own, seq, float(flips[r, c]), d, geometry_fit=agg)
            _record(maps, r, c, est, base_flag | Flag.SINGULAR)
        except (NumericalError, ValueError):
            maps["flag"][r, c] = int(maps["flag"][r, c]) | Flag.SINGULAR | Flag.SINGULAR_UNREPAIRED
