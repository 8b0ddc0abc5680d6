"""Monte-Carlo MAPE study of CELF against the PLANET baseline.

For each (tissue, N, repetition) one off-resonance phase theta0 ~ U(-pi, pi)
and one standard-normal noise draw are taken from a PCG64 stream keyed by
(seed, tissue index, N, repetition). Every SNR level and every method reuses
that draw, scaled by the sigma giving the requested SNR, so differences
between cells are not blurred by independent noise.
"""

from __future__ import annotations

import csv
import io
import json
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from celf.dictionary import EllipseDictionary, build_dictionary
from celf.errors import ConfigError, NumericalError
from celf.geometry import PhaseCycleSet
from celf.params import Estimates, Validity, estimate_celf
from celf.planet import planet_estimate
from celf.signal_model import (
    TISSUES,
    AcquisitionSite,
    SequenceParams,
    compute_signal_params,
    simulate_measurement,
)

CSV_HEADER = ("tissue", "snr", "method", "n", "metric", "value", "reps", "seed")
METRICS = ("mape_t1", "mape_t2", "se_t1", "se_t2", "invalid_frac")


@dataclass(frozen=True)
class McConfig:
    tissues: tuple[str, ...] = tuple(TISSUES)
    snrs: tuple[float, ...] = (20.0, 40.0, 60.0, 80.0, 100.0)
    reps: int = 10000
    n_values: tuple[int, ...] = (6, 8)
    methods: tuple[str, ...] = ("celf", "planet")
    tr_ms: float = 8.0
    te_ms: float = 4.0
    flip_deg: float = 40.0
    seed: int = 0
    planet_variant: str = "gs"
    physical_dictionary: bool = False

    def __post_init__(self) -> None:
        for key in ("tissues", "snrs", "n_values", "methods"):
            object.__setattr__(self, key, tuple(getattr(self, key)))
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        for t in self.tissues:
            if t not in TISSUES:
                raise ConfigError(f"unknown tissue {t!r}")
        for m in self.methods:
            if m not in {"celf", "planet"}:
                raise ConfigError(f"unknown method {m!r}")
        for n in self.n_values:
            if n < 4 or n % 2:
                raise ConfigError(f"N must be even and >= 4, got {n}")
            if n < 6 and "planet" in self.methods:
                raise ConfigError("insufficient points: PLANET needs N >= 6")
        if any(not s > 0 for s in self.snrs):
            raise ConfigError("SNR levels must be positive (inf allowed)")

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "McConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read Monte-Carlo config: {exc}") from exc
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        raw["snrs"] = [math.inf if s in ("inf", None) else float(s) for s in raw.get("snrs", cls.snrs)]
        try:
            return cls(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def seq(self, n: int) -> SequenceParams:
        return SequenceParams.from_degrees(self.tr_ms, self.te_ms, self.flip_deg, n)


@dataclass
class CellResult:
    tissue: str
    snr: float
    method: str
    n: int
    t1: np.ndarray = field(repr=False)
    t2: np.ndarray = field(repr=False)
    valid: np.ndarray = field(repr=False)

    def metrics(self, truth_t1: float, truth_t2: float) -> dict[str, float]:
        ok = self.valid & np.isfinite(self.t1) & np.isfinite(self.t2)
        out = {"invalid_frac": float(1.0 - ok.mean())}
        for key, est, ref in (("t1", self.t1, truth_t1), ("t2", self.t2, truth_t2)):
            ape = 100.0 * np.abs(est[ok] - ref) / ref
            out[f"mape_{key}"] = float(ape.mean()) if ape.size else math.nan
            out[f"se_{key}"] = float(ape.std(ddof=1) / math.sqrt(ape.size)) if ape.size > 1 else math.nan
        return out


def rep_stream(seed: int, tissue_index: int, n: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed), tissue_index, n, rep)))


def _estimate(method, pc, seq, dictionary, variant) -> Estimates | None:
    try:
        if method == "celf":
            return estimate_celf(pc, seq, None, dictionary)
        return planet_estimate(pc, seq, None, variant)
    except (NumericalError, ValueError):
        return None


_SHARED: dict = {}


def _task(key: tuple[int, int, int, int]):
    ti, n, r0, r1 = key
    cfg: McConfig = _SHARED["cfg"]
    dictionaries: dict[int, EllipseDictionary] = _SHARED["dicts"]
    tissue = TISSUES[cfg.tissues[ti]]
    seq = cfg.seq(n)
    sp = compute_signal_params(tissue, seq)
    shape = (len(cfg.snrs), len(cfg.methods), r1 - r0)
    t1 = np.full(shape, math.nan)
    t2 = np.full(shape, math.nan)
    valid = np.zeros(shape, dtype=bool)
    for k, rep in enumerate(range(r0, r1)):
        rng = rep_stream(cfg.seed, ti, n, rep)
        theta0 = rng.uniform(-math.pi, math.pi)
        z = rng.standard_normal((2, n))
        site = AcquisitionSite(theta0)
        clean = np.array([simulate_measurement(sp, site, seq, d) for d in seq.delta_theta_rad])
        mean_mag = float(np.abs(clean).mean())
        for si, snr in enumerate(cfg.snrs):
            sigma = 0.0 if math.isinf(snr) else mean_mag / snr
            pc = PhaseCycleSet.from_samples(clean + sigma * (z[0] + 1j * z[1]), seq.delta_theta_rad)
            for mi, method in enumerate(cfg.methods):
                est = _estimate(method, pc, seq, dictionaries.get(n), cfg.planet_variant)
                if est is not None:
                    t1[si, mi, k], t2[si, mi, k] = est.t1_ms, est.t2_ms
                    valid[si, mi, k] = est.validity is not Validity.NONPHYSICAL
    return key, t1, t2, valid


def run_monte_carlo(
    cfg: McConfig,
    dictionary: EllipseDictionary | None = None,
    threads: int = 1,
    chunk: int = 250,
) -> list[CellResult]:
    """Run every (tissue, SNR, method, N) cell; results come back in a fixed order."""
    dicts: dict[int, EllipseDictionary] = {}
    if "celf" in cfg.methods:
        for n in cfg.n_values:
            if dictionary is not None:
                dicts[n] = dictionary
            else:
                dicts[n] = build_dictionary(cfg.seq(n), physical=cfg.physical_dictionary)
            dicts[n]._tree
    keys = [
        (ti, n, r0, min(cfg.reps, r0 + chunk))
        for ti in range(len(cfg.tissues))
        for n in cfg.n_values
        for r0 in range(0, cfg.reps, chunk)
    ]
    _SHARED.update(cfg=cfg, dicts=dicts)
    try:
        if threads > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as pool:
                parts = dict((k, (a, b, c)) for k, a, b, c in pool.map(_task, keys))
        else:
            parts = {k: (a, b, c) for k, a, b, c in map(_task, keys)}
    finally:
        _SHARED.clear()

    cells = []
    for ti, name in enumerate(cfg.tissues):
        for n in cfg.n_values:
            blocks = [parts[k] for k in keys if k[0] == ti and k[1] == n]
            t1 = np.concatenate([b[0] for b in blocks], axis=-1)
            t2 = np.concatenate([b[1] for b in blocks], axis=-1)
            ok = np.concatenate([b[2] for b in blocks], axis=-1)
            for si, snr in enumerate(cfg.snrs):
                for mi, method in enumerate(cfg.methods):
                    cells.append(CellResult(name, snr, method, n, t1[si, mi], t2[si, mi], ok[si, mi]))
    return cells


def _fmt(v: float) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return repr(float(v)) if isinstance(v, float) else str(v)


def results_rows(cfg: McConfig, cells: list[CellResult]) -> list[tuple]:
    rows = []
    for cell in cells:
        tissue = TISSUES[cell.tissue]
        m = cell.metrics(tissue.t1_ms, tissue.t2_ms)
        for metric in METRICS:
            rows.append((cell.tissue, _fmt(cell.snr), cell.method, cell.n, metric, _fmt(m[metric]),
                         cfg.reps, cfg.seed))
    return rows


def results_csv(cfg: McConfig, cells: list[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(results_rows(cfg, cells))
    return buf.getvalue()
