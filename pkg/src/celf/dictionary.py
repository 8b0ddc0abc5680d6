"""Simulated ellipse dictionary and nearest-entry identification.

Each entry stores the two semi-axes and the center distance of the base
ellipse for one (T1, T2) pair, all divided by M (the cross-point distance of
the dictionary ellipse). Fitted ellipses are normalised by their own |q| and
matched by the summed squared difference of the three properties.

On-disk layout (little endian)::

    24-byte header   magic b"CELFDICT", u32 version, u32 record size, u64 metadata length
    metadata         UTF-8 JSON (sequence fingerprint, grid spec, counts)
    records          5 x float32 per entry: t1_ms, t2_ms, r_maj, r_min, center
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from celf.errors import ConfigError
from celf.fitting import CelfFit
from celf.signal_model import SequenceParams

log = logging.getLogger(__name__)

MAGIC = b"CELFDICT"
VERSION = 1
_HEADER = struct.Struct("<8sIIQ")
_RECORD = np.dtype("<f4")
_N_FIELDS = 5

T1_GRID_SPEC = [(50.0, 5000.0, 5.0)]
T2_GRID_SPEC = [(10.0, 500.0, 1.0), (505.0, 1500.0, 5.0)]


def grid_from_spec(spec) -> NDArray[np.float64]:
    parts = [np.arange(round((hi - lo) / step) + 1) * step + lo for lo, hi, step in spec]
    return np.unique(np.concatenate(parts))


@dataclass(frozen=True, eq=False)
class EllipseDictionary:
    tr_ms: float
    te_ms: float
    flip_rad: float
    t1_ms: NDArray[np.float64]
    t2_ms: NDArray[np.float64]
    r_maj: NDArray[np.float64]
    r_min: NDArray[np.float64]
    center: NDArray[np.float64]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.t1_ms.size)

    @property
    def seq_fingerprint(self) -> tuple[float, float, float]:
        return (self.tr_ms, self.te_ms, self.flip_rad)

    @cached_property
    def features(self) -> NDArray[np.float64]:
        return np.column_stack([self.r_maj, self.r_min, self.center])

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.features)

    def distances(self, query: ArrayLike, idx: NDArray[np.int64] | None = None) -> NDArray[np.float64]:
        """Summed squared differences between ``query`` and entries ``idx`` (all if None)."""
        f = np.asarray(query, dtype=np.float64)
        r_maj, r_min, center = (self.r_maj, self.r_min, self.center)
        if idx is not None:
            r_maj, r_min, center = r_maj[idx], r_min[idx], center[idx]
        return (r_maj - f[0]) ** 2 + (r_min - f[1]) ** 2 + (center - f[2]) ** 2

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        meta = dict(self.metadata)
        meta.update(
            tr_ms=self.tr_ms,
            te_ms=self.te_ms,
            flip_rad=self.flip_rad,
            flip_deg=math.degrees(self.flip_rad),
            entries=len(self),
            fields=["t1_ms", "t2_ms", "r_maj_norm", "r_min_norm", "center_dist_norm"],
        )
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        records = np.column_stack(
            [self.t1_ms, self.t2_ms, self.r_maj, self.r_min, self.center]
        ).astype(_RECORD)
        header = _HEADER.pack(MAGIC, VERSION, _N_FIELDS * _RECORD.itemsize, len(blob))
        return header + blob + records.tobytes()

    @classmethod
    def load(cls, path: str | Path) -> "EllipseDictionary":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EllipseDictionary":
        if len(raw) < _HEADER.size:
            raise ConfigError("dictionary file is truncated")
        magic, version, rec_size, meta_len = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise ConfigError("not an ellipse dictionary file")
        if version != VERSION or rec_size != _N_FIELDS * _RECORD.itemsize:
            raise ConfigError(f"unsupported dictionary version {version}")
        start = _HEADER.size + meta_len
        if start > len(raw) or (len(raw) - start) % (_N_FIELDS * _RECORD.itemsize):
            raise ConfigError("dictionary records are truncated")
        try:
            meta = json.loads(raw[_HEADER.size : start])
        except ValueError as exc:
            raise ConfigError(f"dictionary metadata is unreadable: {exc}") from exc
        body = np.frombuffer(raw, dtype=_RECORD, offset=start)
        rec = body.reshape(-1, _N_FIELDS).astype(np.float64)
        extra = {k: v for k, v in meta.items() if k not in {"tr_ms", "te_ms", "flip_rad"}}
        return cls(
            meta["tr_ms"], meta["te_ms"], meta["flip_rad"],
            rec[:, 0], rec[:, 1], rec[:, 2], rec[:, 3], rec[:, 4], extra,
        )


def build_dictionary(
    seq: SequenceParams,
    actual_flip: float | None = None,
    *,
    physical: bool = False,
    t1_spec=T1_GRID_SPEC,
    t2_spec=T2_GRID_SPEC,
) -> EllipseDictionary:
    """Simulate the ellipse geometry for every (T1, T2) on the grid.

    M0 is 1; the properties are normalised by M anyway. ``physical`` drops
    pairs with T2 > T1. Values are rounded to float32, the storage precision,
    so a saved and reloaded dictionary identifies exactly like the original.
    """
    flip = seq.flip_rad if actual_flip is None else float(actual_flip)
    t1g = grid_from_spec(t1_spec)
    t2g = grid_from_spec(t2_spec)
    t1, t2 = (v.ravel() for v in np.meshgrid(t1g, t2g, indexing="ij"))
    n_grid = t1.size
    if physical:
        keep = t2 <= t1
        t1, t2 = t1[keep], t2[keep]

    e1 = np.exp(-seq.tr_ms / t1)
    a = np.exp(-seq.tr_ms / t2)
    cos_a = math.cos(flip)
    den = 1.0 - e1 * cos_a - a * a * (e1 - cos_a)
    b = a * (1.0 - e1) * (1.0 + cos_a) / den
    big_m = (1.0 - e1) * math.sin(flip) / den
    one_b2 = 1.0 - b * b
    r_maj = a / np.sqrt(one_b2)
    r_min = np.abs(a - b) / one_b2
    center = (1.0 - a * b) / one_b2

    ok = (big_m > 0) & (np.abs(a - b) > 1e-12) & (b < 1) & (r_maj >= r_min)
    skipped = int(ok.size - ok.sum())
    t2_gt_t1 = int(np.count_nonzero(t2[ok] > t1[ok]))
    f32 = lambda v: v[ok].astype(np.float32).astype(np.float64)  # noqa: E731
    meta = {
        "grid": {"t1_ms": t1_spec, "t2_ms": t2_spec},
        "grid_pairs": n_grid,
        "physical_only": physical,
        "skipped_degenerate": skipped,
        "t2_gt_t1_entries": t2_gt_t1,
    }
    log.info(
        "dictionary: %d grid pairs, %d entries, %d skipped as degenerate, %d with T2 > T1",
        n_grid, int(ok.sum()), skipped, t2_gt_t1,
    )
    return EllipseDictionary(
        seq.tr_ms, seq.te_ms, flip,
        f32(t1), f32(t2), f32(r_maj), f32(r_min), f32(center), meta,
    )


def nearest_scan(dictionary: EllipseDictionary, query: ArrayLike) -> int:
    """Brute-force argmin; the first (smallest T1, then T2) entry wins ties."""
    if len(dictionary) == 0:
        raise ConfigError("empty dictionary")
    return int(np.argmin(dictionary.distances(query)))


def nearest(dictionary: EllipseDictionary, query: ArrayLike, k: int = 4) -> int:
    """k-d tree search returning exactly the entry :func:`nearest_scan` would.

    Candidates are re-scored with the scan's arithmetic; if the tree cannot
    rule out an entry outside the candidate set, the full scan is used.
    """
    n = len(dictionary)
    if n == 0:
        raise ConfigError("empty dictionary")
    f = np.asarray(query, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("query geometry is not finite")
    k = min(k, n)
    dist, idx = dictionary._tree.query(f, k=k)
    idx = np.atleast_1d(idx)
    dist = np.atleast_1d(dist)
    d = dictionary.distances(f, idx)
    best = float(d.min())
    if k < n and dist[-1] ** 2 <= best * (1.0 + 1e-9) + 1e-300:
        return nearest_scan(dictionary, f)
    return int(idx[d == best].min())


def identify(
    dictionary: EllipseDictionary, fit: CelfFit, *, method: str = "tree"
) -> tuple[float, float, int]:
    """Match a fitted ellipse to the dictionary; returns (t1_ms, t2_ms, entry index)."""
    if not fit.q_abs > 0:
        raise ValueError("fit has a zero cross-point distance")
    query = fit.normalized_geometry
    if method == "scan":
        i = nearest_scan(dictionary, query)
    elif method == "tree":
        i = nearest(dictionary, query)
    else:
        raise ValueError(f"unknown search method {method!r}")
    return float(dictionary.t1_ms[i]), float(dictionary.t2_ms[i]), i
