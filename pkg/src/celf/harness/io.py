"""Map and stack files: a JSON sidecar next to raw little-endian float32 data.

A scalar map ``<name>.f32`` holds height*width values in row-major order. A
complex stack holds N images, each stored as interleaved (re, im) pairs.
Invalid values are NaN.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from celf.errors import ConfigError

F32 = np.dtype("<f4")

UNITS = {
    "t1_ms": "ms",
    "t2_ms": "ms",
    "off_hz": "Hz",
    "banding_free_re": "a.u.",
    "banding_free_im": "a.u.",
    "flip_actual_rad": "rad",
    "flag": "bitmask",
}


def _stem(path: str | Path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in {".f32", ".json"} else p


def _dump(meta: dict[str, Any]) -> str:
    return json.dumps(meta, sort_keys=True, indent=2) + "\n"


def write_map(
    directory: str | Path,
    name: str,
    values: NDArray,
    *,
    quantity: str | None = None,
    seed: int | None = None,
    **provenance: Any,
) -> Path:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"map {name!r} must be 2-D, got shape {arr.shape}")
    quantity = quantity or name
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": name,
        "quantity": quantity,
        "units": UNITS.get(quantity, ""),
        "height": arr.shape[0],
        "width": arr.shape[1],
        "dtype": "float32-le",
        "layout": "row-major",
        "invalid": "NaN",
        "seed": seed,
        "provenance": provenance,
    }
    (out / f"{name}.json").write_text(_dump(meta))
    (out / f"{name}.f32").write_bytes(arr.astype(F32).tobytes())
    return out / f"{name}.f32"


def read_meta(path: str | Path) -> dict[str, Any]:
    stem = _stem(path)
    try:
        return json.loads(stem.with_suffix(".json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"missing sidecar {stem.with_suffix('.json')}") from exc


def read_map(path: str | Path) -> tuple[NDArray[np.float64], dict[str, Any]]:
    stem = _stem(path)
    meta = read_meta(stem)
    h, w = int(meta["height"]), int(meta["width"])
    raw = np.fromfile(stem.with_suffix(".f32"), dtype=F32)
    if raw.size != h * w:
        raise ConfigError(f"{stem}.f32 holds {raw.size} values, sidecar says {h}x{w}")
    return raw.reshape(h, w).astype(np.float64), meta


def write_stack(
    directory: str | Path,
    name: str,
    images: NDArray[np.complex128],
    delta_theta: NDArray[np.float64],
    *,
    seed: int | None = None,
    **provenance: Any,
) -> Path:
    """Write an (N, H, W) complex stack; ``delta_theta`` lists the N increments."""
    arr = np.asarray(images, dtype=np.complex128)
    if arr.ndim != 3 or arr.shape[0] != len(delta_theta):
        raise ValueError("stack must be (N, H, W) with one increment per image")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    inter = np.empty(arr.shape + (2,), dtype=F32)
    inter[..., 0] = arr.real
    inter[..., 1] = arr.imag
    meta = {
        "name": name,
        "quantity": "complex_stack",
        "units": "a.u.",
        "n_cycles": arr.shape[0],
        "height": arr.shape[1],
        "width": arr.shape[2],
        "delta_theta_rad": [float(v) for v in delta_theta],
        "dtype": "complex64-le interleaved re/im",
        "layout": "cycle-major, then row-major",
        "seed": seed,
        "provenance": provenance,
    }
    (out / f"{name}.json").write_text(_dump(meta))
    (out / f"{name}.f32").write_bytes(inter.tobytes())
    return out / f"{name}.f32"


def read_stack(path: str | Path) -> tuple[NDArray[np.complex128], NDArray[np.float64], dict[str, Any]]:
    stem = _stem(path)
    meta = read_meta(stem)
    n, h, w = int(meta["n_cycles"]), int(meta["height"]), int(meta["width"])
    raw = np.fromfile(stem.with_suffix(".f32"), dtype=F32)
    if raw.size != 2 * n * h * w:
        raise ConfigError(f"{stem}.f32 size does not match its sidecar")
    raw = raw.reshape(n, h, w, 2).astype(np.float64)
    return raw[..., 0] + 1j * raw[..., 1], np.asarray(meta["delta_theta_rad"]), meta
