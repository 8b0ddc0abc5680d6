"""Command-line entry point: ``celf <command> ...``.

Exit codes: 0 success, 2 bad configuration or input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from celf.dictionary import EllipseDictionary, build_dictionary
from celf.errors import ConfigError, NumericalError
from celf.harness import io as mapio
from celf.harness.maps import MAP_NAMES, fit_map
from celf.harness.montecarlo import McConfig, results_csv, results_rows, run_monte_carlo
from celf.harness.phantom import PhantomSpec, generate_phantom
from celf.params import Estimates, Validity, synthesize_flip
from celf.signal_model import (
    TISSUES,
    AcquisitionSite,
    SequenceParams,
    TissueParams,
    simulate_phase_cycle_set,
)

log = logging.getLogger("celf")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _default_seed() -> int:
    raw = os.environ.get("CELF_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"CELF_SEED must be an integer, got {raw!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# -- simulate ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.tissue:
        tissue = TISSUES[args.tissue]
    elif args.t1 is not None and args.t2 is not None:
        tissue = TissueParams(args.t1, args.t2, args.m0)
    else:
        raise ConfigError("give --tissue or both --t1 and --t2")
    seq = SequenceParams.from_degrees(args.tr, args.te, args.flip, args.n)
    pc0 = simulate_phase_cycle_set(tissue, seq, AcquisitionSite(args.theta0, args.phi))
    sigma = 0.0 if math.isinf(args.snr) else float(np.abs(pc0.points).mean()) / args.snr
    pc = simulate_phase_cycle_set(tissue, seq, AcquisitionSite(args.theta0, args.phi, 1.0, sigma), args.seed)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("delta_theta_rad", "re", "im"))
    for d, z in zip(pc.delta_theta, pc.points):
        w.writerow((repr(float(d)), repr(float(z.real)), repr(float(z.imag))))
    return EXIT_OK


# -- phantom ----------------------------------------------------------------

def cmd_phantom(args) -> int:
    spec = PhantomSpec.from_json(args.spec) if args.spec else PhantomSpec()
    out = Path(args.out)
    prov = {"generator": "phantom", "tr_ms": spec.tr_ms, "te_ms": spec.te_ms,
            "flip_nominal_deg": spec.nominal_flip_deg, "spec": spec.to_dict()}
    for rep in range(spec.reps):
        ph = generate_phantom(spec, args.seed, rep)
        name = "stack" if spec.reps == 1 else f"stack_r{rep:03d}"
        mapio.write_stack(out, name, ph.stack, ph.delta_theta, seed=args.seed,
                          noise_sigma=ph.sigma, rep=rep, **prov)
    for key, arr in ph.truth.items():
        mapio.write_map(out / "truth", key, arr, seed=args.seed, **prov)
    log.info("phantom %dx%d, %d repetition(s), sigma=%.6g -> %s", *spec.shape, spec.reps, ph.sigma, out)
    return EXIT_OK


# -- dict -------------------------------------------------------------------

def cmd_dict_build(args) -> int:
    seq = SequenceParams.from_degrees(args.tr, args.te, args.flip, args.n)
    d = build_dictionary(seq, physical=args.physical)
    d.save(args.out)
    print(f"{len(d)} entries, {d.metadata['skipped_degenerate']} skipped, "
          f"{d.metadata['t2_gt_t1_entries']} with T2 > T1 -> {args.out}")
    return EXIT_OK


# -- fit --------------------------------------------------------------------

def _stack_files(directory: Path) -> list[Path]:
    files = sorted(directory.glob("stack_r*.json"))
    if not files and (directory / "stack.json").exists():
        files = [directory / "stack.json"]
    if not files:
        raise ConfigError(f"no stack.json or stack_r*.json in {directory}")
    return files


def _seq_from_meta(meta: dict, args) -> SequenceParams:
    prov = meta.get("provenance", {})
    tr = args.tr if args.tr is not None else prov.get("tr_ms")
    te = args.te if args.te is not None else prov.get("te_ms")
    flip = args.flip if args.flip is not None else prov.get("flip_nominal_deg")
    if None in (tr, te, flip):
        raise ConfigError("stack sidecar lacks tr_ms/te_ms/flip_nominal_deg; pass --tr --te --flip")
    return SequenceParams.from_degrees(tr, te, flip, int(meta["n_cycles"]))


def cmd_fit(args) -> int:
    src = Path(args.inp)
    out = Path(args.out)
    dictionary = EllipseDictionary.load(args.dict) if args.dict else None
    if args.method == "celf" and dictionary is None:
        log.warning("no --dict given: dictionaries are built for the flips in use")
    b1 = mapio.read_map(args.b1)[0] if args.b1 else None
    results = []
    for path in _stack_files(src):
        stack, dth, meta = mapio.read_stack(path)
        seq = _seq_from_meta(meta, args)
        if dictionary is not None and not math.isclose(dictionary.tr_ms, seq.tr_ms):
            raise ConfigError("dictionary TR does not match the stack")
        res = fit_map(
            stack, dth, seq, method=args.method, n_use=args.n, dictionary=dictionary,
            b1_map=b1, threads=args.threads, planet_variant=args.planet_variant,
            planet_celf_offres=args.planet_offres == "celf",
        )
        suffix = "" if len(_stack_files(src)) == 1 else "_" + path.stem.split("_")[-1]
        prov = {"method": args.method, "n": args.n, "tr_ms": seq.tr_ms, "te_ms": seq.te_ms,
                "flip_nominal_rad": seq.flip_rad, "source": path.name, "warnings": res.warnings}
        for name in MAP_NAMES:
            mapio.write_map(out, name + suffix, res.maps[name], quantity=name, seed=meta.get("seed"), **prov)
        results.append(res)
    if len(results) > 1:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for name in MAP_NAMES:
                stackd = np.stack([r.maps[name] for r in results])
                if name == "flag":
                    mean = np.bitwise_or.reduce(stackd.astype(np.int64), axis=0).astype(float)
                elif name == "off_hz":  # circular mean: the frequency wraps at +-1/(2 TR)
                    w = 2 * math.pi * seq.tr_ms * 1e-3
                    mean = np.angle(np.nanmean(np.exp(1j * w * stackd), axis=0)) / w
                else:
                    mean = np.nanmean(stackd, axis=0)
                mapio.write_map(out, name, mean, quantity=name, **prov, combined="mean of repetitions")
    final = {n: mapio.read_map(out / n)[0] for n in MAP_NAMES}
    if not args.no_figures:
        from celf.harness.report import plot_maps

        plot_maps(final, out / "maps.png", f"{args.method.upper()} N={args.n}")
    flags = final["flag"].astype(np.int64)
    print(f"fitted {flags.size} voxels x {len(results)} stack(s): "
          f"{int(np.count_nonzero(flags & 16))} failed, {int(np.count_nonzero(flags & 2))} nonphysical, "
          f"{int(np.count_nonzero(flags & 1))} singular -> {out}")
    return EXIT_OK


# -- mc ---------------------------------------------------------------------

def cmd_mc(args) -> int:
    seed = args.seed_override
    if seed is None and "CELF_SEED" in os.environ:
        try:
            in_file = "seed" in json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError):
            in_file = False
        seed = None if in_file else _default_seed()
    cfg = McConfig.from_json(args.config, seed=seed, reps=args.reps)
    dictionary = EllipseDictionary.load(args.dict) if args.dict else None
    cells = run_monte_carlo(cfg, dictionary, threads=args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(results_csv(cfg, cells))
    if not args.no_figures:
        from celf.harness.report import plot_mape

        plot_mape(results_rows(cfg, cells), out.with_name(out.stem + "_mape.png"))
    print(f"{len(cells)} cells x {cfg.reps} reps -> {out}")
    return EXIT_OK


# -- synth ------------------------------------------------------------------

def cmd_synth(args) -> int:
    src = Path(args.maps)
    t1, meta = mapio.read_map(src / "t1_ms")
    t2 = mapio.read_map(src / "t2_ms")[0]
    bf = mapio.read_map(src / "banding_free_re")[0] + 1j * mapio.read_map(src / "banding_free_im")[0]
    flip_map = mapio.read_map(src / "flip_actual_rad")[0]
    prov = meta.get("provenance", {})
    if "tr_ms" not in prov:
        raise ConfigError("map sidecar lacks tr_ms")
    seq = SequenceParams(prov["tr_ms"], prov["te_ms"], prov["flip_nominal_rad"])
    targets = [math.radians(f) for f in args.flips]
    out_imgs = np.full((len(targets),) + t1.shape, math.nan)
    for idx in np.ndindex(t1.shape):
        if not (np.isfinite(t1[idx]) and np.isfinite(t2[idx]) and np.isfinite(bf[idx])):
            continue
        est = Estimates(t1[idx], t2[idx], math.nan, complex(bf[idx]), math.nan, math.nan,
                        math.nan, Validity.OK, flip_rad=float(flip_map[idx]))
        try:
            out_imgs[(slice(None),) + idx] = np.abs(synthesize_flip(est, seq, targets))
        except (NumericalError, ValueError):
            continue
    out = Path(args.out)
    images = {}
    for f, img in zip(args.flips, out_imgs):
        name = f"synth_{f:g}deg"
        mapio.write_map(out, name, img, quantity="banding_free_magnitude", target_flip_deg=f, **prov)
        images[name] = img
    if not args.no_figures:
        from celf.harness.report import plot_images

        plot_images(images, out / "synth.png")
    print(f"synthesized {len(targets)} flip angle(s) -> {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="celf", description="Constrained ellipse fitting for phase-cycled bSSFP.")
    p.add_argument("--threads", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="print one simulated phase-cycle set as CSV")
    s.add_argument("--tissue", choices=sorted(TISSUES))
    s.add_argument("--t1", type=float)
    s.add_argument("--t2", type=float)
    s.add_argument("--m0", type=float, default=1.0)
    s.add_argument("--tr", type=float, default=8.0)
    s.add_argument("--te", type=float, default=4.0)
    s.add_argument("--flip", type=float, default=40.0, help="degrees")
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--theta0", type=float, default=0.0, help="rad")
    s.add_argument("--phi", type=float, default=0.0, help="rad")
    s.add_argument("--snr", type=float, default=math.inf)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("phantom", help="write a numerical block phantom")
    s.add_argument("--spec", help="phantom spec JSON (defaults used when omitted)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("dict", help="ellipse dictionary tools")
    dsub = s.add_subparsers(dest="dict_command", required=True)
    b = dsub.add_parser("build", help="simulate and save a dictionary")
    b.add_argument("--tr", type=float, required=True)
    b.add_argument("--te", type=float, required=True)
    b.add_argument("--flip", type=float, required=True, help="degrees")
    b.add_argument("--n", type=int, default=4)
    b.add_argument("--physical", action="store_true", help="drop pairs with T2 > T1")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_dict_build)

    s = sub.add_parser("fit", help="fit parameter maps to a complex stack")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--method", choices=("celf", "planet"), default="celf")
    s.add_argument("--n", type=int, choices=(4, 6, 8), default=4)
    s.add_argument("--dict")
    s.add_argument("--b1", help="actual flip angle map (rad), .f32 with sidecar")
    s.add_argument("--out", required=True)
    s.add_argument("--planet-variant", choices=("rot", "gs"), default="gs")
    s.add_argument("--planet-offres", choices=("planet", "celf"), default="planet")
    s.add_argument("--tr", type=float)
    s.add_argument("--te", type=float)
    s.add_argument("--flip", type=float, help="nominal flip, degrees")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("mc", help="Monte-Carlo MAPE study")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dict")
    s.add_argument("--reps", type=int)
    s.add_argument("--seed", dest="seed_override", type=int)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_mc)

    s = sub.add_parser("synth", help="synthesize banding-free images at other flip angles")
    s.add_argument("--maps", required=True)
    s.add_argument("--flips", type=_floats, required=True, help="degrees, comma separated")
    s.add_argument("--out", required=True)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if getattr(args, "seed", "absent") is None:
            args.seed = _default_seed()
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
