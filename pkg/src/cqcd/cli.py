"""Command-line entry points.

Every subcommand prints one JSON line on stdout. Exit codes: 0 ok,
1 tolerance failure, 2 usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .imaging import (
    DimensionError,
    ImageFormatError,
    average_frames,
    field_error,
    frame_paths,
    load_field,
    load_image,
    psnr,
    save_field,
    save_image,
    ssim,
)
from .quasiconformal import beltrami, diagnostics
from .simulator import PRESETS, GroundTruthBundle, TurbulenceConfig, default_scene, generate
from .tightframe import build_filter_bank, decompose, reconstruct

log = logging.getLogger("cqcd")

REPORT_VERSION = 1
EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3

UEP_TOL = 1e-12
RECON_TOL = 1e-9
GRAD_TOL = 1e-4

# flag name -> RestorationConfig field
RESTORE_FLAGS = {"lambda": "lam", "tf_level": "tf_level", "backend": "backend", "epochs": "epochs", "seed": "seed"}
SIMULATE_KEYS = {"preset", "frames", "seed", "amplitude", "correlation_length", "blur_sigma", "noise_sigma"}


class UsageError(Exception):
    pass


class ToleranceFailure(Exception):
    def __init__(self, record: dict):
        super().__init__("tolerance exceeded")
        self.record = record


def emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True, allow_nan=False))


def _finite_or_marker(v: float):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def read_config(path) -> dict:
    """Flat JSON object; keys are flag names (dashes or underscores)."""
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise UsageError(f"config file {path} is not valid JSON: {err}")
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise UsageError("config file must be a flat key-value object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def layered(args, file_cfg: dict, flag_keys) -> dict:
    """defaults < config file < flags; flags left at None do not override."""
    merged = dict(file_cfg)
    for key in flag_keys:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


# --- simulate -------------------------------------------------------------------

def turbulence_config(merged: dict) -> TurbulenceConfig:
    unknown = set(merged) - SIMULATE_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    frames = merged.get("frames", 10)
    if int(frames) < 1:
        raise UsageError("--frames must be >= 1")
    cfg = TurbulenceConfig.from_preset(merged.get("preset", "mild"), T=int(frames), seed=int(merged.get("seed", 0)))
    overrides = {k: float(merged[k]) for k in ("amplitude", "correlation_length", "blur_sigma", "noise_sigma")
                 if k in merged}
    return cfg.with_(**overrides) if overrides else cfg


def cmd_simulate(args) -> int:
    cfg = turbulence_config(layered(args, read_config(args.config), ("preset", "frames", "seed")))
    clean = default_scene(args.size) if args.input == "builtin" else load_image(args.input)
    out = Path(args.out or args.out_dir or "bundle")
    bundle = generate(clean, cfg)
    bundle.save(out)
    emit({"T": cfg.T, "preset": cfg.preset, "seed": cfg.seed,
          "mean_field_magnitude": bundle.mean_field_magnitude(), "out": str(out)})
    return EXIT_OK


# --- restore --------------------------------------------------------------------

def restoration_config(args):
    from .restoration import RestorationConfig

    merged = {}
    for key, val in read_config(args.config).items():
        merged[RESTORE_FLAGS.get(key, key)] = val
    for flag, key in RESTORE_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            merged[key] = val
    if merged.get("lam", 0) < 0:
        raise UsageError("--lambda must be >= 0")
    try:
        return RestorationConfig.from_dict(merged)
    except (TypeError, ValueError) as err:
        raise UsageError(str(err))


def read_frames(source) -> list:
    src = Path(source)
    paths = frame_paths(src) if src.is_dir() else [src]
    if not paths:
        raise UsageError(f"no frame_*.png files in {src}")
    return [load_image(p) for p in paths]


def cmd_restore(args) -> int:
    from .restoration import optimize

    cfg = restoration_config(args)
    frames = read_frames(args.frames_dir)
    if len({f.shape for f in frames}) != 1:
        raise UsageError("input frames differ in size")
    out = Path(args.out or "restored")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    start = time.perf_counter()
    restored, fields, state = optimize(cfg, frames)
    wall = time.perf_counter() - start
    save_image(restored, out / "restored.png")
    inverses = state.inverse_fields()
    for t, (f, g) in enumerate(zip(fields, inverses)):
        save_field(f, out / f"est_field_{t:03d}.fld")
        save_field(g, out / f"inv_field_{t:03d}.fld")
    state.write_losses_csv(out / "losses.csv")
    last = state.history[-1]
    report = {
        "version": REPORT_VERSION,
        "config": cfg.to_dict(),
        "frames": len(frames),
        "epochs_run": len(state.history),
        "final_losses": {"l_rec": last.l_rec, "l_dist": last.l_dist, "l_bc": last.l_bc,
                         "l_de": last.l_de, "l_br": last.l_br},
        "mean_displacement": float(np.mean([f.magnitude().mean() for f in fields])),
        "fields": {
            "forward": [diagnostics(f).to_dict() for f in fields],
            "inverse": [diagnostics(g).to_dict() for g in inverses],
        },
        "warnings": list(state.warnings),
        "wall_time_s": wall,
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True, allow_nan=False) + "\n")
    diag = report["fields"]["forward"] + report["fields"]["inverse"]
    sup = max(math.inf if d["sup_mu"] is None else d["sup_mu"] for d in diag)
    emit({"out": str(out), "epochs_run": report["epochs_run"], "l_de": last.l_de, "l_bc": last.l_bc,
          "fold_count": sum(d["fold_count"] for d in diag), "max_sup_mu": _finite_or_marker(sup),
          "wall_time_s": wall})
    return EXIT_OK


# --- evaluate -------------------------------------------------------------------

def _load_report(run: Path):
    path = run / "report.json"
    if not path.exists():
        return None
    report = json.loads(path.read_text())
    if report.get("version") != REPORT_VERSION:
        raise UsageError(f"unsupported report version {report.get('version')!r}")
    return report


def cmd_evaluate(args) -> int:
    run, ref = Path(args.run), Path(args.reference)
    restored_path = run / "restored.png" if run.is_dir() else run
    clean_path = ref / "clean.png" if ref.is_dir() else ref
    if not clean_path.exists():
        raise UsageError(f"missing reference image {clean_path}")
    if run.is_dir():
        _load_report(run)
    restored, clean = load_image(restored_path), load_image(clean_path)
    value = psnr(restored, clean)
    record = {"psnr": _finite_or_marker(value), "ssim": ssim(restored, clean)}
    if ref.is_dir():
        frames = frame_paths(ref)
        if frames:
            avg = average_frames([load_image(p) for p in frames])
            record["baseline_psnr"] = _finite_or_marker(psnr(avg, clean))
            record["baseline_ssim"] = ssim(avg, clean)
        refs = sorted(ref.glob("field_*.fld"))
        if run.is_dir() and refs:
            # the estimated correction f_t undoes the distortion; its inverse
            # is the quantity comparable to the simulator's field
            pattern = "inv_field_*.fld" if args.field_kind == "inverse" else "est_field_*.fld"
            ests = sorted(run.glob(pattern))
            if ests:
                if len(ests) != len(refs):
                    raise UsageError(f"{len(ests)} estimated fields but {len(refs)} reference fields")
                errs = [field_error(load_field(e), load_field(r)) for e, r in zip(ests, refs)]
                record["epe_mean"] = [e[0] for e in errs]
                record["epe_max"] = [e[1] for e in errs]
                record["mean_epe"] = float(np.mean([e[0] for e in errs]))
                record["zero_field_epe"] = float(np.mean([load_field(r).magnitude().mean() for r in refs]))
    emit(record)
    return EXIT_OK


# --- diagnostics ----------------------------------------------------------------

def cmd_tf_roundtrip(args) -> int:
    img = load_image(args.image)
    bank = build_filter_bank()
    uep = bank.uep_residual()
    err = 0.0
    for c in range(img.shape[2]):
        back = reconstruct(decompose(img[:, :, c], args.tf_level, bank), bank)
        err = max(err, float(np.max(np.abs(back - img[:, :, c]))))
    record = {"uep_residual": uep, "recon_error": err, "level": args.tf_level}
    if uep > UEP_TOL or err > RECON_TOL:
        raise ToleranceFailure(record)
    emit(record)
    return EXIT_OK


def cmd_inspect_bc(args) -> int:
    fld = load_field(args.field)
    diag = diagnostics(fld)
    if args.mu_image:
        mag = beltrami(fld).magnitude(clamp=1.0)
        save_image(np.clip(mag, 0, 1), args.mu_image, bits=16)
    record = diag.to_dict()
    if not diag.bounded:
        raise ToleranceFailure(record)
    emit(record)
    return EXIT_OK


def gradient_instance(seed: int = 0, lam: float = 0.1, size: int = 16, frames: int = 3,
                      preset: str = "mild", warmup: int = 3):
    """A small restoration state away from the identity start."""
    import torch

    from .restoration import RestorationConfig, RestorationState

    bundle = generate(default_scene(size, seed=seed), TurbulenceConfig.from_preset(preset, T=frames, seed=seed))
    state = RestorationState(RestorationConfig(lam=lam, seed=seed), bundle.frames)
    with torch.no_grad():
        for p in state.estimator.parameters():
            p.normal_(0, 0.7, generator=torch.Generator().manual_seed(seed))
    for _ in range(warmup):
        state.step()
    return state


def cmd_gradient_check(args) -> int:
    from .restoration import gradient_check

    lam = 0.1 if args.__dict__.get("lambda") is None else args.__dict__["lambda"]
    if lam < 0:
        raise UsageError("--lambda must be >= 0")
    if args.frames is not None and args.frames < 1:
        raise UsageError("--frames must be >= 1")
    state = gradient_instance(args.seed or 0, lam, frames=args.frames or 3, preset=args.preset or "mild")
    err = gradient_check(state, n_params=args.params, seed=args.seed or 0)
    record = {"max_rel_grad_err": err, "n_params": args.params}
    if not err <= GRAD_TOL:
        raise ToleranceFailure(record)
    emit(record)
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cqcd", description="Multi-frame turbulence restoration toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log one line per alternation phase")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="distort a clean image into a ground-truth bundle")
    s.add_argument("input", help="clean image, or 'builtin' for the synthetic test scene")
    s.add_argument("out_dir", nargs="?", help="bundle directory (same as --out)")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--frames", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--size", type=int, default=64, help="side of the builtin scene")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("restore", help="restore a frame sequence")
    r.add_argument("frames_dir", help="directory of frame_*.png, e.g. a simulate bundle")
    r.add_argument("--lambda", type=float, help="weight of the Beltrami regularizer")
    r.add_argument("--tf-level", type=int)
    r.add_argument("--backend", choices=["grid", "conv"])
    r.add_argument("--epochs", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--config")
    r.add_argument("--out")
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("evaluate", help="score a restore run against a reference")
    e.add_argument("run", help="restore output directory or a restored image")
    e.add_argument("reference", help="simulate bundle directory or a clean image")
    e.add_argument("--field-kind", choices=["inverse", "forward"], default="inverse",
                   help="which estimated fields to compare with the reference distortions")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_evaluate)

    t = sub.add_parser("tf-roundtrip", help="tight-frame identity and reconstruction check")
    t.add_argument("image")
    t.add_argument("--tf-level", type=int, default=1, choices=[1, 2, 3])
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_tf_roundtrip)

    b = sub.add_parser("inspect-bc", help="Beltrami diagnostics of a stored field")
    b.add_argument("field")
    b.add_argument("--mu-image", help="save |mu| (clipped to 1) as a 16-bit grayscale PNG")
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_inspect_bc)

    g = sub.add_parser("gradient-check", help="autograd versus central differences")
    g.add_argument("--lambda", type=float)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--frames", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--params", type=int, default=64)
    g.set_defaults(func=cmd_gradient_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    threads = os.environ.get("CQCD_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    from .restoration import NumericalFailure

    try:
        return args.func(args)
    except ToleranceFailure as fail:
        emit(fail.record)
        return EXIT_TOLERANCE
    except NumericalFailure as fail:
        emit({"error": str(fail), "dump": fail.dump})
        return EXIT_NUMERICAL
    except (UsageError, DimensionError, ImageFormatError, FileNotFoundError, ValueError) as err:
        print(f"cqcd {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
