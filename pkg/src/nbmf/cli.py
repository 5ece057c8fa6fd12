"""Command-line front end: ``nbmf simulate | train | extract | evaluate | run-all | preset``.

Exit codes: 0 success, 2 configuration error, 3 data mismatch, 4 numerical failure.
The ``NBMF_THREADS`` environment variable sets the number of trainer worker
threads; ``--deterministic`` (default) keeps gradient reduction ordered.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import SCALES, SCENARIOS, ConfigError, ExperimentConfig, preset
from .field import CheckpointError, load_checkpoint, read_checkpoint_header, save_checkpoint
from .geometry import fov_radius
from .metrics import MetricReport, bilinear_resample, evaluate, extract_image, row_profile
from .phantom import DensityImage, rasterize
from .projector import Sinogram, add_poisson_noise, simulate_sinogram
from .trainer import NumericalError, TrainingDiverged, new_field, train

log = logging.getLogger("nbmf")

EXIT_OK, EXIT_CONFIG, EXIT_MISMATCH, EXIT_NUMERICAL = 0, 2, 3, 4
THREADS_ENV = "NBMF_THREADS"


class DataMismatch(RuntimeError):
    """Inputs on disk disagree with the configuration or with each other."""


# -- image files ------------------------------------------------------------------

def save_images(img: DensityImage, names, outdir, png: bool = True) -> list:
    """Per-material ``<name>.f64`` (little-endian float64) plus ``images.json``.

    With ``png`` a 16-bit grayscale PNG scaled to the channel maximum is
    written next to each float file for viewing.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files, scales = [], []
    for name, ch in zip(names, img.data):
        (outdir / f"{name}.f64").write_bytes(np.ascontiguousarray(ch, dtype="<f8").tobytes())
        files.append(f"{name}.f64")
        peak = float(ch.max())
        scales.append(peak)
        if png:
            _write_png16(outdir / f"{name}.png", ch, peak)
    side = {"materials": list(names), "files": files, "resolution": img.resolution,
            "pixel_size_mm": img.pixel_size, "dtype": "float64-le", "png_peak": scales}
    (outdir / "images.json").write_text(json.dumps(side, indent=2) + "\n")
    return files


def _write_png16(path, ch: np.ndarray, peak: float) -> None:
    from PIL import Image

    scaled = np.zeros_like(ch) if peak <= 0 else np.clip(ch / peak, 0.0, 1.0)
    Image.fromarray(np.round(scaled * 65535).astype(np.uint16)).save(path)


def load_images(directory) -> tuple[DensityImage, list]:
    directory = Path(directory)
    side_path = directory / "images.json"
    if not side_path.is_file():
        raise DataMismatch(f"{directory}: no images.json sidecar")
    side = json.loads(side_path.read_text())
    n = side["resolution"]
    chans = []
    for f in side["files"]:
        raw = np.frombuffer((directory / f).read_bytes(), dtype="<f8")
        if raw.size != n * n:
            raise DataMismatch(f"{directory / f}: expected {n * n} values, found {raw.size}")
        chans.append(raw.reshape(n, n))
    return DensityImage(np.stack(chans), side["pixel_size_mm"]), side["materials"]


def write_profiles(outdir, rows, recon: DensityImage, names, truth: DensityImage | None = None) -> list:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for r in rows:
        for m, name in enumerate(names):
            prof = row_profile(recon.data[m], r)
            cols = [np.arange(prof.size), prof]
            header = "column,value"
            if truth is not None:
                cols.append(row_profile(truth.data[m], r))
                header = "column,value,truth"
            path = outdir / f"profile_{name}_row{r}.csv"
            np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="",
                       fmt=["%d"] + ["%.9g"] * (len(cols) - 1))
            written.append(path)
    return written


# -- stages -------------------------------------------------------------------------

def _material_names(cfg: ExperimentConfig) -> list:
    return [m["name"] for m in cfg.materials]


def _outdir(cfg: ExperimentConfig, override=None) -> Path:
    out = Path(override or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(cfg.dumps())
    return out


def stage_simulate(cfg: ExperimentConfig, out: Path) -> Path:
    geom = cfg.build_geometry()
    ph = cfg.build_phantom()
    ph.check_fits(fov_radius(geom))
    spectra, mats = cfg.build_spectra(), cfg.build_materials()
    t0 = time.perf_counter()
    sino = simulate_sinogram(ph, geom, spectra, mats, cfg.simulation_step(geom)).quantized()
    sino.save(out / "sinogram" / "clean")
    if cfg.noise:
        noisy = add_poisson_noise(sino, cfg.noise["i0"], cfg.noise["seed"]).quantized()
        noisy.save(out / "sinogram" / "noisy")
        log.info("noisy copy: i0=%g, %d zero counts clamped", cfg.noise["i0"], noisy.meta["n_clamped"])
    truth = rasterize(ph, geom, cfg.evaluate["resolution"])
    save_images(truth, _material_names(cfg), out / "truth")
    log.info("simulated %s sinograms in %.1fs", "x".join(str(len(a)) for a in geom.angle_sets),
             time.perf_counter() - t0)
    return out / "sinogram"


def _training_sinogram(cfg: ExperimentConfig, out: Path) -> Sinogram:
    side = out / "sinogram" / ("noisy.json" if cfg.noise else "clean.json")
    if not side.is_file():
        raise DataMismatch(f"{side}: sinogram not found (run 'nbmf simulate' first)")
    sino = Sinogram.load(side)
    expected = cfg.build_geometry()
    if sino.geometry != expected:
        raise DataMismatch(f"{side}: sidecar geometry does not match the configuration")
    labels = [s.label for s in cfg.build_spectra()]
    if list(sino.labels) != labels:
        raise DataMismatch(f"{side}: spectrum labels {sino.labels} != configured {labels}")
    return sino


def stage_train(cfg: ExperimentConfig, out: Path) -> Path:
    sino = _training_sinogram(cfg, out)
    geom = sino.geometry
    spectra, mats = cfg.build_spectra(), cfg.build_materials()
    tcfg = cfg.train
    if tcfg.checkpoint_every and not tcfg.checkpoint_dir:
        tcfg = replace(tcfg, checkpoint_dir=str(out / "checkpoints"))
    extra = {"materials": _material_names(cfg)}
    ckpt = out / "checkpoints" / "final.ckpt"

    def progress(epoch, loss_value, fld):
        if epoch == 1 or epoch % max(1, tcfg.epochs // 20) == 0:
            log.info("epoch %d/%d loss %.6g", epoch, tcfg.epochs, loss_value)

    t0 = time.perf_counter()
    try:
        fld, hist = train(sino, geom, spectra, mats, tcfg, progress=progress)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, out / "checkpoints" / "last_good.ckpt", extra)
        raise
    wall = time.perf_counter() - t0
    save_checkpoint(fld, ckpt, extra)
    hist.to_csv(out / "train_log.csv")
    summary = {"epochs": tcfg.epochs, "final_loss": hist.losses[-1] if hist.losses else None,
               "wall_seconds": wall, "arch_hash": fld.architecture_hash(), "n_params": fld.n_params()}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("trained %d epochs in %.1fs", tcfg.epochs, wall)
    return ckpt


def stage_extract(ckpt, n: int, outdir, rows=(), expected_hash=None, names=None) -> DensityImage:
    fld = load_checkpoint(ckpt, expected_hash)
    header = read_checkpoint_header(ckpt)
    names = names or header.get("materials") or [f"m{i}" for i in range(fld.n_materials)]
    img = extract_image(fld, None, n)
    save_images(img, names, outdir)
    rows = [r for r in rows if 0 <= r < n]
    write_profiles(outdir, rows, img, names)
    return img


def stage_evaluate(recon_dir, truth_dir, rows=(), resample: bool = False, outdir=None) -> MetricReport:
    recon, names = load_images(recon_dir)
    truth, tnames = load_images(truth_dir)
    if names != tnames:
        raise DataMismatch(f"material lists differ: {names} vs {tnames}")
    if recon.resolution != truth.resolution:
        if not resample:
            raise DataMismatch(f"resolution {recon.resolution} vs truth {truth.resolution}; "
                               "pass --resample to bilinearly resample the ground truth")
        truth = bilinear_resample(truth, recon.resolution)
    rep = evaluate(recon, truth, names)
    outdir = Path(outdir or recon_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    rep.to_csv(outdir / "report.csv")
    write_profiles(outdir, [r for r in rows if 0 <= r < recon.resolution], recon, names, truth)
    return rep


def run_all(cfg: ExperimentConfig, out: Path) -> dict:
    stage_simulate(cfg, out)
    ckpt = stage_train(cfg, out)
    names = _material_names(cfg)
    n = cfg.evaluate["resolution"]
    rows = cfg.evaluate.get("rows", [])
    reports = {}
    stage_extract(ckpt, n, out / f"recon_{n}", rows, names=names)
    reports[n] = stage_evaluate(out / f"recon_{n}", out / "truth", rows)
    for hn in cfg.evaluate.get("highres", []):
        hrows = [r * hn // n for r in rows]
        stage_extract(ckpt, hn, out / f"recon_{hn}", hrows, names=names)
        reports[hn] = stage_evaluate(out / f"recon_{hn}", out / "truth", hrows, resample=True)
    lines = ["resolution,material,psnr_db,ssim"]
    for res, rep in reports.items():
        for name, p, s in zip(rep.materials, rep.psnr, rep.ssim):
            lines.append(f"{res},{name},{'inf' if np.isinf(p) else f'{p:.6f}'},{s:.6f}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    return reports


# -- argument handling ----------------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    overrides = list(args.set or [])
    if args.deterministic is not None:
        overrides.append(f"train.deterministic={'true' if args.deterministic else 'false'}")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        try:
            n = int(threads)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {threads!r}") from None
        overrides.append(f"train.workers={max(1, n)}")
    return cfg.with_overrides(overrides) if overrides else cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nbmf", description="Material decomposition with neural base-material fields")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("-c", "--config", required=True, help="experiment JSON file")
        p.add_argument("-o", "--output", help="output directory (default: the config's output_dir)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a scalar config field, e.g. train.epochs=10")
        p.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                       help="ordered gradient reduction (default)")
        p.add_argument("--no-deterministic", dest="deterministic", action="store_false")
        return p

    with_config(sub.add_parser("simulate", help="simulate sinograms and ground-truth images"))
    with_config(sub.add_parser("train", help="fit a field to simulated sinograms"))
    with_config(sub.add_parser("run-all", help="simulate, train, extract and evaluate"))

    p = sub.add_parser("extract", help="render material images from a checkpoint")
    p.add_argument("-k", "--checkpoint", required=True)
    p.add_argument("-n", "--resolution", type=int, required=True)
    p.add_argument("-o", "--output", help="output directory (default: recon_<n> beside the checkpoint)")
    p.add_argument("--rows", type=int, nargs="*", default=[])
    p.add_argument("--expect-hash", help="refuse checkpoints with a different architecture hash")

    p = sub.add_parser("evaluate", help="PSNR/SSIM of reconstructions against ground truth")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--rows", type=int, nargs="*", default=[])
    p.add_argument("--resample", action="store_true", help="bilinearly resample truth to the recon size")
    p.add_argument("-o", "--output")

    p = sub.add_parser("preset", help="print a scenario preset as JSON")
    p.add_argument("scenario", choices=SCENARIOS)
    p.add_argument("--scale", choices=SCALES, default="desk")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "preset":
            sys.stdout.write(json.dumps(preset(args.scenario, args.scale), indent=2) + "\n")
        elif args.command == "extract":
            out = args.output or Path(args.checkpoint).parent.parent / f"recon_{args.resolution}"
            stage_extract(args.checkpoint, args.resolution, out, args.rows, args.expect_hash)
            print(f"wrote {out}")
        elif args.command == "evaluate":
            print(stage_evaluate(args.recon, args.truth, args.rows, args.resample, args.output))
        else:
            cfg = _load_config(args)
            out = _outdir(cfg, args.output)
            if args.command == "simulate":
                stage_simulate(cfg, out)
            elif args.command == "train":
                stage_train(cfg, out)
            else:
                for res, rep in run_all(cfg, out).items():
                    print(rep)
            print(f"outputs in {out}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataMismatch, CheckpointError) as exc:
        print(f"data mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
