"""Command-line front end.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error (missing
or malformed input, unwritable output), 4 internal invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .acquisition import read_histogram_csv, scan, write_histogram_csv, write_tags_binary, write_tags_csv
from .config import Config, ConfigError, defaults, load, paper_scale
from .errors import DomainError, InsufficientDataError, InvariantError
from .fitting import analyze_waveform
from .fusion import ScalarImage, fuse_pipeline, read_image_csv, write_image_csv, write_pgm16
from .geometry import ScanFrame, read_cloud_csv, to_point_cloud, triangulate, write_cloud_csv, write_fit_csv, write_ply
from .sweeps import StudyReport, run_study, write_manifest

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INVARIANT = 0, 2, 3, 4

EFFECTIVE_CONFIG = "effective-config.ini"
SCAN_INDEX = "scan_index.csv"
INDEX_COLUMNS = ["row", "col", "vx", "vy", "pulses_fired", "detections", "hit_fraction", "true_range_mm", "histogram", "tags"]


class InputError(Exception):
    """Missing or malformed input files (exit 3)."""


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _config(args) -> Config:
    cfg = load(args.config) if getattr(args, "config", None) else defaults()
    if getattr(args, "paper_scale", False):
        cfg = paper_scale(cfg)
    return cfg


def _input_config(in_dir: Path, override: str | None) -> Config:
    if override:
        return load(override)
    path = in_dir / EFFECTIVE_CONFIG
    if not path.is_file():
        raise InputError(f"{in_dir}: no {EFFECTIVE_CONFIG}; was it written by 'simulate'?")
    return load(path)


def _require_dir(path: Path) -> Path:
    if not path.is_dir():
        raise InputError(f"input directory {path} does not exist")
    return path


def _finish(out_dir: Path, name: str, cfg: Config, seed: int, params, artifacts) -> Path:
    cfg_path = out_dir / EFFECTIVE_CONFIG
    cfg_path.write_text(cfg.text())
    report = StudyReport(name, list(params), [*artifacts, cfg_path])
    return write_manifest(report, out_dir, cfg.digest(), seed)


# ------------------------------------------------------------ commands --

def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = cfg.grid()
    base = Path(args.config).parent if args.config else None
    fmt = cfg["analysis"]["tags_format"]
    res = scan(cfg.scene(base), grid, cfg.beam(), cfg.detector(), cfg.bias, cfg.acquisition(), args.seed, workers=args.workers, keep_tags=fmt != "none")
    (out / "histograms").mkdir(exist_ok=True)
    if fmt != "none":
        (out / "tags").mkdir(exist_ok=True)
    artifacts, index = [], []
    for p in res.pixels:
        stem = f"r{p.row:04d}_c{p.col:04d}"
        hist = out / "histograms" / f"{stem}.csv"
        write_histogram_csv(p.waveform, hist)
        artifacts.append(hist)
        tag_name = ""
        if fmt == "csv":
            tag_path = out / "tags" / f"{stem}.csv"
            write_tags_csv(p.tags, tag_path)
        elif fmt == "binary":
            tag_path = out / "tags" / f"{stem}.bin"
            write_tags_binary(p.tags, tag_path)
        if fmt != "none":
            artifacts.append(tag_path)
            tag_name = tag_path.relative_to(out).as_posix()
        index.append([p.row, p.col, repr(p.vx), repr(p.vy), p.waveform.pulses_fired, p.waveform.detections,
                      repr(p.hit_fraction), repr(p.true_range), hist.relative_to(out).as_posix(), tag_name])
    idx_path = out / SCAN_INDEX
    with open(idx_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INDEX_COLUMNS)
        w.writerows(index)
    artifacts.append(idx_path)
    detections = sum(p.waveform.detections for p in res.pixels)
    manifest = _finish(out, "simulate", cfg, args.seed, [("pixels", len(res.pixels)), ("detections", detections)], artifacts)
    _say(f"simulated {len(res.pixels)} pixels, {detections} detections -> {manifest}")
    return EXIT_OK


def _read_index(in_dir: Path) -> list[dict[str, str]]:
    path = in_dir / SCAN_INDEX
    if not path.is_file():
        raise InputError(f"{in_dir}: no {SCAN_INDEX}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != INDEX_COLUMNS:
            raise InputError(f"{path}: unexpected columns {reader.fieldnames}")
        return list(reader)


def cmd_analyze(args) -> int:
    in_dir = _require_dir(Path(args.in_dir))
    cfg = _input_config(in_dir, args.config)
    grid = cfg.grid()
    rows, cols = grid.shape
    index = _read_index(in_dir)
    if len(index) != rows * cols:
        raise InputError(f"{in_dir}: index lists {len(index)} pixels, config grid has {rows * cols}")
    a = cfg["analysis"]
    gate = cfg.analysis_gate()
    fits = [None] * (rows * cols)
    for rec in index:
        r, c = int(rec["row"]), int(rec["col"])
        try:
            wf = read_histogram_csv(in_dir / rec["histogram"], cfg["tdc"]["bin_ps"], int(rec["pulses_fired"]))
        except ValueError as e:
            raise InputError(str(e)) from e
        fits[r * cols + c] = analyze_waveform(wf, gate, a["min_prominence"], a["min_separation_ps"], a["smooth_ps"], a["method"])
    if any(f is None for f in fits):
        raise InputError(f"{in_dir}: index does not cover every pixel")
    frame = ScanFrame.from_fits(grid, fits)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = [out / "fits.csv", out / "distance.csv", out / "peak_height.csv", out / "jitter.csv", out / "cloud.csv"]
    write_fit_csv(frame, artifacts[0])
    ok = frame.converged
    write_image_csv(ScalarImage(rows, cols, frame.distance, "distance_mm"), artifacts[1])
    write_image_csv(ScalarImage(rows, cols, np.where(ok, frame.amplitude, np.nan), "peak_height"), artifacts[2])
    write_image_csv(ScalarImage(rows, cols, np.where(ok, frame.fwhm, np.nan), "jitter_fwhm_ps"), artifacts[3])
    write_cloud_csv(to_point_cloud(frame, grid), artifacts[4])
    n_ok = int(ok.sum())
    manifest = _finish(out, "analyze", cfg, 0, [("pixels", rows * cols), ("converged", n_ok)], artifacts)
    _say(f"fitted {rows * cols} pixels ({n_ok} converged) -> {manifest}")
    return EXIT_OK


def _read_image(path: Path) -> ScalarImage:
    if not path.is_file():
        raise InputError(f"missing image {path}")
    try:
        return read_image_csv(path)
    except ValueError as e:
        raise InputError(str(e)) from e


def cmd_fuse(args) -> int:
    in_dir = _require_dir(Path(args.in_dir))
    cfg = _input_config(in_dir, args.config)
    peak = _read_image(in_dir / "peak_height.csv")
    jit = _read_image(in_dir / "jitter.csv")
    fused = fuse_pipeline(peak, jit, cfg.fusion())
    fused.channel_label = "fused"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = [out / "fused.csv", out / "fused.pgm"]
    write_image_csv(fused, artifacts[0])
    write_pgm16(fused, artifacts[1])
    manifest = _finish(out, "fuse", cfg, 0, [("rows", fused.rows), ("cols", fused.cols)], artifacts)
    _say(f"fused {fused.rows}x{fused.cols} image -> {manifest}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    src = Path(args.in_path)
    if src.is_dir():
        cloud_path = src / "cloud.csv"
        cfg_path = src / EFFECTIVE_CONFIG
        cfg = load(args.config) if args.config else (load(cfg_path) if cfg_path.is_file() else defaults())
        grid = cfg.grid() if (args.config or cfg_path.is_file()) else None
        fused_path = Path(args.fused) if args.fused else src / "fused.csv"
    elif src.is_file():
        cloud_path = src
        cfg = load(args.config) if args.config else defaults()
        grid = cfg.grid() if args.config else None
        fused_path = Path(args.fused) if args.fused else None
    else:
        raise InputError(f"input {src} does not exist")
    if not cloud_path.is_file():
        raise InputError(f"missing point cloud {cloud_path}")
    try:
        cloud = read_cloud_csv(cloud_path, grid)
    except (ValueError, IndexError) as e:
        raise InputError(f"{cloud_path}: {e}") from e
    if fused_path is not None and fused_path.is_file():
        img = _read_image(fused_path)
        cloud.channels["fused"] = img.data[cloud.rows, cloud.cols]
    f = cfg["fusion"]
    channel = f["mesh_channel"]
    if channel == "fused" and not np.any(np.isfinite(cloud.channels["fused"])):
        channel = "peak_height"
    mesh = triangulate(cloud, f["max_edge_mm"], channel, f["colormap"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ply(mesh, out)
    _say(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} faces ({channel}) -> {out}")
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = _config(args)
    report = run_study(args.name, cfg, args.seed, args.out, workers=args.workers, progress=_say)
    for k, v in report.parameters:
        print(f"{k} = {v}")
    return EXIT_OK


# -------------------------------------------------------------- parser --

def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("seed must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snspd-lidar", description="Photon-counting SNSPD lidar simulator and analysis chain.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, seed=True, workers=True, scale=True):
        sp.add_argument("--config", help="INI configuration file (defaults are used when omitted)")
        if seed:
            sp.add_argument("--seed", type=_seed, default=0, help="master RNG seed (default 0)")
        if workers:
            sp.add_argument("--workers", type=_positive_int, default=1, help="worker processes; results do not depend on it")
        if scale:
            sp.add_argument("--paper-scale", action="store_true", help="full-size scan and 100 ms integration")

    s = sub.add_parser("simulate", help="scan a scene and write time tags and histograms")
    common(s)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("analyze", help="fit every histogram and write images and a point cloud")
    s.add_argument("in_dir", help="directory written by 'simulate'")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="override the input's effective configuration")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("fuse", help="Fourier-fuse the peak-height and jitter images")
    s.add_argument("in_dir", help="directory written by 'analyze'")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="override the input's effective configuration")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("mesh", help="triangulate a point cloud into a coloured PLY")
    s.add_argument("in_path", help="directory written by 'analyze', or a point-cloud CSV")
    s.add_argument("--out", required=True, help="output PLY path")
    s.add_argument("--config", help="configuration for grid, colormap and channel")
    s.add_argument("--fused", help="fused image CSV used for the 'fused' colour channel")
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("study", help="run a characterisation study")
    s.add_argument("name", choices=("bias", "resolution", "nbar"))
    common(s)
    s.add_argument("--out", required=True, help="output root; results go to OUT/NAME")
    s.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse: 0 for --help, 2 for usage errors
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        _say(f"config error: {e}")
        return EXIT_CONFIG
    except (InputError, OSError) as e:
        _say(f"I/O error: {e}")
        return EXIT_IO
    except (InvariantError, DomainError, InsufficientDataError) as e:
        # a valid configuration should never reach these
        _say(f"invariant violated: {e}")
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
