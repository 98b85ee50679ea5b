"""Command-line front end: simulate, calibrate, decode, stats, jpnd.

Every command is deterministic given its inputs and seed, writes fixed
file names under --out, and prints a small summary JSON on stdout unless
--quiet.  Failures print a machine-readable error JSON on stderr and exit
with: 2 for I/O, format, or config problems; 3 for calibration failures;
4 for incompatible or misaligned inputs; 5 for insufficient data.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import calibrate as cal
from . import photostat as ps
from .decode import PhotonRecordSet, confusion_report, decode_events
from .errors import (
    AlignmentError,
    CalibrationError,
    CompatibilityError,
    ConfigError,
    DataError,
    InsufficientDataError,
    PnrError,
    StreamFormatError,
    StreamOrderError,
    UnboundedFitError,
    UndetectablePulseError,
    UndefinedRatioError,
)
from .simulate import JitterParams, PulseModelParams, SourceSpec, TruthBlock, simulate_stream
from .timetags import pair_edges, read_tag_block, write_stream

DEFAULT_WINDOW_PS = 8000.0
DEFAULT_SEED = 1234

EXIT_IO = 2
EXIT_CALIBRATION = 3
EXIT_COMPATIBILITY = 4
EXIT_INSUFFICIENT = 5


def _emit(args, payload: dict) -> None:
    if not args.quiet:
        print(json.dumps(payload, indent=2, sort_keys=True))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _from_mapping(cls, data, context: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{context} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {context}: {exc}") from exc


_SIMULATE_KEYS = {"source", "pulse", "jitter", "n_triggers", "seed"}


def _load_simulate_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - _SIMULATE_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys in config: {', '.join(unknown)}")
    return raw


def cmd_simulate(args) -> int:
    raw = _load_simulate_config(args.config) if args.config else {}
    source = _from_mapping(SourceSpec, raw.get("source", {}), "source")
    pulse = _from_mapping(PulseModelParams, raw.get("pulse", {}), "pulse")
    jitter = _from_mapping(JitterParams, raw.get("jitter", {}), "jitter")
    n_triggers = args.n_triggers if args.n_triggers is not None else raw.get("n_triggers", 100_000)
    if not isinstance(n_triggers, int) or n_triggers < 1:
        raise ConfigError("n_triggers must be a positive integer")
    seed = args.seed if args.seed is not None else raw.get("seed", DEFAULT_SEED)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    workers = max(int(os.environ.get("PNR_THREADS", "1")), 1)

    out = _out_dir(args)
    tags, truth = simulate_stream(source, pulse, jitter, n_triggers, seed, workers=workers)
    stream_path = out / "stream.pnrtag"
    with open(stream_path, "wb") as f:
        n_bytes = write_stream(tags, f)
    truth.to_csv(out / "truth.csv")

    _emit(
        args,
        {
            "triggers": n_triggers,
            "seed": seed,
            "detections_a": int(np.count_nonzero(truth.true_n_a)),
            "detections_b": int(np.count_nonzero(truth.true_n_b)),
            "detected_mean_a": float(truth.true_n_a.mean()),
            "detected_mean_b": float(truth.true_n_b.mean()),
            "bytes_written": n_bytes,
            "stream": str(stream_path),
        },
    )
    return 0


def _write_projection_csv(path, coords, model, bin_width: float) -> None:
    counts, centers, _ = cal.histogram_1d(coords, bin_width)
    fitted = coords.size * bin_width * cal.mixture_pdf(centers, model.components)
    with open(path, "w", encoding="utf-8") as f:
        f.write("coordinate_ps,counts,fitted_counts\n")
        for x, c, m in zip(centers, counts, fitted):
            f.write(f"{x:.6g},{c},{m:.6g}\n")


def _write_crosstalk_csv(path, crosstalk) -> None:
    k = crosstalk.shape[0]
    with open(path, "w", encoding="utf-8") as f:
        f.write("true_n\\decoded_n," + ",".join(str(j + 1) for j in range(k)) + "\n")
        for i, row in enumerate(crosstalk):
            f.write(f"{i + 1}," + ",".join(f"{v:.9g}" for v in row) + "\n")


def cmd_calibrate(args) -> int:
    block = read_tag_block(args.tagfile)
    events = pair_edges(block, args.window, detector=args.detector)
    out = _out_dir(args)

    hist = cal.build_histogram(events)
    hist.to_csv(out / "histogram2d.csv")

    modes = [args.mode] if args.mode != "both" else [cal.RISING_ONLY, cal.OPTIMAL]
    if set(modes) == {cal.RISING_ONLY, cal.OPTIMAL}:
        models = cal.calibrate_both(events, args.k, detector=args.detector, window_ps=args.window)
    else:
        models = {
            modes[0]: cal.calibrate_events(
                events, modes[0], args.k, detector=args.detector, window_ps=args.window
            )
        }

    summary = {"detector": args.detector, "window_ps": args.window, "detections": events.n_detections}
    for mode, model in models.items():
        model.save_json(out / f"calibration_{mode}.json")
        coords = cal.project(events, model.angle)
        _write_projection_csv(out / f"projection_{mode}.csv", coords, model, cal.DEFAULT_BIN_WIDTH)
        _write_crosstalk_csv(out / f"crosstalk_{mode}.csv", model.crosstalk)
        summary[mode] = {
            "angle_rad": model.angle,
            "k": model.k,
            "total_offdiagonal_crosstalk": cal.total_offdiagonal(
                model.crosstalk, [c.weight for c in model.components]
            ),
        }
    _emit(args, summary)
    return 0


def cmd_decode(args) -> int:
    model = cal.CalibrationModel.load_json(args.calibration)
    block = read_tag_block(args.tagfile)
    if not np.any(block.channels == 0):
        raise CompatibilityError("stream has no trigger channel; zero-photon events cannot be inferred")
    window = args.window if args.window is not None else (model.window_ps or DEFAULT_WINDOW_PS)
    detector = args.detector or model.detector or "A"
    events = pair_edges(block, window, detector=detector)
    records = decode_events(events, model)

    out = _out_dir(args)
    records.to_csv(out / f"records_{detector}.csv")
    records.to_binary(out / f"records_{detector}.pnrec")
    report = dict(records.diagnostics)

    if args.truth:
        truth = TruthBlock.from_csv(args.truth)
        confusion = confusion_report(records, truth, model)
        report["confusion"] = confusion.to_dict()
    with open(out / "decode_report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    _emit(args, {k: report[k] for k in ("class_counts", "out_of_range", "triggers", "detections")})
    return 0


def _load_records(path) -> PhotonRecordSet:
    p = Path(path)
    if p.suffix == ".pnrec":
        return PhotonRecordSet.from_binary(p)
    return PhotonRecordSet.from_csv(p)


def cmd_stats(args) -> int:
    records = _load_records(args.records)
    dist = ps.NumberDistribution.from_records(records, n_max=args.n_max)
    fit = ps.fit_poisson_mu(dist, tail_from=args.tail_from)

    out = _out_dir(args)
    dist.to_csv(out / "number_distribution.csv")
    with open(out / "poisson_fit.json", "w", encoding="utf-8") as f:
        json.dump(fit.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out / "poisson_fit.csv", "w", encoding="utf-8") as f:
        f.write("category,observed,expected\n")
        for label, obs, exp in zip(fit.labels, fit.counts, fit.expected):
            f.write(f"{label},{obs},{exp:.6g}\n")
    _emit(
        args,
        {
            "mu": fit.mu,
            "stderr": fit.stderr,
            "ci95": list(fit.confidence_interval()),
            "chi2_ndf": fit.chi2_ndf,
            "total": int(fit.counts.sum()),
        },
    )
    return 0


def cmd_jpnd(args) -> int:
    records_a = _load_records(args.records_a)
    records_b = _load_records(args.records_b)
    jpnd = ps.build_jpnd(records_a, records_b, n_max=args.n_max)

    out = _out_dir(args)
    jpnd.to_csv(out / "jpnd.csv")
    report: dict = {
        "n_triggers": jpnd.total,
        "two_photon": {
            "(2,0)": int(jpnd.matrix[2, 0]) if jpnd.n_max >= 2 else 0,
            "(0,2)": int(jpnd.matrix[0, 2]) if jpnd.n_max >= 2 else 0,
            "(1,1)": int(jpnd.matrix[1, 1]) if jpnd.n_max >= 1 else 0,
        },
    }
    try:
        eff = ps.estimate_efficiency(jpnd)
        report["efficiency"] = {
            "eta_a": eff.eta_a,
            "eta_b": eff.eta_b,
            "coincidences": eff.coincidences,
            "singles_a": eff.singles_a,
            "singles_b": eff.singles_b,
        }
    except InsufficientDataError as exc:
        if args.split_a is None:
            raise
        report["efficiency"] = {"error": str(exc)}

    if args.split_a is not None or args.split_b is not None:
        if args.split_a is None or args.split_b is None:
            raise ConfigError("--split-a and --split-b must be given together")
        split = ps.build_jpnd(_load_records(args.split_a), _load_records(args.split_b), n_max=args.n_max)
        contrast = ps.hom_contrast(jpnd, split)
        report["hom_contrast"] = contrast.to_dict()

    with open(out / "jpnd_report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    _emit(args, report)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pnrtiming",
        description="Photon-number resolution from rise/fall pulse timing: "
        "simulate tag streams, calibrate projections, decode photon numbers, "
        "and analyze photon statistics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--out", default=".", help="output directory (created if missing)")
        p.add_argument("--quiet", action="store_true", help="suppress the stdout summary")

    p = sub.add_parser("simulate", help="generate a synthetic .pnrtag stream with truth sidecar")
    p.add_argument("--config", help="JSON config with source/pulse/jitter sections")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (overrides config)")
    p.add_argument("--n-triggers", type=int, default=None, help="trigger count (overrides config)")
    add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit projection angle, mixture, boundaries, crosstalk")
    p.add_argument("tagfile", help="input .pnrtag stream")
    p.add_argument("--detector", choices=("A", "B"), default="A")
    p.add_argument("--window", type=float, default=DEFAULT_WINDOW_PS, help="pairing window in ps")
    p.add_argument("--mode", choices=(cal.RISING_ONLY, cal.OPTIMAL, "both"), default="both")
    p.add_argument("--k", type=int, default=None, help="component count (default: found peaks)")
    add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("decode", help="decode photon numbers per trigger using a calibration")
    p.add_argument("tagfile", help="input .pnrtag stream")
    p.add_argument("calibration", help="calibration JSON from the calibrate command")
    p.add_argument("--detector", choices=("A", "B"), default=None, help="default: calibration's detector")
    p.add_argument("--window", type=float, default=None, help="pairing window (default: calibration's)")
    p.add_argument("--truth", default=None, help="truth CSV; adds a confusion report")
    add_common(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("stats", help="photon-number distribution and truncated-Poisson fit")
    p.add_argument("records", help="decoded records (.csv or .pnrec)")
    p.add_argument("--tail-from", type=int, default=4, help="photon numbers >= this share one fit category")
    p.add_argument("--n-max", type=int, default=None, help="display truncation for the distribution")
    add_common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("jpnd", help="joint photon-number distribution of two decoded channels")
    p.add_argument("records_a", help="decoded records for detector A (.csv or .pnrec)")
    p.add_argument("records_b", help="decoded records for detector B (.csv or .pnrec)")
    p.add_argument("--split-a", default=None, help="split-pair records for detector A (enables contrast)")
    p.add_argument("--split-b", default=None, help="split-pair records for detector B (enables contrast)")
    p.add_argument("--n-max", type=int, default=None, help="matrix truncation")
    add_common(p)
    p.set_defaults(func=cmd_jpnd)
    return parser


def _exit_code(exc: Exception, command: str) -> int:
    if isinstance(exc, (StreamFormatError, ConfigError, UndetectablePulseError, OSError)):
        return EXIT_IO
    if isinstance(exc, CalibrationError):
        return EXIT_CALIBRATION
    if isinstance(exc, (InsufficientDataError, UnboundedFitError, UndefinedRatioError)):
        return EXIT_CALIBRATION if command == "calibrate" else EXIT_INSUFFICIENT
    if isinstance(exc, (CompatibilityError, AlignmentError, DataError, StreamOrderError)):
        return EXIT_COMPATIBILITY
    if isinstance(exc, PnrError):
        return EXIT_IO
    raise exc


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - translated to the exit-code contract
        code = _exit_code(exc, args.command)
        print(
            json.dumps(
                {"error": type(exc).__name__, "message": str(exc), "exit_code": code},
                sort_keys=True,
            ),
            file=sys.stderr,
        )
        return code


if __name__ == "__main__":
    sys.exit(main())
