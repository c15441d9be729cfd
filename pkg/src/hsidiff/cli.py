"""Command-line entry point: ``hsidiff <subcommand> ...``.

Subcommands: quantize, profile, tune, run, decode, report. Global flags
(``--seed``, ``--threads``, ``--out``, ``-v``) may appear before or after the
subcommand. Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import yaml

from hsidiff.distortions import DistortionBounds, Layout, audit_rows, decode, tune_bounds
from hsidiff.fitness import Subjects
from hsidiff.metrics import (
    SessionReport, divergence_rate, fdi, success_rate, validation_rate, vargha_delaney_a12,
    wilcoxon_signed_rank,
)
from hsidiff.nn import (
    DEFAULT_SECTIONS, forward, load_intervals, load_model, predict_label, profile_intervals,
    save_intervals,
)
from hsidiff.patches import (
    DEFAULT_PSNR_THRESHOLD, Patch3D, PatchSet, psnr, read_patchset, write_patchset,
)
from hsidiff.quantize import (
    FULL, MODES, WEIGHTS_ONLY, load_qmodel, quantize_weights, quantized_forward, save_qmodel,
)
from hsidiff.search import (
    ConfigError, DiiTracker, SessionConfig, read_dii_file, run_session, write_dii_file,
)

log = logging.getLogger("hsidiff")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

REPORT_COLUMNS = ("config", "unit", "patch_ids", "generations", "generated", "valid", "dii",
                  "dir", "vr", "fdi", "elapsed", "best_fitness")


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


# --- helpers -----------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _output_path(args, explicit: Optional[str], default_name: str) -> Path:
    if explicit:
        path = Path(explicit)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path
    return _out_dir(args) / default_name


def load_session_config(path) -> SessionConfig:
    """Read a YAML (or JSON) session config; raises ConfigError with a field path."""
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML/JSON: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a mapping of config fields")
    if "seeds" in data and "config" in data:
        # A session report: reuse the config it echoes.
        data = data["config"]
    return SessionConfig.from_dict(data)


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _read_patches(path) -> PatchSet:
    try:
        return read_patchset(path)
    except FileNotFoundError as exc:
        raise UsageError(f"patch set not found: {path}") from exc


# --- subcommands -------------------------------------------------------------

def cmd_quantize(args) -> int:
    if args.mode == FULL and not args.calibration:
        raise UsageError("--mode full needs --calibration")
    model = load_model(args.model)
    calib = _read_patches(args.calibration) if args.calibration else None
    qmodel = quantize_weights(model, args.mode, calib if args.mode == FULL else None)
    path = _output_path(args, args.output, "qmodel.json")
    save_qmodel(qmodel, path)
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_profile(args) -> int:
    model = load_model(args.model)
    patches = _read_patches(args.patches)
    if len(patches) == 0:
        raise UsageError("profiling patch set is empty")
    if args.k < 2:
        raise UsageError("-k must be at least 2")
    intervals = profile_intervals(model, patches, args.k)
    path = _output_path(args, args.output, "intervals.json")
    save_intervals(intervals, path)
    log.info("wrote %s (%d neurons, %d degenerate)", path, intervals.size,
             int(intervals.degenerate.sum()))
    return EXIT_OK


def cmd_tune(args) -> int:
    if args.budget < 100:
        raise UsageError("--budget must be at least 100 samples per family")
    if not args.threshold > 0:
        raise UsageError("--threshold must be positive")
    patches = _read_patches(args.patches)
    if len(patches) == 0:
        raise UsageError("tuning patch set is empty")
    initial = None
    if args.initial:
        initial = DistortionBounds.from_dict(json.loads(Path(args.initial).read_text()))
    result = tune_bounds(args.families, patches, args.threshold, args.budget,
                         np.random.default_rng(args.seed or 0), initial)
    out = _out_dir(args)
    (out / "bounds.json").write_text(
        json.dumps(result.bounds.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _write_csv(out / "tune_audit.csv", ("family", "step", "median_psnr", "ranges"),
               audit_rows(result))
    for family in result.flagged:
        log.warning("%s never reached %.1f dB; its range is flagged for review",
                    family, args.threshold)
    return EXIT_OK


def _subjects(args) -> Subjects:
    model = load_model(args.model)
    qmodel = load_qmodel(args.qmodel) if args.qmodel else quantize_weights(model)
    intervals = load_intervals(args.intervals) if args.intervals else None
    try:
        return Subjects(model, qmodel, intervals)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_run(args) -> int:
    config = load_session_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.threads is not None:
        config.threads = args.threads
    if args.clock is not None:
        config.clock = args.clock
    config.validate()
    subjects = _subjects(args)
    patches = _read_patches(args.patches)
    out = _out_dir(args)
    dii_path = out / "dii.bin"
    dii_path.unlink(missing_ok=True)
    tracker = DiiTracker(dii_path, config.offload_bytes)
    report = run_session(config, patches, subjects, tracker)
    if not dii_path.exists():
        # No DII was found; still leave a valid, empty file behind.
        write_dii_file([], dii_path)
    report.save(out / "report.json")
    log.info("%d seeds, %d DIIs, SR %.1f%%", len(report.seeds), report.total_dii,
             success_rate(report) if report.seeds else 0.0)
    if report.aborted:
        log.error("session aborted: %s", report.error)
        return EXIT_RUNTIME
    return EXIT_OK


def replay(records, patches: PatchSet, lay: Layout, subjects: Optional[Subjects] = None,
           psnr_threshold: float = DEFAULT_PSNR_THRESHOLD) -> List[dict]:
    """Decode every record and, given subjects, re-check it.

    Each row holds the distorted patch, its PSNR and, with subjects, the
    labels of both models and whether the record still holds.
    """
    rows = []
    for r in records:
        if not 0 <= r.patch_index < len(patches):
            raise UsageError(f"record refers to patch {r.patch_index}, "
                             f"patch set has {len(patches)}")
        original = patches[r.patch_index]
        x = decode(r.vector, original, r.rng_seed, lay)
        row = {"record": r, "patch": x, "psnr": psnr(original, x)}
        if subjects is not None:
            lo, _ = forward(subjects.model, x)
            lq, _ = quantized_forward(subjects.qmodel, x)
            orig_label = predict_label(forward(subjects.model, original)[0])
            row.update(label_o=predict_label(lo), label_q=predict_label(lq),
                       original_correct=orig_label == original.label)
            row["ok"] = bool(row["psnr"] >= psnr_threshold
                             and row["label_o"] != row["label_q"]
                             and row["label_o"] == r.label_o and row["label_q"] == r.label_q
                             and row["original_correct"])
        rows.append(row)
    return rows


def cmd_decode(args) -> int:
    patches = _read_patches(args.patches)
    records = read_dii_file(args.dii)
    config = load_session_config(args.config) if args.config else SessionConfig()
    bounds = DistortionBounds.from_dict(config.bounds) if config.bounds else None
    lay = Layout(patches.dims, bounds, config.families)
    subjects = _subjects(args) if args.model else None
    rows = replay(records, patches, lay, subjects, config.psnr_threshold)
    if not rows:
        log.warning("%s holds no DII records; writing an empty patch set", args.dii)
    decoded = PatchSet(tuple(Patch3D(row["patch"].values, row["record"].original_label)
                             for row in rows), str(args.dii), patches.dims)
    path = _output_path(args, args.output, "decoded.dvgp")
    write_patchset(decoded, path)
    if subjects is not None:
        bad = [i for i, row in enumerate(rows) if not row["ok"]]
        summary = _out_dir(args) / "replay.csv"
        _write_csv(summary, ("record", "patch_index", "psnr", "label_o", "label_q",
                                "original_correct", "ok"),
                   [{"record": i, "patch_index": row["record"].patch_index,
                     "psnr": f"{row['psnr']:.6f}", "label_o": row["label_o"],
                     "label_q": row["label_q"],
                     "original_correct": int(row["original_correct"]), "ok": int(row["ok"])}
                    for i, row in enumerate(rows)])
        if bad:
            log.error("%d of %d records failed replay", len(bad), len(rows))
            return EXIT_RUNTIME
        log.info("all %d records replayed", len(rows))
    return EXIT_OK


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def report_rows(reports: Sequence[SessionReport], names: Sequence[str]) -> List[dict]:
    rows = []
    for name, report in zip(names, reports):
        dirs, _ = divergence_rate(report)
        vrs, _ = validation_rate(report)
        for i, (s, dr, vr) in enumerate(zip(report.seeds, dirs, vrs)):
            rows.append({
                "config": name, "unit": i, "patch_ids": " ".join(map(str, s.patch_ids)),
                "generations": s.generations, "generated": s.generated, "valid": s.valid,
                "dii": s.dii, "dir": _fmt(dr), "vr": _fmt(vr), "fdi": _fmt(s.fdi),
                "elapsed": _fmt(s.elapsed),
                "best_fitness": _fmt(max(s.best_fitness)) if s.best_fitness else "",
            })
    return rows


def summary_text(reports: Sequence[SessionReport], names: Sequence[str]) -> str:
    lines = ["config  seeds  median#DII  DiR  VR  SR  FDI  FDI*"]
    for name, r in zip(names, reports):
        diis = [s.dii for s in r.seeds]
        med_dii = float(np.median(diis)) if diis else float("nan")
        lines.append(f"{name}  {len(r.seeds)}  {med_dii:.6g}  {divergence_rate(r)[1]:.6g}  "
                     f"{validation_rate(r)[1]:.6g}  {success_rate(r):.6g}  "
                     f"{fdi(r):.6g}  {fdi(r, successful_only=True):.6g}")
    if len(reports) > 1:
        lines += ["", "pairwise on per-seed DiR: a  b  A12  magnitude  wilcoxon_p  method"]
        for i in range(len(reports)):
            for j in range(i + 1, len(reports)):
                a, _ = divergence_rate(reports[i])
                b, _ = divergence_rate(reports[j])
                if not a or not b:
                    lines.append(f"{names[i]}  {names[j]}  n/a (no seeds)")
                    continue
                a12, mag = vargha_delaney_a12(a, b)
                if len(a) == len(b):
                    w = wilcoxon_signed_rank(a, b)
                    test = f"{w.pvalue:.6g}  {w.method}"
                else:
                    test = "n/a  unpaired"
                lines.append(f"{names[i]}  {names[j]}  {a12:.6g}  {mag}  {test}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        try:
            reports.append(SessionReport.load(path))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"cannot read report {path}: {exc}") from exc
    names = args.names or [Path(p).stem if Path(p).stem != "report" else Path(p).parent.name or p
                           for p in args.reports]
    if len(names) != len(reports):
        raise UsageError("--names needs one name per report")
    out = _out_dir(args)
    _write_csv(out / "report.csv", REPORT_COLUMNS, report_rows(reports, names))
    text = summary_text(reports, names)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# --- argument parsing --------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=default(None),
                        help="session / tuning seed (unsigned 64-bit)")
    parser.add_argument("--threads", type=int, default=default(None),
                        help="worker threads for fitness evaluation")
    parser.add_argument("--out", default=default("."), help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsidiff", description="Differential testing of quantized hyperspectral classifiers.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("quantize", cmd_quantize, "quantize a model to int8")
    p.add_argument("--model", required=True)
    p.add_argument("--calibration", help="calibration patch set (needed for --mode full)")
    p.add_argument("--mode", choices=MODES, default=WEIGHTS_ONLY)
    p.add_argument("-o", "--output", help="output file (default OUT/qmodel.json)")

    p = add("profile", cmd_profile, "record per-neuron activation intervals")
    p.add_argument("--model", required=True)
    p.add_argument("--patches", required=True)
    p.add_argument("-k", type=int, default=DEFAULT_SECTIONS, help="sections per neuron")
    p.add_argument("-o", "--output", help="output file (default OUT/intervals.json)")

    p = add("tune", cmd_tune, "narrow distortion ranges to a PSNR target")
    p.add_argument("--patches", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_PSNR_THRESHOLD)
    p.add_argument("--budget", type=int, default=100, help="samples per family and step")
    p.add_argument("--families", nargs="+")
    p.add_argument("--initial", help="JSON bounds to start from")

    p = add("run", cmd_run, "run a search session")
    p.add_argument("--config", required=True, help="YAML/JSON session config")
    p.add_argument("--model", required=True)
    p.add_argument("--qmodel", help="quantized model (default: weights-only of --model)")
    p.add_argument("--patches", required=True)
    p.add_argument("--intervals", help="needed for objective: cov")
    p.add_argument("--clock", choices=("wall", "queries"))

    p = add("decode", cmd_decode, "rebuild distorted patches from a DII file")
    p.add_argument("--dii", required=True)
    p.add_argument("--patches", required=True)
    p.add_argument("--config", help="session config or report that produced the file")
    p.add_argument("--model", help="with --model, replay and re-check every record")
    p.add_argument("--qmodel")
    p.add_argument("--intervals")
    p.add_argument("-o", "--output", help="output patch set (default OUT/decoded.dvgp)")

    p = add("report", cmd_report, "metrics table and pairwise statistics")
    p.add_argument("reports", nargs="+")
    p.add_argument("--names", nargs="+")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"hsidiff: config error at {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"hsidiff: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"hsidiff: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
