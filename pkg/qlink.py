#!/usr/bin/env python3
"""
qlink - simulate and analyse the Malta-Sicily entanglement link.

Subcommands:
    simulate   Monte-Carlo tag files for both stations from a link config
    correlate  find the link delay and correlogram peak
    coincide   pair tags into coincidences
    scan       visibility fits of an analyzer-angle scan
    bell       CHSH S, QBER and secure key rate of a Bell-test schedule
    report     merge scan and bell reports

Exit codes: 0 success, 1 usage error, 2 data error, 3 no correlation found.
"""

import argparse
import logging
import sys
from typing import List, Optional

from analysis import FitError
from config import DEFAULT_BLOCKS, DEFAULT_EC_INEFFICIENCY, DEFAULT_WINDOW_PS, LOG_LEVEL, TOOL_VERSION
from correlation import NoCorrelationFound
from link_config import ConfigError, config_digest, load_config, load_schedule, with_schedule
from link_simulator import ClockOverflowError, simulate_run
from pipeline import (
    SCAN_HEADER,
    RunManifest,
    bell_report,
    coincide_streams,
    correlate_streams,
    delay_summary,
    merge_reports,
    resolve_delay,
    scan_report,
    scan_rows,
)
from quantum_state import DomainError
from tag_io import TagFileError, dumps_report, read_report, read_tags, read_tags_csv, write_report, \
    write_table_csv, write_tags, write_tags_csv

logger = logging.getLogger("qlink")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NO_CORRELATION = 3

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


class UsageError(Exception):
    pass


class QlinkArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; qlink reserves 2 for data errors."""

    def error(self, message):
        self.print_help(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def load_stream(path: str):
    if path.lower().endswith(".csv"):
        return read_tags_csv(path)
    return read_tags(path)


def save_stream(stream, path: str) -> None:
    if path.lower().endswith(".csv"):
        write_tags_csv(stream, path)
    else:
        write_tags(stream, path)


def emit(args, report: dict, lines: List[str]) -> None:
    """JSON to stdout (and --out) in JSON mode, a short table otherwise."""
    if getattr(args, "out", None):
        write_report(report, args.out)
    if args.json:
        sys.stdout.write(dumps_report(report))
        return
    for line in lines:
        print(line)


def _pair_text(value) -> str:
    if value is None:
        return "-"
    return f"{value['value']:.4f} +- {value['error']:.4f}"


def _span_ps(args) -> int:
    return int(round(args.span_s * 1e12))


# --- Subcommands ---

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.schedule:
        cfg = with_schedule(cfg, load_schedule(args.schedule))
    malta, sicily = simulate_run(cfg, args.seed)
    save_stream(malta, args.out_a)
    save_stream(sicily, args.out_b)
    manifest = RunManifest.create("simulate", args.deterministic, config_path=args.config, seed=args.seed,
                                  inputs=[p for p in (args.config, args.schedule) if p],
                                  outputs=[args.out_a, args.out_b], config_digest=config_digest(cfg).hex())
    report = {"manifest": manifest.to_dict(), "tags_a": len(malta), "tags_b": len(sicily),
              "duration_s": cfg.run_duration_s}
    emit(args, report, [
        f"Simulated {cfg.run_duration_s:g} s of the link (seed {args.seed})",
        f"  Malta:  {len(malta):>12,} tags -> {args.out_a}",
        f"  Sicily: {len(sicily):>12,} tags -> {args.out_b}",
    ])
    return EXIT_OK


def cmd_correlate(args) -> int:
    a, b = load_stream(args.a), load_stream(args.b)
    result, hist = correlate_streams(a, b, _span_ps(args), args.fine_bin_ps)
    if args.csv:
        rows = zip(hist.centers().tolist(), hist.counts.tolist())
        write_table_csv(args.csv, ["offset_ps", "counts"], rows)
    manifest = RunManifest.create("correlate", args.deterministic, inputs=[args.a, args.b],
                                  outputs=[p for p in (args.out, args.csv) if p])
    result["manifest"] = manifest.to_dict()
    emit(args, result, [
        f"Delay:        {result['delay_ps']:,} ps",
        f"FWHM:         {result['fwhm_ps']:.1f} ps",
        f"Peak:         {result['peak_height']} counts over {result['background_mean']:.2f} background",
        f"Significance: {result['significance']:.1f} sigma",
    ])
    return EXIT_OK


def _delay_for(args, a, b):
    return resolve_delay(a, b, args.delay_ps, _span_ps(args), args.fine_bin_ps, args.drift_block_s)


def cmd_coincide(args) -> int:
    a, b = load_stream(args.a), load_stream(args.b)
    delay = _delay_for(args, a, b)
    result, matches = coincide_streams(a, b, delay, args.window_ps)
    if args.csv:
        rows = zip(matches.t_a.tolist(), matches.t_b.tolist(), matches.channel_a.tolist(),
                   matches.channel_b.tolist())
        write_table_csv(args.csv, ["t_a_ps", "t_b_ps", "channel_a", "channel_b"], rows)
    manifest = RunManifest.create("coincide", args.deterministic, inputs=[args.a, args.b],
                                  outputs=[p for p in (args.out, args.csv) if p])
    result["manifest"] = manifest.to_dict()
    c = result["counts"]
    emit(args, result, [
        f"Delay {result['delay_ps']} ps, window {args.window_ps} ps",
        f"Coincidences: {result['coincidences']:,} ({result['coincidence_rate_cps']:.1f} cps)",
        f"  tt {c[0][0]:>10,}  tr {c[0][1]:>10,}",
        f"  rt {c[1][0]:>10,}  rr {c[1][1]:>10,}",
    ])
    return EXIT_OK


def cmd_scan(args) -> int:
    a, b = load_stream(args.a), load_stream(args.b)
    schedule = load_schedule(args.schedule)
    delay = _delay_for(args, a, b)
    report, settings = scan_report(a, b, schedule, delay, args.window_ps)
    if args.csv:
        write_table_csv(args.csv, SCAN_HEADER, scan_rows(settings, report.fits))
    report.manifest = RunManifest.create("scan", args.deterministic, inputs=[args.a, args.b, args.schedule],
                                         outputs=[p for p in (args.out, args.csv) if p]).to_dict()
    data = report.to_dict()
    data.update(delay_summary(delay))
    lines = [f"{'Basis':<6} {'Visibility':>20} {'Phase (deg)':>14}"]
    for basis, fit in sorted(report.fits.items()):
        lines.append(f"{basis:<6} {fit.visibility:>10.4f} +- {fit.visibility_err:.4f} {fit.to_dict()['phase_deg']:>12.2f}")
    lines.append(f"S from fits: {_pair_text(data['s_fit'])} at phi_M = {data['s_fit_angle_deg']}")
    emit(args, data, lines)
    return EXIT_OK


def cmd_bell(args) -> int:
    a, b = load_stream(args.a), load_stream(args.b)
    schedule = load_schedule(args.schedule)
    delay = _delay_for(args, a, b)
    report = bell_report(a, b, schedule, delay, args.window_ps, args.blocks, args.ec_inefficiency)
    report.manifest = RunManifest.create("bell", args.deterministic, inputs=[args.a, args.b, args.schedule],
                                         outputs=[args.out] if args.out else []).to_dict()
    data = report.to_dict()
    data.update(delay_summary(delay))
    blocks = data["blocks"] or {}
    emit(args, data, [
        f"S (direct):        {_pair_text(data['s_direct'])}",
        f"S (blocks):        {blocks.get('mean', float('nan')):.4f} +- {blocks.get('std_of_mean', float('nan')):.4f}"
        f" over {blocks.get('n_blocks', 0)} blocks",
        f"QBER:              {_pair_text(data['qber'])}",
        f"Coincidence rate:  {_pair_text(data['coincidence_rate_cps'])} cps",
        f"Secure key rate:   {data['secure_key_rate_bps']} bps ({data['key_rate_formula']})",
    ])
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.scan and not args.bell:
        print("qlink report: error: give --scan, --bell or both", file=sys.stderr)
        return EXIT_USAGE
    scan = read_report(args.scan) if args.scan else None
    bell = read_report(args.bell) if args.bell else None
    report, curve = merge_reports(scan, bell, args.ec_inefficiency)
    if args.csv:
        write_table_csv(args.csv, ["malta_angle_deg", "S"], curve)
    report.manifest = RunManifest.create("report", args.deterministic,
                                         inputs=[p for p in (args.scan, args.bell) if p],
                                         outputs=[p for p in (args.out, args.csv) if p]).to_dict()
    data = report.to_dict()
    emit(args, data, [
        f"S from fits:     {_pair_text(data['s_fit'])}",
        f"S (direct):      {_pair_text(data['s_direct'])}",
        f"QBER:            {_pair_text(data['qber'])} ({data['qber_source'] or 'n/a'})",
        f"Secure key rate: {data['secure_key_rate_bps']} bps",
    ])
    return EXIT_OK


# --- Parser ---

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--json", action="store_true", help="print the JSON report instead of a table")
    parser.add_argument("--deterministic", action="store_true", help="omit the timestamp from the manifest")
    parser.add_argument("--out", help="also write the JSON report to this file")


def _add_streams(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--a", required=True, help="Malta tag file (.qtags or .csv)")
    parser.add_argument("--b", required=True, help="Sicily tag file (.qtags or .csv)")


def _add_delay(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--delay-ps", type=int, help="known delay; searched for when omitted")
    parser.add_argument("--span-s", type=float, default=1.0, help="delay search span +- seconds")
    parser.add_argument("--fine-bin-ps", type=int, default=100, help="final search bin width")
    parser.add_argument("--drift-block-s", type=float, help="track clock drift in blocks of this length")
    parser.add_argument("--window-ps", type=int, default=DEFAULT_WINDOW_PS, help="coincidence window (full width)")


def build_parser() -> argparse.ArgumentParser:
    parser = QlinkArgumentParser(prog="qlink", description="Entanglement-link simulation and analysis")
    parser.add_argument("--version", action="version", version=f"qlink {TOOL_VERSION}")
    parser.add_argument("--log-level", default=LOG_LEVEL, type=str.upper, choices=LOG_LEVELS,
                        help="logging level (default from QLINK_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", parser_class=QlinkArgumentParser)

    p = sub.add_parser("simulate", help="simulate tag files for both stations")
    p.add_argument("--config", required=True)
    p.add_argument("--schedule", help="analyzer schedule replacing the config's intervals")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-a", required=True)
    p.add_argument("--out-b", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("correlate", help="find the delay between two tag files")
    _add_streams(p)
    p.add_argument("--span-s", type=float, default=1.0)
    p.add_argument("--fine-bin-ps", type=int, default=100)
    p.add_argument("--csv", help="write the final correlogram as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("coincide", help="pair tags into coincidences")
    _add_streams(p)
    _add_delay(p)
    p.add_argument("--csv", help="write the coincidence records as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_coincide)

    p = sub.add_parser("scan", help="visibility fits of an angle scan")
    _add_streams(p)
    p.add_argument("--schedule", required=True)
    _add_delay(p)
    p.add_argument("--csv", help="write angle, counts and fitted curve as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("bell", help="CHSH, QBER and key rate of a Bell-test schedule")
    _add_streams(p)
    p.add_argument("--schedule", required=True)
    _add_delay(p)
    p.add_argument("--blocks", type=int, default=DEFAULT_BLOCKS)
    p.add_argument("--ec-inefficiency", type=float, default=DEFAULT_EC_INEFFICIENCY)
    _add_common(p)
    p.set_defaults(func=cmd_bell)

    p = sub.add_parser("report", help="merge scan and bell reports")
    p.add_argument("--scan", help="JSON report of `qlink scan`")
    p.add_argument("--bell", help="JSON report of `qlink bell`")
    p.add_argument("--ec-inefficiency", type=float, default=DEFAULT_EC_INEFFICIENCY)
    p.add_argument("--csv", help="write the S(phi_M) curve as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_report)
    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
        return args.func(args)
    except UsageError:
        return EXIT_USAGE
    except NoCorrelationFound as e:
        print(f"qlink: {e}", file=sys.stderr)
        return EXIT_NO_CORRELATION
    except (ConfigError, TagFileError, DomainError, FitError, ClockOverflowError, ValueError, OSError) as e:
        print(f"qlink: error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
