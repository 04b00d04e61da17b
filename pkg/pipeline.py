#!/usr/bin/env python3
"""
Library-level compositions behind the qlink subcommands.

Each function takes tag streams (and a schedule where needed) and returns a
plain dict ready for the JSON report; the CLI adds the manifest and prints.
Schedule times are Malta clock times: a coincidence is assigned to the
interval that holds its Malta tag.
"""

import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from analysis import (
    ANTICORRELATED,
    AnalysisReport,
    SettingCounts,
    VisibilityFit,
    block_chsh,
    chsh_from_settings,
    E_from_counts,
    fit_visibility,
    key_basis,
    qber_from_visibility,
    s_curve,
    s_curve_peak,
    secure_key_rate,
)
from config import COARSE_BINS, DEFAULT_EC_INEFFICIENCY, TOOL_VERSION
from correlation import (
    DriftModel,
    MatchResult,
    coarse_to_fine_delay,
    coincidence_counts_by_interval,
    cross_correlogram,
    match_coincidences,
    peak_stats,
    track_drift,
)
from link_config import ScheduleInterval
from tag_io import TagStream

logger = logging.getLogger(__name__)


@dataclass
class RunManifest:
    subcommand: str
    config_path: Optional[str] = None
    seed: Optional[int] = None
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    config_digest: Optional[str] = None
    tool_version: str = TOOL_VERSION
    created_at: Optional[str] = None

    @classmethod
    def create(cls, subcommand: str, deterministic: bool = False, **kwargs) -> "RunManifest":
        created = None if deterministic else datetime.now(timezone.utc).isoformat(timespec="seconds")
        return cls(subcommand, created_at=created, **kwargs)

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "subcommand": self.subcommand,
            "config_path": self.config_path,
            "seed": self.seed,
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "config_digest": self.config_digest,
            "tool_version": self.tool_version,
        }
        if self.created_at is not None:
            data["created_at"] = self.created_at
        return data


def basis_name(sicily_angle: float) -> str:
    deg = math.degrees(sicily_angle) % 180.0
    if abs(deg) < 1e-6 or abs(deg - 180.0) < 1e-6:
        return "HV"
    if abs(deg - 45.0) < 1e-6:
        return "DA"
    return f"{deg:g}deg"


# --- correlate ---

def correlate_streams(a: TagStream, b: TagStream, span_ps: int, fine_bin_ps: int) -> Tuple[Dict[str, Any], Any]:
    """Delay search plus the final-resolution correlogram around the found delay."""
    delay, stats = coarse_to_fine_delay(a, b, span_ps, fine_bin_ps, return_stats=True)
    half = COARSE_BINS * fine_bin_ps // 2
    hist = cross_correlogram(a, b, fine_bin_ps, (delay - half, delay + half))
    final = peak_stats(hist)
    report = {
        "delay_ps": delay,
        "fwhm_ps": final.fwhm_ps,
        "peak_height": final.peak_height,
        "background_mean": final.background_mean,
        "significance": final.significance,
        "bin_width_ps": fine_bin_ps,
        "search_span_ps": span_ps,
        "tags_a": len(a),
        "tags_b": len(b),
    }
    logger.info("correlate: delay %d ps (search estimate %.1f ps)", delay, stats.delay_ps)
    return report, hist


def resolve_delay(a: TagStream, b: TagStream, delay_ps: Optional[int], span_ps: int, fine_bin_ps: int,
                  drift_block_s: Optional[float] = None):
    """Constant delay (given or searched), refined to a DriftModel when a drift block is set."""
    if delay_ps is None:
        delay_ps = coarse_to_fine_delay(a, b, span_ps, fine_bin_ps)
    if drift_block_s:
        return track_drift(a, b, drift_block_s, delay_ps, final_bin_ps=fine_bin_ps)
    return delay_ps


def delay_summary(delay) -> Dict[str, Any]:
    if isinstance(delay, DriftModel):
        return {"delay_ps": float(delay.knot_delays_ps.mean()), "drift_ppm": delay.slope_ppm,
                "drift_knots": len(delay.knots)}
    return {"delay_ps": int(delay)}


def coincide_streams(a: TagStream, b: TagStream, delay, window_ps: int) -> Tuple[Dict[str, Any], MatchResult]:
    matches = match_coincidences(a, b, delay, window_ps)
    duration_s = max(a.span_ps, 1) / 1e12
    report = dict(delay_summary(delay))
    report.update({
        "window_ps": window_ps,
        "coincidences": len(matches),
        "counts": matches.counts.tolist(),
        "coincidence_rate_cps": len(matches) / duration_s,
        "tags_a": len(a),
        "tags_b": len(b),
    })
    return report, matches


# --- scan ---

def scan_fits(settings: Sequence[SettingCounts], port_a: int = 0, port_b: int = 0) -> Dict[str, VisibilityFit]:
    """One visibility fit per Sicily basis over the Malta angle, on a single detector pair."""
    by_basis: Dict[str, List[Tuple[float, float]]] = {}
    for sc in settings:
        by_basis.setdefault(basis_name(sc.sicily_angle), []).append((sc.malta_angle, sc.counts[port_a, port_b]))
    fits = {}
    for basis, points in sorted(by_basis.items()):
        try:
            fits[basis] = fit_visibility(points)
        except ValueError as e:
            logger.error("skipping %s basis: %s", basis, e)
    return fits


def scan_report(a: TagStream, b: TagStream, schedule: Sequence[ScheduleInterval], delay,
                window_ps: int) -> Tuple[AnalysisReport, List[SettingCounts]]:
    matches = match_coincidences(a, b, delay, window_ps)
    settings = coincidence_counts_by_interval(matches, schedule)
    fits = scan_fits(settings)
    report = AnalysisReport(window_ps=window_ps, fits=fits,
                            visibilities={k: (f.visibility, f.visibility_err) for k, f in fits.items()})
    if "HV" in fits and "DA" in fits:
        phi, s, sigma = s_curve_peak((fits["HV"], fits["DA"]))
        report.s_fit = (s, sigma)
        report.s_fit_angle_deg = math.degrees(phi)
        report.qber = qber_from_visibility([fits["HV"].visibility, fits["DA"].visibility],
                                           [fits["HV"].visibility_err, fits["DA"].visibility_err])
        report.qber_source = "visibility"
    total = sum(sc.total for sc in settings)
    duration = sum(sc.duration_s for sc in settings)
    if duration > 0:
        report.coincidence_rate = (total / duration, math.sqrt(total) / duration)
    return report, settings


def scan_rows(settings: Sequence[SettingCounts], fits: Dict[str, VisibilityFit]) -> List[List[Any]]:
    rows = []
    for sc in settings:
        basis = basis_name(sc.sicily_angle)
        fitted = float(fits[basis].curve(sc.malta_angle)) if basis in fits else None
        rows.append([basis, math.degrees(sc.malta_angle), *sc.counts.ravel().tolist(), sc.duration_s, fitted])
    return rows


SCAN_HEADER = ["basis", "malta_angle_deg", "c_tt", "c_tr", "c_rt", "c_rr", "duration_s", "fit_c_tt"]


# --- bell ---

def _group_settings(settings: Sequence[SettingCounts]) -> Dict[Tuple[float, float], List[int]]:
    groups: Dict[Tuple[float, float], List[int]] = {}
    for index, sc in enumerate(settings):
        groups.setdefault((round(sc.malta_angle, 9), round(sc.sicily_angle, 9)), []).append(index)
    return groups


def _split_blocks(schedule: Sequence[ScheduleInterval], n_blocks: int) -> List[List[ScheduleInterval]]:
    """Per block, the sub-intervals (1/n_blocks of each interval) that make it up."""
    blocks = []
    for k in range(n_blocks):
        blocks.append([ScheduleInterval(iv.start_s + k * iv.duration_s / n_blocks, iv.malta_angle, iv.sicily_angle,
                                        iv.duration_s / n_blocks) for iv in schedule])
    return blocks


def _sum_settings(settings: Sequence[SettingCounts]) -> SettingCounts:
    return sum(settings[1:], settings[0])


def bell_report(a: TagStream, b: TagStream, schedule: Sequence[ScheduleInterval], delay, window_ps: int,
                n_blocks: int, f: float = DEFAULT_EC_INEFFICIENCY) -> AnalysisReport:
    """CHSH S (direct and block statistics), QBER, coincidence rate and key rate."""
    matches = match_coincidences(a, b, delay, window_ps)
    settings = coincidence_counts_by_interval(matches, schedule)
    groups = _group_settings(settings)

    chsh_keys = [k for k in groups if key_basis(*k) is None]
    key_keys = [k for k in groups if key_basis(*k) is not None]
    report = AnalysisReport(window_ps=window_ps, ec_inefficiency=f)

    if len(chsh_keys) == 4:
        merged = [_sum_settings([settings[i] for i in groups[k]]) for k in chsh_keys]
        s, sigma, ordered = chsh_from_settings(merged)
        report.s_direct = (s, sigma)
        for sc in ordered:
            e, e_err = E_from_counts(sc)
            report.correlations.append({"malta_angle_deg": math.degrees(sc.malta_angle),
                                        "sicily_angle_deg": math.degrees(sc.sicily_angle),
                                        "E": e, "E_err": e_err, "coincidences": sc.total})
        if n_blocks >= 2:
            chsh_intervals = [iv for iv in schedule
                              if (round(iv.malta_angle, 9), round(iv.sicily_angle, 9)) in chsh_keys]
            blocks = []
            for block in _split_blocks(chsh_intervals, n_blocks):
                per_block = coincidence_counts_by_interval(matches, block)
                block_groups = _group_settings(per_block)
                blocks.append([_sum_settings([per_block[i] for i in block_groups[k]]) for k in block_groups])
            try:
                mean, sem, n = block_chsh(blocks)
                report.blocks = {"n_blocks": n, "mean": mean, "std_of_mean": sem}
            except ValueError as e:
                logger.error("block statistics failed: %s", e)
    elif chsh_keys:
        logger.warning("schedule has %d non-key settings; CHSH needs exactly 4", len(chsh_keys))

    if key_keys:
        key_settings = [_sum_settings([settings[i] for i in groups[k]]) for k in key_keys]
        errors = 0
        total = 0
        for sc in key_settings:
            c = sc.counts
            anti = key_basis(sc.malta_angle, sc.sicily_angle) == ANTICORRELATED
            errors += int(c[0, 0] + c[1, 1]) if anti else int(c[0, 1] + c[1, 0])
            total += sc.total
        if total:
            q = errors / total
            report.qber = (q, math.sqrt(q * (1.0 - q) / total))
            report.qber_source = "key_basis"

    total = sum(sc.total for sc in settings)
    duration = sum(iv.duration_s for iv in schedule)
    if duration > 0:
        report.coincidence_rate = (total / duration, math.sqrt(total) / duration)
    if report.qber is not None and report.coincidence_rate is not None:
        report.secure_key_rate_bps = secure_key_rate(report.coincidence_rate[0], min(report.qber[0], 0.5), f)
    return report


# --- report merge ---

def _fit_from_dict(data: Dict[str, Any]) -> VisibilityFit:
    return VisibilityFit(
        amplitude=data["amplitude"],
        visibility=data["visibility"],
        phase_rad=math.radians(data["phase_deg"]),
        residual_rms=data["residual_rms"],
        amplitude_err=data["amplitude_err"],
        visibility_err=data["visibility_err"],
        phase_err=math.radians(data["phase_err_deg"]) if data["phase_err_deg"] is not None else math.inf,
        degenerate=data.get("degenerate", False),
    )


def _pair(data: Optional[Dict[str, float]]) -> Optional[Tuple[float, float]]:
    return None if data is None else (data["value"], data["error"])


def merge_reports(scan: Optional[Dict[str, Any]], bell: Optional[Dict[str, Any]],
                  f: float = DEFAULT_EC_INEFFICIENCY, curve_step_deg: float = 1.0) -> Tuple[AnalysisReport, List]:
    """Combine a scan report (fits, S curve) and a bell report (S, QBER, rate) into one."""
    if scan is None and bell is None:
        raise ValueError("nothing to merge: give a scan report, a bell report or both")
    window = (bell or scan)["window_ps"]
    report = AnalysisReport(window_ps=window, ec_inefficiency=f)
    curve_rows: List = []

    if scan is not None:
        report.fits = {basis: _fit_from_dict(d) for basis, d in scan.get("fits", {}).items()}
        report.visibilities = {k: (fit.visibility, fit.visibility_err) for k, fit in report.fits.items()}
        if "HV" in report.fits and "DA" in report.fits:
            fits = (report.fits["HV"], report.fits["DA"])
            phi, s, sigma = s_curve_peak(fits)
            report.s_fit, report.s_fit_angle_deg = (s, sigma), math.degrees(phi)
            grid = np.radians(np.arange(0.0, 180.0, curve_step_deg))
            curve_rows = [[math.degrees(p), value] for p, value in s_curve(fits, grid)]
            report.qber = qber_from_visibility([fits[0].visibility, fits[1].visibility],
                                               [fits[0].visibility_err, fits[1].visibility_err])
            report.qber_source = "visibility"
        report.coincidence_rate = _pair(scan.get("coincidence_rate_cps"))

    if bell is not None:
        report.s_direct = _pair(bell.get("s_direct"))
        report.correlations = bell.get("correlations", [])
        report.blocks = bell.get("blocks")
        if bell.get("qber") is not None:
            report.qber, report.qber_source = _pair(bell["qber"]), bell.get("qber_source", "key_basis")
        if bell.get("coincidence_rate_cps") is not None:
            report.coincidence_rate = _pair(bell["coincidence_rate_cps"])

    if report.qber is not None and report.coincidence_rate is not None:
        report.secure_key_rate_bps = secure_key_rate(report.coincidence_rate[0],
                                                     min(max(report.qber[0], 0.0), 0.5), f)
    return report, curve_rows
