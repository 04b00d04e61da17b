import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

from analysis import block_chsh, qber_from_counts, s_curve_peak, secure_key_rate
from config import DEFAULT_BLOCKS, DEFAULT_WINDOW_PS, FWHM_PER_SIGMA
from correlation import coincidence_counts_by_interval, match_coincidences
from link_config import ScheduleInterval, load_config, load_schedule, with_schedule
from link_simulator import expected_rates, simulate_run
from pipeline import (
    RunManifest,
    _split_blocks,
    basis_name,
    bell_report,
    coincide_streams,
    merge_reports,
    scan_fits,
    scan_report,
    scan_rows,
)
from quantum_state import bell_phi_minus, joint_outcome_probs
from tag_io import TagStream, dumps_report

DEG = math.pi / 180


def ideal_counts(a: float, b: float, n: int = 1000) -> np.ndarray:
    return np.rint(np.array(joint_outcome_probs(bell_phi_minus(), a, b)).reshape(2, 2) * n).astype(int)


def streams_from_counts(schedule, counts_list, seed=0):
    """Zero-delay stream pair reproducing the given coincidence matrix in each interval."""
    rng = np.random.default_rng(seed)
    times, ch_a, ch_b = [], [], []
    for interval, counts in zip(schedule, counts_list):
        pairs = [(i, j) for i in range(2) for j in range(2) for _ in range(int(counts[i][j]))]
        order = rng.permutation(len(pairs))
        start = int(round(interval.start_s * 1e12))
        step = int(round(interval.duration_s * 1e12)) // (len(pairs) + 1)
        for k, index in enumerate(order):
            times.append(start + (k + 1) * step)
            ch_a.append(pairs[index][0])
            ch_b.append(pairs[index][1])
    times = np.array(times, dtype=np.int64)
    return (TagStream(np.array(ch_a, np.uint8), times, station="malta"),
            TagStream(np.array(ch_b, np.uint8), times.copy(), station="sicily"))


def scan_schedule():
    schedule = []
    start = 0.0
    for b in (0.0, 45.0):
        for a in range(0, 180, 20):
            schedule.append(ScheduleInterval(start, a * DEG, b * DEG, 1.0))
            start += 1.0
    return schedule


BELL_ANGLES = [(157.5, 0.0), (157.5, 45.0), (22.5, 0.0), (22.5, 45.0)]


def bell_schedule():
    schedule = [ScheduleInterval(k * 2.0, a * DEG, b * DEG, 2.0) for k, (a, b) in enumerate(BELL_ANGLES)]
    schedule.append(ScheduleInterval(8.0, 0.0, 0.0, 1.0))
    schedule.append(ScheduleInterval(9.0, 45 * DEG, 45 * DEG, 1.0))
    return schedule


def bell_streams():
    schedule = bell_schedule()
    counts = [ideal_counts(iv.malta_angle, iv.sicily_angle) for iv in schedule[:4]]
    counts += [[[95, 5], [5, 95]], [[5, 95], [95, 5]]]
    return schedule, streams_from_counts(schedule, counts)


def test_basis_names():
    assert basis_name(0.0) == "HV"
    assert basis_name(math.pi) == "HV"
    assert basis_name(math.pi / 4) == "DA"
    assert basis_name(30 * DEG) == "30deg"


def test_manifest_timestamp_only_when_not_deterministic():
    assert "created_at" not in RunManifest.create("scan", deterministic=True).to_dict()
    assert "created_at" in RunManifest.create("scan").to_dict()


def test_split_blocks_cover_each_interval():
    schedule = [ScheduleInterval(0.0, 0.0, 0.0, 4.0), ScheduleInterval(10.0, 0.1, 0.2, 2.0)]
    blocks = _split_blocks(schedule, 4)
    assert len(blocks) == 4
    assert [iv.start_s for iv in blocks[1]] == [1.0, 10.5]
    assert all(iv.duration_s == 0.5 for iv in blocks[3][1:])


def test_coincide_report():
    schedule = [ScheduleInterval(0.0, 0.0, 0.0, 1.0)]
    a, b = streams_from_counts(schedule, [[[10, 2], [3, 20]]])
    report, matches = coincide_streams(a, b, 0, 1000)
    assert report["coincidences"] == 35 == len(matches)
    assert report["counts"] == [[10, 2], [3, 20]]
    assert report["delay_ps"] == 0


def test_scan_report_on_ideal_counts():
    schedule = scan_schedule()
    counts = [ideal_counts(iv.malta_angle, iv.sicily_angle) for iv in schedule]
    a, b = streams_from_counts(schedule, counts)
    report, settings = scan_report(a, b, schedule, 0, 1000)
    assert sorted(report.fits) == ["DA", "HV"]
    assert report.visibilities["HV"][0] == pytest.approx(1.0, abs=0.01)
    assert report.fits["DA"].phase_rad == pytest.approx(135 * DEG, abs=0.01)
    assert report.s_fit[0] == pytest.approx(2 * math.sqrt(2), abs=0.03)
    assert report.s_fit_angle_deg % 90.0 == pytest.approx(67.5, abs=0.5)
    assert report.qber_source == "visibility"
    assert report.coincidence_rate[0] == pytest.approx(1000.0, rel=0.01)
    rows = scan_rows(settings, report.fits)
    assert len(rows) == 18 and rows[0][0] == "HV" and rows[9][0] == "DA"


def test_bell_report_on_ideal_counts():
    schedule, (a, b) = bell_streams()
    report = bell_report(a, b, schedule, 0, 1000, n_blocks=4, f=1.1)
    assert abs(report.s_direct[0]) == pytest.approx(2 * math.sqrt(2), abs=0.01)
    assert len(report.correlations) == 4
    assert report.qber == pytest.approx((0.05, math.sqrt(0.05 * 0.95 / 400)))
    assert report.qber_source == "key_basis"
    total = 4 * 1000 + 400
    assert report.coincidence_rate[0] == pytest.approx(total / 10.0, rel=0.01)
    assert report.secure_key_rate_bps == pytest.approx(secure_key_rate(report.coincidence_rate[0], 0.05, 1.1))
    assert report.blocks["n_blocks"] == 4
    assert abs(report.blocks["mean"]) == pytest.approx(2 * math.sqrt(2), abs=0.15)


def test_bell_report_without_key_intervals_has_no_key_rate():
    schedule, (a, b) = bell_streams()
    report = bell_report(a, b, schedule[:4], 0, 1000, n_blocks=0)
    assert report.qber is None and report.secure_key_rate_bps is None
    assert report.blocks is None


def as_json(report) -> dict:
    return json.loads(dumps_report(report.to_dict()))


def test_merge_reports_combines_scan_and_bell():
    schedule = scan_schedule()
    a, b = streams_from_counts(schedule, [ideal_counts(iv.malta_angle, iv.sicily_angle) for iv in schedule])
    scan, _ = scan_report(a, b, schedule, 0, 1000)
    bell_sched, (ba, bb) = bell_streams()
    bell = bell_report(ba, bb, bell_sched, 0, 1000, n_blocks=2)

    merged, curve = merge_reports(as_json(scan), as_json(bell), f=1.1)
    assert merged.s_fit == pytest.approx(scan.s_fit)
    assert merged.s_direct == pytest.approx(bell.s_direct)
    assert merged.qber == pytest.approx(bell.qber)
    assert merged.qber_source == "key_basis"
    assert merged.secure_key_rate_bps == pytest.approx(bell.secure_key_rate_bps)
    assert len(curve) == 180
    assert max(abs(s) for _, s in curve) == pytest.approx(scan.s_fit[0], abs=0.01)


def test_merge_scan_only_uses_visibility_qber():
    schedule = scan_schedule()
    a, b = streams_from_counts(schedule, [ideal_counts(iv.malta_angle, iv.sicily_angle) for iv in schedule])
    scan, _ = scan_report(a, b, schedule, 0, 1000)
    merged, _ = merge_reports(as_json(scan), None)
    assert merged.qber_source == "visibility"
    assert merged.secure_key_rate_bps is not None


def test_merge_needs_a_report():
    with pytest.raises(ValueError):
        merge_reports(None, None)


# --- preset runs, one simulation per schedule interval ---

PRESETS = Path(__file__).parent / "presets"


def interval_counts(cfg, interval, seed, window_ps=DEFAULT_WINDOW_PS, n_blocks=1):
    """SettingCounts of one interval, one independent simulation per block of duration/n_blocks."""
    step = interval.duration_s / n_blocks
    block = ScheduleInterval(0.0, interval.malta_angle, interval.sicily_angle, step)
    counts = []
    for k in range(n_blocks):
        malta, sicily = simulate_run(with_schedule(cfg, (block,)), seed * 1000 + k)
        matches = match_coincidences(malta, sicily, cfg.fibre_delay_ps, window_ps)
        counts.extend(coincidence_counts_by_interval(matches, [block]))
    return counts


def true_fraction(cfg, interval, window_ps=DEFAULT_WINDOW_PS) -> float:
    """Share of matched coincidences that are true pairs rather than accidentals."""
    rates = expected_rates(cfg, interval.malta_angle, interval.sicily_angle)
    fwhm = math.sqrt(cfg.dispersion_fwhm_ps ** 2 + cfg.detector("sicily", 0).jitter_fwhm_ps ** 2
                     + cfg.detector("malta", 0).jitter_fwhm_ps ** 2
                     + cfg.clocks["malta"].jitter_fwhm_ps ** 2 + cfg.clocks["sicily"].jitter_fwhm_ps ** 2)
    half = window_ps / 2 / (fwhm / FWHM_PER_SIGMA)
    true = rates["coincidence_rate"] * (norm.cdf(half) - norm.cdf(-half))
    singles_a = sum(v for (station, _), v in rates["singles"].items() if station == "malta")
    singles_b = sum(v for (station, _), v in rates["singles"].items() if station == "sicily")
    accidental = singles_a * singles_b * window_ps * 1e-12
    return true / (true + accidental)


@pytest.mark.slow
def test_preset_visibility_scan():
    cfg = load_config(PRESETS / "malta-sicily.cfg")
    settings = [interval_counts(cfg, iv, seed=100 + k)[0] for k, iv in enumerate(load_schedule(PRESETS / "scan.cfg"))]
    fits = scan_fits(settings)
    assert fits["DA"].visibility == pytest.approx(0.941, abs=0.02)
    assert fits["HV"].visibility == pytest.approx(0.868, abs=0.03)
    _, s_max, _ = s_curve_peak((fits["HV"], fits["DA"]))
    assert s_max == pytest.approx(2.534, abs=0.08)


@pytest.mark.slow
def test_preset_bell_run():
    cfg = load_config(PRESETS / "malta-sicily.cfg")
    schedule = load_schedule(PRESETS / "bell.cfg")
    assert [iv.duration_s for iv in schedule[:4]] == [600.0] * 4
    per_setting = [interval_counts(cfg, iv, seed=200 + k, n_blocks=DEFAULT_BLOCKS)
                   for k, iv in enumerate(schedule[:4])]
    blocks = [list(column) for column in zip(*per_setting)]
    s, sigma, n = block_chsh(blocks)
    assert n == DEFAULT_BLOCKS
    dilution = np.mean([true_fraction(cfg, iv) for iv in schedule[:4]])
    theory = math.sqrt(2) * (0.868 + 0.941) * dilution
    assert abs(s) - 2 > 5 * sigma
    assert abs(abs(s) - theory) < 3 * sigma

    key = [interval_counts(cfg, iv, seed=300 + k)[0] for k, iv in enumerate(schedule[4:])]
    errors = sum(qber_from_counts(sc)[0] * sc.total for sc in key)
    total = sum(sc.total for sc in key)
    assert errors / total == pytest.approx(0.05, abs=0.01)
    rate = total / sum(sc.duration_s for sc in key)
    assert rate == pytest.approx(257, abs=4 * math.sqrt(257 / 60) * math.sqrt(60))
