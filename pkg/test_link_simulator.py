import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from correlation import cross_correlogram, match_coincidences
from link_config import ClockConfig, ConfigError, DetectorConfig, LinkConfig, ScheduleInterval, load_config
from link_simulator import (
    PS_PER_S,
    ClockOverflowError,
    _dead_time_mask,
    analyzed_state,
    apply_clock,
    apply_detector,
    detect_pair,
    emit_pairs,
    expected_rates,
    sample_detections,
    simulate_run,
)
from quantum_state import bell_phi_minus, fidelity_with_bell, joint_outcome_probs

PRESETS = Path(__file__).parent / "presets"


def small_link(**overrides) -> LinkConfig:
    detectors = {(s, c): DetectorConfig(efficiency=0.5, dark_rate=100.0) for s in ("malta", "sicily") for c in (0, 1)}
    base = LinkConfig(pair_rate=2e5, duration_s=2.0, malta_arm_efficiency=0.5, sicily_arm_efficiency=0.5,
                      fibre_loss_db=3.0, fibre_delay_ps=1_000_000, detectors=detectors)
    return replace(base, **overrides)


def test_emit_pairs_is_sorted_and_poissonian():
    times = emit_pairs(1e5, 1.0, 3)
    assert np.all(np.diff(times) >= 0)
    assert times.min() >= 0 and times.max() < PS_PER_S
    assert abs(times.size - 1e5) < 5 * math.sqrt(1e5)


def test_emit_pairs_inter_arrival_times_are_exponential():
    rate = 1e5
    gaps = np.diff(emit_pairs(rate, 1.0, 3))
    assert stats.kstest(gaps, "expon", args=(0, PS_PER_S / rate)).pvalue > 0.001


def test_emit_pairs_is_reproducible():
    assert np.array_equal(emit_pairs(1e4, 1.0, 11), emit_pairs(1e4, 1.0, 11))
    assert not np.array_equal(emit_pairs(1e4, 1.0, 11), emit_pairs(1e4, 1.0, 12))


def test_emit_pairs_rejects_negative_rate():
    with pytest.raises(ValueError):
        emit_pairs(-1.0, 1.0, 0)


def test_emit_pairs_zero_rate_is_empty():
    assert emit_pairs(0.0, 5.0, 0).size == 0


def test_detect_pair_follows_born_rule():
    rng = np.random.default_rng(5)
    probs = joint_outcome_probs(bell_phi_minus(), 0.0, 0.0)
    outcomes = [detect_pair(probs, [1.0, 1.0], [1.0, 1.0], rng) for _ in range(2000)]
    assert all(a == b for a, b in outcomes)
    assert 900 < sum(a == 0 for a, _ in outcomes) < 1100


def test_detect_pair_loses_photons():
    rng = np.random.default_rng(5)
    probs = (0.25, 0.25, 0.25, 0.25)
    outcomes = [detect_pair(probs, [0.0, 0.0], [1.0, 1.0], rng) for _ in range(100)]
    assert all(a is None and b is not None for a, b in outcomes)


def test_conditioned_sampling_matches_unconditioned_rates():
    probs = joint_outcome_probs(bell_phi_minus(), 0.3, 0.1)
    surv_a, surv_b = np.array([0.6, 0.4]), np.array([0.05, 0.1])
    n = 2_000_000
    rng = np.random.default_rng(9)
    a, b = sample_detections(probs, surv_a, surv_b, n, rng)
    p_any = 1 - (1 - surv_a.max()) * (1 - surv_b.max())
    ca, cb = sample_detections(probs, surv_a, surv_b, int(n * p_any), rng, conditioned=True)
    for port in (0, 1):
        plain, thinned = np.sum(a == port), np.sum(ca == port)
        assert abs(plain - thinned) < 5 * math.sqrt(plain + thinned)
        plain, thinned = np.sum((a == port) & (b == port)), np.sum((ca == port) & (cb == port))
        assert abs(plain - thinned) < 5 * math.sqrt(plain + thinned + 1)


def test_dead_time_is_non_paralyzable():
    times = np.array([0, 50, 100, 150, 260], dtype=np.int64)
    assert _dead_time_mask(times, np.int64(100)).tolist() == [True, False, True, False, True]


def test_apply_detector_dead_time_and_dark_counts():
    rng = np.random.default_rng(1)
    det = DetectorConfig(efficiency=1.0, dark_rate=5e4, dead_time_ps=1_000_000)
    clicks = apply_detector(np.zeros(0, dtype=np.int64), det, PS_PER_S, rng)
    assert np.all(np.diff(clicks) >= 1_000_000)
    # 5e4 /s through 1 us dead time keeps about 5e4 / 1.05
    assert abs(clicks.size - 5e4 / 1.05) < 5 * math.sqrt(5e4)


def test_dark_counts_alone_follow_the_dark_rate():
    rng = np.random.default_rng(6)
    clicks = apply_detector(np.zeros(0, dtype=np.int64), DetectorConfig(dark_rate=550.0), 60 * PS_PER_S, rng)
    assert abs(clicks.size - 33_000) < 5 * math.sqrt(33_000)
    assert clicks.min() >= 0 and clicks.max() < 60 * PS_PER_S


def test_apply_detector_jitter_keeps_times_non_negative():
    rng = np.random.default_rng(2)
    clicks = apply_detector(np.zeros(1000, dtype=np.int64), DetectorConfig(jitter_fwhm_ps=400), 10, rng)
    assert clicks.min() >= 0
    assert np.all(np.diff(clicks) >= 0)


def test_apply_clock_offset_drift_and_resolution():
    times = np.array([0, 4, 5, 6, 14], dtype=np.int64)
    assert apply_clock(times, ClockConfig(resolution_ps=10)).tolist() == [0, 0, 10, 10, 10]
    assert apply_clock(times, ClockConfig(offset_ps=100)).tolist() == [100, 104, 105, 106, 114]
    drifted = apply_clock(np.array([PS_PER_S], dtype=np.int64), ClockConfig(drift_ppm=10.0))
    assert drifted.tolist() == [PS_PER_S + 10_000_000]


def test_apply_clock_preserves_order():
    times = np.sort(np.random.default_rng(4).integers(0, 10**12, 10_000))
    mapped = apply_clock(times, ClockConfig(offset_ps=-5, drift_ppm=-3.0, resolution_ps=81))
    assert np.all(np.diff(mapped) >= 0)


def test_apply_clock_overflow():
    with pytest.raises(ClockOverflowError):
        apply_clock(np.array([0], dtype=np.int64), ClockConfig(offset_ps=-10))
    with pytest.raises(ClockOverflowError):
        apply_clock(np.array([2**62], dtype=np.int64), ClockConfig(offset_ps=2**62))
    with pytest.raises(ConfigError):
        apply_clock(np.array([1], dtype=np.int64), ClockConfig(drift_ppm=-1e6))


def test_simulate_run_is_deterministic_and_thread_independent():
    cfg = small_link(duration_s=2.5)
    a1, b1 = simulate_run(cfg, 42, max_workers=1)
    a2, b2 = simulate_run(cfg, 42, max_workers=4)
    assert np.array_equal(a1.times, a2.times) and np.array_equal(a1.channels, a2.channels)
    assert np.array_equal(b1.times, b2.times) and np.array_equal(b1.channels, b2.channels)
    a3, _ = simulate_run(cfg, 43)
    assert not np.array_equal(a1.times, a3.times)


def test_simulated_streams_carry_metadata():
    cfg = small_link(duration_s=0.2)
    malta, sicily = simulate_run(cfg, 1)
    assert malta.station == "malta" and sicily.station == "sicily"
    assert malta.config_digest == sicily.config_digest
    assert malta.is_sorted() and sicily.is_sorted()


def test_singles_and_coincidences_match_expected_rates():
    cfg = small_link()
    malta, sicily = simulate_run(cfg, 7)
    rates = expected_rates(cfg, 0.0, 0.0)
    for stream in (malta, sicily):
        for c in (0, 1):
            n = int(np.sum(stream.channels == c))
            expected = rates["singles"][(stream.station, c)] * cfg.duration_s
            assert abs(n - expected) < 5 * math.sqrt(expected)
    matches = match_coincidences(malta, sicily, cfg.fibre_delay_ps, 2000)
    expected = rates["coincidence_rate"] * cfg.duration_s
    assert abs(len(matches) - expected) < 5 * math.sqrt(expected) + 10
    # ideal source at (0, 0): only accidentals land in tr / rt
    assert matches.counts[0, 1] + matches.counts[1, 0] < 0.01 * len(matches)


def test_coincidence_rate_matches_expectation_for_random_configs():
    rng = np.random.default_rng(21)
    window = 2000
    for k in range(10):
        detectors = {(s, c): DetectorConfig(efficiency=rng.uniform(0.3, 0.9), dark_rate=rng.uniform(0.0, 500.0))
                     for s in ("malta", "sicily") for c in (0, 1)}
        a, b = rng.uniform(0.0, math.pi, 2)
        cfg = small_link(pair_rate=rng.uniform(2e4, 1e5), duration_s=1.0,
                         malta_arm_efficiency=rng.uniform(0.2, 0.9), sicily_arm_efficiency=rng.uniform(0.2, 0.9),
                         fibre_loss_db=rng.uniform(0.0, 6.0), detectors=detectors,
                         schedule=(ScheduleInterval(0.0, a, b, 1.0),))
        malta, sicily = simulate_run(cfg, 100 + k)
        rates = expected_rates(cfg, a, b)
        singles_a = sum(r for (station, _), r in rates["singles"].items() if station == "malta")
        singles_b = sum(r for (station, _), r in rates["singles"].items() if station == "sicily")
        expected = (rates["coincidence_rate"] + singles_a * singles_b * window * 1e-12) * cfg.duration_s
        found = len(match_coincidences(malta, sicily, cfg.fibre_delay_ps, window))
        assert abs(found - expected) < 4 * math.sqrt(expected)


def test_accidental_floor_of_simulated_correlogram():
    cfg = small_link()
    malta, sicily = simulate_run(cfg, 8)
    width = 100_000
    lo = cfg.fibre_delay_ps + 10_000_000
    hist = cross_correlogram(malta, sicily, width, (lo, lo + 200 * width))
    expected = len(malta) * len(sicily) * width / (cfg.duration_s * PS_PER_S)
    assert abs(hist.counts.mean() - expected) < 4 * math.sqrt(expected / hist.n_bins)


def test_schedule_switches_analyzer_angles():
    schedule = (ScheduleInterval(0.0, 0.0, 0.0, 1.0), ScheduleInterval(1.0, math.pi / 4, math.pi / 4, 1.0))
    cfg = small_link(schedule=schedule)
    malta, sicily = simulate_run(cfg, 3)
    matches = match_coincidences(malta, sicily, cfg.fibre_delay_ps, 2000)
    second = matches.select(matches.t_a >= PS_PER_S)
    # D/A is anti-correlated for this source
    assert second.counts[0, 1] + second.counts[1, 0] > 0.95 * len(second)


def test_exact_compensation_restores_source():
    cfg = small_link(channel_rotvec_deg=(37.0, -112.0, 64.0), compensate_channel=True)
    assert fidelity_with_bell(analyzed_state(cfg)) == pytest.approx(1.0, abs=1e-9)


def test_reference_estimated_compensation_leaves_small_misalignment():
    cfg = small_link(channel_rotvec_deg=(37.0, -112.0, 64.0), compensate_channel=True,
                     compensation_reference_counts=10_000)
    fidelity = fidelity_with_bell(analyzed_state(cfg, seed=5))
    assert 0.97 < fidelity < 1.0


def test_preset_expected_coincidence_rate():
    cfg = load_config(PRESETS / "malta-sicily.cfg")
    rate = expected_rates(cfg, 0.0, 0.0)["coincidence_rate"]
    assert rate == pytest.approx(257, abs=4)


@pytest.mark.slow
def test_preset_simulated_coincidence_rate():
    cfg = replace(load_config(PRESETS / "malta-sicily.cfg"), duration_s=60.0)
    malta, sicily = simulate_run(cfg, 2024)
    matches = match_coincidences(malta, sicily, cfg.fibre_delay_ps, 4000)
    singles_a = len(malta) / cfg.duration_s
    singles_b = len(sicily) / cfg.duration_s
    accidentals = singles_a * singles_b * 4000e-12 * cfg.duration_s
    expected = expected_rates(cfg, 0.0, 0.0)["coincidence_rate"] * cfg.duration_s + accidentals
    assert abs(len(matches) - expected) < 4 * math.sqrt(expected)
    assert abs(len(matches) / cfg.duration_s - 257) < 4 * math.sqrt(257 / 60) * math.sqrt(60)
