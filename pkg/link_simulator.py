#!/usr/bin/env python3
"""
Monte-Carlo link simulator
Generates the two independent time-tag streams recorded in Malta and Sicily.

Chain per pair: Poisson emission -> Born-rule outcome at the two analyzers ->
per-arm thinning (arm efficiency, fibre transmission, detector efficiency) ->
fibre delay and dispersion on the Sicily arm -> detector model (jitter, dark
counts, dead time) -> time-tagging unit (jitter, clock offset/drift,
quantisation).

Every stage draws from its own SeedSequence, keyed by (seed, stage, index), so
chunks can run on a thread pool and still give bit-identical streams.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from config import FWHM_PER_SIGMA, QLINK_THREADS, SIM_CHUNK_S
from link_config import CHANNELS, ClockConfig, ConfigError, DetectorConfig, LinkConfig, config_digest
from quantum_state import (
    LocalUnitary,
    TwoQubitState,
    apply_local_unitary,
    compensation_from_references,
    joint_outcome_probs,
    noisy_source_state,
    stokes_vector,
)
from tag_io import TagStream

logger = logging.getLogger(__name__)

PS_PER_S = 1_000_000_000_000
_INT64_MAX = np.iinfo(np.int64).max

# SeedSequence spawn keys per stage
_STAGE_SOURCE = 0
_STAGE_DETECTOR = 1
_STAGE_TAGGER = 2
_STAGE_REFERENCES = 3


class ClockOverflowError(OverflowError):
    """Raised when clock mapping leaves [0, 2**63) ps, the int64 range of TagStream times."""


def stage_rng(seed: int, stage: int, *index: int) -> np.random.Generator:
    """Independent PCG64 generator for one simulation stage."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stage, *index))))


def emit_pairs(rate: float, duration: float, seed) -> np.ndarray:
    """Homogeneous Poisson emission times in ps over [0, duration seconds), sorted."""
    if rate < 0 or duration < 0:
        raise ValueError("rate and duration must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = rng.poisson(rate * duration)
    times = np.sort(rng.uniform(0.0, duration * PS_PER_S, n))
    return times.astype(np.int64)


def arm_survival(cfg: LinkConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Per-port survival probability of the Malta and Sicily photons."""
    malta = np.array([cfg.malta_arm_efficiency * cfg.detector("malta", c).efficiency for c in CHANNELS])
    sicily = np.array([cfg.sicily_arm_efficiency * cfg.fibre_transmission * cfg.detector("sicily", c).efficiency
                       for c in CHANNELS])
    return malta, sicily


def detect_pair(probs: Sequence[float], survival_malta: Sequence[float], survival_sicily: Sequence[float],
                rng: np.random.Generator) -> Tuple[Optional[int], Optional[int]]:
    """Port that fired in Malta and in Sicily for one pair (None when the photon was lost)."""
    outcome = int(rng.choice(4, p=np.asarray(probs, dtype=float)))
    port_a, port_b = divmod(outcome, 2)
    fired_a = port_a if rng.random() < survival_malta[port_a] else None
    fired_b = port_b if rng.random() < survival_sicily[port_b] else None
    return fired_a, fired_b


def sample_detections(probs: Sequence[float], survival_malta: np.ndarray, survival_sicily: np.ndarray,
                      n: int, rng: np.random.Generator, conditioned: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised detect_pair for n pairs; -1 marks a lost photon.

    With conditioned=True the pairs are known to contain at least one photon
    that survives the per-arm maximum survival, which is how the simulator
    skips the pairs nobody would ever see.
    """
    max_a = float(survival_malta.max())
    max_b = float(survival_sicily.max())
    outcome = rng.choice(4, size=n, p=np.asarray(probs, dtype=float))
    port_a = (outcome >> 1).astype(np.int8)
    port_b = (outcome & 1).astype(np.int8)
    if conditioned:
        p_any = 1.0 - (1.0 - max_a) * (1.0 - max_b)
        weights = np.array([max_a * max_b, max_a * (1.0 - max_b), (1.0 - max_a) * max_b]) / p_any
        which = rng.choice(3, size=n, p=weights / weights.sum())
        reach_a = which != 2
        reach_b = which != 1
        keep_a = reach_a & (rng.random(n) * max_a < survival_malta[port_a])
        keep_b = reach_b & (rng.random(n) * max_b < survival_sicily[port_b])
    else:
        keep_a = rng.random(n) < survival_malta[port_a]
        keep_b = rng.random(n) < survival_sicily[port_b]
    return np.where(keep_a, port_a, -1).astype(np.int8), np.where(keep_b, port_b, -1).astype(np.int8)


@njit(cache=True, nogil=True)
def _dead_time_mask(times, dead_time_ps):
    n = times.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    last = 0
    have_last = False
    for i in range(n):
        if not have_last or times[i] - last >= dead_time_ps:
            keep[i] = True
            last = times[i]
            have_last = True
    return keep


def gaussian_jitter(times: np.ndarray, fwhm_ps: float, rng: np.random.Generator) -> np.ndarray:
    if fwhm_ps <= 0 or times.size == 0:
        return times
    noise = np.rint(rng.normal(0.0, fwhm_ps / FWHM_PER_SIGMA, times.size)).astype(np.int64)
    return np.maximum(times + noise, 0)


def apply_detector(times: np.ndarray, cfg: DetectorConfig, duration_ps: int, rng: np.random.Generator) -> np.ndarray:
    """Photon arrivals on one detector -> registered click times (sorted).

    Jitter first, then Poissonian dark counts uniform over [0, duration_ps),
    then a non-paralyzable dead time.
    """
    times = gaussian_jitter(np.asarray(times, dtype=np.int64), cfg.jitter_fwhm_ps, rng)
    n_dark = rng.poisson(cfg.dark_rate * duration_ps / PS_PER_S) if cfg.dark_rate > 0 else 0
    if n_dark:
        dark = rng.integers(0, max(int(duration_ps), 1), n_dark, dtype=np.int64)
        times = np.concatenate([times, dark])
    times = np.sort(times, kind="stable")
    if cfg.dead_time_ps > 0 and times.size:
        times = times[_dead_time_mask(times, np.int64(cfg.dead_time_ps))]
    return times


def apply_clock(times: np.ndarray, cfg: ClockConfig) -> np.ndarray:
    """t -> round((t*(1 + drift) + offset) / resolution) * resolution; order is preserved."""
    times = np.asarray(times, dtype=np.int64)
    if times.size == 0:
        return times.copy()
    if cfg.drift_ppm <= -1e6:
        raise ConfigError("clock drift must be greater than -1e6 ppm")
    lowest = float(times[0]) * (1.0 + cfg.drift_ppm * 1e-6) + cfg.offset_ps
    highest = float(times[-1]) * (1.0 + cfg.drift_ppm * 1e-6) + cfg.offset_ps
    if lowest < 0 or highest + cfg.resolution_ps > float(_INT64_MAX):
        raise ClockOverflowError(f"clock mapping leaves the 64-bit range ({lowest:.6g} .. {highest:.6g} ps)")
    # drift increment in float (exact well below 2**53), the base timestamp stays integer
    increment = np.rint(times.astype(np.float64) * (cfg.drift_ppm * 1e-6)).astype(np.int64)
    mapped = times + increment + np.int64(cfg.offset_ps)
    res = np.int64(cfg.resolution_ps)
    if res > 1:
        mapped = ((mapped + res // 2) // res) * res
    return mapped


# --- Source state seen by the analyzers ---

def estimate_reference_stokes(u: np.ndarray, angle: float, photons: int, rng: np.random.Generator) -> np.ndarray:
    """Stokes vector of a reference state estimated from `photons` detections per analysis basis."""
    exact = stokes_vector(u, angle)
    plus = rng.binomial(photons, (1.0 + np.clip(exact, -1.0, 1.0)) / 2.0)
    return 2.0 * plus / photons - 1.0


def compensation_for(cfg: LinkConfig, seed: int = 0) -> Optional[LocalUnitary]:
    if not cfg.compensate_channel:
        return None
    u = cfg.channel_unitary.u
    if cfg.compensation_reference_counts == 0:
        s_h, s_d = stokes_vector(u, 0.0), stokes_vector(u, math.pi / 4)
    else:
        rng = stage_rng(seed, _STAGE_REFERENCES)
        s_h = estimate_reference_stokes(u, 0.0, cfg.compensation_reference_counts, rng)
        s_d = estimate_reference_stokes(u, math.pi / 4, cfg.compensation_reference_counts, rng)
    return compensation_from_references(s_h, s_d)


def analyzed_state(cfg: LinkConfig, seed: int = 0) -> TwoQubitState:
    """Noisy source state after the fibre unitary and, if enabled, its estimated inverse."""
    state = apply_local_unitary(noisy_source_state(cfg.v_werner, cfg.hv_dephasing), cfg.channel_unitary)
    compensation = compensation_for(cfg, seed)
    if compensation is not None:
        state = apply_local_unitary(state, compensation)
    return state


# --- Analytic rates (oracle for tests and reports) ---

def expected_rates(cfg: LinkConfig, malta_angle: float, sicily_angle: float,
                   state: Optional[TwoQubitState] = None) -> Dict[str, object]:
    """Singles per channel (with dead-time loss) and true coincidence rates per channel pair."""
    state = state if state is not None else analyzed_state(cfg)
    probs = np.array(joint_outcome_probs(state, malta_angle, sicily_angle)).reshape(2, 2)
    surv_a, surv_b = arm_survival(cfg)
    coinc = cfg.pair_rate * probs * np.outer(surv_a, surv_b)
    singles = {}
    for station, marginal, surv in (("malta", probs.sum(axis=1), surv_a), ("sicily", probs.sum(axis=0), surv_b)):
        for c in CHANNELS:
            det = cfg.detector(station, c)
            raw = cfg.pair_rate * marginal[c] * surv[c] + det.dark_rate
            tau = det.dead_time_ps / PS_PER_S
            singles[(station, c)] = raw / (1.0 + raw * tau)
    return {"coincidence_matrix": coinc, "coincidence_rate": float(coinc.sum()), "singles": singles}


# --- Orchestration ---

@dataclass(frozen=True)
class _Chunk:
    index: Tuple[int, int]
    start_ps: int
    duration_s: float
    probs: Tuple[float, float, float, float]


def _plan_chunks(cfg: LinkConfig, state: TwoQubitState) -> List[_Chunk]:
    chunks = []
    for i, interval in enumerate(cfg.effective_schedule()):
        probs = joint_outcome_probs(state, interval.malta_angle, interval.sicily_angle)
        n_chunks = max(1, math.ceil(interval.duration_s / SIM_CHUNK_S - 1e-9))
        for j in range(n_chunks):
            offset_s = j * SIM_CHUNK_S
            length = min(SIM_CHUNK_S, interval.duration_s - offset_s)
            start_ps = int(round((interval.start_s + offset_s) * PS_PER_S))
            chunks.append(_Chunk((i, j), start_ps, length, probs))
    return chunks


def _simulate_chunk(cfg: LinkConfig, chunk: _Chunk, seed: int, surv_a: np.ndarray, surv_b: np.ndarray):
    rng = stage_rng(seed, _STAGE_SOURCE, *chunk.index)
    p_any = 1.0 - (1.0 - surv_a.max()) * (1.0 - surv_b.max())
    emitted = emit_pairs(cfg.pair_rate * p_any, chunk.duration_s, rng) + chunk.start_ps
    if emitted.size == 0 or p_any == 0:
        empty = np.zeros(0, np.int64), np.zeros(0, np.int8)
        return empty, empty
    port_a, port_b = sample_detections(chunk.probs, surv_a, surv_b, emitted.size, rng, conditioned=True)
    in_a = port_a >= 0
    in_b = port_b >= 0
    times_b = gaussian_jitter(emitted[in_b] + np.int64(cfg.fibre_delay_ps), cfg.dispersion_fwhm_ps, rng)
    return (emitted[in_a], port_a[in_a]), (times_b, port_b[in_b])


def _station_stream(station: str, arrivals: List[Tuple[np.ndarray, np.ndarray]], cfg: LinkConfig, seed: int,
                    duration_ps: int, digest: bytes) -> TagStream:
    times = np.concatenate([t for t, _ in arrivals]) if arrivals else np.zeros(0, np.int64)
    ports = np.concatenate([p for _, p in arrivals]) if arrivals else np.zeros(0, np.int8)
    station_index = 0 if station == "malta" else 1
    clicks, labels = [], []
    for c in CHANNELS:
        rng = stage_rng(seed, _STAGE_DETECTOR, station_index, c)
        registered = apply_detector(times[ports == c], cfg.detector(station, c), duration_ps, rng)
        clicks.append(registered)
        labels.append(np.full(registered.size, c, dtype=np.uint8))
    all_times = np.concatenate(clicks)
    all_channels = np.concatenate(labels)
    clock = cfg.clocks[station]
    all_times = gaussian_jitter(all_times, clock.jitter_fwhm_ps, stage_rng(seed, _STAGE_TAGGER, station_index))
    order = np.argsort(all_times, kind="stable")
    mapped = apply_clock(all_times[order], clock)
    return TagStream(all_channels[order], mapped, clock.resolution_ps, station, digest, len(CHANNELS))


def simulate_run(cfg: LinkConfig, seed: int, max_workers: Optional[int] = None) -> Tuple[TagStream, TagStream]:
    """Simulate the whole schedule; returns (malta, sicily) streams, deterministic per seed."""
    cfg.validate()
    state = analyzed_state(cfg, seed)
    surv_a, surv_b = arm_survival(cfg)
    chunks = _plan_chunks(cfg, state)
    logger.info("Simulating %d chunks over %.3f s (pair rate %.4g/s)", len(chunks), cfg.run_duration_s,
                cfg.pair_rate)

    with ThreadPoolExecutor(max_workers=max_workers or QLINK_THREADS) as executor:
        results = list(executor.map(lambda ch: _simulate_chunk(cfg, ch, seed, surv_a, surv_b), chunks))

    run_ps = int(round(cfg.run_duration_s * PS_PER_S))
    digest = config_digest(cfg)
    malta = _station_stream("malta", [r[0] for r in results], cfg, seed, run_ps, digest)
    sicily = _station_stream("sicily", [r[1] for r in results], cfg, seed, run_ps + cfg.fibre_delay_ps, digest)
    logger.info("Simulated %d Malta tags and %d Sicily tags", len(malta), len(sicily))
    return malta, sicily
