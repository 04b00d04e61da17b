#!/usr/bin/env python3
"""
Correlation of two independent time-tag streams.

Finds the link delay between the Malta and Sicily taggers from the
cross-correlation histogram, tracks residual clock drift, and pairs tags into
coincidences. See DELAY_SEARCH_ALGORITHM.md and COINCIDENCE_MATCHING_ALGORITHM.md.

Conventions: offsets are t_b - t_a in picoseconds, so a positive delay means
stream B (Sicily) sees the pair later than stream A (Malta).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numba import njit
from scipy import stats

from analysis import SettingCounts
from config import (
    BACKGROUND_EXCLUSION_FWHM,
    COARSE_BINS,
    DRIFT_PASSES,
    DRIFT_SEARCH_SPAN_PS,
    DRIFT_SPAN_SHRINK,
    MAX_GRID_CELLS,
    MAX_SEARCH_BINS,
    PEAK_SIGNIFICANCE_SIGMA,
    QLINK_THREADS,
)
from tag_io import TagStream

logger = logging.getLogger(__name__)

# one-sided tail probability of a 5 sigma Gaussian excess
LOOK_ELSEWHERE_P = stats.norm.sf(PEAK_SIGNIFICANCE_SIGMA)
# streams shorter than this are swept on the calling thread
_PARALLEL_MIN_TAGS = 1 << 20


class NoCorrelationFound(RuntimeError):
    """No correlogram bin exceeded the background by the significance threshold."""


@dataclass(frozen=True)
class Correlogram:
    bin_width_ps: int
    start_offset_ps: int
    counts: np.ndarray

    def __post_init__(self):
        if self.bin_width_ps < 1:
            raise ValueError(f"bin_width_ps must be >= 1, got {self.bin_width_ps}")
        counts = np.asarray(self.counts, dtype=np.uint64)
        if counts.ndim != 1 or counts.size == 0:
            raise ValueError("correlogram needs at least one bin")
        object.__setattr__(self, "counts", counts)

    @property
    def n_bins(self) -> int:
        return int(self.counts.size)

    @property
    def stop_offset_ps(self) -> int:
        return self.start_offset_ps + self.n_bins * self.bin_width_ps

    def centers(self) -> np.ndarray:
        return self.start_offset_ps + (np.arange(self.n_bins) + 0.5) * self.bin_width_ps

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class PeakStats:
    delay_ps: float
    fwhm_ps: float
    peak_height: int
    background_mean: float
    significance: float
    tail_probability: float = 1.0

    def is_significant(self, n_bins: int = 1) -> bool:
        """Excess above PEAK_SIGNIFICANCE_SIGMA and, corrected for bins searched, below the 5 sigma tail."""
        return (self.significance >= PEAK_SIGNIFICANCE_SIGMA
                and self.tail_probability * max(n_bins, 1) < LOOK_ELSEWHERE_P)


@dataclass(frozen=True)
class DriftModel:
    """Piecewise-linear delay as a function of stream-B time, extrapolated linearly past the ends."""
    knot_times_ps: np.ndarray
    knot_delays_ps: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.knot_times_ps, dtype=np.float64)
        d = np.asarray(self.knot_delays_ps, dtype=np.float64)
        if t.ndim != 1 or t.shape != d.shape or t.size == 0:
            raise ValueError("drift model needs at least one (t, delay) knot")
        if np.any(np.diff(t) <= 0):
            raise ValueError("drift knots must be strictly increasing in time")
        object.__setattr__(self, "knot_times_ps", t)
        object.__setattr__(self, "knot_delays_ps", d)

    @classmethod
    def constant(cls, delay_ps: float, t_ps: float = 0.0) -> "DriftModel":
        return cls(np.array([t_ps]), np.array([delay_ps]))

    @property
    def knots(self) -> List[Tuple[float, float]]:
        return list(zip(self.knot_times_ps.tolist(), self.knot_delays_ps.tolist()))

    def delay_at(self, t_ps) -> np.ndarray:
        t = np.asarray(t_ps, dtype=np.float64)
        kt, kd = self.knot_times_ps, self.knot_delays_ps
        if kt.size == 1:
            return np.full(t.shape, kd[0])
        out = np.interp(t, kt, kd)
        left = t < kt[0]
        right = t > kt[-1]
        out[left] = kd[0] + (t[left] - kt[0]) * (kd[1] - kd[0]) / (kt[1] - kt[0])
        out[right] = kd[-1] + (t[right] - kt[-1]) * (kd[-1] - kd[-2]) / (kt[-1] - kt[-2])
        return out

    @property
    def slope_ppm(self) -> float:
        """Least-squares slope of the knots, in ppm (0 for a single knot)."""
        if self.knot_times_ps.size < 2:
            return 0.0
        slope = np.polyfit(self.knot_times_ps, self.knot_delays_ps, 1)[0]
        return float(slope * 1e6)


@dataclass(frozen=True)
class MatchResult:
    """Coincidence records plus the per-channel-pair count matrix C[ch_a][ch_b]."""
    t_a: np.ndarray
    t_b: np.ndarray
    channel_a: np.ndarray
    channel_b: np.ndarray
    counts: np.ndarray
    window_ps: int

    def __len__(self) -> int:
        return int(self.t_a.size)

    def select(self, mask: np.ndarray) -> "MatchResult":
        ca, cb = self.channel_a[mask], self.channel_b[mask]
        return MatchResult(self.t_a[mask], self.t_b[mask], ca, cb, _count_matrix(ca, cb, self.counts.shape[0]),
                           self.window_ps)


def _times(stream: Union[TagStream, np.ndarray]) -> np.ndarray:
    if isinstance(stream, TagStream):
        return stream.times
    return np.ascontiguousarray(stream, dtype=np.int64)


def _count_matrix(ca: np.ndarray, cb: np.ndarray, n_channels: int = 2) -> np.ndarray:
    flat = np.bincount(ca.astype(np.int64) * n_channels + cb.astype(np.int64), minlength=n_channels * n_channels)
    return flat[: n_channels * n_channels].reshape(n_channels, n_channels).astype(np.int64)


# --- Kernels ---

@njit(cache=True, nogil=True)
def _sweep_hist(ta, tb, lo, width, n_bins, j_start):
    """All-pairs histogram of tb - ta in [lo, lo + n_bins*width) by a sorted two-pointer sweep."""
    counts = np.zeros(n_bins, dtype=np.int64)
    hi = lo + width * n_bins
    m = tb.shape[0]
    j0 = j_start
    for i in range(ta.shape[0]):
        t = ta[i]
        while j0 < m and tb[j0] - t < lo:
            j0 += 1
        j = j0
        while j < m:
            d = tb[j] - t
            if d >= hi:
                break
            counts[(d - lo) // width] += 1
            j += 1
    return counts


@njit(cache=True, nogil=True)
def _grid_hist_dense_b(cells_a, grid, grid_origin, lo_cells, n_bins):
    counts = np.zeros(n_bins, dtype=np.int64)
    g = grid.shape[0]
    for i in range(cells_a.shape[0]):
        base = cells_a[i] + lo_cells - grid_origin
        k0 = max(0, -base)
        k1 = min(n_bins, g - base)
        for k in range(k0, k1):
            counts[k] += grid[base + k]
    return counts


@njit(cache=True, nogil=True)
def _grid_hist_dense_a(cells_b, grid, grid_origin, lo_cells, n_bins):
    counts = np.zeros(n_bins, dtype=np.int64)
    g = grid.shape[0]
    for j in range(cells_b.shape[0]):
        base = cells_b[j] - lo_cells - grid_origin
        k0 = max(0, base - g + 1)
        k1 = min(n_bins, base + 1)
        for k in range(k0, k1):
            counts[k] += grid[base - k]
    return counts


@njit(cache=True, nogil=True)
def _greedy_match(ta, tb, window):
    """Earliest-first one-to-one pairing with 2|tb - ta| <= window; returns index pairs."""
    n = ta.shape[0]
    m = tb.shape[0]
    out_a = np.empty(min(n, m), dtype=np.int64)
    out_b = np.empty(min(n, m), dtype=np.int64)
    found = 0
    i = 0
    j = 0
    while i < n and j < m:
        d = tb[j] - ta[i]
        if 2 * abs(d) <= window:
            out_a[found] = i
            out_b[found] = j
            found += 1
            i += 1
            j += 1
        elif d < 0:
            j += 1
        else:
            i += 1
    return out_a[:found], out_b[:found]


# --- Correlogram ---

def cross_correlogram(a, b, bin_width_ps: int, offset_range: Tuple[int, int],
                      max_workers: Optional[int] = None) -> Correlogram:
    """Exact histogram of all pairwise offsets t_b - t_a within offset_range.

    Stream A is split into contiguous chunks swept in parallel; each chunk
    starts its B pointer at the first tag that can reach the range.
    """
    bin_width_ps = int(bin_width_ps)
    if bin_width_ps < 1:
        raise ValueError(f"bin_width_ps must be >= 1, got {bin_width_ps}")
    lo, hi = int(offset_range[0]), int(offset_range[1])
    if hi <= lo:
        raise ValueError(f"offset range is empty: [{lo}, {hi})")
    for stream in (a, b):
        if isinstance(stream, TagStream):
            stream.require_sorted()
    ta, tb = _times(a), _times(b)
    n_bins = -(-(hi - lo) // bin_width_ps)

    workers = max_workers or QLINK_THREADS
    if workers <= 1 or ta.size < _PARALLEL_MIN_TAGS:
        counts = _sweep_hist(ta, tb, lo, bin_width_ps, n_bins, 0)
        return Correlogram(bin_width_ps, lo, counts)

    bounds = np.linspace(0, ta.size, workers + 1).astype(np.int64)
    pieces = [(bounds[k], bounds[k + 1]) for k in range(workers) if bounds[k + 1] > bounds[k]]

    def sweep(piece):
        start, stop = piece
        j_start = int(np.searchsorted(tb, ta[start] + lo, side="left"))
        return _sweep_hist(ta[start:stop], tb, lo, bin_width_ps, n_bins, j_start)

    with ThreadPoolExecutor(max_workers=workers) as executor:
        partial = list(executor.map(sweep, pieces))
    return Correlogram(bin_width_ps, lo, np.sum(partial, axis=0))


def _grid_correlogram(ta: np.ndarray, tb: np.ndarray, bin_width_ps: int, lo: int, n_bins: int) -> Correlogram:
    """Approximate correlogram on a time grid of bin_width_ps cells (each offset smeared by up to one bin)."""
    lo_cells = lo // bin_width_ps
    cells_a = ta // bin_width_ps
    cells_b = tb // bin_width_ps
    if ta.size <= tb.size:
        origin = int(cells_b[0])
        grid = np.bincount(cells_b - origin).astype(np.int32)
        counts = _grid_hist_dense_b(cells_a, grid, origin, lo_cells, n_bins)
    else:
        origin = int(cells_a[0])
        grid = np.bincount(cells_a - origin).astype(np.int32)
        counts = _grid_hist_dense_a(cells_b, grid, origin, lo_cells, n_bins)
    return Correlogram(bin_width_ps, lo_cells * bin_width_ps, counts)


def _interior(ta: np.ndarray, tb: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """A tags whose whole offset range [t + lo, t + hi) lies inside stream B, so the background is flat."""
    start, stop = np.searchsorted(ta, [tb[0] - lo, tb[-1] - hi + 1])
    if stop <= start:
        raise NoCorrelationFound(
            f"no correlation found: streams are too short for an offset range of {hi - lo} ps")
    return ta[start:stop]


def _level_correlogram(ta, tb, bin_width_ps: int, lo: int, n_bins: int, exact: bool) -> Correlogram:
    ta = _interior(ta, tb, lo, lo + n_bins * bin_width_ps)
    if not exact and ta.size and tb.size:
        duration = max(int(max(ta[-1], tb[-1]) - min(ta[0], tb[0])), 1)
        sweep_cost = ta.size + ta.size * tb.size * (n_bins * bin_width_ps) / duration
        dense = tb if ta.size <= tb.size else ta
        grid_cells = int(dense[-1] // bin_width_ps - dense[0] // bin_width_ps) + 1
        grid_cost = min(ta.size, tb.size) * n_bins + grid_cells
        if grid_cells <= MAX_GRID_CELLS and grid_cost < sweep_cost:
            return _grid_correlogram(ta, tb, bin_width_ps, lo, n_bins)
    return cross_correlogram(ta, tb, bin_width_ps, (lo, lo + n_bins * bin_width_ps))


# --- Peak statistics ---

def _half_max_crossings(counts: np.ndarray, peak: int, half: float, centers: np.ndarray) -> Tuple[float, float]:
    k = peak
    while k > 0 and counts[k - 1] >= half:
        k -= 1
    if k == 0:
        left = centers[0]
    else:
        lo_v, hi_v = counts[k - 1], counts[k]
        left = centers[k - 1] + (half - lo_v) / (hi_v - lo_v) * (centers[k] - centers[k - 1])
    k = peak
    last = counts.size - 1
    while k < last and counts[k + 1] >= half:
        k += 1
    if k == last:
        right = centers[last]
    else:
        hi_v, lo_v = counts[k], counts[k + 1]
        right = centers[k] + (hi_v - half) / (hi_v - lo_v) * (centers[k + 1] - centers[k])
    return float(left), float(right)


def peak_stats(hist: Correlogram) -> PeakStats:
    """Peak position, FWHM and significance of a correlogram.

    Background is the median of bins farther than BACKGROUND_EXCLUSION_FWHM
    widths from the peak; the width comes from a first pass against the
    median of all bins. In the sparse regime where that median is zero the
    mean of the far bins is used instead. The excess is scored against the
    larger of the Poisson noise and the robust scatter (MAD) of the far bins.
    """
    counts = hist.counts.astype(np.float64)
    centers = hist.centers()
    peak = int(np.argmax(counts))
    height = counts[peak]

    background = float(np.median(counts))
    left, right = _half_max_crossings(counts, peak, background + (height - background) / 2.0, centers)
    far = np.abs(centers - centers[peak]) > BACKGROUND_EXCLUSION_FWHM * max(right - left, hist.bin_width_ps)
    if not far.any():
        far = np.ones(counts.size, dtype=bool)
        far[max(peak - 1, 0): peak + 2] = False
    spread = 0.0
    if far.any():
        far_counts = counts[far]
        background = float(np.median(far_counts))
        if background == 0.0:
            background = float(far_counts.mean())
        # the median of a low-count Poisson background sits below its mean
        level = max(background, float(far_counts.mean()))
        spread = float(stats.median_abs_deviation(far_counts, scale="normal"))
        left, right = _half_max_crossings(counts, peak, background + (height - background) / 2.0, centers)
    else:
        background = level = 0.0

    excess = height - background
    # wide bins share tags with their neighbours, so the scatter between bins can exceed Poisson
    noise = max(math.sqrt(background), spread)
    if noise > 0:
        significance = excess / noise
        tail = float(stats.poisson.sf(height - 1, level)) if level > 0 else 0.0
        if spread > 0:
            tail = max(tail, float(stats.norm.sf(excess / spread)))
    else:
        significance = math.inf if excess > 0 else 0.0
        tail = 0.0 if excess > 0 else 1.0
    return PeakStats(
        delay_ps=(left + right) / 2.0,
        fwhm_ps=max(right - left, 0.0),
        peak_height=int(height),
        background_mean=background,
        significance=float(significance),
        tail_probability=tail,
    )


# --- Delay search ---

def _widen(ta, tb, span: int, final_bin: int, n_bins: int) -> Tuple[int, PeakStats, int]:
    """First level over the whole span, from n_bins bins upward, whose peak is significant.

    Returns (bin width, peak, bin count); raises NoCorrelationFound when the
    bins reach final_bin or MAX_SEARCH_BINS first.
    """
    while True:
        width = max(-(-2 * span // n_bins), final_bin)
        n_level = -(-2 * span // width)
        hist = _level_correlogram(ta, tb, width, -span, n_level, exact=width == final_bin)
        found = peak_stats(hist)
        logger.debug("search level: %d bins of %d ps, peak %.1f sigma", n_level, width, found.significance)
        if found.is_significant(n_level):
            return width, found, n_bins
        if width == final_bin or n_bins * 2 > MAX_SEARCH_BINS:
            raise NoCorrelationFound(
                f"no correlation found within +-{span} ps (best peak {found.significance:.1f} sigma)")
        n_bins *= 2


def _zoom(ta, tb, found: PeakStats, width: int, final_bin: int) -> Tuple[float, PeakStats, int, bool]:
    """Halve the bin width around the peak down to final_bin.

    Returns (centre, last significant peak, levels that kept the peak, whether
    every level kept it).
    """
    center, best, kept = found.delay_ps, found, 0
    while width > final_bin:
        width = max(width // 2, final_bin)
        half_range = min(max(COARSE_BINS * width // 2, int(2 * best.fwhm_ps), 2 * width), COARSE_BINS * width)
        lo = int(math.floor(center)) - half_range
        n_level = -(-2 * half_range // width)
        hist = _level_correlogram(ta, tb, width, lo, n_level, exact=width == final_bin)
        found = peak_stats(hist)
        if not found.is_significant(n_level):
            logger.warning("peak at %.1f ps lost at %d ps bins after %d zoom levels", center, width, kept)
            return center, best, kept, False
        center, best = found.delay_ps, found
        kept += 1
    return center, best, kept, True


def coarse_to_fine_delay(a, b, search_span_ps: int, final_bin_ps: int, return_stats: bool = False):
    """Recover the delay of B relative to A from within +-search_span_ps.

    Starts with COARSE_BINS bins over the whole span and doubles the bin count
    until the peak is significant, then re-centres on it and halves the bin
    width level by level down to final_bin_ps. The last level is an exact
    sweep. Each level histograms only the A tags whose whole offset range
    lies inside stream B, so stream B must be longer than twice the span.

    A peak that vanishes at the first zoom level was a fluctuation: the search
    goes back to the whole span with twice the bins. A peak that survives at
    least one zoom and is lost later (e.g. smeared by drift) keeps its last
    confirmed centre. Raises NoCorrelationFound when no level is significant
    or the result falls outside [-span, span).
    """
    if search_span_ps <= 0 or final_bin_ps < 1:
        raise ValueError("search span must be positive and final bin >= 1 ps")
    ta, tb = _times(a), _times(b)
    if ta.size == 0 or tb.size == 0:
        raise NoCorrelationFound("no correlation found: a stream is empty")
    span = int(search_span_ps)
    final_bin = int(final_bin_ps)

    n_bins = COARSE_BINS
    while True:
        width, found, n_bins = _widen(ta, tb, span, final_bin, n_bins)
        center, best, kept, complete = _zoom(ta, tb, found, width, final_bin)
        if complete or kept > 0:
            break
        if n_bins * 2 > MAX_SEARCH_BINS:
            raise NoCorrelationFound(f"no correlation found within +-{span} ps: "
                                     f"the only significant peaks did not survive zooming")
        n_bins *= 2

    delay = int(round(center))
    if not -span <= delay < span:
        raise NoCorrelationFound(f"no correlation found: peak at {delay} ps lies outside +-{span} ps")
    logger.info("delay %.1f ps, FWHM %.1f ps, %.1f sigma", center, best.fwhm_ps, best.significance)
    return (delay, best) if return_stats else delay


# --- Coincidence matching ---

def match_coincidences(a: TagStream, b: TagStream, delay: Union[int, float, DriftModel],
                       window_ps: int) -> MatchResult:
    """Greedy earliest-first pairing of tags with |t_b - delay - t_a| <= window_ps / 2.

    Each tag takes part in at most one coincidence. `delay` may be a constant
    or a DriftModel evaluated at each B tag.
    """
    if window_ps < 0:
        raise ValueError(f"window_ps must be >= 0, got {window_ps}")
    a.require_sorted()
    b.require_sorted()
    if isinstance(delay, DriftModel):
        shifted = b.times - np.rint(delay.delay_at(b.times)).astype(np.int64)
    else:
        shifted = b.times - np.int64(round(delay))
    order = None
    if shifted.size > 1 and np.any(np.diff(shifted) < 0):
        order = np.argsort(shifted, kind="stable")
        shifted = shifted[order]
    idx_a, idx_b = _greedy_match(a.times, np.ascontiguousarray(shifted), np.int64(window_ps))
    if order is not None:
        idx_b = order[idx_b]
    ca, cb = a.channels[idx_a], b.channels[idx_b]
    n_channels = max(a.channel_count, b.channel_count)
    return MatchResult(a.times[idx_a], b.times[idx_b], ca, cb, _count_matrix(ca, cb, n_channels), int(window_ps))


# --- Drift tracking ---

def _block_residual(ta, tb_block, model: DriftModel, span: int, width: int) -> Optional[float]:
    """Residual delay of one block against the model, or None when the block peak is not significant."""
    if tb_block.size == 0:
        return None
    residual_b = tb_block - np.rint(model.delay_at(tb_block)).astype(np.int64)
    if residual_b.size > 1 and np.any(np.diff(residual_b) < 0):
        residual_b = np.sort(residual_b, kind="stable")
    lo_idx, hi_idx = np.searchsorted(ta, [residual_b[0] - span, residual_b[-1] + span + 1])
    ta_block = ta[lo_idx:hi_idx]
    if ta_block.size == 0:
        return None
    n_bins = -(-2 * span // width)
    hist = Correlogram(width, -span, _sweep_hist(ta_block, residual_b, -span, width, n_bins, 0))
    found = peak_stats(hist)
    return found.delay_ps if found.is_significant(n_bins) else None


def track_drift(a, b, block_duration_s: float, coarse_delay_ps: float, final_bin_ps: int = 100,
                search_span_ps: int = DRIFT_SEARCH_SPAN_PS, passes: int = DRIFT_PASSES) -> DriftModel:
    """Piecewise-linear delay model with one knot per block of stream B.

    Each pass histograms the residual delay of every block against the
    previous model over a span DRIFT_SPAN_SHRINK times narrower. Blocks whose
    peak is not significant get no knot and are bridged by their neighbours.
    """
    if block_duration_s <= 0:
        raise ValueError("block_duration_s must be positive")
    ta, tb = _times(a), _times(b)
    model = DriftModel.constant(float(coarse_delay_ps))
    if ta.size == 0 or tb.size == 0:
        return model
    block_ps = int(round(block_duration_s * 1e12))
    edges = np.arange(int(tb[0]), int(tb[-1]) + block_ps, block_ps, dtype=np.int64)
    if edges.size < 2:
        edges = np.array([int(tb[0]), int(tb[0]) + block_ps], dtype=np.int64)
    bounds = np.searchsorted(tb, edges)
    centers = (edges[:-1] + edges[1:]) / 2.0
    floor_span = COARSE_BINS * final_bin_ps // 2

    span = int(search_span_ps)
    for p in range(passes):
        width = max(-(-2 * span // COARSE_BINS), final_bin_ps)
        knot_t, knot_d = [], []
        for k in range(centers.size):
            try:
                residual = _block_residual(ta, tb[bounds[k]:bounds[k + 1]], model, span, width)
            except (NoCorrelationFound, ValueError) as e:
                logger.error("drift block %d failed: %s", k, e)
                continue
            if residual is None:
                continue
            knot_t.append(centers[k])
            knot_d.append(float(model.delay_at(np.array([centers[k]]))[0]) + residual)
        if not knot_t:
            logger.warning("drift pass %d: no block had a significant peak; keeping previous model", p)
            break
        model = DriftModel(np.array(knot_t), np.array(knot_d))
        logger.info("drift pass %d: %d/%d knots, span %d ps, slope %.4f ppm", p, len(knot_t), centers.size, span,
                    model.slope_ppm)
        if span <= floor_span:
            break
        span = max(span // DRIFT_SPAN_SHRINK, floor_span)
    return model


# --- Schedule bookkeeping ---

def coincidence_counts_by_interval(matches: MatchResult, schedule: Sequence, origin_ps: int = 0) -> List[SettingCounts]:
    """SettingCounts per schedule interval; a coincidence belongs to the interval holding its Malta time."""
    result = []
    for interval in schedule:
        start = origin_ps + int(round(interval.start_s * 1e12))
        stop = origin_ps + int(round(interval.end_s * 1e12))
        mask = (matches.t_a >= start) & (matches.t_a < stop)
        selected = matches.select(mask)
        result.append(SettingCounts(interval.malta_angle, interval.sicily_angle, selected.counts[:2, :2],
                                    interval.duration_s))
    return result
