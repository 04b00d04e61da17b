#!/usr/bin/env python3
"""
Statistics on coincidence counts: visibility fits, CHSH correlations, QBER,
secure key rate and block statistics.

Counts are always C[port_a][port_b] with port 0 = transmitted, 1 = reflected.
Under the (|VV> - |HH>)/sqrt(2) source the correlation for polarisers at a
(Malta) and b (Sicily) is E = cos 2(a + b); a key basis is a setting pair
where that is +1 (correlated) or -1 (anti-correlated).
"""

import logging
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import entropy

from config import DEFAULT_EC_INEFFICIENCY, KEY_RATE_FORMULA, QBER_THRESHOLD

logger = logging.getLogger(__name__)

CORRELATED = "correlated"
ANTICORRELATED = "anticorrelated"
KEY_BASIS_CONVENTION = ("E = cos 2(a + b): key bits agree when cos 2(a + b) = +1 (correlated, e.g. H/V) "
                        "and are inverted when cos 2(a + b) = -1 (anti-correlated, e.g. D/A)")


class FitError(RuntimeError):
    """Sinusoid fit failed to converge; carries the last parameter iterate."""

    def __init__(self, message: str, last_iterate: Optional[Sequence[float]] = None):
        super().__init__(message)
        self.last_iterate = None if last_iterate is None else tuple(float(x) for x in last_iterate)


@dataclass(frozen=True)
class SettingCounts:
    malta_angle: float
    sicily_angle: float
    counts: np.ndarray
    duration_s: float

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64).reshape(2, 2)
        if np.any(counts < 0):
            raise ValueError("coincidence counts must be non-negative")
        if not self.duration_s > 0:
            raise ValueError(f"duration_s must be positive, got {self.duration_s}")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def rate(self) -> float:
        return self.total / self.duration_s

    def __add__(self, other: "SettingCounts") -> "SettingCounts":
        return SettingCounts(self.malta_angle, self.sicily_angle, self.counts + other.counts,
                             self.duration_s + other.duration_s)


@dataclass(frozen=True)
class VisibilityFit:
    amplitude: float
    visibility: float
    phase_rad: float
    residual_rms: float
    amplitude_err: float
    visibility_err: float
    phase_err: float
    degenerate: bool = False

    def curve(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        return self.amplitude * (1.0 + self.visibility * np.cos(2.0 * (phi - self.phase_rad)))

    def correlation(self, phi) -> np.ndarray:
        """Correlation E(phi) implied by the fitted fringe."""
        return self.visibility * np.cos(2.0 * (np.asarray(phi, dtype=float) - self.phase_rad))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "amplitude": self.amplitude,
            "amplitude_err": self.amplitude_err,
            "visibility": self.visibility,
            "visibility_err": self.visibility_err,
            "phase_deg": math.degrees(self.phase_rad),
            "phase_err_deg": math.degrees(self.phase_err),
            "residual_rms": self.residual_rms,
            "degenerate": self.degenerate,
        }


# --- Visibility fit ---

def _fringe(params, phi):
    amplitude, visibility, phase = params
    return amplitude * (1.0 + visibility * np.cos(2.0 * (phi - phase)))


def _dft_start(phi: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """(A, V, phi0) from the frequency-2 Fourier component of the angle series."""
    a0 = counts.mean()
    c = 2.0 * np.mean(counts * np.cos(2.0 * phi))
    s = 2.0 * np.mean(counts * np.sin(2.0 * phi))
    return np.array([a0, math.hypot(c, s) / a0 if a0 > 0 else 0.0, 0.5 * math.atan2(s, c)])


def fit_visibility(points: Sequence[Tuple[float, float]]) -> VisibilityFit:
    """Poisson-weighted fit of C(phi) = A (1 + V cos 2(phi - phi0)).

    Needs at least 6 points whose angle coverage (span plus one mean step)
    reaches a full fringe period of pi.
    """
    if len(points) < 6:
        raise ValueError(f"visibility fit needs at least 6 points, got {len(points)}")
    data = np.asarray(points, dtype=float)
    phi, counts = data[:, 0], data[:, 1]
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    span = float(np.ptp(phi))
    if span + span / (len(phi) - 1) < math.pi - 1e-9:
        raise ValueError(f"angles cover {math.degrees(span):.1f} deg; a full 180 deg fringe is required")

    if np.ptp(counts) == 0:
        logger.warning("all %d points are equal; visibility is zero and the phase is undefined", len(points))
        return VisibilityFit(float(counts[0]), 0.0, 0.0, 0.0, math.sqrt(max(counts[0], 1.0) / len(counts)), 0.0,
                             math.inf, degenerate=True)

    sigma = np.sqrt(np.maximum(counts, 1.0))
    result = least_squares(lambda p: (counts - _fringe(p, phi)) / sigma, _dft_start(phi, counts), method="lm")
    if result.status <= 0:
        raise FitError(f"visibility fit did not converge: {result.message}", result.x)

    amplitude, visibility, phase = result.x
    try:
        cov = np.linalg.inv(result.jac.T @ result.jac)
        errors = np.sqrt(np.abs(np.diag(cov)))
    except np.linalg.LinAlgError:
        errors = np.full(3, math.inf)
    if visibility < 0:
        visibility, phase = -visibility, phase + math.pi / 2
    phase = math.fmod(phase, math.pi)
    if phase < 0:
        phase += math.pi
    if visibility > 1.0:
        logger.warning("fitted visibility %.4f exceeds 1; clipping", visibility)
        visibility = 1.0
    residual = counts - _fringe((amplitude, visibility, phase), phi)
    return VisibilityFit(
        amplitude=float(amplitude),
        visibility=float(visibility),
        phase_rad=float(phase),
        residual_rms=float(np.sqrt(np.mean(residual ** 2))),
        amplitude_err=float(errors[0]),
        visibility_err=float(errors[1]),
        phase_err=float(errors[2]),
    )


# --- CHSH ---

def E_from_counts(sc: SettingCounts) -> Tuple[float, float]:
    """E = (C_tt + C_rr - C_tr - C_rt) / N with binomial error sqrt((1 - E^2) / N)."""
    n = sc.total
    if n == 0:
        raise ValueError("cannot compute E from zero coincidences")
    c = sc.counts
    e = float(c[0, 0] + c[1, 1] - c[0, 1] - c[1, 0]) / n
    return e, math.sqrt(max(1.0 - e * e, 0.0) / n)


def _is_45_apart(x: float, y: float, tol: float = 1e-6) -> bool:
    delta = math.fmod(abs(x - y), math.pi / 2)
    return abs(delta - math.pi / 4) < tol


def S_from_counts(s11: SettingCounts, s12: SettingCounts, s21: SettingCounts,
                  s22: SettingCounts) -> Tuple[float, float]:
    """S = E(a1,b1) + E(a1,b2) + E(a2,b1) - E(a2,b2), errors added in quadrature."""
    a1, a2 = s11.malta_angle, s21.malta_angle
    b1, b2 = s11.sicily_angle, s12.sicily_angle
    if not (_is_45_apart(a1, a2) and _is_45_apart(b1, b2)):
        logger.warning("CHSH settings are not 45 deg apart (a1-a2=%.2f deg, b1-b2=%.2f deg)",
                       math.degrees(a1 - a2), math.degrees(b1 - b2))
    values = [E_from_counts(sc) for sc in (s11, s12, s21, s22)]
    s = values[0][0] + values[1][0] + values[2][0] - values[3][0]
    return s, math.sqrt(sum(err ** 2 for _, err in values))


def _chsh_grid(settings: Sequence[SettingCounts]) -> Tuple[List[float], List[float], Dict]:
    malta = sorted({round(sc.malta_angle, 9) for sc in settings})
    sicily = sorted({round(sc.sicily_angle, 9) for sc in settings})
    if len(settings) != 4 or len(malta) != 2 or len(sicily) != 2:
        raise ValueError("CHSH needs exactly the four combinations of two Malta and two Sicily angles")
    grid = {(round(sc.malta_angle, 9), round(sc.sicily_angle, 9)): sc for sc in settings}
    if len(grid) != 4:
        raise ValueError("CHSH settings contain a duplicate angle pair")
    return malta, sicily, grid


def chsh_labelling(settings: Sequence[SettingCounts]) -> Tuple[SettingCounts, SettingCounts, SettingCounts,
                                                                SettingCounts]:
    """Order four unlabelled settings as (a1b1, a1b2, a2b1, a2b2) so that |S| is largest."""
    malta, sicily, grid = _chsh_grid(settings)
    best, best_abs = None, -1.0
    for a2, b2 in product(malta, sicily):
        a1 = malta[1] if a2 == malta[0] else malta[0]
        b1 = sicily[1] if b2 == sicily[0] else sicily[0]
        ordered = (grid[(a1, b1)], grid[(a1, b2)], grid[(a2, b1)], grid[(a2, b2)])
        if any(sc.total == 0 for sc in ordered):
            raise ValueError("a CHSH setting has zero coincidences")
        s = sum(E_from_counts(sc)[0] for sc in ordered[:3]) - E_from_counts(ordered[3])[0]
        if abs(s) > best_abs:
            best, best_abs = ordered, abs(s)
    return best


def chsh_from_settings(settings: Sequence[SettingCounts]) -> Tuple[float, float, Tuple[SettingCounts, ...]]:
    """Signed S and its error for the labelling of the minus term that maximises |S|."""
    ordered = chsh_labelling(settings)
    s, sigma = S_from_counts(*ordered)
    return s, sigma, ordered


def s_curve(fits: Tuple[VisibilityFit, VisibilityFit], phi_grid: Sequence[float]) -> List[Tuple[float, float]]:
    """S(phi_M) from the H/V-basis and D/A-basis fringes.

    With E_HV and E_DA the fitted correlations at Sicily 0 deg and 45 deg, the
    Malta angles are phi and phi + 45 deg:
    S = E_HV(phi) + E_DA(phi) + E_HV(phi + 45) - E_DA(phi + 45).
    """
    fit_hv, fit_da = fits
    phi = np.asarray(phi_grid, dtype=float)
    s = (fit_hv.correlation(phi) + fit_da.correlation(phi)
         + fit_hv.correlation(phi + math.pi / 4) - fit_da.correlation(phi + math.pi / 4))
    return list(zip(phi.tolist(), s.tolist()))


def s_curve_peak(fits: Tuple[VisibilityFit, VisibilityFit], resolution_deg: float = 0.01) -> Tuple[float, float,
                                                                                                    float]:
    """(phi_M at max |S|, max |S|, error propagated from the two visibility errors)."""
    fit_hv, fit_da = fits
    grid = np.arange(0.0, 180.0, resolution_deg)
    curve = np.array([s for _, s in s_curve(fits, np.radians(grid))])
    k = int(np.argmax(np.abs(curve)))
    phi = math.radians(grid[k])
    sign = math.copysign(1.0, curve[k])
    d_hv = math.cos(2 * (phi - fit_hv.phase_rad)) + math.cos(2 * (phi + math.pi / 4 - fit_hv.phase_rad))
    d_da = math.cos(2 * (phi - fit_da.phase_rad)) - math.cos(2 * (phi + math.pi / 4 - fit_da.phase_rad))
    sigma = math.hypot(d_hv * fit_hv.visibility_err, d_da * fit_da.visibility_err)
    return phi, float(sign * curve[k]), sigma


# --- QBER and key rate ---

def key_basis(malta_angle: float, sicily_angle: float, tol: float = 1e-6) -> Optional[str]:
    c = math.cos(2.0 * (malta_angle + sicily_angle))
    if c >= 1.0 - tol:
        return CORRELATED
    if c <= -1.0 + tol:
        return ANTICORRELATED
    return None


def qber_from_counts(sc: SettingCounts, anticorrelated: Optional[bool] = None) -> Tuple[float, float]:
    """Error fraction in a key basis; the convention defaults to the one key_basis detects."""
    if anticorrelated is None:
        anticorrelated = key_basis(sc.malta_angle, sc.sicily_angle) == ANTICORRELATED
    n = sc.total
    if n == 0:
        raise ValueError("cannot compute QBER from zero coincidences")
    c = sc.counts
    errors = c[0, 0] + c[1, 1] if anticorrelated else c[0, 1] + c[1, 0]
    q = float(errors) / n
    return q, math.sqrt(q * (1.0 - q) / n)


def qber_from_visibility(visibilities: Sequence[float], errors: Sequence[float]) -> Tuple[float, float]:
    """Q = (1 - mean V) / 2 when no key-basis interval was measured."""
    v = float(np.mean(visibilities))
    sigma_v = math.sqrt(sum(e ** 2 for e in errors)) / len(errors)
    return (1.0 - v) / 2.0, sigma_v / 2.0


def binary_entropy(q: float) -> float:
    return float(entropy([q, 1.0 - q], base=2))


def secure_key_rate(coincidence_rate_cps: float, q: float, f: float = DEFAULT_EC_INEFFICIENCY) -> float:
    """Asymptotic rate: C * 1/2 * max(0, 1 - (1 + f) H2(Q))."""
    if not 0.0 <= q <= 0.5:
        raise ValueError(f"QBER must lie in [0, 0.5], got {q}")
    if coincidence_rate_cps < 0:
        raise ValueError("coincidence rate must be non-negative")
    if q > QBER_THRESHOLD:
        logger.info("QBER %.3f is above the %.2f threshold", q, QBER_THRESHOLD)
    return coincidence_rate_cps * 0.5 * max(0.0, 1.0 - (1.0 + f) * binary_entropy(q))


# --- Block statistics ---

def block_stats(values: Sequence[float]) -> Tuple[float, float, int]:
    """Mean and standard error of per-block values (sample std, ddof=1)."""
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        raise ValueError("block statistics need at least 2 blocks")
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size)), int(arr.size)


def block_chsh(blocks: Sequence[Sequence[SettingCounts]]) -> Tuple[float, float, int]:
    """S per block, labelled once from the summed counts, then block_stats.

    Blocks where a setting has no coincidences are skipped.
    """
    if not blocks:
        raise ValueError("no blocks given")
    totals = [sum(column[1:], column[0]) for column in zip(*blocks)]
    ordered_total = chsh_labelling(totals)
    key = [(round(sc.malta_angle, 9), round(sc.sicily_angle, 9)) for sc in ordered_total]
    values = []
    for index, block in enumerate(blocks):
        by_angle = {(round(sc.malta_angle, 9), round(sc.sicily_angle, 9)): sc for sc in block}
        try:
            values.append(S_from_counts(*(by_angle[k] for k in key))[0])
        except (KeyError, ValueError) as e:
            logger.warning("skipping block %d: %s", index, e)
    return block_stats(values)


# --- Report ---

@dataclass
class AnalysisReport:
    window_ps: int
    visibilities: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    fits: Dict[str, VisibilityFit] = field(default_factory=dict)
    correlations: List[Dict[str, float]] = field(default_factory=list)
    s_fit: Optional[Tuple[float, float]] = None
    s_fit_angle_deg: Optional[float] = None
    s_direct: Optional[Tuple[float, float]] = None
    qber: Optional[Tuple[float, float]] = None
    qber_source: str = ""
    coincidence_rate: Optional[Tuple[float, float]] = None
    secure_key_rate_bps: Optional[float] = None
    ec_inefficiency: float = DEFAULT_EC_INEFFICIENCY
    blocks: Optional[Dict[str, float]] = None
    manifest: Dict[str, Any] = field(default_factory=dict)

    @staticmethod
    def _pair(value: Optional[Tuple[float, float]]) -> Optional[Dict[str, float]]:
        return None if value is None else {"value": value[0], "error": value[1]}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "window_ps": self.window_ps,
            "visibilities": {basis: self._pair(v) for basis, v in self.visibilities.items()},
            "fits": {basis: fit.to_dict() for basis, fit in self.fits.items()},
            "correlations": self.correlations,
            "s_fit": self._pair(self.s_fit),
            "s_fit_angle_deg": self.s_fit_angle_deg,
            "s_direct": self._pair(self.s_direct),
            "qber": self._pair(self.qber),
            "qber_source": self.qber_source,
            "coincidence_rate_cps": self._pair(self.coincidence_rate),
            "secure_key_rate_bps": self.secure_key_rate_bps,
            "ec_inefficiency": self.ec_inefficiency,
            "key_rate_formula": KEY_RATE_FORMULA,
            "key_basis_convention": KEY_BASIS_CONVENTION,
            "blocks": self.blocks,
            "manifest": self.manifest,
        }
