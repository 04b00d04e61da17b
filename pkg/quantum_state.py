#!/usr/bin/env python3
"""
Two-qubit polarisation states for the entanglement link.

Basis order is |HH>, |HV>, |VH>, |VV> with the Malta photon first. A linear
polariser at angle theta transmits |theta> = cos(theta)|H> + sin(theta)|V>;
angles are polariser transmission axes, never half-wave-plate angles (those
are half as large).

The CHSH value S is reported as a magnitude elsewhere in the package; the
functions here return the signed value so the convention stays visible.
"""

import enum
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from config import ALGEBRA_TOL, EIGEN_TOL


class DomainError(ValueError):
    """Raised when a state, unitary or noise parameter is outside its domain."""


class Port(enum.IntEnum):
    TRANSMIT = 0
    REFLECT = 1


class Side(str, enum.Enum):
    MALTA = "malta"
    SICILY = "sicily"


_I2 = np.eye(2, dtype=complex)
_SX = np.array([[0, 1], [1, 0]], dtype=complex)
_SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
_SZ = np.array([[1, 0], [0, -1]], dtype=complex)
# Stokes axes S1 (H/V), S2 (D/A), S3 (R/L) expressed in the H/V basis.
_STOKES_PAULI = (_SZ, _SX, _SY)


@dataclass(frozen=True)
class TwoQubitState:
    rho: np.ndarray

    def __post_init__(self):
        rho = np.array(self.rho, dtype=complex)
        if rho.shape != (4, 4):
            raise DomainError(f"density matrix must be 4x4, got {rho.shape}")
        if not np.allclose(rho, rho.conj().T, rtol=0, atol=ALGEBRA_TOL):
            raise DomainError("density matrix is not Hermitian")
        if abs(np.trace(rho).real - 1.0) >= ALGEBRA_TOL or abs(np.trace(rho).imag) >= ALGEBRA_TOL:
            raise DomainError(f"density matrix trace is {np.trace(rho)}, expected 1")
        if np.linalg.eigvalsh(rho).min() < -EIGEN_TOL:
            raise DomainError("density matrix is not positive semidefinite")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    @classmethod
    def from_pure(cls, psi: Sequence[complex]) -> "TwoQubitState":
        psi = np.asarray(psi, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()))


@dataclass(frozen=True)
class AnalyzerSetting:
    angle: float
    port: Port = Port.TRANSMIT

    def __post_init__(self):
        object.__setattr__(self, "angle", normalize_angle(self.angle))
        object.__setattr__(self, "port", Port(self.port))

    @property
    def projected_angle(self) -> float:
        """Angle of the polarisation state that exits through this port."""
        if self.port == Port.REFLECT:
            return normalize_angle(self.angle + math.pi / 2)
        return self.angle


@dataclass(frozen=True)
class LocalUnitary:
    u: np.ndarray
    side: Side = Side.SICILY

    def __post_init__(self):
        u = np.array(self.u, dtype=complex)
        if u.shape != (2, 2):
            raise DomainError(f"local unitary must be 2x2, got {u.shape}")
        if not np.allclose(u @ u.conj().T, _I2, rtol=0, atol=ALGEBRA_TOL):
            raise DomainError("matrix is not unitary")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "side", Side(self.side))

    def inverse(self) -> "LocalUnitary":
        return LocalUnitary(self.u.conj().T, self.side)


def normalize_angle(angle: float) -> float:
    wrapped = math.fmod(angle, math.pi)
    if wrapped < 0:
        wrapped += math.pi
    # fmod can land exactly on pi after the shift for tiny negative inputs
    return 0.0 if wrapped >= math.pi else wrapped


def polarisation_ket(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)], dtype=complex)


def bell_phi_minus() -> TwoQubitState:
    """(|VV> - |HH>)/sqrt(2), the state the Sagnac source emits."""
    return TwoQubitState.from_pure(np.array([-1.0, 0.0, 0.0, 1.0]) / math.sqrt(2.0))


def maximally_mixed() -> TwoQubitState:
    return TwoQubitState(np.eye(4, dtype=complex) / 4.0)


def product_state(malta_angle: float, sicily_angle: float) -> TwoQubitState:
    return TwoQubitState.from_pure(np.kron(polarisation_ket(malta_angle), polarisation_ket(sicily_angle)))


def werner_mix(state: TwoQubitState, v: float) -> TwoQubitState:
    if not 0.0 <= v <= 1.0:
        raise DomainError(f"Werner weight must lie in [0, 1], got {v}")
    return TwoQubitState(v * state.rho + (1.0 - v) * np.eye(4) / 4.0)


def hv_dephase(state: TwoQubitState, d: float) -> TwoQubitState:
    """Damp HV-basis correlations by (1 - d) with an H<->V flip on the Sicily photon.

    DA-basis correlations are untouched, so together with werner_mix this gives
    two independent visibilities.
    """
    if not 0.0 <= d <= 1.0:
        raise DomainError(f"HV dephasing must lie in [0, 1], got {d}")
    flip = np.kron(_I2, _SX)
    p = d / 2.0
    return TwoQubitState((1.0 - p) * state.rho + p * flip @ state.rho @ flip)


def noisy_source_state(v_werner: float = 1.0, hv_dephasing: float = 0.0) -> TwoQubitState:
    return hv_dephase(werner_mix(bell_phi_minus(), v_werner), hv_dephasing)


def visibilities_to_noise(v_hv: float, v_da: float) -> Tuple[float, float]:
    """Noise parameters (v_werner, hv_dephasing) reproducing the two basis visibilities."""
    if not 0.0 < v_da <= 1.0 or not 0.0 <= v_hv <= v_da:
        raise DomainError(f"need 0 <= V_HV <= V_DA <= 1, got V_HV={v_hv}, V_DA={v_da}")
    return v_da, 1.0 - v_hv / v_da


def apply_local_unitary(state: TwoQubitState, u: LocalUnitary) -> TwoQubitState:
    if u.side == Side.MALTA:
        full = np.kron(u.u, _I2)
    else:
        full = np.kron(_I2, u.u)
    rho = full @ state.rho @ full.conj().T
    # re-symmetrise so rounding cannot trip the Hermiticity check
    return TwoQubitState((rho + rho.conj().T) / 2.0)


def joint_outcome_probs(state: TwoQubitState, a: float, b: float) -> Tuple[float, float, float, float]:
    """Born-rule probabilities (p_tt, p_tr, p_rt, p_rr) for polarisers at a (Malta) and b (Sicily)."""
    probs = []
    for pa in (a, a + math.pi / 2):
        for pb in (b, b + math.pi / 2):
            ket = np.kron(polarisation_ket(pa), polarisation_ket(pb))
            probs.append(max(float(np.real(ket.conj() @ state.rho @ ket)), 0.0))
    total = sum(probs)
    return tuple(p / total for p in probs)


def correlation_E_theory(state: TwoQubitState, a: float, b: float) -> float:
    p_tt, p_tr, p_rt, p_rr = joint_outcome_probs(state, a, b)
    return p_tt + p_rr - p_tr - p_rt


def chsh_S_theory(state: TwoQubitState, a1: float, a2: float, b1: float, b2: float) -> float:
    return (
        correlation_E_theory(state, a1, b1)
        + correlation_E_theory(state, a1, b2)
        + correlation_E_theory(state, a2, b1)
        - correlation_E_theory(state, a2, b2)
    )


def purity(state: TwoQubitState) -> float:
    return float(np.real(np.trace(state.rho @ state.rho)))


def fidelity_with_bell(state: TwoQubitState) -> float:
    psi = np.array([-1.0, 0.0, 0.0, 1.0], dtype=complex) / math.sqrt(2.0)
    return float(np.real(psi.conj() @ state.rho @ psi))


# --- Fibre birefringence compensation ---

def rotation_unitary(rotvec_deg: Sequence[float]) -> np.ndarray:
    """Single-photon unitary rotating Stokes vectors by the given rotation vector (degrees)."""
    quat = Rotation.from_rotvec(np.radians(np.asarray(rotvec_deg, dtype=float))).as_quat()
    x, y, z, w = quat
    u = w * _I2 - 1j * (x * _STOKES_PAULI[0] + y * _STOKES_PAULI[1] + z * _STOKES_PAULI[2])
    return u


def stokes_vector(u: np.ndarray, angle: float) -> np.ndarray:
    """Stokes vector of a linear reference state at `angle` after the single-photon unitary u."""
    ket = np.asarray(u, dtype=complex) @ polarisation_ket(angle)
    return np.array([np.real(ket.conj() @ p @ ket) for p in _STOKES_PAULI])


def compensation_from_references(s_h: Sequence[float], s_d: Sequence[float], side: Side = Side.SICILY) -> LocalUnitary:
    """Inverse of the channel rotation seen by the H and D reference states.

    The received references only need to be approximately orthogonal; the D
    direction is re-orthogonalised against H before the rotation is built.
    """
    s_h = np.asarray(s_h, dtype=float)
    s_d = np.asarray(s_d, dtype=float)
    if np.linalg.norm(s_h) == 0 or np.linalg.norm(s_d) == 0:
        raise DomainError("reference Stokes vectors must be non-zero")
    e1 = s_h / np.linalg.norm(s_h)
    d_perp = s_d - np.dot(s_d, e1) * e1
    if np.linalg.norm(d_perp) < 1e-9:
        raise DomainError("H and D references arrived parallel; channel rotation is undetermined")
    e2 = d_perp / np.linalg.norm(d_perp)
    e3 = np.cross(e1, e2)
    channel = Rotation.from_matrix(np.column_stack([e1, e2, e3]))
    u = rotation_unitary(np.degrees(channel.inv().as_rotvec()))
    return LocalUnitary(u, side)
