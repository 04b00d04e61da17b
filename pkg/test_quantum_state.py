import math

import numpy as np
import pytest

from quantum_state import (
    AnalyzerSetting,
    DomainError,
    LocalUnitary,
    Port,
    Side,
    TwoQubitState,
    apply_local_unitary,
    bell_phi_minus,
    chsh_S_theory,
    compensation_from_references,
    correlation_E_theory,
    fidelity_with_bell,
    hv_dephase,
    joint_outcome_probs,
    maximally_mixed,
    noisy_source_state,
    normalize_angle,
    product_state,
    purity,
    rotation_unitary,
    stokes_vector,
    visibilities_to_noise,
    werner_mix,
)

DEG = math.pi / 180


def test_bell_state_is_pure():
    state = bell_phi_minus()
    assert purity(state) == pytest.approx(1.0, abs=1e-12)
    assert fidelity_with_bell(state) == pytest.approx(1.0, abs=1e-12)


def test_bell_state_joint_probabilities_at_zero():
    assert joint_outcome_probs(bell_phi_minus(), 0.0, 0.0) == pytest.approx((0.5, 0.0, 0.0, 0.5), abs=1e-12)


@pytest.mark.parametrize("a,b", [(0.0, 0.0), (0.3, -0.1), (45 * DEG, 45 * DEG), (1.2, 2.9)])
def test_correlation_is_cos_of_angle_sum(a, b):
    assert correlation_E_theory(bell_phi_minus(), a, b) == pytest.approx(math.cos(2 * (a + b)), abs=1e-12)


def test_chsh_optimal_angles_reach_tsirelson_bound():
    s = chsh_S_theory(bell_phi_minus(), 0.0, 45 * DEG, -22.5 * DEG, 22.5 * DEG)
    assert abs(s) == pytest.approx(2 * math.sqrt(2), abs=1e-9)


def test_chsh_at_operating_angles():
    s = chsh_S_theory(bell_phi_minus(), 157.5 * DEG, 22.5 * DEG, 0.0, 45 * DEG)
    assert abs(s) == pytest.approx(2 * math.sqrt(2), abs=1e-9)


def test_separable_states_never_violate_chsh():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        state = product_state(*rng.uniform(0, math.pi, 2))
        a1, a2, b1, b2 = rng.uniform(0, math.pi, 4)
        assert abs(chsh_S_theory(state, a1, a2, b1, b2)) <= 2.0 + 1e-9


def test_werner_zero_is_maximally_mixed():
    mixed = werner_mix(bell_phi_minus(), 0.0)
    assert np.allclose(mixed.rho, maximally_mixed().rho, atol=1e-12)
    assert correlation_E_theory(mixed, 0.3, 0.7) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("v", [0.2, 0.5, 0.941])
def test_werner_scales_correlations(v):
    state = werner_mix(bell_phi_minus(), v)
    assert correlation_E_theory(state, 0.0, 0.0) == pytest.approx(v, abs=1e-12)
    assert correlation_E_theory(state, 45 * DEG, 45 * DEG) == pytest.approx(-v, abs=1e-12)


def test_werner_rejects_out_of_range():
    with pytest.raises(DomainError):
        werner_mix(bell_phi_minus(), 1.5)
    with pytest.raises(DomainError):
        werner_mix(bell_phi_minus(), -0.1)


def test_hv_dephasing_only_damps_hv_basis():
    state = noisy_source_state(0.941, 1 - 0.868 / 0.941)
    assert correlation_E_theory(state, 0.0, 0.0) == pytest.approx(0.868, abs=1e-12)
    assert abs(correlation_E_theory(state, 45 * DEG, 45 * DEG)) == pytest.approx(0.941, abs=1e-12)


def test_hv_dephase_rejects_out_of_range():
    with pytest.raises(DomainError):
        hv_dephase(bell_phi_minus(), 1.2)


def test_visibilities_to_noise_inverts_the_model():
    v, d = visibilities_to_noise(0.868, 0.941)
    assert v == pytest.approx(0.941)
    assert v * (1 - d) == pytest.approx(0.868)
    with pytest.raises(DomainError):
        visibilities_to_noise(0.95, 0.9)


def test_state_validation():
    with pytest.raises(DomainError):
        TwoQubitState(np.eye(3))
    with pytest.raises(DomainError):
        TwoQubitState(np.eye(4))
    with pytest.raises(DomainError):
        TwoQubitState(np.diag([1.5, -0.5, 0.0, 0.0]))
    rho = np.zeros((4, 4), dtype=complex)
    rho[0, 0] = rho[3, 3] = 0.5
    rho[0, 1] = 0.1j
    with pytest.raises(DomainError):
        TwoQubitState(rho)


def test_state_is_read_only():
    state = bell_phi_minus()
    with pytest.raises(ValueError):
        state.rho[0, 0] = 1.0


def test_local_unitary_validation():
    with pytest.raises(DomainError):
        LocalUnitary(np.array([[1.0, 1.0], [0.0, 1.0]]))
    assert LocalUnitary(np.eye(2), "malta").side == Side.MALTA


def test_local_unitary_preserves_probability_and_inverse_restores():
    u = LocalUnitary(rotation_unitary([20.0, -50.0, 80.0]), Side.SICILY)
    state = noisy_source_state(0.9, 0.1)
    rotated = apply_local_unitary(state, u)
    assert np.real(np.trace(rotated.rho)) == pytest.approx(1.0, abs=1e-12)
    assert sum(joint_outcome_probs(rotated, 0.4, 1.1)) == pytest.approx(1.0, abs=1e-12)
    restored = apply_local_unitary(rotated, u.inverse())
    assert np.allclose(restored.rho, state.rho, atol=1e-10)


def random_state(rng) -> TwoQubitState:
    g = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    rho = g @ g.conj().T
    rho = (rho + rho.conj().T) / 2
    return TwoQubitState(rho / np.trace(rho).real)


def test_random_states_give_valid_probabilities_and_respect_tsirelson():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        state = random_state(rng)
        a, b = rng.uniform(0, math.pi, 2)
        probs = joint_outcome_probs(state, a, b)
        assert min(probs) >= -1e-12
        assert sum(probs) == pytest.approx(1.0, abs=1e-12)
        assert abs(correlation_E_theory(state, a, b)) <= 1.0 + 1e-12
        a1, a2, b1, b2 = rng.uniform(0, math.pi, 4)
        assert abs(chsh_S_theory(state, a1, a2, b1, b2)) <= 2 * math.sqrt(2) + 1e-9


def test_local_unitary_preserves_spectrum():
    rng = np.random.default_rng(9)
    for side in (Side.MALTA, Side.SICILY):
        for _ in range(50):
            state = random_state(rng)
            u = LocalUnitary(rotation_unitary(rng.uniform(-180.0, 180.0, 3)), side)
            before = np.linalg.eigvalsh(state.rho)
            after = np.linalg.eigvalsh(apply_local_unitary(state, u).rho)
            assert np.allclose(before, after, atol=1e-10)


def test_45_degree_rotation_on_sicily_removes_hv_correlation():
    c = s = math.sqrt(0.5)
    rotated = apply_local_unitary(bell_phi_minus(), LocalUnitary(np.array([[c, -s], [s, c]]), Side.SICILY))
    assert correlation_E_theory(bell_phi_minus(), 0.0, 0.0) == pytest.approx(1.0, abs=1e-12)
    assert correlation_E_theory(rotated, 0.0, 0.0) == pytest.approx(0.0, abs=1e-12)
    quarter_turn = LocalUnitary(rotation_unitary([0.0, 0.0, 90.0]), Side.SICILY)
    stokes_rotated = apply_local_unitary(bell_phi_minus(), quarter_turn)
    assert correlation_E_theory(stokes_rotated, 0.0, 0.0) == pytest.approx(0.0, abs=1e-12)


def test_analyzer_setting_normalizes_and_projects():
    setting = AnalyzerSetting(-10 * DEG, Port.REFLECT)
    assert setting.angle == pytest.approx(170 * DEG)
    assert setting.projected_angle == pytest.approx(80 * DEG)
    assert AnalyzerSetting(math.pi).angle == 0.0


@pytest.mark.parametrize("angle", [0.0, 3.0, -0.5, 2 * math.pi, -1e-18])
def test_normalize_angle_range(angle):
    result = normalize_angle(angle)
    assert 0.0 <= result < math.pi


def test_stokes_vectors_of_linear_references():
    assert stokes_vector(np.eye(2), 0.0) == pytest.approx([1.0, 0.0, 0.0], abs=1e-12)
    assert stokes_vector(np.eye(2), 45 * DEG) == pytest.approx([0.0, 1.0, 0.0], abs=1e-12)
    assert stokes_vector(np.eye(2), 90 * DEG) == pytest.approx([-1.0, 0.0, 0.0], abs=1e-12)


def test_rotation_unitary_rotates_stokes_vectors():
    # 90 deg about S3 takes H to D
    u = rotation_unitary([0.0, 0.0, 90.0])
    assert stokes_vector(u, 0.0) == pytest.approx([0.0, 1.0, 0.0], abs=1e-12)


def test_compensation_undoes_channel_rotation():
    channel = LocalUnitary(rotation_unitary([37.0, -112.0, 64.0]), Side.SICILY)
    comp = compensation_from_references(stokes_vector(channel.u, 0.0), stokes_vector(channel.u, 45 * DEG))
    state = apply_local_unitary(apply_local_unitary(bell_phi_minus(), channel), comp)
    assert fidelity_with_bell(state) == pytest.approx(1.0, abs=1e-9)


def test_uncompensated_channel_scrambles_correlations():
    channel = LocalUnitary(rotation_unitary([37.0, -112.0, 64.0]), Side.SICILY)
    state = apply_local_unitary(bell_phi_minus(), channel)
    assert fidelity_with_bell(state) < 0.9


def test_compensation_rejects_parallel_references():
    with pytest.raises(DomainError):
        compensation_from_references([1.0, 0.0, 0.0], [1.0, 0.0, 0.0])
