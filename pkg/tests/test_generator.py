"""Tests for the generator Galerkin matrices, the generalized eigenvalue
solve, frequency extraction, and eigensystem assembly.

The generator matrix is checked against a flow-composition finite
difference oracle; the GEVP against 2x2 hand algebra; frequencies
against a closed-form round trip.
"""

import numpy as np
import pytest

from fockcast.dynamics import embedded_velocity, sample_grid_stepanoff
from fockcast.errors import (
    BNotSPDError,
    InsufficientSpectrumError,
    UndefinedFrequencyError,
    ValidationError,
)
from fockcast.generator import (
    GeneratorMatrices,
    assemble_A,
    assemble_B,
    assemble_eigensystem,
    frequency_from_beta,
    generator_matrix,
    solve_gevp,
)
from fockcast.kernel import fit_kernel_model
from fockcast.semigroup import eig_markov, nystrom_eval

TAU = 1e-3
Z = 1e-3


@pytest.fixture(scope="module")
def model16():
    return fit_kernel_model(sample_grid_stepanoff(16))


@pytest.fixture(scope="module")
def basis16(model16):
    return eig_markov(model16.markov_matrix(), 40)


@pytest.fixture(scope="module")
def vmat16(basis16, model16):
    return generator_matrix(basis16, model16)


@pytest.fixture(scope="module")
def gevp16(vmat16, basis16):
    A = assemble_A(vmat16, basis16, TAU)
    B = assemble_B(vmat16, Z)
    return solve_gevp(A, B)


@pytest.fixture(scope="module")
def eigsys16(gevp16, vmat16, basis16):
    gen = GeneratorMatrices(
        Vmat=vmat16,
        Amat=assemble_A(vmat16, basis16, TAU),
        Bmat=assemble_B(vmat16, Z),
        z=Z,
        tau=TAU,
    )
    return assemble_eigensystem(gevp16, gen, basis16, 5)


def _rk4_back(system, x, h):
    # one backward step: RK4 on the negated vector field
    k1 = -system.vector_field(x)
    k2 = -system.vector_field(x + 0.5 * h * k1)
    k3 = -system.vector_field(x + 0.5 * h * k2)
    k4 = -system.vector_field(x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


class TestFrequency:
    def test_range_boundary(self):
        assert frequency_from_beta(5.0, 0.1) == pytest.approx(0.1, abs=1e-15)

    def test_round_trip(self):
        z, omega = 0.1, 2.0
        b = omega / (z * z + omega * omega)
        assert frequency_from_beta(b, z) == pytest.approx(omega, abs=1e-12)

    def test_antisymmetry(self):
        rng = np.random.default_rng(5)
        for b in rng.uniform(0.01, 8.0, size=12):
            assert frequency_from_beta(-b, 0.2) == -frequency_from_beta(b, 0.2)

    def test_zero_rejected(self):
        with pytest.raises(UndefinedFrequencyError):
            frequency_from_beta(0.0, 0.1)

    def test_bad_z_rejected(self):
        with pytest.raises(ValidationError):
            frequency_from_beta(1.0, 0.0)

    def test_clamped_branch_saturates(self):
        z = 0.1
        freqs = [frequency_from_beta(b, z) for b in (5.0, 6.0, 10.0)]
        assert freqs[0] == pytest.approx(z, abs=1e-15)
        assert freqs[1] < freqs[0]
        assert freqs[2] < freqs[1]
        assert all(f > 0 for f in freqs)


class TestAssembleForms:
    def test_B_zero_vmat(self):
        B = assemble_B(np.zeros((3, 3)), 0.5)
        np.testing.assert_array_equal(B, 0.25 * np.eye(3))

    def test_B_rotation_block(self):
        a, z = 0.7, 0.3
        V = np.array([[0.0, a], [-a, 0.0]])
        np.testing.assert_allclose(
            assemble_B(V, z), (z * z + a * a) * np.eye(2), rtol=1e-15
        )

    def test_B_spd_floor(self, vmat16):
        B = assemble_B(vmat16, Z)
        np.testing.assert_array_equal(B, B.T)
        assert np.linalg.eigvalsh(B)[0] >= Z * Z - 1e-8

    def test_B_bad_z(self, vmat16):
        with pytest.raises(ValidationError):
            assemble_B(vmat16, -1.0)

    def test_A_tau_zero_is_vmat(self, vmat16, basis16):
        np.testing.assert_array_equal(assemble_A(vmat16, basis16, 0.0), vmat16)

    def test_A_exactly_antisymmetric(self, vmat16, basis16):
        A = assemble_A(vmat16, basis16, TAU)
        np.testing.assert_array_equal(A, -A.T)

    def test_A_large_tau_vanishes(self, vmat16, basis16):
        assert np.max(np.abs(assemble_A(vmat16, basis16, 1e6))) < 1e-12


class TestSolveGevp:
    def test_2x2_hand_algebra(self):
        a = 0.7
        A = np.array([[0.0, a], [-a, 0.0]])
        out = solve_gevp(A, np.eye(2))
        assert out.b_values.shape == (1,)
        assert out.b_values[0] == pytest.approx(a, rel=1e-14)
        c = out.coeffs[:, 0]
        np.testing.assert_allclose(A @ c, 1j * a * c, atol=1e-14)

    def test_zero_A_retains_nothing(self):
        out = solve_gevp(np.zeros((4, 4)), np.eye(4))
        assert out.b_values.size == 0
        assert out.n_discarded == 4

    def test_indefinite_B_rejected(self):
        A = np.array([[0.0, 1.0], [-1.0, 0.0]])
        B = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(BNotSPDError):
            solve_gevp(A, B)

    def test_residuals_small(self, gevp16, vmat16, basis16):
        assert gevp16.b_values.size > 0
        # pairs living in the z^2 floor subspace of B have eigenvectors of
        # norm ~1/z; for those, rounding the exact eigenvector to float64
        # already costs eps * ||A - ibB|| * ||c|| / ||Bc||, so the strict
        # bound is asserted only where that floor sits below it
        A = assemble_A(vmat16, basis16, TAU)
        B = assemble_B(vmat16, Z)
        na = np.linalg.norm(A, 2)
        nb = np.linalg.norm(B, 2)
        C = gevp16.coeffs
        cn = np.linalg.norm(C, axis=0)
        bcn = np.linalg.norm(B @ C, axis=0)
        floor = 2.3e-16 * (na + gevp16.b_values * nb) * cn / bcn
        strict = floor < 1e-10 / 3.0
        assert np.all(gevp16.residuals[strict] < 1e-10)
        assert np.all(gevp16.residuals < np.maximum(1e-10, 3.0 * floor))
        assert np.count_nonzero(~strict) <= 2

    def test_b_values_positive_descending(self, gevp16):
        b = gevp16.b_values
        assert np.all(b > 0)
        assert np.all(np.diff(b) <= 0)

    def test_B_normalization(self, gevp16, vmat16):
        B = assemble_B(vmat16, Z)
        C = gevp16.coeffs
        quad = np.einsum("ik,ij,jk->k", C.conj(), B, C)
        # evaluating the form in float64 costs ~eps ||B|| ||c||^2, which
        # dominates for floor-subspace pairs with ||c|| ~ 1/z
        noise = 2.3e-16 * np.linalg.norm(B, 2) * np.linalg.norm(C, axis=0) ** 2
        tol = np.maximum(1e-10, 3.0 * noise)
        assert np.all(np.abs(quad.real - 1.0) < tol)
        assert np.all(np.abs(quad.imag) < tol)


class TestGeneratorMatrix:
    def test_exactly_antisymmetric(self, vmat16):
        np.testing.assert_array_equal(vmat16, -vmat16.T)

    def test_raw_constant_column_annihilated(self, basis16, model16):
        raw = generator_matrix(basis16, model16, return_raw=True)
        assert np.max(np.abs(raw[:, 0])) < 1e-8

    def test_matches_flow_composition_oracle(self, basis16, model16):
        raw = generator_matrix(basis16, model16, return_raw=True)
        system = model16.dataset.system
        states = model16.dataset.states
        delta = 1e-3
        fwd = np.empty_like(states)
        back = np.empty_like(states)
        for i, x in enumerate(states):
            back[i] = _rk4_back(system, x, delta)
            fwd[i] = _rk4_back(system, x, -delta)
        phi_f = nystrom_eval(basis16, model16, fwd)
        phi_b = nystrom_eval(basis16, model16, back)
        n = states.shape[0]
        fd = basis16.phi.T @ ((phi_f - phi_b) / (2.0 * delta)) / n
        mask = np.abs(raw) >= 0.5 * np.max(np.abs(raw))
        rel = np.abs(raw[mask] - fd[mask]) / np.abs(raw[mask])
        assert np.max(rel) < 1e-3


class TestEigensystem:
    def test_layout(self, eigsys16, basis16, model16):
        n = model16.dataset.n_samples
        assert eigsys16.omegas.shape == (11,)
        assert eigsys16.xi.shape == (n, 11)
        assert eigsys16.zeta_coeffs.shape == (basis16.l, 11)
        assert eigsys16.energies.shape == (5,)

    def test_constant_mode_centered(self, eigsys16):
        assert eigsys16.omegas[5] == 0.0
        np.testing.assert_array_equal(eigsys16.xi[:, 5], np.ones(eigsys16.xi.shape[0]))

    def test_frequency_mirror(self, eigsys16):
        np.testing.assert_array_equal(eigsys16.omegas + eigsys16.omegas[::-1], 0.0)

    def test_conjugate_pairing_exact(self, eigsys16):
        for k in range(1, 6):
            np.testing.assert_array_equal(
                eigsys16.xi[:, 5 - k], np.conj(eigsys16.xi[:, 5 + k])
            )
            np.testing.assert_array_equal(
                eigsys16.zeta_coeffs[:, 5 - k], np.conj(eigsys16.zeta_coeffs[:, 5 + k])
            )

    def test_pair_map_involution(self, eigsys16):
        pm = eigsys16.pair_map
        np.testing.assert_array_equal(pm[pm], np.arange(11))
        np.testing.assert_array_equal(pm, 10 - np.arange(11))

    def test_unit_norms(self, eigsys16):
        n = eigsys16.xi.shape[0]
        norms = np.sum(np.abs(eigsys16.xi) ** 2, axis=0) / n
        np.testing.assert_allclose(norms, 1.0, rtol=1e-12)

    def test_nonconstant_modes_mean_zero(self, eigsys16):
        means = np.mean(eigsys16.xi, axis=0)
        offcenter = np.delete(means, 5)
        assert np.max(np.abs(offcenter)) < 1e-6

    def test_phase_convention(self, eigsys16):
        for j in range(6, 11):
            col = eigsys16.xi[:, j]
            k = np.argmax(np.abs(col))
            assert abs(col[k].imag) < 1e-12 * abs(col[k])
            assert col[k].real > 0

    def test_energies_sorted_nonnegative(self, eigsys16):
        assert np.all(np.diff(eigsys16.energies) >= 0)
        assert np.all(eigsys16.energies >= -1e-12)

    def test_zeta_coeffs_reproduce_xi(self, eigsys16, basis16):
        recon = basis16.phi @ eigsys16.zeta_coeffs
        assert np.max(np.abs(recon - eigsys16.xi)) < 1e-10

    def test_insufficient_spectrum(self, gevp16, vmat16, basis16):
        gen = GeneratorMatrices(
            Vmat=vmat16,
            Amat=assemble_A(vmat16, basis16, TAU),
            Bmat=assemble_B(vmat16, Z),
            z=Z,
            tau=TAU,
        )
        with pytest.raises(InsufficientSpectrumError):
            assemble_eigensystem(gevp16, gen, basis16, 200)

    def test_save_load_roundtrip(self, eigsys16, tmp_path):
        eigsys16.save(tmp_path)
        from fockcast.generator import KoopmanEigensystem

        back = KoopmanEigensystem.load(tmp_path)
        np.testing.assert_array_equal(back.omegas, eigsys16.omegas)
        np.testing.assert_array_equal(back.xi, eigsys16.xi)
        np.testing.assert_array_equal(back.zeta_coeffs, eigsys16.zeta_coeffs)
        np.testing.assert_array_equal(back.energies, eigsys16.energies)
        np.testing.assert_array_equal(back.pair_map, eigsys16.pair_map)
        assert back.tau == eigsys16.tau and back.z == eigsys16.z
