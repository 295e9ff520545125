import numpy as np
import pytest

from pathflow.numerics import finite_diff_grad, seeded_stream
from pathflow.targets import (
    GaussianMixtureTarget,
    IsotropicGaussianTarget,
    Phi4Lattice,
    base_grad_log_prob,
    base_log_prob,
    gaussian_mixture_energy,
    gaussian_mixture_grad,
    phi4_energy,
    phi4_grad,
)


class TestPhi4:
    def test_zero_field(self):
        assert phi4_energy(Phi4Lattice(2, 1.0, 1.0), np.zeros(4)) == 0.0

    def test_constant_field_hand_value(self):
        # kinetic term vanishes on constants: S = L^2 (m2 c^2 + lam c^4)
        lat = Phi4Lattice(2, 1.0, 1.0)
        assert phi4_energy(lat, np.ones(4)) == pytest.approx(8.0, abs=1e-13)

    def test_single_site_kinetic(self):
        # 2x2 periodic lattice has 8 links; 4 touch site 0
        lat = Phi4Lattice(2, 0.0, 0.0)
        assert phi4_energy(lat, np.array([1.0, 0, 0, 0])) == pytest.approx(4.0)

    def test_grad_zero_field(self):
        assert np.array_equal(phi4_grad(Phi4Lattice(3), np.zeros(9)), np.zeros(9))

    def test_grad_constant_field(self):
        lat = Phi4Lattice(3, -4.0, 6.975)
        c = 0.7
        g = phi4_grad(lat, np.full(9, c))
        expect = 2 * lat.m2 * c + 4 * lat.lam * c**3
        assert np.max(np.abs(g - expect)) < 1e-12

    def test_grad_matches_fd(self):
        lat = Phi4Lattice(4)
        phi = seeded_stream(2, 0).standard_normal(16)
        fd = finite_diff_grad(lambda p: phi4_energy(lat, p), phi)
        got = phi4_grad(lat, phi)
        assert np.max(np.abs(fd - got)) / np.max(np.abs(fd)) < 1e-7

    def test_z2_symmetry_exact(self):
        lat = Phi4Lattice(4)
        phi = seeded_stream(2, 1).standard_normal(16)
        assert phi4_energy(lat, phi) == phi4_energy(lat, -phi)

    def test_translation_invariance_exact(self):
        lat = Phi4Lattice(4)
        phi = seeded_stream(2, 2).standard_normal(16)
        grid = phi.reshape(4, 4)
        for dx in range(4):
            for dy in range(4):
                shifted = np.roll(np.roll(grid, dx, axis=0), dy, axis=1).ravel()
                assert phi4_energy(lat, shifted) == pytest.approx(
                    phi4_energy(lat, phi), rel=1e-14
                )

    def test_rotation_and_reflection_invariance(self):
        lat = Phi4Lattice(4)
        phi = seeded_stream(2, 3).standard_normal(16)
        grid = phi.reshape(4, 4)
        s_ref = phi4_energy(lat, phi)
        assert phi4_energy(lat, np.rot90(grid).ravel()) == pytest.approx(s_ref, rel=1e-14)
        assert phi4_energy(lat, grid.T.ravel()) == pytest.approx(s_ref, rel=1e-14)
        assert phi4_energy(lat, grid[::-1, :].ravel()) == pytest.approx(s_ref, rel=1e-14)

    def test_kinetic_term_positive_semidefinite(self):
        lat = Phi4Lattice(4, 0.0, 0.0)
        rng = seeded_stream(2, 4)
        for _ in range(20):
            assert phi4_energy(lat, rng.standard_normal(16)) >= 0.0

    def test_batched_matches_loop(self):
        lat = Phi4Lattice(3)
        batch = seeded_stream(2, 5).standard_normal(45).reshape(5, 9)
        be = phi4_energy(lat, batch)
        bg = phi4_grad(lat, batch)
        for i in range(5):
            assert be[i] == pytest.approx(phi4_energy(lat, batch[i]), rel=1e-15)
            assert np.array_equal(bg[i], phi4_grad(lat, batch[i]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            phi4_energy(Phi4Lattice(2), np.zeros(5))


class TestGaussianMixture:
    def test_single_component_reduces_to_gaussian(self):
        x = np.array([0.4, -1.2])
        e = gaussian_mixture_energy([[0.0, 0.0]], [1.0], [1.0], x)
        assert e == pytest.approx(0.5 * float(x @ x) + np.log(2 * np.pi), rel=1e-12)
        g = gaussian_mixture_grad([[0.0, 0.0]], [1.0], [1.0], x)
        assert np.max(np.abs(g - x)) < 1e-12

    def test_symmetric_midpoint_zero_gradient(self):
        means = [[-1.0, 0.0], [1.0, 0.0]]
        g = gaussian_mixture_grad(means, [0.5, 0.5], [1.0, 1.0], np.zeros(2))
        assert np.max(np.abs(g)) < 1e-14

    def test_grad_matches_fd(self):
        tgt = GaussianMixtureTarget(
            means=[[-1.5, 0.5], [1.0, -0.3], [0.2, 2.0]],
            weights=[0.5, 0.3, 0.2],
            sigmas=[0.8, 1.2, 0.6],
        )
        x = seeded_stream(3, 0).standard_normal(2)
        fd = finite_diff_grad(lambda v: tgt.energy(v), x)
        assert np.max(np.abs(fd - tgt.grad_energy(x))) / np.max(np.abs(fd)) < 1e-7

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            GaussianMixtureTarget([[0.0]], [0.7], [1.0])
        with pytest.raises(ValueError):
            GaussianMixtureTarget([[0.0], [1.0]], [0.5, -0.5], [1.0, 1.0])


class TestBaseDensity:
    def test_origin_values(self):
        assert base_log_prob(np.zeros(2)) == pytest.approx(-np.log(2 * np.pi))
        assert np.array_equal(base_grad_log_prob(np.zeros(2)), np.zeros(2))

    def test_grad_is_minus_z(self):
        z = np.array([1.0, 1.0])
        assert np.array_equal(base_grad_log_prob(z), -z)

    def test_grad_matches_fd(self):
        z = seeded_stream(4, 0).standard_normal(3)
        fd = finite_diff_grad(lambda v: float(base_log_prob(v)), z)
        assert np.max(np.abs(fd - base_grad_log_prob(z))) < 1e-8


class TestIsotropicGaussian:
    def test_energy_and_norm(self):
        t = IsotropicGaussianTarget(2, 2.0)
        x = np.array([1.0, -1.0])
        assert t.energy(x) == pytest.approx(0.25)
        assert t.exact_log_norm == pytest.approx(np.log(2 * np.pi * 4.0))

    def test_grad_matches_fd(self):
        t = IsotropicGaussianTarget(3, 1.7)
        x = seeded_stream(4, 1).standard_normal(3)
        fd = finite_diff_grad(lambda v: t.energy(v), x)
        assert np.max(np.abs(fd - t.grad_energy(x))) < 1e-7
