"""Tests for eigenvalues, eigenfunctions and crossing shapes."""

import math

import numpy as np
import pytest

from app.errors import NoCrossingError, RangeError
from app.models import CrossingEvent, DriftSpec, Eigenfunction
from app.paths import PathService
from app.riccati import RiccatiService
from app.spectrum import SpectrumService, _descents


@pytest.fixture()
def unit_path():
    """Noise-free path on [0, 1]."""
    return PathService.zero(0.0, 1.0, 1e-3)


@pytest.fixture()
def cot_trajectory():
    """cot t on [0, 4], the zero-noise forward diffusion at a = -1."""
    path = PathService.zero(0.0, 4.0, 1e-3)
    return RiccatiService.integrate_forward(path, DriftSpec(a=-1.0), 0.0, math.inf, 4.0)


class TestSineSpectrum:
    """Without noise and drift the operator is -d^2/dt^2 with eigenvalues (k pi)^2."""

    def test_counts(self, unit_path):
        """Eigenvalues <= -a are counted by explosions."""
        assert SpectrumService.eigenvalue_count(unit_path, 0.0, 1.0, -5.0) == 0
        assert SpectrumService.eigenvalue_count(unit_path, 0.0, 1.0, -15.0) == 1
        assert SpectrumService.eigenvalue_count(unit_path, 0.0, 1.0, -50.0) == 2

    def test_bisection(self, unit_path):
        """lambda_1 = pi^2 and lambda_2 = 4 pi^2."""
        first = SpectrumService.eigenvalue_bisect(unit_path, 0.0, 1.0, 1, 1e-9)
        second = SpectrumService.eigenvalue_bisect(unit_path, 0.0, 1.0, 2, 1e-9)
        assert first == pytest.approx(math.pi**2, rel=1e-6)
        assert second == pytest.approx(4 * math.pi**2, rel=1e-6)

    def test_bisection_arguments(self, unit_path):
        """k >= 1 and tol > 0."""
        with pytest.raises(RangeError):
            SpectrumService.eigenvalue_bisect(unit_path, 0.0, 1.0, 0)
        with pytest.raises(RangeError):
            SpectrumService.eigenvalue_bisect(unit_path, 0.0, 1.0, 1, tol=0.0)

    def test_eigenfunction(self, unit_path):
        """phi_1 = sqrt 2 sin(pi t), centered at 1/2, with no interior zeros."""
        ef = SpectrumService.reconstruct_eigenfunction(unit_path, 0.0, 1.0, math.pi**2, tol=1e-6)
        np.testing.assert_allclose(ef.values, math.sqrt(2.0) * np.sin(math.pi * ef.times), atol=1e-4)
        assert ef.center == pytest.approx(0.5, abs=1e-3)
        assert len(ef.zeros) == 0

    def test_second_eigenfunction(self, unit_path):
        """phi_2 has one interior zero at 1/2."""
        ef = SpectrumService.reconstruct_eigenfunction(unit_path, 0.0, 1.0, 4 * math.pi**2, tol=1e-6)
        assert len(ef.zeros) == 1
        assert ef.zeros[0] == pytest.approx(0.5, abs=1e-3)
        expected = math.sqrt(2.0) * np.abs(np.sin(2 * math.pi * ef.times))
        np.testing.assert_allclose(np.abs(ef.values), expected, atol=1e-4)

    def test_solve(self, unit_path):
        """solve returns eigenvalues, centers and Riccati logs together."""
        result = SpectrumService.solve(unit_path, 0.0, 1.0, 2, 1e-8)
        np.testing.assert_allclose(result.lambdas, [math.pi**2, 4 * math.pi**2], rtol=1e-6)
        assert len(result.eigenfunctions) == len(result.chis) == 2
        assert result.centers[0] == pytest.approx(0.5, abs=1e-3)
        assert result.measures == []


class TestNoisySpectrum:
    """Eigenvalues on a Brownian path."""

    def test_interlacing_with_count(self):
        """The count jumps from k - 1 to k across lambda_k."""
        path = PathService.generate(0.0, 10.0, 1e-3, seed=8)
        lam = SpectrumService.eigenvalue_bisect(path, 1.0, 10.0, 2, 1e-8)
        assert SpectrumService.eigenvalue_count(path, 1.0, 10.0, -(lam - 1e-6)) == 1
        assert SpectrumService.eigenvalue_count(path, 1.0, 10.0, -(lam + 1e-6)) == 2

    def test_eigenfunction_is_normalized(self):
        """The stitched eigenfunction has unit L2 norm and positive start."""
        path = PathService.generate(0.0, 10.0, 1e-3, seed=8)
        lam = SpectrumService.eigenvalue_bisect(path, 1.0, 10.0, 1, 1e-10)
        ef = SpectrumService.reconstruct_eigenfunction(path, 1.0, 10.0, lam, tol=1e-6)
        assert np.trapezoid(ef.values**2, ef.times) == pytest.approx(1.0, rel=1e-9)
        assert ef.values[np.flatnonzero(ef.values)[0]] > 0
        assert ef.times[0] <= ef.stitch_time <= ef.times[-1]

    def test_stitch_at_sine_peak(self, unit_path):
        """Given a_L the sine eigenfunction is joined where pi cot(pi t) vanishes."""
        ef = SpectrumService.reconstruct_eigenfunction(unit_path, 0.0, 1.0, math.pi**2, tol=1e-6, a_L=1.0)
        assert ef.stitch_time == pytest.approx(0.5, abs=1e-6)
        np.testing.assert_allclose(ef.values, math.sqrt(2.0) * np.sin(math.pi * ef.times), atol=1e-4)

    def test_stitch_at_crossing_zero(self):
        """With noise the join time is the zero upsilon of one of the descents of Z."""
        path = PathService.generate(0.0, 10.0, 1e-3, seed=8)
        lam = SpectrumService.eigenvalue_bisect(path, 1.0, 10.0, 1, 1e-10)
        ef = SpectrumService.reconstruct_eigenfunction(path, 1.0, 10.0, lam, tol=1e-6, a_L=0.25)
        upsilons = [crossing.event.upsilon for crossing in _descents(ef.forward, 0.25)]
        assert upsilons
        assert min(abs(ef.stitch_time - u) for u in upsilons) == 0.0
        assert abs(np.interp(ef.stitch_time, ef.forward.times, ef.forward.values)) < 0.5

    def test_eigenvalues_decrease_with_horizon(self):
        """On one path lambda_k(T) does not increase as the Dirichlet end moves out."""
        path = PathService.generate(0.0, 20.0, 1e-3, seed=12)
        for k in (1, 2):
            lambdas = [SpectrumService.eigenvalue_bisect(path, 1.0, T, k, 1e-8) for T in (5.0, 10.0, 20.0)]
            assert np.all(np.diff(lambdas) <= 1e-7)

    def test_forward_and_backward_agree(self, unit_path):
        """At lambda_1 the forward and backward log-derivatives coincide on the middle third."""
        ef = SpectrumService.reconstruct_eigenfunction(unit_path, 0.0, 1.0, math.pi**2, tol=1e-8)
        middle = (ef.times >= 1.0 / 3.0) & (ef.times <= 2.0 / 3.0)
        np.testing.assert_allclose(ef.forward.values[middle], ef.backward.values[middle], atol=1e-6)
        np.testing.assert_allclose(ef.forward.values[middle], math.pi / np.tan(math.pi * ef.times[middle]), atol=1e-6)

    def test_measure_histogram(self):
        """The measure of phi^2 is a probability density in x = t/L."""
        times = np.linspace(0.0, 10.0, 1001)
        phi = np.sqrt(2.0 / 10.0) * np.sin(math.pi * times / 10.0)
        histogram = SpectrumService.measure_histogram(times, phi, L=5.0, bins=20)
        assert histogram.edges[0] == 0.0
        assert histogram.edges[-1] == pytest.approx(2.0)
        assert np.sum(histogram.density * np.diff(histogram.edges)) == pytest.approx(1.0)

    def test_horizon_certificate(self):
        """lambda_1 stabilizes once the horizon is past the confining drift."""
        T = SpectrumService.horizon_certificate(
            lambda t: PathService.generate(0.0, t, 1e-3, seed=2), 4.0, 1, 4.0, 1e-4
        )
        assert T in (4.0, 8.0, 16.0)


class TestShapeProfiles:
    """Rescaled eigenfunction and Brownian increment around a center."""

    def test_exact_profile(self):
        """An eigenfunction equal to the sech profile has zero h-distance."""
        a_L, U, x_max, n = 4.0, 10.0, 3.0, 241
        path = PathService.zero(0.0, 20.0, 1e-3)
        x = np.linspace(-x_max, x_max, n)
        times = U + x / math.sqrt(a_L)
        values = a_L**0.25 / math.sqrt(2.0) / np.cosh(x)
        ef = Eigenfunction(times=times, values=values, center=U, stitch_time=U, zeros=np.empty(0))
        profile = SpectrumService.shape_profiles(ef, path, U, a_L, x_max=x_max, n_points=n)
        assert profile.h_distance == pytest.approx(0.0, abs=1e-12)
        assert profile.b_distance == pytest.approx(2.0 * math.tanh(x_max))

    def test_orientation(self):
        """h(0) > 0 whatever the sign of phi."""
        a_L, U = 4.0, 10.0
        path = PathService.zero(0.0, 20.0, 1e-3)
        x = np.linspace(-3.0, 3.0, 241)
        ef = Eigenfunction(
            times=U + x / 2.0, values=-np.sqrt(2.0) / np.cosh(x), center=U, stitch_time=U, zeros=np.empty(0)
        )
        profile = SpectrumService.shape_profiles(ef, path, U, a_L, x_max=3.0)
        assert profile.h[120] > 0

    def test_window_outside(self):
        """The window must fit inside the eigenfunction grid."""
        path = PathService.zero(0.0, 20.0, 1e-3)
        times = np.linspace(9.0, 11.0, 201)
        ef = Eigenfunction(times=times, values=np.ones(201), center=10.0, stitch_time=10.0, zeros=np.empty(0))
        with pytest.raises(RangeError):
            SpectrumService.shape_profiles(ef, path, 10.0, 4.0, x_max=6.0)


class TestCrossings:
    """Descents of Z from +sqrt(a_L) to -sqrt(a_L)."""

    def test_cot_crossing(self, cot_trajectory):
        """cot t crosses 1, 0, -1 at pi/4, pi/2, 3pi/4 and explodes at pi."""
        crossing = SpectrumService.extract_crossing(cot_trajectory, 1.0)
        event = crossing.event
        assert event.iota == pytest.approx(math.pi / 4, abs=1e-3)
        assert event.upsilon == pytest.approx(math.pi / 2, abs=1e-3)
        assert event.theta == pytest.approx(3 * math.pi / 4, abs=1e-3)
        assert event.zeta == pytest.approx(math.pi, abs=1e-5)
        assert crossing.tanh_distance == pytest.approx(1.0 - math.tanh(math.pi / 4), abs=1e-3)

    def test_no_crossing(self):
        """coth t never descends below zero."""
        path = PathService.zero(0.0, 4.0, 1e-3)
        traj = RiccatiService.integrate_forward(path, DriftSpec(a=1.0), 0.0, math.inf, 4.0)
        with pytest.raises(NoCrossingError):
            SpectrumService.extract_crossing(traj, 1.0)

    def test_after(self, cot_trajectory):
        """Crossings are searched after the given time."""
        with pytest.raises(NoCrossingError):
            SpectrumService.extract_crossing(cot_trajectory, 1.0, after=3.0)

    def test_excursions(self):
        """Every descent of cot ends in an explosion."""
        path = PathService.zero(0.0, 10.0, 1e-3)
        traj = RiccatiService.integrate_forward(path, DriftSpec(a=-1.0), 0.0, math.inf, 10.0)
        summary = SpectrumService.excursion_starts(traj, 1.0)
        np.testing.assert_allclose(summary.starts, [math.pi / 4, 5 * math.pi / 4, 9 * math.pi / 4], atol=1e-3)
        assert summary.explosion_fraction == 1.0

    def test_durations(self):
        """(theta - upsilon, zeta - theta, 3/8 ln a_L / sqrt a_L)."""
        event = CrossingEvent(upsilon=1.0, theta=1.5, iota=0.5, zeta=2.0)
        descent, to_explosion, reference = SpectrumService.crossing_durations(event, 4.0)
        assert descent == 0.5
        assert to_explosion == 0.5
        assert reference == pytest.approx(0.375 * math.log(4.0) / 2.0)
        _, missing, _ = SpectrumService.crossing_durations(CrossingEvent(1.0, 1.5, 0.5), 4.0)
        assert math.isnan(missing)
