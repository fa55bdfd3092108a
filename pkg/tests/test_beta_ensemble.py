"""Tests for the tridiagonal beta-ensemble."""

import numpy as np
import pytest

from app.beta_ensemble import EnsembleService, gap_moment_quadrature
from app.errors import RangeError


class TestSampling:
    """Matrix draws."""

    def test_deterministic(self):
        """The same seed gives the same matrix."""
        first = EnsembleService.sample_tridiagonal(20, 2.0, seed=1)
        second = EnsembleService.sample_tridiagonal(20, 2.0, seed=1)
        np.testing.assert_array_equal(first.diag, second.diag)
        np.testing.assert_array_equal(first.offdiag, second.offdiag)
        assert first.n == 20
        assert len(first.offdiag) == 19

    def test_single_entry(self):
        """N = 1 has no off-diagonal."""
        matrix = EnsembleService.sample_tridiagonal(1, 1.0, seed=0)
        assert matrix.n == 1
        assert len(matrix.offdiag) == 0

    def test_off_diagonal_means(self):
        """E[chi_k^2] = k, so the squared off-diagonals average beta (N - i) / beta."""
        diag, off = EnsembleService.sample_batch(5, 2.0, 20_000, seed=3)
        assert diag.shape == (20_000, 5)
        np.testing.assert_allclose(np.mean(off**2, axis=0), [4.0, 3.0, 2.0, 1.0], rtol=0.03)

    @pytest.mark.parametrize("N, beta", [(0, 1.0), (5, 0.0), (5, -1.0)])
    def test_invalid(self, N, beta):
        """N >= 1 and beta > 0."""
        with pytest.raises(RangeError):
            EnsembleService.sample_tridiagonal(N, beta, seed=0)


class TestSpectrum:
    """Eigenvalues and edge rescaling."""

    def test_matches_dense(self):
        """Sturm bisection returns the spectrum in decreasing order."""
        matrix = EnsembleService.sample_tridiagonal(40, 1.0, seed=2)
        mu = EnsembleService.eigenvalues(matrix)
        np.testing.assert_allclose(mu, np.sort(np.linalg.eigvalsh(matrix.to_dense()))[::-1], atol=1e-8)
        top = EnsembleService.eigenvalues(matrix, k_top=3)
        np.testing.assert_allclose(top, mu[:3], atol=1e-8)

    def test_k_top_range(self):
        """k_top must lie in [1, N]."""
        matrix = EnsembleService.sample_tridiagonal(10, 1.0, seed=2)
        with pytest.raises(RangeError):
            EnsembleService.eigenvalues(matrix, k_top=11)

    def test_edge_rescale(self):
        """N^{1/6} (2 sqrt N - mu_i)."""
        rescaled = EnsembleService.edge_rescale(np.array([19.0, 18.0, 0.0]), 100, 2)
        np.testing.assert_allclose(rescaled, 100 ** (1 / 6) * np.array([1.0, 2.0]))
        with pytest.raises(RangeError):
            EnsembleService.edge_rescale(np.array([19.0]), 100, 2)

    def test_sample(self):
        """The rescaled top eigenvalues increase with the index."""
        sample = EnsembleService.sample(50, 2.0, seed=4, k_max=3)
        assert len(sample.mu) == 50
        assert np.all(np.diff(sample.edge_rescaled) > 0)

    def test_semicircle_support(self):
        """Almost all eigenvalues lie inside [-2 sqrt N, 2 sqrt N]."""
        matrix = EnsembleService.sample_tridiagonal(400, 2.0, seed=7)
        assert EnsembleService.semicircle_fraction(matrix) > 0.98


class TestMoments:
    """Exact low-dimensional moments."""

    def test_gap_quadrature_gue(self):
        """At beta = 2 the squared gap of two eigenvalues has mean 6."""
        assert gap_moment_quadrature(2.0) == pytest.approx(6.0, rel=1e-6)

    def test_gap_quadrature_goe(self):
        """At beta = 1 the weight |x - y| gives E[d^2] = E|d|^3 / E|d| = 8 for d ~ N(0, 4)."""
        assert gap_moment_quadrature(1.0) == pytest.approx(8.0, rel=1e-5)

    def test_moment_gate(self):
        """Sampled moments agree with the quadrature."""
        verdict = EnsembleService.moment_gate(2.0, n_samples=40_000, seed=1, rtol=0.05)
        assert verdict.passed
        assert verdict.name == "ensemble-moments"
        assert verdict.details["gap2_expected"] == pytest.approx(6.0, rel=1e-6)
        assert verdict.details["variance_expected"] == pytest.approx(1.0)
