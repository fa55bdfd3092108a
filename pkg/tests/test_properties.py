"""Property-based tests for the invariants shared across modules."""

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from app.discrete_oracle import OracleService
from app.models import Chart, OUExitSpec, TridiagonalMatrix
from app.paths import PathService
from app.riccati import RiccatiService
from app.spectrum import SpectrumService
from app.stats import OUExitService, StatsService

moderate = st.floats(min_value=-5.0, max_value=5.0, allow_nan=False)


@st.composite
def tridiagonals(draw):
    n = draw(st.integers(min_value=1, max_value=12))
    diag = draw(st.lists(moderate, min_size=n, max_size=n))
    offdiag = draw(st.lists(moderate, min_size=n - 1, max_size=n - 1))
    return TridiagonalMatrix(diag=np.array(diag), offdiag=np.array(offdiag))


class TestSturmCounts:
    """Sturm counts against dense eigenvalues."""

    @given(tridiagonals(), moderate)
    def test_matches_dense_spectrum(self, matrix, a):
        """The count equals the number of dense eigenvalues <= -a."""
        eigenvalues = np.linalg.eigvalsh(matrix.to_dense())
        assume(np.min(np.abs(eigenvalues + a)) > 1e-6)
        assert OracleService.sturm_count(matrix, a) == int(np.sum(eigenvalues <= -a))


class TestPaths:
    """Seeded Brownian paths."""

    @given(st.integers(min_value=0, max_value=2**32), st.integers(min_value=1, max_value=400))
    def test_prefix_consistency(self, seed, cells):
        """A longer path extends a shorter one with the same seed."""
        short = PathService.generate(0.0, 0.01 * cells, 0.01, seed)
        long = PathService.generate(0.0, 0.01 * cells + 1.0, 0.01, seed)
        np.testing.assert_array_equal(long.values[: short.n_points], short.values)

    @given(st.integers(min_value=0, max_value=2**32), st.integers(min_value=1, max_value=300))
    def test_chunks_share_increments(self, seed, start):
        """A chunk on the lattice of a longer path sees the same increments."""
        full = PathService.generate(0.0, 4.0, 0.01, seed)
        chunk = PathService.generate(0.01 * start, 4.0, 0.01, seed, origin=0.0)
        expected = full.values[start:] - full.values[start]
        np.testing.assert_allclose(chunk.values, expected, atol=1e-12)


class TestCharts:
    """The z- and w-chart steps describe the same projective flow."""

    @given(
        st.floats(min_value=-10.0, max_value=10.0),
        st.floats(min_value=-5.0, max_value=5.0),
        st.floats(min_value=1e-4, max_value=0.1),
        st.floats(min_value=-1.0, max_value=1.0),
    )
    def test_w_is_minus_reciprocal_of_z(self, z, c, h, kick):
        """Stepping w = -1/z gives -1 over the stepped z."""
        assume(abs(z) > 0.1)
        z_next = RiccatiService.chart_step(z, Chart.Z, c, h, kick)
        w_next = RiccatiService.chart_step(-1.0 / z, Chart.W, c, h, kick)
        assume(1e-3 < abs(z_next) < 1e3)
        assert w_next == pytest.approx(-1.0 / z_next, rel=1e-7)


class TestCounts:
    """Eigenvalue counts of the stochastic operator."""

    @given(st.integers(min_value=0, max_value=1000), moderate, moderate)
    def test_count_decreases_in_a(self, seed, a1, a2):
        """Fewer eigenvalues lie below -a as a grows."""
        path = PathService.generate(0.0, 4.0, 0.01, seed)
        lo, hi = min(a1, a2), max(a1, a2)
        assert SpectrumService.eigenvalue_count(path, 0.2, 4.0, lo) >= SpectrumService.eigenvalue_count(
            path, 0.2, 4.0, hi
        )


class TestProbabilities:
    """Closed-form probabilities."""

    @given(st.floats(min_value=0.0, max_value=50.0))
    def test_multiple_hit_probability(self, p):
        """P(N >= 2) lies in [0, 1] and below p^2/2."""
        probability = StatsService.multiple_hit_probability(p)
        assert 0.0 <= probability <= 1.0
        assert probability <= p * p / 2 + 1e-15

    @given(st.integers(min_value=0, max_value=8))
    def test_quantile_grid_masses(self, n):
        """Every cell of the grid carries Exp(1) mass 2^-n."""
        knots = StatsService.quantile_grid(n).knots
        np.testing.assert_allclose(np.diff(-np.expm1(-knots)), 2.0**-n, atol=1e-12)

    @given(
        st.floats(min_value=0.05, max_value=1.0),
        st.floats(min_value=0.1, max_value=4.0),
        st.floats(min_value=0.1, max_value=4.0),
    )
    def test_exit_transform_decreases_in_barrier(self, nu, b1, b2):
        """A wider strip is left later, so the transform is smaller."""
        assume(abs(b1 - b2) > 1e-3)
        lo, hi = min(b1, b2), max(b1, b2)
        near = OUExitService.ou_exit_laplace(OUExitSpec(theta=1.0, nu=nu, b=lo))
        far = OUExitService.ou_exit_laplace(OUExitSpec(theta=1.0, nu=nu, b=hi))
        assert 0.0 < far < near <= 1.0
        assert near == pytest.approx(OUExitService.ou_exit_closed_form(OUExitSpec(1.0, nu, lo)), rel=1e-8)

    @given(
        st.floats(min_value=0.05, max_value=1.0),
        st.floats(min_value=0.05, max_value=1.0),
        st.floats(min_value=0.5, max_value=4.0),
    )
    def test_exit_transform_decreases_in_nu(self, nu1, nu2, b):
        """A larger nu weights the exit time more heavily."""
        assume(abs(nu1 - nu2) > 1e-3)
        lo, hi = min(nu1, nu2), max(nu1, nu2)
        small = OUExitService.ou_exit_laplace(OUExitSpec(theta=1.0, nu=lo, b=b))
        large = OUExitService.ou_exit_laplace(OUExitSpec(theta=1.0, nu=hi, b=b))
        assert large < small
