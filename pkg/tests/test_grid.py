import math

import numpy as np
import pytest
from pydantic import ValidationError

from engine.grid import GridFunction, GridInverseMarginal, grid_points


def square_root_marginal(half_width=10.0, n_points=2**12, t_lo=None, t_hi=None):
    """Tabulated I(y) = y^(-1/2), optionally trusted on a narrower interior."""
    tabulated = GridInverseMarginal.from_function(lambda y: y**-0.5, half_width, n_points, 2.0, 2.0)
    if t_lo is None:
        return tabulated
    return GridInverseMarginal(grid=tabulated.grid, gamma1=2.0, gamma2=2.0, t_lo=t_lo, t_hi=t_hi)


class TestGridFunction:
    def test_nodes(self):
        t = grid_points(4.0, 8)
        np.testing.assert_allclose(t, [-4, -3, -2, -1, 0, 1, 2, 3])
        grid = GridFunction.sample(np.exp, 4.0, 8)
        assert grid.step == 1.0
        np.testing.assert_allclose(grid.samples, np.exp(t))
        assert grid.rows()[4] == (0.0, 1.0)

    @pytest.mark.parametrize("n_points", [1, 6, 12])
    def test_power_of_two(self, n_points):
        with pytest.raises(ValidationError):
            GridFunction(half_width=1.0, values=[1.0] * n_points)

    def test_finite_values(self):
        with pytest.raises(ValidationError):
            GridFunction(half_width=1.0, values=[1.0, float("nan")])

    def test_with_samples_keeps_layout(self):
        grid = GridFunction.sample(np.cos, 3.0, 16)
        swapped = grid.with_samples(np.zeros(16))
        assert swapped.half_width == 3.0
        np.testing.assert_array_equal(swapped.t, grid.t)


class TestGridInverseMarginal:
    def test_matches_samples_at_nodes(self):
        marginal = square_root_marginal()
        y = np.exp(marginal.grid.t[::97])
        np.testing.assert_allclose(marginal(y), y**-0.5, rtol=1e-12)

    def test_interpolates_between_nodes(self):
        marginal = square_root_marginal()
        y = np.geomspace(1e-3, 1e3, 301)
        np.testing.assert_allclose(marginal(y), y**-0.5, rtol=1e-6)

    def test_power_tails(self):
        marginal = square_root_marginal(t_lo=-3.0, t_hi=3.0)
        y = np.exp(np.array([-9.0, -4.0, 4.5, 12.0]))
        np.testing.assert_allclose(marginal(y), y**-0.5, rtol=1e-12)
        np.testing.assert_allclose(marginal.log_slope(y), -0.5, rtol=1e-15)

    def test_tail_exponents_follow_ambient_bounds(self):
        marginal = GridInverseMarginal.from_function(lambda y: y**-0.5, 5.0, 2**10, 1.0, 4.0)
        t_first, log_first, t_last, log_last = marginal.edges
        assert marginal(math.exp(t_first - 2.0)) == pytest.approx(math.exp(log_first + 2.0), rel=1e-12)
        assert marginal(math.exp(t_last + 2.0)) == pytest.approx(math.exp(log_last - 0.5), rel=1e-12)

    def test_slope_inside(self):
        marginal = square_root_marginal()
        np.testing.assert_allclose(marginal.log_slope(np.geomspace(0.1, 10.0, 17)), -0.5, rtol=1e-5)

    def test_derivative(self):
        marginal = square_root_marginal()
        assert marginal.derivative(4.0) == pytest.approx(-0.5 * 4.0**-1.5, rel=1e-5)

    def test_primitive_at_nodes(self):
        """Phi(y) = 1 - sqrt(y) for I(y) = y^(-1/2)."""
        marginal = square_root_marginal()
        y = np.exp(marginal.grid.t[1500:2600:50])
        np.testing.assert_allclose(marginal.utility_primitive(y), 1.0 - np.sqrt(y), atol=1e-6)

    def test_primitive_in_tails(self):
        marginal = square_root_marginal(t_lo=-2.0, t_hi=2.0)
        y = np.array([math.exp(-6.0), math.exp(5.0)])
        np.testing.assert_allclose(marginal.utility_primitive(y), 1.0 - np.sqrt(y), atol=1e-6)

    def test_primitive_vanishes_at_one(self):
        assert square_root_marginal().utility_primitive(1.0) == pytest.approx(0.0, abs=1e-12)

    def test_gamma_order(self):
        with pytest.raises(ValidationError):
            GridInverseMarginal.from_function(lambda y: 1.0 / y, 5.0, 2**8, 3.0, 2.0)

    def test_interior_inside_grid(self):
        tabulated = square_root_marginal(half_width=2.0, n_points=2**6)
        with pytest.raises(ValidationError):
            GridInverseMarginal(grid=tabulated.grid, gamma1=2.0, gamma2=2.0, t_lo=-3.0, t_hi=1.0)

    def test_positive_interior(self):
        with pytest.raises(ValidationError):
            GridInverseMarginal.from_function(lambda y: np.log(y), 2.0, 2**6, 1.0, 2.0)
