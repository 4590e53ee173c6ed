import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volsurf.errors import DegenerateMaskError, ShapeError
from volsurf.surface import (
    SurfaceGrid,
    VolSurface,
    build_input,
    combine_masks,
    make_grid,
    mask_rng,
    random_mask,
    total_variance,
    wing_mask,
)


def test_standard_grid(grid):
    assert grid.shape == (8, 25)
    np.testing.assert_array_equal(grid.tenors, [0.08, 0.17, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0])
    assert grid.strikes[0] == 70.0 and grid.strikes[-1] == 130.0
    assert np.diff(grid.strikes) == pytest.approx(2.5)
    assert grid.log_moneyness[0] == pytest.approx(-0.356675, abs=1e-6)
    assert grid.log_moneyness[-1] == pytest.approx(0.262364, abs=1e-6)
    assert grid.log_moneyness[12] == 0.0


def test_grid_is_immutable_and_round_trips(grid):
    with pytest.raises(ValueError):
        grid.tenors[0] = 1.0
    assert SurfaceGrid.from_dict(grid.to_dict()) == grid
    assert hash(SurfaceGrid.from_dict(grid.to_dict())) == hash(grid)


def test_grid_validation():
    with pytest.raises(ValueError):
        SurfaceGrid(np.array([1.0, 0.5]), np.array([90.0, 100.0]))
    with pytest.raises(ShapeError):
        SurfaceGrid(np.ones((2, 2)), np.array([90.0, 100.0]))


def test_total_variance(grid):
    iv = np.full(grid.shape, 0.2)
    w = total_variance(VolSurface(iv), grid)
    np.testing.assert_allclose(w[:, 0], 0.04 * grid.tenors)
    assert total_variance(iv[None], grid).shape == (1, 8, 25)


def test_surface_validation():
    with pytest.raises(ShapeError):
        VolSurface(np.ones(5))
    with pytest.raises(ShapeError):
        VolSurface(np.ones((8, 25)), np.ones((8, 24)))
    s = VolSurface(np.full((8, 25), 0.2))
    s.validate()
    s.iv[0, 0] = -1
    with pytest.raises(ValueError):
        s.validate()


@settings(max_examples=50, deadline=None)
@given(p=st.floats(0.0, 0.95), seed=st.integers(0, 2**31))
def test_random_mask_properties(p, seed):
    m = random_mask(p, np.random.default_rng(seed))
    assert m.shape == (8, 25)
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert m.any()


def test_random_mask_fraction():
    m = np.stack([random_mask(0.3, mask_rng(0, i)) for i in range(200)])
    assert 1 - m.mean() == pytest.approx(0.3, abs=0.01)


def test_random_mask_rejects_bad_fraction():
    with pytest.raises(ValueError):
        random_mask(1.0, np.random.default_rng(0))


def test_random_mask_two_empty_draws_raise():
    class Zeros:
        def random(self, shape):
            return np.zeros(shape)

    with pytest.raises(DegenerateMaskError):
        random_mask(0.5, Zeros())


def test_mask_streams_are_independent_and_reproducible():
    a = random_mask(0.5, mask_rng(3, 1, 2))
    np.testing.assert_array_equal(a, random_mask(0.5, mask_rng(3, 1, 2)))
    assert not np.array_equal(a, random_mask(0.5, mask_rng(3, 2, 1)))


def test_wing_mask(grid):
    w = wing_mask(grid)
    # |log(70/100)| = 0.357 and |log(72.5/100)| = 0.322 exceed the threshold
    np.testing.assert_array_equal(w[:, :2], 0.0)
    np.testing.assert_array_equal(w[:, 2:], 1.0)


def test_combine_masks_errors_when_empty(grid):
    with pytest.raises(DegenerateMaskError):
        combine_masks(np.zeros(grid.shape), np.ones(grid.shape))


def test_build_input_zeros_missing(grid):
    iv = np.full(grid.shape, 0.25)
    m = np.ones(grid.shape)
    m[3, 4] = 0
    x = build_input(iv, m)
    assert x.shape == (2, 8, 25)
    assert x[0, 3, 4] == 0.0 and x[0, 0, 0] == 0.25
    np.testing.assert_array_equal(x[1], m)
    with pytest.raises(ShapeError):
        build_input(iv, m[:, :3])
