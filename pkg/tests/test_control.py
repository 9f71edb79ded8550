import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nsc.control import (
    Controller,
    control_energy_density,
    control_eval,
    controller_from_dict,
    controller_to_dict,
    linear,
    neural_diag,
    neural_shift,
    quadratic_diag,
)
from nsc.diffnet import init_mlp
from nsc.errors import ConfigurationError, ShapeError

vectors = st.lists(st.floats(-10, 10), min_size=3, max_size=3).map(np.array)


def all_kinds(d=3, pin_mask=None):
    return [
        neural_shift(d, 1, seed=1, pin_mask=pin_mask),
        neural_shift(d, 2, hidden=(8, 8), seed=2, activation="smoothed_relu", pin_mask=pin_mask),
        neural_diag(d, seed=3, pin_mask=pin_mask),
        linear(1.5, d=d, pin_mask=pin_mask),
        linear(np.arange(d * d, dtype=float).reshape(d, d), d=d, r=d, pin_mask=pin_mask),
    ]


def test_zero_at_origin():
    for u in all_kinds():
        out = control_eval(u, jnp.zeros(3))
        assert out.shape == (3, u.r)
        assert not np.any(np.asarray(out))


def test_linear_gain():
    assert float(control_eval(linear(6.0), jnp.array([0.5]))[0, 0]) == 3.0
    assert float(control_energy_density(linear(6.0), jnp.array([1.0]))) == 36.0


def test_quadratic_diag_matches_square_law():
    u = quadratic_diag(2.0)
    assert float(control_eval(u, jnp.array([1.0]))[0, 0]) == 2.0
    assert float(control_energy_density(u, jnp.array([2.0]))) == 64.0


def test_energy_density_is_frobenius():
    u = neural_shift(3, 2, seed=5)
    x = jnp.array([0.2, -1.0, 0.4])
    assert float(control_energy_density(u, x)) == pytest.approx(float(jnp.sum(control_eval(u, x) ** 2)))
    assert float(control_energy_density(u, jnp.zeros(3))) == 0.0


def test_shift_subtracts_value_at_origin():
    u = neural_shift(2, 1, seed=7)
    x = jnp.array([0.3, 0.9])
    expected = u.net(x) - u.net(jnp.zeros(2))
    np.testing.assert_allclose(control_eval(u, x)[:, 0], expected, rtol=1e-15)


@given(vectors, st.floats(-5, 5))
def test_linear_is_homogeneous(x, lam):
    for u in all_kinds()[3:]:
        np.testing.assert_allclose(control_eval(u, lam * x), lam * np.asarray(control_eval(u, x)), rtol=1e-13, atol=1e-12)


@given(vectors, st.lists(st.booleans(), min_size=3, max_size=3))
def test_pinned_rows_are_zero(x, mask):
    for u in all_kinds(pin_mask=mask):
        out = np.asarray(control_eval(u, x))
        for i, keep in enumerate(mask):
            if not keep:
                assert not np.any(out[i])


@given(vectors, st.integers(0, 2))
def test_diag_row_vanishes_with_coordinate(x, i):
    x = x.copy()
    x[i] = 0.0
    out = np.asarray(control_eval(neural_diag(3, seed=4), x))
    assert not np.any(out[i])
    assert not np.any(out - np.diag(np.diag(out)))


def test_shape_and_configuration_errors():
    with pytest.raises(ConfigurationError):
        Controller("diag", 2, 1, net=init_mlp([2, 2])).validate()
    with pytest.raises(ShapeError):
        control_eval(linear(1.0, d=2), jnp.zeros(3))
    with pytest.raises(ConfigurationError):
        linear(1.0, d=3, r=2)
    with pytest.raises(ConfigurationError):
        Controller("magic", 1, 1).validate()


def test_controller_is_a_pytree():
    u = neural_shift(2, 1, seed=0)
    leaves = jax.tree_util.tree_leaves(u)
    assert len(leaves) == 4
    doubled = jax.tree_util.tree_map(lambda a: 2 * a, u)
    x = jnp.array([0.1, 0.2])
    assert doubled.net(x).shape == u.net(x).shape


@pytest.mark.parametrize("u", all_kinds(pin_mask=[True, False, True]), ids=lambda u: u.kind)
def test_round_trip(u):
    back = controller_from_dict(controller_to_dict(u))
    x = jnp.array([0.7, -0.1, 1.3])
    np.testing.assert_array_equal(control_eval(back, x), control_eval(u, x))
    assert back.pin_mask == u.pin_mask
