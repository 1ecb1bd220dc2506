import numpy as np
from hypothesis import given, settings, strategies as st

from sparse3d.rng import Rng


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_same_seed_same_stream(seed):
    a, b = Rng(seed), Rng(seed)
    np.testing.assert_array_equal(a.uniform((16,)), b.uniform((16,)))
    np.testing.assert_array_equal(a.normal((9,)), b.normal((9,)))


def test_distinct_seeds_differ():
    assert not np.array_equal(Rng(0).uniform((8,)), Rng(1).uniform((8,)))


def test_fork_is_independent_of_parent_position():
    a = Rng(5)
    child_before = a.fork("x").uniform((4,))
    a.uniform((100,))
    np.testing.assert_array_equal(child_before, a.fork("x").uniform((4,)))
    assert not np.array_equal(a.fork("x").uniform((4,)), a.fork("y").uniform((4,)))


def test_normal_moments():
    z = Rng(3).standard_normal((200_000,))
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01


def test_truncated_normal_bounds():
    z = Rng(4).truncated_normal((50_000,), std=0.02)
    assert z.dtype == np.float32
    assert np.abs(z).max() <= 0.04 + 1e-7
    assert 0.015 < z.std() < 0.02


def test_uniform_range():
    u = Rng(7).uniform((1000,), -2.0, 3.0)
    assert u.min() >= -2.0 and u.max() < 3.0
