import numpy as np
import pytest

from mango.core.linalg import back_substitution, forward_substitution, lu_factor, solve_triangular
from mango.errors import DimensionError, SingularityError


def test_back_substitution_solves_batched_systems(rng):
    a = np.triu(rng.normal(size=(3, 5, 5))) + 5.0 * np.eye(5)
    b = rng.normal(size=(3, 5, 2))
    np.testing.assert_allclose(a @ back_substitution(a, b), b, atol=1e-12)


def test_forward_substitution_with_unit_diagonal_ignores_the_stored_diagonal(rng):
    a = np.tril(rng.normal(size=(4, 4)), -1) + 7.0 * np.eye(4)
    b = rng.normal(size=(4, 3))
    x = forward_substitution(a, b, unit_diagonal=True)
    unit = np.tril(a, -1) + np.eye(4)
    np.testing.assert_allclose(unit @ x, b, atol=1e-12)


def test_vanishing_diagonal_is_a_singularity_error():
    a = np.triu(np.ones((3, 3)))
    a[1, 1] = 0.0
    with pytest.raises(SingularityError):
        solve_triangular(a, np.ones((3, 1)))


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        back_substitution(np.eye(3), np.ones((4, 1)))


def test_lu_factor_reconstructs_the_permuted_matrix(rng):
    m = rng.normal(size=(6, 6))
    lu, perm, swaps = lu_factor(m)
    lower = np.tril(lu, -1) + np.eye(6)
    upper = np.triu(lu)
    np.testing.assert_allclose(lower @ upper, m[perm], atol=1e-12)
    assert 0 <= swaps <= 5
