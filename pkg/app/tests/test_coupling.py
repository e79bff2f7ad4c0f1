import numpy as np
import pytest

from mango.core.tensor import Tape
from mango.errors import DimensionError, LayoutError
from mango.flows.coupling import AffineCoupling, Mlp, coupling_parameter_count
from mango.processing.validator import dense_slogdet, numerical_jacobian


def perturbed(d=4, hidden=8, flip=False, seed=0, split_axis="features"):
    rng = np.random.default_rng(seed)
    coupling = AffineCoupling(d, hidden, rng, flip=flip, split_axis=split_axis)
    for p in coupling.parameters():
        p.assign(p.data + rng.normal(0.0, 0.4, p.shape))
    return coupling


def test_zero_initialized_coupling_is_the_identity(rng):
    coupling = AffineCoupling(4, 16, rng)
    x = rng.normal(size=(3, 8, 4))
    y, log_det = coupling.forward(x)
    np.testing.assert_array_equal(y.data, x)
    np.testing.assert_array_equal(log_det.data, np.zeros(3))


def test_mlp_zero_output():
    mlp = Mlp(3, 5, 2, np.random.default_rng(0))
    assert np.all(mlp(np.ones((4, 3))).data == 0.0)


@pytest.mark.parametrize("flip", [False, True])
@pytest.mark.parametrize("d", [2, 3, 5])
def test_round_trip(flip, d, rng):
    coupling = perturbed(d=d, flip=flip)
    x = rng.normal(size=(2, 4, d))
    y, _ = coupling.forward(x)
    np.testing.assert_allclose(coupling.inverse(y).data, x, atol=1e-12)


@pytest.mark.parametrize("flip", [False, True])
def test_flip_changes_which_features_are_kept(flip, rng):
    coupling = perturbed(d=4, flip=flip)
    x = rng.normal(size=(3, 4))
    y, _ = coupling.forward(x)
    kept = slice(2, 4) if flip else slice(0, 2)
    np.testing.assert_array_equal(y.data[:, kept], x[:, kept])


@pytest.mark.parametrize("seed", range(4))
def test_log_det_matches_numerical_jacobian(seed, rng):
    coupling = perturbed(d=3, seed=seed, flip=bool(seed % 2))
    x = rng.normal(size=(4, 3))
    jac = numerical_jacobian(lambda v: coupling.forward(v)[0].data, x)
    _, log_abs = dense_slogdet(jac)
    assert coupling.forward(x)[1].item() == pytest.approx(log_abs, rel=1e-6, abs=1e-6)


def test_log_scale_is_bounded(rng):
    coupling = perturbed()
    s, _ = coupling.scale_shift(rng.normal(0.0, 100.0, size=(5, 2)))
    assert np.all(np.abs(s.data) <= coupling.scale_bound)


def test_coupling_helpers_agree_with_forward(rng):
    coupling = perturbed()
    x = rng.normal(size=(2, 3, 4))
    x1, x2 = x[..., :2], x[..., 2:]
    y, log_det = coupling.forward(x)
    np.testing.assert_allclose(coupling.coupling_forward(x1, x2).data, y.data[..., 2:])
    np.testing.assert_allclose(coupling.coupling_inverse(x1, y.data[..., 2:]).data, x2, atol=1e-12)
    np.testing.assert_allclose(coupling.coupling_logdet(x1).data, log_det.data)


def test_needs_two_features(rng):
    with pytest.raises(DimensionError):
        AffineCoupling(1, 4, rng)
    with pytest.raises(DimensionError):
        AffineCoupling(4, 4, rng).forward(np.zeros((2, 3)))


@pytest.mark.parametrize("flip", [False, True])
def test_token_split_keeps_the_conditioning_tokens(flip, rng):
    coupling = perturbed(d=3, flip=flip, split_axis="tokens")
    x = rng.normal(size=(2, 6, 3))
    y, _ = coupling.forward(x)
    kept = slice(3, 6) if flip else slice(0, 3)
    np.testing.assert_array_equal(y.data[:, kept], x[:, kept])
    np.testing.assert_allclose(coupling.inverse(y).data, x, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_token_split_log_det_matches_numerical_jacobian(seed, rng):
    coupling = perturbed(d=2, seed=seed, flip=bool(seed % 2), split_axis="tokens")
    x = rng.normal(size=(4, 2))
    jac = numerical_jacobian(lambda v: coupling.forward(v)[0].data, x)
    _, log_abs = dense_slogdet(jac)
    assert coupling.forward(x)[1].item() == pytest.approx(log_abs, rel=1e-6, abs=1e-6)


def test_token_split_needs_even_token_count(rng):
    coupling = AffineCoupling(2, 4, rng, split_axis="tokens")
    with pytest.raises(LayoutError):
        coupling.forward(np.zeros((3, 2)))
    with pytest.raises(LayoutError):
        AffineCoupling(2, 4, rng, split_axis="diagonal")


def test_token_split_works_on_single_features(rng):
    coupling = perturbed(d=1, split_axis="tokens")
    x = rng.normal(size=(4, 1))
    np.testing.assert_allclose(coupling.inverse(coupling.forward(x)[0]).data, x, atol=1e-12)


def test_scale_bound_is_learned(rng):
    coupling = perturbed(d=4)
    assert any(p is coupling.bound for p in coupling.parameters())
    x = rng.normal(size=(3, 4))
    for p in coupling.parameters():
        p.zero_grad()
    with Tape() as tape:
        _, log_det = coupling.forward(x)
        total = log_det.sum()
    tape.backward(total)
    assert coupling.bound.grad != 0.0
    coupling.bound.assign(10.0)
    s, _ = coupling.scale_shift(rng.normal(0.0, 100.0, size=(5, 2)))
    assert np.all(np.abs(s.data) <= 10.0)
    assert np.abs(s.data).max() > 2.0


@pytest.mark.parametrize("d,split_axis,flip", [(4, "features", False), (5, "features", True), (3, "tokens", False)])
def test_parameter_count_helper(d, split_axis, flip, rng):
    coupling = AffineCoupling(d, 7, rng, flip=flip, split_axis=split_axis)
    assert coupling_parameter_count(d, 7, split_axis, flip) == sum(p.size for p in coupling.parameters())
