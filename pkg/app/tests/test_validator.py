import numpy as np
import pytest

from mango.errors import DimensionError, OracleError
from mango.processing.validator import (
    AUDIT_KINDS,
    AUDIT_SIZES,
    audit_sizes,
    audit_supported,
    audit_layer,
    build_audit_layer,
    cofactor_det,
    dense_slogdet,
    exponent_verdict,
    gradient_audit,
    numerical_jacobian,
    run_audit_suite,
)


def test_jacobian_of_scaling_is_twice_identity(rng):
    x = rng.normal(size=(3, 2))
    np.testing.assert_allclose(numerical_jacobian(lambda v: 2.0 * v, x), 2.0 * np.eye(6), atol=1e-9)


def test_jacobian_of_a_linear_map(rng):
    a = rng.normal(size=(4, 5))
    np.testing.assert_allclose(numerical_jacobian(lambda v: a @ v, rng.normal(size=5)), a, atol=1e-9)


def test_jacobian_reports_the_offending_coordinate():
    def f(v):
        return np.where(v > 1.0, np.nan, v)

    with pytest.raises(OracleError) as info:
        numerical_jacobian(f, np.array([0.0, 1.0]))
    assert info.value.coordinate == 1


def test_slogdet_oracle():
    assert dense_slogdet(np.eye(5)) == (1.0, 0.0)
    sign, log_abs = dense_slogdet(np.diag([2.0, -3.0, 0.5]))
    assert sign == -1.0
    assert log_abs == pytest.approx(np.log(3.0))
    assert dense_slogdet(np.ones((3, 3)))[0] == 0.0
    with pytest.raises(DimensionError):
        dense_slogdet(np.ones((2, 3)))


def test_slogdet_agrees_with_numpy(rng):
    m = rng.normal(size=(9, 9))
    sign, log_abs = dense_slogdet(m)
    expected_sign, expected = np.linalg.slogdet(m)
    assert sign == expected_sign
    assert log_abs == pytest.approx(expected, rel=1e-10)


def test_cofactor_expansion_matches_lu(rng):
    m = rng.normal(size=(6, 6))
    sign, log_abs = dense_slogdet(m)
    assert cofactor_det(m) == pytest.approx(sign * np.exp(log_abs), rel=1e-9)


@pytest.mark.parametrize("kind", AUDIT_KINDS)
def test_every_audit_kind_passes_on_one_seed(kind):
    layer = build_audit_layer(kind, 8, 2, seed=1)
    x = np.random.default_rng(1).normal(size=(8, 2))
    report = audit_layer(layer, x, kind=kind, seed=1)
    assert report.passed, report


def test_doubled_log_det_is_caught():
    layer = build_audit_layer("ica-mmca", 8, 2, seed=0)
    report = audit_layer(layer, np.random.default_rng(0).normal(size=(8, 2)), inject_fault=True)
    assert not report.passed
    assert report.rel_err > 0.1


def test_audit_rejects_inputs_beyond_the_oracle_budget():
    with pytest.raises(DimensionError):
        audit_layer(build_audit_layer("coupling", 8, 2, seed=0), np.zeros((40, 2)))


def test_gradient_audit_passes():
    report = gradient_audit(seed=0)
    assert report.passed, report
    assert report.n_params > 0


def test_small_suite_passes_and_finds_the_exponent():
    report = run_audit_suite(seeds=1, sizes=((4, 2), (8, 2)), gradient_seeds=1)
    assert report.passed
    document = report.to_dict()
    assert document["n_audits"] == len(AUDIT_KINDS) * 2 + 1
    assert document["exponent"]["verdict"] == "d"


def test_injected_fault_fails_the_suite():
    report = run_audit_suite(seeds=2, inject_fault=True, kinds=("ica-mmca",), sizes=((8, 2),), gradient_seeds=0)
    assert not report.passed


def test_exponent_verdict_without_distinguishing_sizes():
    assert exponent_verdict([])["verdict"] == "undetermined"


def test_default_grid_covers_every_token_and_feature_size():
    assert set(AUDIT_SIZES) == {(n, d) for n in (2, 4, 8, 16) for d in (2, 4)}
    assert all(n * d <= 64 for n, d in AUDIT_SIZES)


def test_imca_kinds_skip_odd_modality_halves():
    assert not audit_supported("ica-imca", 2, 2)
    assert not audit_supported("model-L2", 2, 4)
    assert not audit_supported("ica-imca", 6, 2)
    assert audit_supported("ica-mmca", 2, 2)
    assert audit_supported("baseline-glow_linear", 2, 4)
    assert not audit_supported("coupling", 16, 8)


def test_two_token_suite_runs_the_layers_that_fit():
    report = run_audit_suite(seeds=2, sizes=((2, 2),), gradient_seeds=0)
    assert report.passed
    assert {a.kind for a in report.audits} == set(AUDIT_KINDS) - {"ica-imca", "model-L1", "model-L2"}


def test_audit_sizes_adds_a_fitting_extra_size():
    assert audit_sizes() == AUDIT_SIZES
    assert audit_sizes((6, 2))[-1] == (6, 2)
    assert audit_sizes((8, 4)) == AUDIT_SIZES
    assert audit_sizes((32, 4)) == AUDIT_SIZES


@pytest.mark.parametrize("seed", range(4))
def test_coupling_audit_alternates_split_axes(seed):
    layer = build_audit_layer("coupling", 4, 2, seed)
    assert layer.split_axis == ("features", "tokens")[seed % 2]
    assert audit_layer(layer, np.random.default_rng(seed).normal(size=(4, 2)), kind="coupling").passed
