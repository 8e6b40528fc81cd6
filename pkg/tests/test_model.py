import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eventfactor.model import (
    ConstraintMask,
    Mask,
    ModelError,
    ModelParams,
    PenaltyConfig,
    SigmaNotPD,
    apply_mask,
    canonicalize_scale,
    log_intensity,
    read_mask,
    read_params,
    scad_derivative,
    scad_penalty,
    soft_threshold,
    write_mask,
    write_params,
)


def small_params(K=2):
    return ModelParams(
        np.array([-1.0, 0.5]),
        [np.array([1.0, -2.0]), np.array([0.0, 3.0])],
        [np.array([[1.0, 0.0], [0.3, -0.4]]), np.array([[0.0, 1.0], [0.2, 0.0]])],
        np.array([[1.0, 0.2], [0.2, 1.0]])[:K, :K] if K == 2 else np.eye(K),
    )


def anchored_mask(mode="anchor_loadings"):
    mask = ConstraintMask.all_penalized([2, 2], [2, 2], 2, mode=mode)
    return mask.with_anchors([(0, 0, 0), (1, 0, 1)])


# ---------------------------------------------------------------------------
# log intensity


def test_log_intensity_zero_case():
    p = ModelParams(np.zeros(1), [np.zeros(2)], [np.zeros((2, 1))], np.eye(1))
    assert log_intensity(p, 0, np.zeros(2), np.zeros(2), np.zeros(1)) == 0.0


def test_log_intensity_baseline_only():
    # constant baseline -4 with empty covariates gives -4
    p = ModelParams(np.array([-4.0]), [np.zeros(2)], [np.zeros((2, 1))], np.eye(1))
    assert log_intensity(p, 0, np.zeros(2), np.zeros(2), np.zeros(1)) == -4.0


def test_log_intensity_single_effect():
    # baseline -7 plus one active covariate with coefficient 5 gives -2
    p = ModelParams(np.array([-7.0]), [np.array([5.0, 0.0])], [np.zeros((2, 1))], np.eye(1))
    value = log_intensity(p, 0, np.array([1.0, 0.0]), np.zeros(2), np.zeros(1))
    assert value == pytest.approx(-2.0, abs=1e-15)


def test_log_intensity_dimension_mismatch():
    p = small_params()
    with pytest.raises(Exception):
        log_intensity(p, 0, np.zeros(3), np.zeros(2), np.zeros(2))


# ---------------------------------------------------------------------------
# SCAD and soft threshold


def _scad_reference(x, gamma, a):
    # independent symbolic evaluation of the displayed derivative
    if x <= gamma:
        return gamma
    return max(a * gamma - x, 0.0) / (a - 1.0)


@pytest.mark.parametrize("gamma", [0.1, 1.0, 2.5])
@pytest.mark.parametrize("a", [2.1, 3.7, 10.0])
def test_scad_derivative_exhaustive_grid(gamma, a):
    xs = np.concatenate([
        np.linspace(0, (a + 1) * gamma, 97),
        [gamma, a * gamma, 0.0, 0.5 * gamma, 2 * gamma],
    ])
    for x in xs:
        assert scad_derivative(x, gamma, a) == pytest.approx(
            _scad_reference(x, gamma, a), abs=1e-15
        )


def test_scad_derivative_known_values():
    g = 0.7
    assert scad_derivative(0.5 * g, g) == g
    assert scad_derivative(3.7 * g, g) == 0.0
    assert scad_derivative(5 * g, g) == 0.0
    assert scad_derivative(2 * g, g, 3.7) == pytest.approx(g * 1.7 / 2.7, rel=1e-15)


def test_scad_derivative_rejects_negative():
    with pytest.raises(ModelError):
        scad_derivative(-0.1, 1.0)
    with pytest.raises(ModelError):
        scad_derivative(1.0, 0.0)


def test_scad_derivative_continuous_nonincreasing():
    g, a = 0.9, 3.7
    xs = np.linspace(1e-9, 5 * g, 2001)
    vals = scad_derivative(xs, g, a)
    assert np.all(np.diff(vals) <= 1e-12)
    for x0 in (g, a * g):
        eps = 1e-9
        assert abs(scad_derivative(x0 + eps, g, a) - scad_derivative(x0 - eps, g, a)) < 1e-6


def test_scad_penalty_is_integral_of_derivative():
    g, a = 0.8, 3.7
    xs = np.linspace(0, 5 * g, 41)
    for x in xs:
        grid = np.linspace(0, x, 20001)
        quad = np.trapezoid(scad_derivative(grid, g, a), grid) if x > 0 else 0.0
        assert scad_penalty(x, g, a) == pytest.approx(quad, abs=1e-6)


@pytest.mark.parametrize(
    "x,gamma,expected", [(3.0, 1.0, 2.0), (-0.5, 1.0, 0.0), (2.5, 0.0, 2.5), (-4.0, 1.5, -2.5)]
)
def test_soft_threshold_values(x, gamma, expected):
    assert soft_threshold(x, gamma) == expected


@settings(max_examples=60, deadline=None)
@given(
    st.floats(-5, 5, allow_nan=False),
    st.floats(0, 3, allow_nan=False),
)
def test_soft_threshold_minimizes_quadratic_plus_l1(x, gamma):
    u_star = soft_threshold(x, gamma)
    objective = lambda u: 0.5 * (u - x) ** 2 + gamma * abs(u)
    grid = np.linspace(-6, 6, 4801)
    best = grid[np.argmin([objective(u) for u in grid])]
    assert objective(u_star) <= objective(best) + 1e-9


# ---------------------------------------------------------------------------
# masks and anchoring


def test_apply_mask_sets_fixed_entries():
    p = small_params()
    mask = anchored_mask()
    p.loadings[0][0] = np.array([0.3, 0.7])
    out = apply_mask(p, mask)
    assert out.loadings[0][0, 0] == 1.0
    assert out.loadings[0][0, 1] == 0.0


def test_apply_mask_idempotent():
    p = small_params()
    mask = anchored_mask()
    once = apply_mask(p, mask)
    twice = apply_mask(once, mask)
    for a, b in zip(once.loadings, twice.loadings):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(once.sigma, twice.sigma)


def test_anchor_sigma_rescales_keeping_products():
    mask = anchored_mask(mode="anchor_sigma")
    p = ModelParams(
        np.zeros(2),
        [np.zeros(2), np.zeros(2)],
        [np.array([[2.0, 0.0], [0.3, -0.4]]), np.array([[0.0, 1.0], [0.2, 0.5]])],
        np.array([[4.0, 0.0], [0.0, 1.0]]),
    )
    out = apply_mask(p, mask)
    np.testing.assert_allclose(np.diag(out.sigma), [1.0, 1.0])
    # A Sigma A^T is the identified quantity: invariant for all type pairs
    for j1 in range(2):
        for j2 in range(2):
            before = p.loadings[j1] @ p.sigma @ p.loadings[j2].T
            after = out.loadings[j1] @ out.sigma @ out.loadings[j2].T
            np.testing.assert_allclose(after, before, rtol=1e-12)
    # first loading column absorbed the scale sqrt(4) = 2
    assert out.loadings[0][0, 0] == pytest.approx(4.0)


def test_diag_sigma_example_doubling():
    # Sigma = diag(4, 1) rescales to the identity and doubles column one
    mask = anchored_mask(mode="anchor_sigma")
    p = ModelParams(
        np.zeros(2),
        [np.zeros(2), np.zeros(2)],
        [np.array([[1.0, 0.0], [0.5, 0.2]]), np.array([[0.0, 1.0], [0.1, 0.0]])],
        np.diag([4.0, 1.0]),
    )
    out = apply_mask(p, mask)
    np.testing.assert_allclose(out.sigma, np.eye(2))
    np.testing.assert_allclose(out.loadings[0][:, 0], p.loadings[0][:, 0] * 2.0)


def test_canonicalize_fixes_negative_anchor_sign():
    mask = anchored_mask(mode="anchor_sigma")
    p = ModelParams(
        np.zeros(2),
        [np.zeros(2), np.zeros(2)],
        [np.array([[-2.0, 0.0], [0.3, -0.4]]), np.array([[0.0, 1.0], [0.2, 0.5]])],
        np.array([[1.0, -0.3], [-0.3, 1.0]]),
    )
    out, mult = canonicalize_scale(p, mask)
    assert out.loadings[0][0, 0] == 2.0
    assert out.sigma[0, 1] == pytest.approx(0.3)
    # theta transform preserves every A theta product
    theta = np.array([0.7, -1.1])
    for j in range(2):
        np.testing.assert_allclose(
            out.loadings[j] @ (theta * mult), p.loadings[j] @ theta, rtol=1e-12
        )


def test_anchor_loadings_identity_submatrix_required():
    with pytest.raises(ModelError):
        ConstraintMask.all_penalized([2], [2], 2, mode="anchor_loadings").with_anchors(
            [(0, 0, 0)]
        )


def test_mask_beta_cannot_be_fixed_one():
    with pytest.raises(ModelError):
        ConstraintMask(
            (np.array([Mask.ONE], np.int8),),
            (np.full((1, 1), Mask.ONE, np.int8),),
            "anchor_loadings",
        )


def test_penalty_config_validation():
    with pytest.raises(ModelError):
        PenaltyConfig(a=2.0)
    with pytest.raises(ModelError):
        PenaltyConfig(gamma1=-0.1)
    assert PenaltyConfig().a == 3.7


def test_sigma_must_be_pd_for_chol():
    p = ModelParams(np.zeros(1), [np.zeros(1)], [np.zeros((1, 2))],
                    np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SigmaNotPD):
        p.sigma_chol()


# ---------------------------------------------------------------------------
# parameter and mask files


def test_params_file_round_trip():
    p = small_params()
    text = write_params(p, ["alpha", "beta"])
    q, labels = read_params(text)
    assert labels == ["alpha", "beta"]
    np.testing.assert_array_equal(q.beta0, p.beta0)
    for a, b in zip(q.beta, p.beta):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(q.loadings, p.loadings):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(q.sigma, p.sigma)


def test_mask_file_round_trip():
    mask = anchored_mask(mode="anchor_sigma")
    text = write_mask(mask, ["a", "b"])
    mask2, labels = read_mask(text)
    assert labels == ["a", "b"]
    assert mask2.mode == "anchor_sigma"
    for a, b in zip(mask.beta, mask2.beta):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(mask.loadings, mask2.loadings):
        np.testing.assert_array_equal(a, b)
