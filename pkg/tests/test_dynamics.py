import numpy as np
import pytest

from app.services.basis_noise import BasisTruncation, basis_field
from app.services.dynamics import (
    ModelVariant,
    Variant,
    diffusion_column,
    diffusion_operator,
    hat_X,
    hat_operator,
    hat_Y,
    ito_drift,
    lie_bracket,
    ns_rhs,
    stratonovich_drift_v1,
)
from app.services.errors import VariantError
from app.services.initial_conditions import random_band, random_scalar
from app.services.spectral_core import (
    GridSpec,
    ScalarField,
    VectorField,
    divergence,
    gradient,
    inner_product_l2,
    leray_project,
    norm_l2,
    transpose_gradient_product,
    vector_laplacian,
)


@pytest.fixture
def trunc_k2():
    return BasisTruncation(2, 2, 3.0)


def test_nu_from_eta(trunc_k1):
    variant = ModelVariant(Variant.V1_HAMILTONIAN, 0.05, trunc_k1)
    assert variant.nu == pytest.approx(np.sqrt(0.05))
    assert variant.noiseless().nu == 0.0
    assert variant.noiseless().eta == 0.05
    with pytest.raises(VariantError):
        ModelVariant(Variant.V2_PROJECTED, -1.0, trunc_k1)


def test_variant_tags_parse_from_strings(trunc_k1):
    assert ModelVariant("H17_RAW", 0.1, trunc_k1).tag is Variant.H17_RAW
    assert not Variant.H17_RAW.keeps_solenoidal


def test_taylor_green_is_a_steady_euler_flow(tg16):
    np.testing.assert_allclose(ns_rhs(tg16, 0.05).components, -0.1 * tg16.components, atol=1e-12)


def test_bracket_is_antisymmetric(smooth_field, grid32):
    other = random_band(grid32, band=3, seed=11)
    total = lie_bracket(smooth_field, other) + lie_bracket(other, smooth_field)
    assert norm_l2(total) <= 1e-12 * norm_l2(smooth_field) * norm_l2(other)


def test_hat_operator_maps_gradients_to_gradients(grid32, trunc_k2):
    f = ScalarField(grid32, random_scalar(grid32, band=3, seed=3))
    grad = gradient(f)
    for alpha in trunc_k2.indices[:6]:
        X = basis_field(alpha, grid32, trunc_k2.s)
        image = hat_operator(X, grad)
        assert norm_l2(leray_project(image)) <= 1e-10 * norm_l2(image) + 1e-14


def test_diffusion_columns_differ_by_stretching(smooth_field, trunc_k2):
    v1 = ModelVariant(Variant.V1_HAMILTONIAN, 0.05, trunc_k2)
    v2 = v1.with_tag(Variant.V2_PROJECTED)
    for alpha in trunc_k2.indices:
        X = basis_field(alpha, smooth_field.grid, trunc_k2.s)
        difference = diffusion_column(v1, alpha, smooth_field) - diffusion_column(v2, alpha, smooth_field)
        expected = -v1.nu * leray_project(transpose_gradient_product(X, smooth_field))
        assert norm_l2(difference - expected) <= 1e-12 * norm_l2(smooth_field)


def test_projected_transport_is_energy_neutral(smooth_field, trunc_k2):
    v2 = ModelVariant(Variant.V2_PROJECTED, 0.05, trunc_k2)
    scale = norm_l2(smooth_field) ** 2
    for alpha in trunc_k2.indices:
        column = diffusion_column(v2, alpha, smooth_field)
        assert abs(inner_product_l2(smooth_field, column)) <= 1e-12 * scale


def test_drift_and_columns_stay_solenoidal(smooth_field, trunc_k2):
    u = random_band(smooth_field.grid, band=2, seed=5)
    for tag in (Variant.V1_HAMILTONIAN, Variant.V2_PROJECTED):
        variant = ModelVariant(tag, 0.05, trunc_k2)
        scale = norm_l2(smooth_field)
        assert norm_l2(divergence(ito_drift(variant, u, smooth_field))) <= 1e-10 * scale
        for alpha in trunc_k2.indices:
            assert norm_l2(divergence(diffusion_column(variant, alpha, smooth_field))) <= 1e-10 * scale


def test_diffusion_is_linear_in_the_noise_field(smooth_field, trunc_k2, rng):
    variant = ModelVariant(Variant.V1_HAMILTONIAN, 0.05, trunc_k2)
    weights = rng.standard_normal(len(trunc_k2))
    W = VectorField.zeros(smooth_field.grid)
    total = VectorField.zeros(smooth_field.grid)
    for weight, alpha in zip(weights, trunc_k2.indices):
        W = W + float(weight) * basis_field(alpha, smooth_field.grid, trunc_k2.s)
        total = total + float(weight) * diffusion_column(variant, alpha, smooth_field)
    assert norm_l2(diffusion_operator(variant, W, smooth_field) - total) <= 1e-12 * norm_l2(total)


def test_models_require_solenoidal_momentum(grid16, v1_k1):
    xi = VectorField.from_function(grid16, lambda x, y: (np.sin(x), 0 * y))
    with pytest.raises(VariantError):
        ito_drift(v1_k1, VectorField.zeros(grid16), xi)
    raw = v1_k1.with_tag(Variant.H17_RAW)
    assert ito_drift(raw, VectorField.zeros(grid16), xi).is_finite()


def test_line_stretching_switch(smooth_field, trunc_k2):
    u = random_band(smooth_field.grid, band=2, seed=5)
    full = ModelVariant(Variant.V1_HAMILTONIAN, 0.05, trunc_k2)
    dropped = full.without_stretching()
    difference = ito_drift(full, u, smooth_field) - ito_drift(dropped, u, smooth_field)
    expected = -leray_project(transpose_gradient_product(u, smooth_field))
    assert norm_l2(difference - expected) <= 1e-12 * norm_l2(smooth_field)


def test_ito_drift_of_taylor_green(tg16, v1_k1):
    # transport of TG by itself is a pure gradient, leaving η·Δξ = −2ηξ
    drift = ito_drift(v1_k1, tg16, tg16)
    np.testing.assert_allclose(drift.components, -2 * v1_k1.eta * tg16.components, atol=1e-12)


def test_ito_drift_without_velocity_is_heat_flow(smooth_field, trunc_k2):
    heat = 0.05 * vector_laplacian(smooth_field)
    for tag in (Variant.V1_HAMILTONIAN, Variant.V2_PROJECTED):
        variant = ModelVariant(tag, 0.05, trunc_k2)
        drift = ito_drift(variant, VectorField.zeros(smooth_field.grid), smooth_field)
        assert norm_l2(drift - heat) <= 1e-12 * norm_l2(heat)


def test_ito_and_stratonovich_drifts_differ_by_viscosity(smooth_field, trunc_k2):
    u = random_band(smooth_field.grid, band=2, seed=5)
    variant = ModelVariant(Variant.V1_HAMILTONIAN, 0.05, trunc_k2)
    difference = ito_drift(variant, u, smooth_field) - stratonovich_drift_v1(u, smooth_field)
    expected = 0.05 * vector_laplacian(smooth_field)
    assert norm_l2(difference - expected) <= 1e-12 * norm_l2(smooth_field)


def test_navier_stokes_energy_balance(smooth_field):
    """⟪u, rhs⟫ = −η‖∇u‖²"""
    eta = 0.05
    rate = inner_product_l2(smooth_field, ns_rhs(smooth_field, eta))
    expected = eta * inner_product_l2(smooth_field, vector_laplacian(smooth_field))
    assert expected < 0
    assert rate == pytest.approx(expected, rel=1e-10)


def _generator_gap(xi: VectorField, trunc: BasisTruncation):
    total = VectorField.zeros(xi.grid)
    for alpha in trunc.indices:
        total = total + hat_Y(alpha, hat_Y(alpha, xi, trunc), trunc)
    target = trunc.c_K * vector_laplacian(leray_project(xi))
    return norm_l2(total - target), norm_l2(vector_laplacian(xi))


def test_truncated_generator_is_a_laplacian():
    """Σ_α Ŷ_αŶ_αξ = c_K ΔPξ when the shells are isotropic"""
    grid = GridSpec(2, 32)
    trunc = BasisTruncation(2, 4, 3.0)
    for seed in range(3):
        xi = random_band(grid, band=3, seed=seed)
        gap, scale = _generator_gap(xi, trunc)
        assert gap <= (trunc.epsilon_K * trunc.c_K + 1e-8) * scale


def test_unprojected_generator_is_a_laplacian():
    """Σ_α X̂_αX̂_αξ = c_K Δξ on isotropic shells"""
    grid = GridSpec(2, 32)
    trunc = BasisTruncation(2, 4, 3.0)
    xi = random_band(grid, band=3, seed=4)
    total = VectorField.zeros(grid)
    for alpha in trunc.indices:
        total = total + hat_X(alpha, hat_X(alpha, xi, trunc), trunc)
    laplacian = vector_laplacian(xi)
    assert norm_l2(total - trunc.c_K * laplacian) <= (trunc.epsilon_K * trunc.c_K + 1e-8) * norm_l2(laplacian)


@pytest.mark.slow
def test_truncated_generator_at_cutoff_eight():
    grid = GridSpec(2, 64)
    trunc = BasisTruncation(2, 8, 3.0)
    for seed in range(20):
        xi = random_band(grid, band=4, seed=100 + seed)
        gap, scale = _generator_gap(xi, trunc)
        assert gap <= (trunc.epsilon_K * trunc.c_K + 1e-8) * scale
