import numpy as np
import pytest

from app.services.basis_noise import (
    COSINE,
    SINE,
    BasisIndex,
    BasisTruncation,
    NoiseStream,
    basis_audit,
    basis_field,
    enumerate_indices,
    noise_at_points,
    noise_field,
    perp_frame,
    sample_increments,
)
from app.services.errors import TruncationError
from app.services.initial_conditions import random_band
from app.services.spectral_core import (
    GridSpec,
    VectorField,
    directional_derivative,
    divergence,
    evaluate_at,
    norm_l2,
    transpose_gradient_product,
    vector_laplacian,
)


def test_enumeration_for_unit_cutoff():
    indices = enumerate_indices(2, 1)
    assert len(indices) == 6
    assert sum(alpha.is_constant for alpha in indices) == 2
    assert {alpha.k for alpha in indices if not alpha.is_constant} == {(1, 0), (0, 1)}


def test_invalid_indices():
    with pytest.raises(TruncationError):
        enumerate_indices(2, 0)
    with pytest.raises(TruncationError):
        BasisIndex(COSINE, (-1, 0), 1)
    with pytest.raises(TruncationError):
        BasisIndex(SINE, (1, 0), 2)
    with pytest.raises(TruncationError):
        BasisTruncation(2, 2, 2.0)


def test_constants_for_unit_cutoff():
    trunc = BasisTruncation(2, 1, 3.0)
    assert trunc.c_K == pytest.approx(2.0, abs=1e-14)
    assert trunc.epsilon_K == pytest.approx(0.0, abs=1e-14)
    trunc3 = BasisTruncation(3, 1, 3.0)
    assert trunc3.c_K == pytest.approx(3.0, abs=1e-14)
    assert trunc3.epsilon_K == pytest.approx(0.0, abs=1e-14)


def test_perp_frame_is_orthogonal():
    for k in [(1, 0, 0), (1, -2, 3), (0, 0, 2)]:
        frame = perp_frame(k)
        norm_k = np.linalg.norm(k)
        np.testing.assert_allclose(frame @ np.asarray(k, dtype=float), 0.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(frame, axis=1), norm_k, rtol=1e-12)
        assert abs(frame[0] @ frame[1]) <= 1e-12


def test_two_dimensional_shells_are_isotropic():
    trunc = BasisTruncation(2, 4, 3.0)
    assert trunc.epsilon_K <= 1e-12
    np.testing.assert_allclose(trunc.diffusion_tensor(), trunc.c_K * np.eye(2), atol=1e-12)


def test_basis_identities():
    """div X_α = 0 and ∇_{X_α}X_α = 0 for every index"""
    grid = GridSpec(2, 32)
    trunc = BasisTruncation(2, 4, 3.0)
    for alpha in trunc.indices:
        X = basis_field(alpha, grid, trunc.s)
        assert norm_l2(divergence(X)) <= 1e-12
        assert norm_l2(directional_derivative(X, X)) <= 1e-12


def test_pointwise_sum_reproduces_diffusion_tensor(rng):
    """Σ_α X_α(x)X_α(x)ᵀ = D_K at every point: each cosine/sine pair adds up to a constant"""
    trunc = BasisTruncation(2, 4, 3.0)
    points = rng.uniform(0, 2 * np.pi, size=(20, 2))
    values = trunc.values_at(points)
    tensors = np.einsum("api,apj->pij", values, values)
    for tensor in tensors:
        np.testing.assert_allclose(tensor, trunc.diffusion_tensor(), atol=1e-10)


def test_sampled_fields_match_single_fields(grid16):
    trunc = BasisTruncation(2, 2, 3.0)
    sampled = trunc.sampled_fields(grid16)
    assert sampled.shape == (len(trunc), 2, 16, 16)
    for ordinal, alpha in enumerate(trunc.indices):
        np.testing.assert_allclose(sampled[ordinal], basis_field(alpha, grid16, trunc.s).components, atol=1e-14)
    with pytest.raises(TruncationError):
        trunc.sampled_fields(GridSpec(3, 8))


def test_noise_stream_is_addressed_not_sequential():
    stream = NoiseStream(42)
    first = stream.normals(3, 10, 5)
    np.testing.assert_array_equal(first, NoiseStream(42).normals(3, 10, 5))
    assert stream.normal(3, 2, 10) == first[2]
    assert not np.array_equal(first, stream.normals(4, 10, 5))
    assert not np.array_equal(first, stream.normals(3, 11, 5))
    assert not np.array_equal(first, NoiseStream(43).normals(3, 10, 5))


def test_increments_have_brownian_variance():
    stream = NoiseStream(0)
    draws = np.stack([sample_increments(stream, 0, step, 0.01, 4) for step in range(2000)])
    assert abs(draws.mean()) < 4 * np.sqrt(0.01 / draws.size)
    assert draws.var() == pytest.approx(0.01, rel=0.1)


def test_coarse_increments_sum_fine_ones():
    stream = NoiseStream(5)
    coarse = sample_increments(stream, 2, 3, 2e-3, 6, substeps=2)
    fine = sample_increments(stream, 2, 6, 1e-3, 6) + sample_increments(stream, 2, 7, 1e-3, 6)
    np.testing.assert_allclose(coarse, fine, rtol=1e-14, atol=1e-16)
    with pytest.raises(TruncationError):
        sample_increments(stream, 0, 0, 0.0, 6)


def test_noise_at_points_agrees_with_grid_field(grid16, rng):
    trunc = BasisTruncation(2, 2, 3.0)
    increments = sample_increments(NoiseStream(1), 0, 0, 1e-2, len(trunc))
    points = rng.uniform(0, 2 * np.pi, size=(30, 2))
    on_grid = evaluate_at(noise_field(trunc, grid16, increments), points)
    np.testing.assert_allclose(noise_at_points(trunc, increments, points), on_grid, atol=1e-12)


def test_basis_audit_report(grid16):
    trunc = BasisTruncation(2, 1, 3.0)
    report = basis_audit(trunc, grid16)
    assert list(report.columns) == ["alpha", "a", "k", "i", "div_norm", "self_advection_norm"]
    assert len(report) == len(trunc)
    assert report.attrs["c_K"] == pytest.approx(2.0)
    assert report.attrs["epsilon_K"] == pytest.approx(0.0, abs=1e-14)
    assert report["div_norm"].max() <= 1e-12


def _wave_pairs(trunc):
    for alpha in trunc.indices:
        if alpha.a == COSINE:
            yield alpha, BasisIndex(SINE, alpha.k, alpha.i)


def test_stretching_transport_cancels_in_each_pair():
    """∇_A(A′⊗ξ) + ∇_B(B′⊗ξ) = 0 for the cosine/sine fields of one (k, i)"""
    grid = GridSpec(2, 32)
    trunc = BasisTruncation(2, 4, 3.0)
    xi = random_band(grid, band=3, seed=5)
    total = VectorField.zeros(grid)
    for cos_alpha, sin_alpha in _wave_pairs(trunc):
        A = basis_field(cos_alpha, grid, trunc.s)
        B = basis_field(sin_alpha, grid, trunc.s)
        pair = (directional_derivative(A, transpose_gradient_product(A, xi))
                + directional_derivative(B, transpose_gradient_product(B, xi)))
        assert norm_l2(pair) <= 1e-10 * norm_l2(xi)
        total = total + pair
    assert norm_l2(total) <= 1e-10 * norm_l2(xi)


def test_truncated_laplacian():
    """Σ_α ∇_{X_α}∇_{X_α}ξ = (Δ + Σ |k|^(−2s−2)(k⊥·∇)²)ξ, which is c_K Δξ on isotropic shells"""
    grid = GridSpec(2, 32)
    trunc = BasisTruncation(2, 4, 3.0)
    xi = random_band(grid, band=3, seed=6)
    lhs = VectorField.zeros(grid)
    for alpha in trunc.indices:
        X = basis_field(alpha, grid, trunc.s)
        lhs = lhs + directional_derivative(X, directional_derivative(X, xi))
    rhs = vector_laplacian(xi)
    for k in {alpha.k for alpha in trunc.indices if not alpha.is_constant}:
        weight = float(np.dot(k, k)) ** (-trunc.s - 1)
        for v in perp_frame(k):
            V = VectorField.constant(grid, v)
            rhs = rhs + weight * directional_derivative(V, directional_derivative(V, xi))
    assert norm_l2(lhs - rhs) <= 1e-10 * norm_l2(xi)
    laplacian = vector_laplacian(xi)
    assert norm_l2(rhs - trunc.c_K * laplacian) <= (trunc.epsilon_K * trunc.c_K + 1e-10) * norm_l2(laplacian)
