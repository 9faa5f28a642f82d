"""
Right-hand sides of the stochastic momentum models and the Navier-Stokes oracle
"""
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from app.services.basis_noise import BasisIndex, BasisTruncation, basis_field
from app.services.errors import VariantError
from app.services.spectral_core import (
    SOLENOIDAL_TOL,
    VectorField,
    directional_derivative,
    divergence,
    gradient,
    leray_project,
    norm_l2,
    transpose_gradient_product,
    vector_laplacian,
)


class Variant(str, Enum):
    V1_HAMILTONIAN = "V1_HAMILTONIAN"
    V2_PROJECTED = "V2_PROJECTED"
    H17_RAW = "H17_RAW"

    @property
    def keeps_solenoidal(self) -> bool:
        return self is not Variant.H17_RAW


@dataclass(frozen=True)
class ModelVariant:
    """
    One stochastic momentum model with viscosity η and its noise basis

    ν is derived from η through ν² c_K = 2η. `diffusion_enabled=False`
    zeroes every diffusion column while η stays in the drift;
    `line_stretching=False` drops the transpose-gradient terms of V1.
    Both switches exist for diagnostics only.
    """

    tag: Variant
    eta: float
    trunc: BasisTruncation
    diffusion_enabled: bool = True
    line_stretching: bool = True

    def __post_init__(self):
        if self.eta < 0:
            raise VariantError(f"viscosity must be non-negative, got {self.eta}")
        object.__setattr__(self, "tag", Variant(self.tag))

    @property
    def nominal_nu(self) -> float:
        return float(np.sqrt(2.0 * self.eta / self.trunc.c_K))

    @property
    def nu(self) -> float:
        return self.nominal_nu if self.diffusion_enabled else 0.0

    def noiseless(self) -> "ModelVariant":
        return replace(self, diffusion_enabled=False)

    def without_stretching(self) -> "ModelVariant":
        return replace(self, line_stretching=False)

    def with_tag(self, tag: Variant) -> "ModelVariant":
        return replace(self, tag=tag)

    def describe(self) -> dict:
        return {
            "variant": self.tag.value,
            "eta": self.eta,
            "nu": self.nu,
            "c_K": self.trunc.c_K,
            "epsilon_K": self.trunc.epsilon_K,
            "diffusion_enabled": self.diffusion_enabled,
            "line_stretching": self.line_stretching,
        }


def _require_solenoidal(xi: VectorField, variant: ModelVariant):
    if not variant.tag.keeps_solenoidal or xi.solenoidal:
        return
    scale = norm_l2(xi)
    defect = norm_l2(divergence(xi))
    if defect > SOLENOIDAL_TOL * max(scale, 1.0):
        raise VariantError(f"{variant.tag.value} needs a solenoidal field, divergence norm {defect:.3e}")


def ad_top(u: VectorField, xi: VectorField) -> VectorField:
    """ad⊤(u).ξ = −P(∇_u ξ + u′⊗ξ)"""
    return -leray_project(directional_derivative(u, xi) + transpose_gradient_product(u, xi))


def hat_operator(X: VectorField, xi: VectorField) -> VectorField:
    """X̂(ξ) = ∇_X ξ + X′⊗ξ for an arbitrary vector field X"""
    return directional_derivative(X, xi) + transpose_gradient_product(X, xi)


def hat_X(alpha: BasisIndex, xi: VectorField, trunc: BasisTruncation) -> VectorField:
    return hat_operator(basis_field(alpha, xi.grid, trunc.s), xi)


def hat_Y(alpha: BasisIndex, xi: VectorField, trunc: BasisTruncation) -> VectorField:
    return leray_project(hat_X(alpha, xi, trunc))


def lie_bracket(u: VectorField, xi: VectorField) -> VectorField:
    """[u, ξ] = ∇_ξ u − ∇_u ξ"""
    return directional_derivative(xi, u) - directional_derivative(u, xi)


def stratonovich_drift_v1(u: VectorField, xi: VectorField) -> VectorField:
    return ad_top(u, xi)


def ito_drift(variant: ModelVariant, u: VectorField, xi: VectorField) -> VectorField:
    """Ito drift of the chosen model, η·Δξ included"""
    _require_solenoidal(xi, variant)
    viscous = variant.eta * vector_laplacian(xi)
    if variant.tag is Variant.V1_HAMILTONIAN and variant.line_stretching:
        return leray_project(ad_top(u, xi) + viscous)
    advection = -leray_project(directional_derivative(u, xi))
    if variant.tag is Variant.H17_RAW:
        return advection - variant.eta * gradient(divergence(xi)) + viscous
    return leray_project(advection + viscous)


def diffusion_operator(variant: ModelVariant, X: VectorField, xi: VectorField) -> VectorField:
    """
    −ν times the model's noise operator applied with field X

    With X = Σ_α ΔW^α X_α this is the whole stochastic increment, since
    every model is linear in X.
    """
    if variant.tag is Variant.V1_HAMILTONIAN and variant.line_stretching:
        return -variant.nu * leray_project(hat_operator(X, xi))
    transported = directional_derivative(X, xi)
    if variant.tag is Variant.H17_RAW:
        return -variant.nu * transported
    return -variant.nu * leray_project(transported)


def diffusion_column(variant: ModelVariant, alpha: BasisIndex, xi: VectorField) -> VectorField:
    """Coefficient of dW^α"""
    _require_solenoidal(xi, variant)
    return diffusion_operator(variant, basis_field(alpha, xi.grid, variant.trunc.s), xi)


def diffusion_sum(variant: ModelVariant, W: VectorField, xi: VectorField) -> VectorField:
    """Σ_α diffusion_column(α, ξ)·ΔW^α for W = Σ_α ΔW^α X_α"""
    return diffusion_operator(variant, W, xi)


def ns_rhs(u: VectorField, eta: float) -> VectorField:
    """−P∇_u u + ηΔu"""
    return leray_project(-directional_derivative(u, u) + eta * vector_laplacian(u))
