"""
Energy identities: deterministic and Monte Carlo energies, dissipation rates,
the V1 non-dissipation terms and the interacting-particle energy balance
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.linear_model import LinearRegression

from app.services.basis_noise import BasisTruncation, NoiseStream, basis_field
from app.services.dynamics import ModelVariant, Variant, hat_operator, lie_bracket
from app.services.errors import ConfigError
from app.services.sde_engine import Coupling, Ensemble, step_ips
from app.services.spectral_core import (
    GridSpec,
    VectorField,
    directional_derivative,
    divergence,
    fft,
    gradient_part,
    inner_product_l2,
    norm_l2,
    transpose_gradient_product,
    wavenumbers,
)

logger = logging.getLogger(__name__)

ParticleSet = Union[VectorField, Ensemble, Sequence[VectorField]]


def l2_error(a: VectorField, b: VectorField) -> float:
    return norm_l2(a - b)


def relative_l2_error(a: VectorField, b: VectorField) -> float:
    scale = norm_l2(b)
    return l2_error(a, b) / scale if scale > 0 else l2_error(a, b)


def divergence_norm(v: VectorField) -> float:
    return norm_l2(divergence(v))


def energy(v: VectorField) -> float:
    """½⟪v, v⟫"""
    return 0.5 * inner_product_l2(v, v)


def _fields(particles: ParticleSet) -> List[VectorField]:
    if isinstance(particles, VectorField):
        return [particles]
    if isinstance(particles, Ensemble):
        return particles.fields
    return list(particles)


def ensemble_average(fn: Callable[[VectorField], float], particles: ParticleSet) -> Tuple[float, float]:
    """Sample mean of fn over particles and its standard error"""
    values = np.array([fn(xi) for xi in _fields(particles)])
    if len(values) < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(len(values)))


def _wave_fields(trunc: BasisTruncation, grid: GridSpec) -> List[VectorField]:
    """Non-constant basis fields; constant fields never contribute to pressure terms"""
    return [basis_field(alpha, grid, trunc.s) for alpha in trunc.indices if not alpha.is_constant]


def gradient_energy(xi: VectorField) -> float:
    """⟪∇ξ, ∇ξ⟫ = (2π)^n Σ_k |k|² |ξ̂_k|²"""
    grid = xi.grid
    coeffs = fft(xi.components, grid)
    return float(grid.volume * np.sum(wavenumbers(grid).k2 * np.abs(coeffs) ** 2))


def anisotropic_gradient_energy(xi: VectorField, tensor: np.ndarray) -> float:
    """⟪∇ξ, D∇ξ⟫ = (2π)^n Σ_k kᵀDk |ξ̂_k|²"""
    grid = xi.grid
    wn = wavenumbers(grid)
    coeffs = fft(xi.components, grid)
    quadratic = np.einsum("a...,ab,b...->...", wn.k, tensor, wn.k)
    return float(grid.volume * np.sum(quadratic * np.abs(coeffs) ** 2))


def v2_dissipation_rate(xi: VectorField, variant: ModelVariant) -> float:
    """
    −(ν²/2) Σ_α ⟪∇q^α, ∇q^α⟫ with ∇q^α the gradient part of ∇_{X_α}ξ

    ν is the model value, so a noiseless diagnostic variant gives 0.
    """
    nu = variant.nu
    total = 0.0
    for X in _wave_fields(variant.trunc, xi.grid):
        part = gradient_part(directional_derivative(X, xi))
        total += inner_product_l2(part, part)
    return -0.5 * nu ** 2 * total


def v2_dissipation_bound(u: VectorField, variant: ModelVariant) -> float:
    """The V2 rate evaluated at the mean field; by Jensen the ensemble rate lies below it"""
    return v2_dissipation_rate(u, variant)


def truncation_defect(xi: VectorField, variant: ModelVariant) -> float:
    """(ν²/2)⟪∇ξ, D_K∇ξ⟫ − η⟪∇ξ, ∇ξ⟫; zero when D_K is isotropic"""
    nu = variant.nu
    return 0.5 * nu ** 2 * anisotropic_gradient_energy(xi, variant.trunc.diffusion_tensor()) \
        - variant.eta * gradient_energy(xi)


def stretching_direct(xi: VectorField, trunc: BasisTruncation) -> float:
    """Σ_α ⟪X_α′⊗ξ, X_α′⊗ξ⟫ over the wave fields"""
    total = 0.0
    for X in _wave_fields(trunc, xi.grid):
        stretched = transpose_gradient_product(X, xi)
        total += inner_product_l2(stretched, stretched)
    return total


def stretching_closed_form(xi: VectorField, trunc: BasisTruncation) -> float:
    """Σ_{k∈ℤ_n^+, |k|≤K} |k|^{−2s} (|k|² tr M − kᵀMk) with M_ij = ∫ ξ_i ξ_j"""
    grid = xi.grid
    flat = xi.components.reshape(grid.n, -1)
    M = flat @ flat.T * grid.cell_volume
    total = 0.0
    seen = set()
    for alpha in trunc.indices:
        if alpha.is_constant or alpha.k in seen:
            continue
        seen.add(alpha.k)
        k = np.asarray(alpha.k, dtype=float)
        k2 = float(k @ k)
        total += k2 ** (-trunc.s) * (k2 * np.trace(M) - k @ M @ k)
    return float(total)


def pressure_energy(xi: VectorField, trunc: BasisTruncation, with_stretching: bool = True) -> float:
    """Σ_α ⟪∇f_α, ∇f_α⟫, ∇f_α the gradient part of X̂_α(ξ) (or of ∇_{X_α}ξ)"""
    total = 0.0
    for X in _wave_fields(trunc, xi.grid):
        image = hat_operator(X, xi) if with_stretching else directional_derivative(X, xi)
        part = gradient_part(image)
        total += inner_product_l2(part, part)
    return total


@dataclass
class NonDissipationTerms:
    bracket: float
    stretching: float
    pressure: float
    truncation: float

    @property
    def total(self) -> float:
        return self.bracket + self.stretching + self.pressure + self.truncation


def v1_nondissipation_terms(xi: VectorField, u: VectorField, variant: ModelVariant) -> NonDissipationTerms:
    """
    Drift of ½⟪ξ, ξ⟫ under the V1 Ito equation, split into
    −⟪ξ, [u, ξ]⟫, (ν²/2)Σ‖X_α′⊗ξ‖², −(ν²/2)Σ‖∇f_α‖² and the truncation defect
    """
    nu = variant.nu
    trunc = variant.trunc
    return NonDissipationTerms(
        bracket=-inner_product_l2(xi, lie_bracket(u, xi)),
        stretching=0.5 * nu ** 2 * stretching_closed_form(xi, trunc),
        pressure=-0.5 * nu ** 2 * pressure_energy(xi, trunc, with_stretching=True),
        truncation=truncation_defect(xi, variant),
    )


def v2_energy_drift(xi: VectorField, variant: ModelVariant) -> float:
    """Drift of ½⟪ξ, ξ⟫ under V2: the dissipation rate plus the truncation defect"""
    return v2_dissipation_rate(xi, variant) + truncation_defect(xi, variant)


def pathwise_energy_increment(xi: VectorField, u: VectorField, W: VectorField, dt: float, nu: float) -> float:
    """
    Stratonovich increment of ½⟪ξ, ξ⟫ under V1: −⟪ξ, [u, ξ]⟫dt − ν⟪ξ, [W, ξ]⟫

    With W = Σ_α ΔW^α X_α the second part is the noise-driven change;
    it vanishes only when every ⟪ξ, X_α′⊗ξ⟫ does.
    """
    return -inner_product_l2(xi, lie_bracket(u, xi)) * dt - nu * inner_product_l2(xi, lie_bracket(W, xi))


# ---------------------------------------------------------------------------
# interacting particle identities
# ---------------------------------------------------------------------------

@dataclass
class IdentityTerms:
    cross: float
    stretching: float
    pressure: float
    truncation: float

    @property
    def total(self) -> float:
        return self.cross + self.stretching + self.pressure + self.truncation


def ips_energy_identity_formula(ens: Ensemble) -> IdentityTerms:
    """
    Drift of H₀(u^N) = ½⟪u^N, u^N⟫ predicted from the current particles

    V1: −(η/N²)Σ_{i≠j}⟪∇ξ^i,∇ξ^j⟫ + (ν²/2N²)Σ_{α,i}(‖X_α′⊗ξ^i‖² − ‖∇f_α^i‖²);
    V2: the same without the stretching sum and with ∇f_α from ∇_{X_α}ξ^i.
    Both carry the truncation defect (1/N²)Σ_i defect(ξ^i).
    """
    variant = ens.variant
    tag = variant.tag
    if tag is Variant.H17_RAW:
        raise ConfigError("model.variant", "the particle energy identity is defined for V1 and V2")
    count = len(ens)
    nu = variant.nu
    trunc = variant.trunc
    fields = ens.fields
    sum_field = VectorField(ens.grid, np.sum(ens.particles, axis=0))
    cross = gradient_energy(sum_field) - sum(gradient_energy(xi) for xi in fields)
    stretching = 0.0
    if tag is Variant.V1_HAMILTONIAN:
        stretching = 0.5 * nu ** 2 * sum(stretching_closed_form(xi, trunc) for xi in fields) / count ** 2
    pressure = -0.5 * nu ** 2 * sum(
        pressure_energy(xi, trunc, with_stretching=tag is Variant.V1_HAMILTONIAN) for xi in fields) / count ** 2
    truncation = sum(truncation_defect(xi, variant) for xi in fields) / count ** 2
    return IdentityTerms(-variant.eta * cross / count ** 2, stretching, pressure, truncation)


@dataclass
class IdentityResidual:
    drift_estimate: float
    standard_error: float
    formula: float
    seeds: int

    @property
    def residual(self) -> float:
        return abs(self.drift_estimate - self.formula)

    @property
    def within_tolerance(self) -> bool:
        return self.residual <= 3.0 * self.standard_error + 1e-12 * max(abs(self.formula), 1.0)


def ips_energy_identity_residual(ens: Ensemble, dt: float, seeds: Sequence[int], workers: int = 1) -> IdentityResidual:
    """
    Finite-difference drift of H₀(u^N) averaged over independent one-step
    continuations, compared with ips_energy_identity_formula
    """
    if ens.coupling is not Coupling.IPS:
        raise ConfigError("model.coupling", "the particle energy identity needs IPS coupling")
    start = energy(ens.mean())
    rates = []
    for seed in seeds:
        stepped = step_ips(Ensemble(ens.grid, ens.particles, ens.variant, NoiseStream(seed), ens.coupling,
                                    ens.t, ens.step, ens.particle_ids, ens.substeps), dt, workers)
        rates.append((energy(stepped.mean()) - start) / dt)
    rates = np.asarray(rates)
    stderr = float(rates.std(ddof=1) / np.sqrt(len(rates))) if len(rates) > 1 else 0.0
    formula = ips_energy_identity_formula(ens).total
    return IdentityResidual(float(rates.mean()), stderr, formula, len(rates))


# ---------------------------------------------------------------------------
# reports and trend fits
# ---------------------------------------------------------------------------

@dataclass
class EnergyReport:
    t: float
    E_d: float
    E_s_hat: float
    stderr: float
    E_d_of_mean: float
    divergence_max: float
    terms: Dict[str, float] = field(default_factory=dict)

    @property
    def jensen_gap(self) -> float:
        return self.E_s_hat - self.E_d_of_mean

    def as_row(self) -> Dict[str, float]:
        row = asdict(self)
        row.update(row.pop("terms"))
        return row


def energy_report(t: float, particles: ParticleSet, reference: Optional[VectorField] = None,
                  terms: Optional[Dict[str, float]] = None) -> EnergyReport:
    """
    Energies at one output time

    E_d is the energy of `reference` when given, otherwise of the
    empirical mean; E_d_of_mean always uses the empirical mean.
    """
    fields = _fields(particles)
    E_s_hat, stderr = ensemble_average(energy, fields)
    values = np.stack([xi.components for xi in fields])
    mean = VectorField(fields[0].grid, values.mean(axis=0))
    E_d_of_mean = energy(mean)
    E_d = energy(reference) if reference is not None else E_d_of_mean
    divergence_max = max(divergence_norm(xi) for xi in fields)
    return EnergyReport(t, E_d, E_s_hat, stderr, E_d_of_mean, divergence_max, dict(terms or {}))


def energy_slope(times: Sequence[float], energies: Sequence[float]) -> Tuple[float, float]:
    """Least-squares slope of energy against time and its standard error"""
    X = np.asarray(times, dtype=float).reshape(-1, 1)
    y = np.asarray(energies, dtype=float)
    model = LinearRegression()
    model.fit(X, y)
    slope = float(model.coef_[0])
    if len(y) < 3:
        return slope, 0.0
    residuals = y - model.predict(X)
    spread = np.sum((X[:, 0] - X[:, 0].mean()) ** 2)
    stderr = float(np.sqrt(np.sum(residuals ** 2) / (len(y) - 2) / spread))
    return slope, stderr
