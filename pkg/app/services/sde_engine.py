"""
Time integration: deterministic reference, interacting particles, mean-field
Monte Carlo, Heun stepping for the Hamiltonian model, and Picard iteration
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from sklearn.linear_model import LinearRegression
from tqdm import tqdm

from app.config import ENERGY_GROWTH_LIMIT, SPECTRAL_TAIL_LIMIT, SPECTRAL_TAIL_WARNING
from app.services.basis_noise import NoiseStream, max_basis_speed, noise_field, sample_increments
from app.services.dynamics import (
    ModelVariant,
    Variant,
    diffusion_sum,
    ito_drift,
    ns_rhs,
    stratonovich_drift_v1,
)
from app.services.errors import BlowUpError, ConfigError, VariantError
from app.services.spectral_core import (
    GridSpec,
    VectorField,
    fft,
    ifft,
    leray_project,
    norm_l2,
    vector_laplacian,
    wavenumbers,
)

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 8


class Coupling(str, Enum):
    IPS = "ips"
    PRESCRIBED = "prescribed"


def parallel_map(work: Callable[[range], List], count: int, workers: int = 1,
                 chunk_size: int = DEFAULT_CHUNK_SIZE) -> List:
    """
    Apply `work` to fixed consecutive blocks of item indices

    Blocks do not depend on `workers`, and each item is processed on its
    own, so the concatenated result is the same for any worker count.
    """
    blocks = [range(start, min(start + chunk_size, count)) for start in range(0, count, chunk_size)]
    if workers <= 1 or len(blocks) <= 1:
        chunks = [work(block) for block in blocks]
    else:
        chunks = Parallel(n_jobs=workers, prefer="threads")(delayed(work)(block) for block in blocks)
    return [item for chunk in chunks for item in chunk]


def pairwise_sum(stack: np.ndarray) -> np.ndarray:
    """Sum over the leading axis by recursive halving; the tree depends only on the length"""
    if len(stack) == 1:
        return stack[0].copy()
    half = len(stack) // 2
    return pairwise_sum(stack[:half]) + pairwise_sum(stack[half:])


def ordered_mean(stack: np.ndarray, ids: Sequence[int]) -> np.ndarray:
    """Mean over the leading axis taken in sorted id order, whatever the storage order"""
    order = np.argsort(np.asarray(ids), kind="stable")
    return pairwise_sum(stack[order]) / len(stack)


def check_time_step(dt: float, u: VectorField, variant: Optional[ModelVariant] = None,
                    eta: Optional[float] = None, explicit_viscosity: bool = True) -> float:
    """
    Stability heuristic for explicit stepping; logs a warning when dt exceeds it

    Returns:
        the heuristic bound dt_max
    """
    grid = u.grid
    speed = u.max_magnitude()
    if variant is not None:
        speed += variant.nu * max_basis_speed(variant.trunc) * np.sqrt(len(variant.trunc))
        eta = variant.eta
    bound = grid.h / speed if speed > 0 else np.inf
    if explicit_viscosity and eta:
        bound = min(bound, 1.0 / (eta * wavenumbers(grid).max_k ** 2))
    dt_max = 0.5 * bound
    if dt > dt_max:
        logger.warning("time step %.3g exceeds stability heuristic %.3g", dt, dt_max)
    return dt_max


def spectral_tail_fraction(values: np.ndarray, grid: GridSpec) -> float:
    """Energy fraction in the outer third of the resolved spectrum"""
    wn = wavenumbers(grid)
    power = np.sum(np.abs(fft(values, grid)) ** 2, axis=0)
    total = np.sum(power)
    if total == 0:
        return 0.0
    tail = np.sqrt(wn.k2) > (2.0 / 3.0) * wn.max_k
    return float(np.sum(power[tail]) / total)


# ---------------------------------------------------------------------------
# deterministic reference
# ---------------------------------------------------------------------------

@dataclass
class ReferenceRun:
    """Stored Navier-Stokes trajectory u_ref(t)"""

    grid: GridSpec
    eta: float
    dt: float
    times: np.ndarray
    fields: np.ndarray  # (S, n, m, ..., m)
    metadata: Dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)

    def field(self, index: int) -> VectorField:
        return VectorField(self.grid, self.fields[index], solenoidal=True)

    def final(self) -> VectorField:
        return self.field(-1)

    def at(self, t: float) -> VectorField:
        """u_ref at time t, linear in time between stored samples"""
        idx = int(np.searchsorted(self.times, t - 1e-12 * max(1.0, abs(t))))
        if idx >= len(self.times):
            if t - self.times[-1] > 1e-9:
                raise ConfigError("physics.T", f"time {t} lies beyond the reference run")
            return self.final()
        if abs(self.times[idx] - t) <= 1e-12 * max(1.0, abs(t)) or idx == 0:
            return self.field(idx)
        t0, t1 = self.times[idx - 1], self.times[idx]
        w = (t - t0) / (t1 - t0)
        values = (1.0 - w) * self.fields[idx - 1] + w * self.fields[idx]
        return VectorField(self.grid, values, solenoidal=True)

    def provider(self) -> Callable[[int, float], VectorField]:
        return lambda step, t: self.at(t)

    def energies(self) -> np.ndarray:
        return 0.5 * np.sum(self.fields ** 2, axis=tuple(range(1, self.fields.ndim))) * self.grid.cell_volume


def run_reference(u0: VectorField, eta: float, dt: float, T: float,
                  store_every: int = 1, progress: bool = False,
                  observer: Optional[Callable[[int, float, np.ndarray], None]] = None) -> ReferenceRun:
    """
    Integrating-factor RK4 for ∂_t u = −P∇_u u + ηΔu

    The viscous term is integrated exactly in spectral space; the
    nonlinear term is dealiased. Stores every `store_every`-th step plus
    the final state; `observer(step, t, values)` sees each stored sample
    as it is produced.
    """
    grid = u0.grid
    steps = int(round(T / dt))
    wn = wavenumbers(grid)
    half = np.exp(-eta * wn.k2 * dt / 2.0)
    full = half * half

    def nonlinear(coeffs: np.ndarray) -> np.ndarray:
        return fft(ns_rhs(VectorField(grid, ifft(coeffs, grid)), 0.0).components, grid)

    u_hat = fft(leray_project(u0).components, grid)
    energy0 = 0.5 * norm_l2(u0) ** 2
    times, stored = [0.0], [ifft(u_hat, grid)]
    if observer:
        observer(0, 0.0, stored[0])
    cfl_max = 0.0
    previous_energy = energy0
    iterator = tqdm(range(1, steps + 1), desc="reference", disable=not progress)
    for step in iterator:
        k1 = nonlinear(u_hat)
        k2 = nonlinear(half * (u_hat + 0.5 * dt * k1))
        k3 = nonlinear(half * u_hat + 0.5 * dt * k2)
        k4 = nonlinear(full * u_hat + dt * half * k3)
        u_hat = full * u_hat + dt / 6.0 * (full * k1 + 2.0 * half * (k2 + k3) + k4)

        values = ifft(u_hat, grid)
        t = step * dt
        if not np.all(np.isfinite(values)):
            raise BlowUpError("non-finite velocity", step, t)
        energy = 0.5 * np.sum(values ** 2) * grid.cell_volume
        if energy > ENERGY_GROWTH_LIMIT * max(energy0, 1e-300):
            raise BlowUpError("energy explosion", step, t)
        if eta > 0 and energy > previous_energy * (1 + 1e-10):
            logger.warning("reference energy increased at step %d", step)
        previous_energy = energy
        cfl_max = max(cfl_max, dt * np.sqrt(np.max(np.sum(values ** 2, axis=0))) / grid.h)
        if step % store_every == 0 or step == steps:
            times.append(t)
            stored.append(values)
            tail = spectral_tail_fraction(values, grid)
            if tail > SPECTRAL_TAIL_LIMIT:
                raise BlowUpError(f"spectral tail growth ({tail:.2e} of the energy)", step, t)
            if observer:
                observer(step, t, values)

    tail = spectral_tail_fraction(stored[-1], grid)
    if tail > SPECTRAL_TAIL_WARNING:
        logger.warning("reference spectral tail holds %.2e of the energy", tail)
    metadata = {"scheme": "IF-RK4", "steps": steps, "cfl_max": cfl_max, "spectral_tail": tail}
    logger.info("reference run: %d steps, CFL max %.3g", steps, cfl_max)
    return ReferenceRun(grid, eta, dt, np.array(times), np.stack(stored), metadata)


def heat_flow(u0: VectorField, eta: float, times: Sequence[float]) -> np.ndarray:
    """Exact e^{ηtΔ}u0 at each time, shape (len(times), n, m, ..., m)"""
    grid = u0.grid
    coeffs = fft(u0.components, grid)
    k2 = wavenumbers(grid).k2
    return np.stack([ifft(coeffs * np.exp(-eta * k2 * t), grid) for t in times])


# ---------------------------------------------------------------------------
# stochastic ensembles
# ---------------------------------------------------------------------------

@dataclass
class Ensemble:
    """
    N stochastic momentum fields with shared time and noise bookkeeping

    `particle_ids` are the noise-stream addresses of the particles; a
    permuted ensemble carries permuted ids.
    """

    grid: GridSpec
    particles: np.ndarray  # (N, n, m, ..., m)
    variant: ModelVariant
    stream: NoiseStream
    coupling: Coupling = Coupling.IPS
    t: float = 0.0
    step: int = 0
    particle_ids: Tuple[int, ...] = ()
    substeps: int = 1

    def __post_init__(self):
        if not self.particle_ids:
            self.particle_ids = tuple(range(len(self.particles)))
        if len(self.particle_ids) != len(self.particles):
            raise ConfigError("model.particles", "particle ids do not match the ensemble size")

    @classmethod
    def from_initial(cls, u0: VectorField, count: int, variant: ModelVariant, stream: NoiseStream,
                     coupling: Coupling = Coupling.IPS, substeps: int = 1) -> "Ensemble":
        """Every particle starts at u0"""
        start = leray_project(u0).components if variant.tag.keeps_solenoidal else u0.components
        particles = np.repeat(start[np.newaxis], count, axis=0)
        return cls(u0.grid, particles, variant, stream, Coupling(coupling), substeps=substeps)

    def __len__(self) -> int:
        return len(self.particles)

    def particle(self, index: int) -> VectorField:
        return VectorField(self.grid, self.particles[index], self.variant.tag.keeps_solenoidal)

    @property
    def fields(self) -> List[VectorField]:
        return [self.particle(i) for i in range(len(self))]

    def mean(self) -> VectorField:
        values = ordered_mean(self.particles, self.particle_ids)
        return VectorField(self.grid, values, self.variant.tag.keeps_solenoidal)

    def mean_standard_error(self) -> float:
        """L² size of the Monte Carlo standard error of the mean field"""
        count = len(self)
        if count < 2:
            return 0.0
        spread = self.particles - ordered_mean(self.particles, self.particle_ids)
        variance = np.sum(spread ** 2) * self.grid.cell_volume / (count - 1)
        return float(np.sqrt(variance / count))

    def permuted(self, order: Sequence[int]) -> "Ensemble":
        order = list(order)
        return replace(self, particles=self.particles[order], particle_ids=tuple(self.particle_ids[i] for i in order))


def _increments(ens: Ensemble, particle: int, dt: float) -> np.ndarray:
    return sample_increments(ens.stream, particle, ens.step, dt, len(ens.variant.trunc), ens.substeps)


def _finish(ens: Ensemble, values: VectorField, particle: int) -> np.ndarray:
    if ens.variant.tag.keeps_solenoidal:
        values = leray_project(values)
    if not values.is_finite():
        raise BlowUpError("non-finite particle", ens.step + 1, ens.t, particle)
    return values.components


def _euler_maruyama(ens: Ensemble, u: VectorField, dt: float, workers: int, chunk_size: int) -> Ensemble:
    variant = ens.variant
    grid = ens.grid

    def work(block: range) -> List[np.ndarray]:
        out = []
        for index in block:
            pid = ens.particle_ids[index]
            xi = ens.particle(index)
            update = xi + dt * ito_drift(variant, u, xi)
            if variant.nu > 0:
                W = noise_field(variant.trunc, grid, _increments(ens, pid, dt))
                update = update + diffusion_sum(variant, W, xi)
            out.append(_finish(ens, update, pid))
        return out

    particles = np.stack(parallel_map(work, len(ens), workers, chunk_size))
    return replace(ens, particles=particles, t=ens.t + dt, step=ens.step + 1)


def step_ips(ens: Ensemble, dt: float, workers: int = 1, chunk_size: int = DEFAULT_CHUNK_SIZE) -> Ensemble:
    """Euler-Maruyama step with u = empirical mean of the particles"""
    if ens.coupling is not Coupling.IPS:
        raise ConfigError("model.coupling", "step_ips needs an IPS-coupled ensemble")
    return _euler_maruyama(ens, ens.mean(), dt, workers, chunk_size)


def step_meanfield(ens: Ensemble, u_prescribed: VectorField, dt: float, workers: int = 1,
                   chunk_size: int = DEFAULT_CHUNK_SIZE) -> Ensemble:
    """Euler-Maruyama step of independent trajectories driven by a prescribed u"""
    if ens.coupling is not Coupling.PRESCRIBED:
        raise ConfigError("model.coupling", "step_meanfield needs a prescribed-coupling ensemble")
    return _euler_maruyama(ens, u_prescribed, dt, workers, chunk_size)


def heun_drift(variant: ModelVariant, u: VectorField, xi: VectorField) -> VectorField:
    """
    Stratonovich drift for Heun stepping

    The Ito viscosity η is replaced by its noise-generated part c_Kν²/2,
    so with noise switched off the drift keeps ηΔξ.
    """
    residual_viscosity = variant.eta - 0.5 * variant.trunc.c_K * variant.nu ** 2
    drift = stratonovich_drift_v1(u, xi)
    if abs(residual_viscosity) > 1e-12 * max(variant.eta, 1e-300):
        drift = drift + residual_viscosity * vector_laplacian(xi)
    return drift


def step_heun_v1(ens: Ensemble, dt: float, u: Optional[VectorField] = None,
                 u_next: Optional[VectorField] = None, workers: int = 1,
                 chunk_size: int = DEFAULT_CHUNK_SIZE) -> Ensemble:
    """
    Stratonovich predictor-corrector step for the Hamiltonian model

    Prescribed coupling uses `u` at t and `u_next` at t + dt; IPS coupling
    takes both from the ensemble (the second from the predictors).
    """
    variant = ens.variant
    if variant.tag is not Variant.V1_HAMILTONIAN or not variant.line_stretching:
        raise VariantError("Heun stepping is defined for V1_HAMILTONIAN with line stretching")
    grid = ens.grid
    if ens.coupling is Coupling.IPS:
        u = ens.mean()
    elif u is None:
        raise ConfigError("model.coupling", "prescribed Heun stepping needs u")
    u_next = u_next if u_next is not None else u

    def noise(index: int) -> Optional[VectorField]:
        if variant.nu == 0:
            return None
        return noise_field(variant.trunc, grid, _increments(ens, ens.particle_ids[index], dt))

    def predict(block: range) -> List[Tuple[np.ndarray, np.ndarray]]:
        out = []
        for index in block:
            xi = ens.particle(index)
            W = noise(index)
            drift = heun_drift(variant, u, xi)
            kick = diffusion_sum(variant, W, xi) if W is not None else VectorField.zeros(grid)
            guess = leray_project(xi + dt * drift + kick)
            out.append((guess.components, (drift + (1.0 / dt) * kick).components))
        return out

    predicted = parallel_map(predict, len(ens), workers, chunk_size)
    if ens.coupling is Coupling.IPS:
        guesses = np.stack([p[0] for p in predicted])
        u_next = VectorField(grid, ordered_mean(guesses, ens.particle_ids), solenoidal=True)

    def correct(block: range) -> List[np.ndarray]:
        out = []
        for index in block:
            pid = ens.particle_ids[index]
            xi = ens.particle(index)
            guess = VectorField(grid, predicted[index][0], solenoidal=True)
            first_rate = VectorField(grid, predicted[index][1])
            W = noise(index)
            second = dt * heun_drift(variant, u_next, guess)
            if W is not None:
                second = second + diffusion_sum(variant, W, guess)
            out.append(_finish(ens, xi + 0.5 * (dt * first_rate + second), pid))
        return out

    particles = np.stack(parallel_map(correct, len(ens), workers, chunk_size))
    return replace(ens, particles=particles, t=ens.t + dt, step=ens.step + 1)


VelocityProvider = Callable[[int, float], VectorField]


def run_ensemble(ens: Ensemble, dt: float, T: float, u_provider: Optional[VelocityProvider] = None,
                 scheme: str = "euler", cadence: int = 1,
                 observer: Optional[Callable[[Ensemble], None]] = None,
                 workers: int = 1, chunk_size: int = DEFAULT_CHUNK_SIZE,
                 progress: bool = False) -> Ensemble:
    """
    Step an ensemble over [t, t + T]

    Args:
        u_provider: (step, t) -> u for prescribed coupling; ignored for IPS
        scheme: "euler" (Ito) or "heun" (Stratonovich, V1 only)
        cadence: observer is called every `cadence` steps, at the start and at the end
    """
    steps = int(round(T / dt))
    if ens.coupling is Coupling.PRESCRIBED and u_provider is None:
        raise ConfigError("model.coupling", "prescribed coupling needs a velocity provider")
    if scheme not in ("euler", "heun"):
        raise ConfigError("model.scheme", f"unknown scheme {scheme!r}")

    u_start = u_provider(ens.step, ens.t) if u_provider else ens.mean()
    check_time_step(dt, u_start, ens.variant)
    if observer:
        observer(ens)
    for count in tqdm(range(1, steps + 1), desc=f"{ens.variant.tag.value}", disable=not progress):
        if scheme == "heun":
            u = u_provider(ens.step, ens.t) if u_provider else None
            u_next = u_provider(ens.step + 1, ens.t + dt) if u_provider else None
            ens = step_heun_v1(ens, dt, u, u_next, workers, chunk_size)
        elif ens.coupling is Coupling.IPS:
            ens = step_ips(ens, dt, workers, chunk_size)
        else:
            ens = step_meanfield(ens, u_provider(ens.step, ens.t), dt, workers, chunk_size)
        if observer and (count % cadence == 0 or count == steps):
            observer(ens)
        logger.debug("step %d t=%.6g", ens.step, ens.t)
    return ens


# ---------------------------------------------------------------------------
# Picard fixed point
# ---------------------------------------------------------------------------

TransportMap = Callable[[np.ndarray], Tuple[np.ndarray, float]]


def meanfield_transport_map(u0: VectorField, variant: ModelVariant, stream: NoiseStream, trajectories: int,
                            dt: float, workers: int = 1, chunk_size: int = DEFAULT_CHUNK_SIZE) -> TransportMap:
    """
    Φ(u) evaluated by prescribed-coupling V1 stepping

    The returned map takes a velocity trajectory on the step grid and
    returns the Monte Carlo mean trajectory and its largest standard error.
    The same noise is reused on every call.
    """
    grid = u0.grid

    def phi(trajectory: np.ndarray) -> Tuple[np.ndarray, float]:
        ens = Ensemble.from_initial(u0, trajectories, variant, stream, Coupling.PRESCRIBED)
        means = [ens.mean().components]
        error = 0.0
        for step in range(len(trajectory) - 1):
            ens = step_meanfield(ens, VectorField(grid, trajectory[step], solenoidal=True), dt, workers, chunk_size)
            means.append(ens.mean().components)
            error = max(error, ens.mean_standard_error())
        return np.stack(means), error

    return phi


@dataclass
class PicardResult:
    iterates: List[np.ndarray]
    residuals: List[float]
    tolerances: List[float]
    mc_errors: List[float]
    converged: bool
    reason: str

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    def final(self) -> np.ndarray:
        return self.iterates[-1]


def trajectory_distance(a: np.ndarray, b: np.ndarray, grid: GridSpec) -> float:
    """max over time of the L² distance between two trajectories"""
    squared = np.sum((a - b) ** 2, axis=tuple(range(1, a.ndim))) * grid.cell_volume
    return float(np.sqrt(np.max(squared)))


def picard_iterate(u0: VectorField, eta: float, dt: float, T: float, iters: int, phi: TransportMap,
                   damping: float = 1.0, initial: Optional[np.ndarray] = None) -> PicardResult:
    """
    Damped Picard iteration u ← u + damping·(Φ(u) − u) on [0, T]

    Starts from the heat flow of u0 unless `initial` is given. Succeeds
    once the residual drops to max(0.02‖u0‖, 3·MC error); stops without
    convergence after three consecutive non-decreasing residuals.
    """
    grid = u0.grid
    steps = int(round(T / dt))
    times = dt * np.arange(steps + 1)
    current = heat_flow(u0, eta, times) if initial is None else np.asarray(initial)
    scale = norm_l2(u0)

    iterates, residuals, tolerances, errors = [current], [], [], []
    rising = 0
    for iteration in range(1, iters + 1):
        image, mc_error = phi(current)
        residual = trajectory_distance(image, current, grid)
        tolerance = max(0.02 * scale, 3.0 * mc_error)
        current = current + damping * (image - current)
        iterates.append(current)
        residuals.append(residual)
        tolerances.append(tolerance)
        errors.append(mc_error)
        logger.info("picard iteration %d: residual %.4g (tolerance %.4g)", iteration, residual, tolerance)
        if residual <= tolerance:
            return PicardResult(iterates, residuals, tolerances, errors, True, "converged")
        if len(residuals) > 1 and residual >= residuals[-2]:
            rising += 1
            if rising >= 3:
                logger.warning("picard residual did not decrease for 3 iterations")
                return PicardResult(iterates, residuals, tolerances, errors, False, "stalled")
        else:
            rising = 0
    return PicardResult(iterates, residuals, tolerances, errors, False, "iteration limit")


def weak_order_estimate(errors: Sequence[float], dts: Sequence[float]) -> float:
    """Slope of log(error) against log(dt)"""
    X = np.log(np.asarray(dts, dtype=float)).reshape(-1, 1)
    y = np.log(np.asarray(errors, dtype=float))
    model = LinearRegression()
    model.fit(X, y)
    return float(model.coef_[0])
