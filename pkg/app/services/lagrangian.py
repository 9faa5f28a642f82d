"""
Stochastic Lagrangian flow: material loops, circulation, back-to-labels maps
and Ad⊤ transport of the initial velocity
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.services.basis_noise import NoiseStream, noise_at_points, sample_increments
from app.services.dynamics import ModelVariant
from app.services.errors import ConfigError, LoopSpacingError
from app.services.sde_engine import (
    DEFAULT_CHUNK_SIZE,
    Coupling,
    Ensemble,
    TransportMap,
    VelocityProvider,
    step_heun_v1,
    step_ips,
    step_meanfield,
)
from app.services.spectral_core import (
    TWO_PI,
    GridSpec,
    VectorField,
    evaluate_at,
    fft,
    ifft,
    leray_project,
    spectral_gradient,
)

logger = logging.getLogger(__name__)

MIN_LOOP_POINTS = 64
MAX_LOOP_POINTS = 1 << 20
INVERSE_ITERATIONS = 3

_gauss_nodes, _gauss_weights = np.polynomial.legendre.leggauss(3)
QUADRATURE = {
    "gauss": (0.5 * (_gauss_nodes + 1.0), 0.5 * _gauss_weights),
    "midpoint": (np.array([0.5]), np.array([1.0])),
}


def minimal_image(d: np.ndarray) -> np.ndarray:
    return d - TWO_PI * np.round(d / TWO_PI)


@dataclass
class Loop:
    """Closed polygon of points on the torus; the last point connects to the first"""

    points: np.ndarray  # (P, n)
    initial_spacing: float

    def __post_init__(self):
        if len(self.points) < MIN_LOOP_POINTS:
            raise LoopSpacingError(f"a loop needs at least {MIN_LOOP_POINTS} points, got {len(self.points)}")

    @classmethod
    def circle(cls, center: Sequence[float], radius: float, count: int) -> "Loop":
        """Circle in the x₁-x₂ plane"""
        center = np.asarray(center, dtype=float)
        theta = TWO_PI * np.arange(count) / count
        points = np.tile(center, (count, 1))
        points[:, 0] += radius * np.cos(theta)
        points[:, 1] += radius * np.sin(theta)
        loop = cls(np.mod(points, TWO_PI), 0.0)
        loop.initial_spacing = float(np.max(loop.spacing()))
        return loop

    @property
    def count(self) -> int:
        return len(self.points)

    def segments(self) -> np.ndarray:
        return minimal_image(np.roll(self.points, -1, axis=0) - self.points)

    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.segments(), axis=1)

    def length(self) -> float:
        return float(np.sum(self.spacing()))

    def needs_refinement(self) -> bool:
        return bool(np.max(self.spacing()) > 2.0 * self.initial_spacing)

    def reversed(self) -> "Loop":
        return Loop(self.points[::-1].copy(), self.initial_spacing)

    def rolled(self, shift: int) -> "Loop":
        return Loop(np.roll(self.points, shift, axis=0), self.initial_spacing)


def refine_loop(loop: Loop) -> Loop:
    """Insert midpoints into every segment longer than twice the initial spacing"""
    points = loop.points
    for _ in range(32):
        current = Loop(points, loop.initial_spacing)
        segments = current.segments()
        long = np.linalg.norm(segments, axis=1) > 2.0 * loop.initial_spacing
        if not np.any(long):
            return current
        midpoints = np.mod(points[long] + 0.5 * segments[long], TWO_PI)
        order = np.concatenate([np.arange(len(points)), np.nonzero(long)[0] + 0.5])
        points = np.concatenate([points, midpoints])[np.argsort(order, kind="stable")]
        if len(points) > MAX_LOOP_POINTS:
            break
    raise LoopSpacingError(f"loop refinement did not converge ({len(points)} points)")


def circulation(loop: Loop, xi: VectorField, quadrature: str = "midpoint") -> float:
    """
    ∮ ξ♭ along the polygon

    Each straight segment is integrated with the midpoint rule, or with
    3-point Gauss-Legendre when `quadrature` is "gauss".
    """
    if quadrature not in QUADRATURE:
        raise ConfigError("loop.quadrature", f"unknown quadrature {quadrature!r}")
    if loop.needs_refinement():
        loop = refine_loop(loop)
    nodes, weights = QUADRATURE[quadrature]
    segments = loop.segments()
    total = 0.0
    for tau, weight in zip(nodes, weights):
        total += weight * np.sum(evaluate_at(xi, loop.points + tau * segments) * segments)
    return float(total)


# ---------------------------------------------------------------------------
# point and label transport
# ---------------------------------------------------------------------------

def _velocity(u: Optional[VectorField], points: np.ndarray) -> np.ndarray:
    if u is None:
        return np.zeros_like(points)
    return evaluate_at(u, points)


def displacement(points: np.ndarray, u: Optional[VectorField], increments: Optional[np.ndarray],
                 variant: ModelVariant, dt: float, u_next: Optional[VectorField] = None,
                 scheme: str = "euler") -> np.ndarray:
    """
    One-step displacement u(x)dt + νΣ_α X_α(x)ΔW^α

    The "heun" scheme averages the Euler displacement at x and at its
    Euler prediction, with `u_next` used at the predicted point.
    """
    move = dt * _velocity(u, points)
    if increments is not None and variant.nu > 0:
        move = move + variant.nu * noise_at_points(variant.trunc, increments, points)
    if scheme == "euler":
        return move
    if scheme != "heun":
        raise ConfigError("model.scheme", f"unknown scheme {scheme!r}")
    predicted = points + move
    second = dt * _velocity(u_next if u_next is not None else u, predicted)
    if increments is not None and variant.nu > 0:
        second = second + variant.nu * noise_at_points(variant.trunc, increments, predicted)
    return 0.5 * (move + second)


def advance_points(points: np.ndarray, u: Optional[VectorField], stream: NoiseStream, step: int, dt: float,
                   variant: ModelVariant, particle: int = 0, substeps: int = 1,
                   u_next: Optional[VectorField] = None, scheme: str = "euler") -> np.ndarray:
    """Move points with the increments addressed (stream, particle, step); result wrapped to [0, 2π)^n"""
    increments = sample_increments(stream, particle, step, dt, len(variant.trunc), substeps)
    return np.mod(points + displacement(points, u, increments, variant, dt, u_next, scheme), TWO_PI)


@dataclass
class LabelMap:
    """Back-to-labels map A(x) = x + a(x) with periodic displacement a"""

    displacement: VectorField

    @classmethod
    def identity(cls, grid: GridSpec) -> "LabelMap":
        return cls(VectorField(grid, np.zeros((grid.n,) + grid.shape)))

    @property
    def grid(self) -> GridSpec:
        return self.displacement.grid

    def labels_at(self, points: np.ndarray) -> np.ndarray:
        """A at arbitrary points, not wrapped"""
        return points + evaluate_at(self.displacement, points)

    def is_finite(self) -> bool:
        return self.displacement.is_finite()


def advance_label_map(a: LabelMap, u: Optional[VectorField], stream: NoiseStream, step: int, dt: float,
                      variant: ModelVariant, particle: int = 0, substeps: int = 1,
                      u_next: Optional[VectorField] = None, scheme: str = "euler") -> LabelMap:
    """
    Semi-Lagrangian update A_new(x) = A_old(z) where z + δx(z) = x

    δx is the point displacement of advance_points with the same
    increments; the foot z is found by fixed-point iteration starting
    from x − δx(x).
    """
    grid = a.grid
    nodes = grid.nodes()
    increments = sample_increments(stream, particle, step, dt, len(variant.trunc), substeps)
    feet = nodes.copy()
    for _ in range(INVERSE_ITERATIONS):
        feet = nodes - displacement(feet, u, increments, variant, dt, u_next, scheme)
    shift = feet - nodes + evaluate_at(a.displacement, feet)  # a_new = z − x + a_old(z)
    values = shift.T.reshape((grid.n,) + grid.shape)
    return LabelMap(VectorField(grid, np.ascontiguousarray(values)))


def back_to_labels_vector(a: LabelMap, u0: VectorField) -> VectorField:
    """w = (∇A)ᵀ (u0∘A), component i = Σ_j ∂_iA_j u0_j(A)"""
    grid = a.grid
    a.grid.check_same(u0.grid)
    labels = grid.nodes() + a.displacement.components.reshape(grid.n, -1).T
    composed = evaluate_at(u0, labels).T.reshape((grid.n,) + grid.shape)
    da = ifft(spectral_gradient(fft(a.displacement.components, grid), grid), grid)  # [i, j] = ∂_i a_j
    w = composed + np.einsum("ij...,j...->i...", da, composed)
    return VectorField(grid, w)


def ad_top_transport(a: LabelMap, u0: VectorField) -> VectorField:
    """ζ = P[(∇A)ᵀ(u0∘A)]"""
    return leray_project(back_to_labels_vector(a, u0))


def label_transport_map(u0: VectorField, variant: ModelVariant, stream: NoiseStream, trajectories: int,
                        dt: float, scheme: str = "euler") -> TransportMap:
    """Φ(u) evaluated through back-to-labels maps of independent flows"""
    grid = u0.grid

    def phi(trajectory: np.ndarray) -> Tuple[np.ndarray, float]:
        maps = [LabelMap.identity(grid) for _ in range(trajectories)]
        means = [leray_project(u0).components]
        error = 0.0
        for step in range(len(trajectory) - 1):
            u = VectorField(grid, trajectory[step], solenoidal=True)
            u_next = VectorField(grid, trajectory[step + 1], solenoidal=True)
            maps = [advance_label_map(a, u, stream, step, dt, variant, particle, u_next=u_next, scheme=scheme)
                    for particle, a in enumerate(maps)]
            samples = np.stack([ad_top_transport(a, u0).components for a in maps])
            means.append(np.mean(samples, axis=0))
            if trajectories > 1:
                spread = np.sum((samples - means[-1]) ** 2) * grid.cell_volume / (trajectories - 1)
                error = max(error, float(np.sqrt(spread / trajectories)))
        return np.stack(means), error

    return phi


# ---------------------------------------------------------------------------
# Kelvin circulation audit
# ---------------------------------------------------------------------------

AUDIT_COLUMNS = ["t", "seed", "variant", "circulation", "relative_drift"]


def kelvin_audit(u0: VectorField, variant: ModelVariant, loop: Loop, seeds: Sequence[int], dt: float, T: float,
                 u_provider: Optional[VelocityProvider] = None, particles: int = 1, scheme: str = "euler",
                 cadence: int = 1, workers: int = 1, chunk_size: int = DEFAULT_CHUNK_SIZE,
                 quadrature: str = "gauss") -> pd.DataFrame:
    """
    Circulation of ξ_t around the loop advected with the same noise

    With `u_provider` the momentum is driven by the prescribed velocity;
    without it an IPS ensemble of `particles` members supplies u^N and
    the loop follows the first particle.

    Returns:
        DataFrame with columns t, seed, variant, circulation, relative_drift
    """
    steps = int(round(T / dt))
    coupling = Coupling.PRESCRIBED if u_provider is not None else Coupling.IPS
    count = 1 if u_provider is not None else particles
    rows: List[dict] = []
    for seed in seeds:
        stream = NoiseStream(seed)
        ens = Ensemble.from_initial(u0, count, variant, stream, coupling)
        current = loop
        start = circulation(current, ens.particle(0), quadrature)

        def record(value: float):
            drift = (value - start) / abs(start) if start != 0 else value - start
            rows.append({"t": ens.t, "seed": seed, "variant": variant.tag.value,
                         "circulation": value, "relative_drift": drift})

        record(start)
        for count_step in range(1, steps + 1):
            u = u_provider(ens.step, ens.t) if u_provider else ens.mean()
            u_next = u_provider(ens.step + 1, ens.t + dt) if u_provider else None
            points = advance_points(current.points, u, stream, ens.step, dt, variant,
                                    ens.particle_ids[0], ens.substeps, u_next=u_next, scheme=scheme)
            if scheme == "heun":
                ens = step_heun_v1(ens, dt, u, u_next, workers, chunk_size)
            elif coupling is Coupling.PRESCRIBED:
                ens = step_meanfield(ens, u, dt, workers, chunk_size)
            else:
                ens = step_ips(ens, dt, workers, chunk_size)
            current = Loop(points, loop.initial_spacing)
            if current.needs_refinement():
                current = refine_loop(current)
            if count_step % cadence == 0 or count_step == steps:
                record(circulation(current, ens.particle(0), quadrature))
        logger.info("kelvin audit seed %d: final drift %.3e (%d loop points)",
                    seed, rows[-1]["relative_drift"], current.count)
    return pd.DataFrame(rows, columns=AUDIT_COLUMNS)
