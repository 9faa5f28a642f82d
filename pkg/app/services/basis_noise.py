"""
Trigonometric noise basis X_α, its truncation, and reproducible Brownian increments
"""
import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from app.services.errors import TruncationError
from app.services.spectral_core import (
    GridSpec,
    VectorField,
    directional_derivative,
    divergence,
    evaluate_at,
    norm_l2,
)

logger = logging.getLogger(__name__)

CONSTANT, COSINE, SINE = 0, 1, 2
KIND_NAMES = {CONSTANT: "A0", COSINE: "A", SINE: "B"}


def in_positive_half(k: Tuple[int, ...]) -> bool:
    """ℤ_n^+ sign rule: the first non-zero component of k is positive"""
    for kj in k:
        if kj != 0:
            return kj > 0
    return False


@dataclass(frozen=True)
class BasisIndex:
    """Multi-index α = (k, i, a); i is 1-based"""

    a: int
    k: Tuple[int, ...]
    i: int

    def __post_init__(self):
        if self.a not in (CONSTANT, COSINE, SINE):
            raise TruncationError(f"basis kind must be 0, 1 or 2, got {self.a}")
        n = len(self.k)
        if self.a == CONSTANT:
            if any(self.k) or not 1 <= self.i <= n:
                raise TruncationError(f"invalid constant basis index {self}")
        elif not in_positive_half(self.k) or not 1 <= self.i <= n - 1:
            raise TruncationError(f"invalid wave basis index {self}")

    @property
    def k2(self) -> int:
        return sum(kj * kj for kj in self.k)

    @property
    def is_constant(self) -> bool:
        return self.a == CONSTANT

    def sort_key(self):
        return (self.k2, self.k, self.a, self.i)

    @property
    def label(self) -> str:
        if self.is_constant:
            return f"A_(0,{self.i})"
        return f"{KIND_NAMES[self.a]}_({self.k},{self.i})"


def enumerate_indices(n: int, K: int) -> List[BasisIndex]:
    """Constant indices plus every wave index with |k| <= K, in canonical order"""
    if K < 1:
        raise TruncationError(f"truncation cutoff K must be >= 1, got {K}")
    indices = [BasisIndex(CONSTANT, (0,) * n, j) for j in range(1, n + 1)]
    for k in itertools.product(range(-K, K + 1), repeat=n):
        if not in_positive_half(k) or sum(kj * kj for kj in k) > K * K:
            continue
        for a in (COSINE, SINE):
            for i in range(1, n):
                indices.append(BasisIndex(a, tuple(k), i))
    return sorted(indices, key=BasisIndex.sort_key)


def perp_frame(k) -> np.ndarray:
    """
    n−1 mutually orthogonal vectors, each orthogonal to k with norm |k|

    2D uses (−k₂, k₁). 3D takes k × e_j for the first e_j not parallel
    to k, rescaled to |k|, and then k × (first)/|k|.
    """
    k = np.asarray(k, dtype=float)
    norm_k = np.linalg.norm(k)
    if norm_k == 0:
        raise TruncationError("perp_frame needs a non-zero wavevector")
    if k.size == 2:
        return np.array([[-k[1], k[0]]])
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1.0
        c = np.cross(k, e)
        if np.linalg.norm(c) > 0:
            break
    first = c * norm_k / np.linalg.norm(c)
    second = np.cross(k, first) / norm_k
    return np.array([first, second])


class BasisTruncation:
    """
    Finite noise basis with cutoff K and Sobolev weight s

    Wave fields are |k|^{-(s+1)} cos⟨k,x⟩ k_i^⊥ (a=1) and the sine
    counterpart (a=2); constant fields are e_j. Instances are immutable
    and hashable by (n, K, s).
    """

    def __init__(self, n: int, K: int, s: float):
        if n not in (2, 3):
            raise TruncationError(f"dimension must be 2 or 3, got {n}")
        if not s > 1 + n / 2:
            raise TruncationError(f"Sobolev weight s must exceed 1 + n/2 = {1 + n / 2}, got {s}")
        self.n = n
        self.K = K
        self.s = float(s)
        self.indices: Tuple[BasisIndex, ...] = tuple(enumerate_indices(n, K))

        count = len(self.indices)
        self.wavevectors = np.zeros((count, n))
        self.directions = np.zeros((count, n))
        self.amplitudes = np.ones(count)
        self.kinds = np.array([alpha.a for alpha in self.indices])
        for ordinal, alpha in enumerate(self.indices):
            if alpha.is_constant:
                self.directions[ordinal, alpha.i - 1] = 1.0
                continue
            self.wavevectors[ordinal] = alpha.k
            self.directions[ordinal] = perp_frame(alpha.k)[alpha.i - 1]
            self.amplitudes[ordinal] = np.sqrt(alpha.k2) ** (-(self.s + 1))
        for arr in (self.wavevectors, self.directions, self.amplitudes, self.kinds):
            arr.setflags(write=False)

        self._tensor = self._build_diffusion_tensor()
        self.c_K = float(np.trace(self._tensor) / n)
        self.epsilon_K = float(np.linalg.norm(self._tensor - self.c_K * np.eye(n), 2) / self.c_K)

    def _build_diffusion_tensor(self) -> np.ndarray:
        D = np.eye(self.n)
        for ordinal, alpha in enumerate(self.indices):
            # one term per (k, i); the cosine/sine pair shares it
            if alpha.a != COSINE:
                continue
            perp = self.directions[ordinal]
            D += self.amplitudes[ordinal] ** 2 * np.outer(perp, perp)
        return D

    def __len__(self) -> int:
        return len(self.indices)

    def __eq__(self, other) -> bool:
        return isinstance(other, BasisTruncation) and self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def __repr__(self) -> str:
        return f"BasisTruncation(n={self.n}, K={self.K}, s={self.s}, count={len(self)})"

    @property
    def key(self) -> Tuple[int, int, float]:
        return (self.n, self.K, self.s)

    def ordinal(self, alpha: BasisIndex) -> int:
        return self.indices.index(alpha)

    def diffusion_tensor(self) -> np.ndarray:
        return self._tensor.copy()

    def effective_constant(self) -> float:
        return self.c_K

    def wave_pairs(self) -> List[Tuple[int, int]]:
        """Ordinals of matching (cosine, sine) fields for each (k, i)"""
        position = {alpha: ordinal for ordinal, alpha in enumerate(self.indices)}
        pairs = []
        for alpha, ordinal in position.items():
            if alpha.a == COSINE:
                pairs.append((ordinal, position[BasisIndex(SINE, alpha.k, alpha.i)]))
        return sorted(pairs)

    def sampled_fields(self, grid: GridSpec) -> np.ndarray:
        """All basis fields on a grid, shape (A, n, m, ..., m); read-only"""
        if grid.n != self.n:
            raise TruncationError(f"basis dimension {self.n} does not match grid dimension {grid.n}")
        return _sampled_basis(self, grid)

    def values_at(self, points: np.ndarray) -> np.ndarray:
        """All basis fields at arbitrary points, shape (A, P, n)"""
        points = np.atleast_2d(points)
        phase = points @ self.wavevectors.T  # (P, A)
        profile = np.where(self.kinds == SINE, np.sin(phase), np.cos(phase))
        profile = np.where(self.kinds == CONSTANT, 1.0, profile) * self.amplitudes
        return profile.T[:, :, np.newaxis] * self.directions[:, np.newaxis, :]


@lru_cache(maxsize=16)
def _sampled_basis(trunc: BasisTruncation, grid: GridSpec) -> np.ndarray:
    points = grid.nodes()
    values = trunc.values_at(points)  # (A, m^n, n)
    fields = np.ascontiguousarray(np.moveaxis(values, 2, 1).reshape((len(trunc), grid.n) + grid.shape))
    fields.setflags(write=False)
    return fields


def basis_field(alpha: BasisIndex, grid: GridSpec, s: float) -> VectorField:
    """Sample a single basis field"""
    n = grid.n
    if len(alpha.k) != n:
        raise TruncationError(f"index {alpha.label} does not match grid dimension {n}")
    if alpha.is_constant:
        direction = np.zeros(n)
        direction[alpha.i - 1] = 1.0
        return VectorField.constant(grid, direction)
    coords = grid.coordinates()
    phase = np.tensordot(np.asarray(alpha.k, dtype=float), coords, axes=1)
    profile = np.cos(phase) if alpha.a == COSINE else np.sin(phase)
    perp = perp_frame(alpha.k)[alpha.i - 1]
    amplitude = np.sqrt(alpha.k2) ** (-(s + 1))
    values = amplitude * profile[np.newaxis] * perp.reshape((n,) + (1,) * n)
    return VectorField(grid, values, solenoidal=True)


@dataclass(frozen=True)
class NoiseStream:
    """
    Counter-based Gaussian source addressed by (particle, step, ordinal)

    Every (seed, particle) pair keys a Philox generator whose counter is
    positioned at the step index, so a draw never depends on evaluation
    order or on which worker performs it.
    """

    seed: int

    def _generator(self, particle: int, step: int) -> np.random.Generator:
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, particle], dtype=np.uint64)
        counter = np.array([0, step, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def normals(self, particle: int, step: int, count: int) -> np.ndarray:
        """Standard normals for ordinals 0..count-1 at one address"""
        return self._generator(particle, step).standard_normal(count)

    def normal(self, particle: int, ordinal: int, step: int) -> float:
        return float(self.normals(particle, step, ordinal + 1)[ordinal])


def sample_increments(stream: NoiseStream, particle: int, step: int, dt: float,
                      count: int, substeps: int = 1) -> np.ndarray:
    """
    Brownian increments ΔW^{α,i} ~ N(0, dt) for all ordinals at one step

    With `substeps` > 1 the increment is the sum of the increments of the
    finer steps step*substeps .. step*substeps+substeps-1, so a coarse run
    and a refined run driven by the same stream follow one Brownian path.
    """
    if dt <= 0:
        raise TruncationError(f"time step must be positive, got {dt}")
    total = np.zeros(count)
    for fine in range(step * substeps, (step + 1) * substeps):
        total += stream.normals(particle, fine, count)
    return total * np.sqrt(dt / substeps)


def noise_field(trunc: BasisTruncation, grid: GridSpec, increments: np.ndarray) -> VectorField:
    """W = Σ_α ΔW^α X_α sampled on the grid"""
    values = np.tensordot(increments, trunc.sampled_fields(grid), axes=1)
    return VectorField(grid, values, solenoidal=True)


def noise_at_points(trunc: BasisTruncation, increments: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Σ_α ΔW^α X_α(x) at arbitrary points, shape (P, n)"""
    return np.tensordot(increments, trunc.values_at(points), axes=1)


def basis_audit(trunc: BasisTruncation, grid: GridSpec) -> pd.DataFrame:
    """
    Per-index divergence and self-advection norms of the basis

    Returns:
        DataFrame with columns alpha, a, k, i, div_norm, self_advection_norm;
        c_K and epsilon_K are carried in `frame.attrs`
    """
    rows = []
    for ordinal, alpha in enumerate(trunc.indices):
        X = basis_field(alpha, grid, trunc.s)
        rows.append({
            "alpha": ordinal,
            "a": alpha.a,
            "k": " ".join(str(kj) for kj in alpha.k),
            "i": alpha.i,
            "div_norm": norm_l2(divergence(X)),
            "self_advection_norm": norm_l2(directional_derivative(X, X)),
        })
    frame = pd.DataFrame(rows, columns=["alpha", "a", "k", "i", "div_norm", "self_advection_norm"])
    frame.attrs["c_K"] = trunc.c_K
    frame.attrs["epsilon_K"] = trunc.epsilon_K
    logger.info("basis audit: %d fields, c_K=%.6g, eps_K=%.3g", len(trunc), trunc.c_K, trunc.epsilon_K)
    return frame


def max_basis_speed(trunc: BasisTruncation) -> float:
    return float(np.max(trunc.amplitudes * np.linalg.norm(trunc.directions, axis=1)))
