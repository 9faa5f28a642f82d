"""
Periodic grid, Fourier transforms and the differential/projection operators
on the torus [0, 2π)^n
"""
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Tuple, Union

import numpy as np

from app.services.errors import GridMismatchError, NonZeroMeanError, LabError

TWO_PI = 2.0 * np.pi

# Relative divergence tolerance for fields tagged solenoidal
SOLENOIDAL_TOL = 1e-8


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid with m points per axis in n dimensions"""

    n: int
    m: int

    def __post_init__(self):
        if self.n not in (2, 3):
            raise LabError(f"grid dimension must be 2 or 3, got {self.n}")
        if self.m < 8 or self.m & (self.m - 1):
            raise LabError(f"grid points per axis must be a power of two >= 8, got {self.m}")

    @property
    def L(self) -> float:
        return TWO_PI

    @property
    def h(self) -> float:
        return TWO_PI / self.m

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.m,) * self.n

    @property
    def axes(self) -> Tuple[int, ...]:
        """Spatial axes of a sample array with leading component/batch axes"""
        return tuple(range(-self.n, 0))

    @property
    def volume(self) -> float:
        return TWO_PI ** self.n

    @property
    def cell_volume(self) -> float:
        return self.h ** self.n

    def coordinates(self) -> np.ndarray:
        """Node coordinates, shape (n, m, ..., m)"""
        x = np.arange(self.m) * self.h
        return np.stack(np.meshgrid(*([x] * self.n), indexing="ij"))

    def nodes(self) -> np.ndarray:
        """Node coordinates as a point list, shape (m^n, n)"""
        return self.coordinates().reshape(self.n, -1).T

    def check_same(self, other: "GridSpec"):
        if self != other:
            raise GridMismatchError(f"grid mismatch: {self} vs {other}")


class Wavenumbers:
    """Integer wavevectors and derived masks for one grid; arrays are read-only"""

    def __init__(self, grid: GridSpec):
        m, n = grid.m, grid.n
        k1 = np.fft.fftfreq(m, 1.0 / m).round().astype(np.int64)
        self.k1 = k1
        self.k = np.stack(np.meshgrid(*([k1] * n), indexing="ij")).astype(float)
        self.k2 = np.sum(self.k ** 2, axis=0)
        self.inv_k2 = np.zeros_like(self.k2)
        self.inv_k2[self.k2 > 0] = 1.0 / self.k2[self.k2 > 0]
        # Nyquist modes have no real partner; they are dropped everywhere
        self.keep = np.all(np.abs(self.k) < m // 2, axis=0)
        self.max_k = m // 2 - 1

        # zero-padding indices for 3/2-rule products
        self.padded = 3 * m // 2
        half = m // 2
        self.pad_index = np.concatenate([np.arange(half), np.arange(self.padded - half, self.padded)])

        for arr in (self.k1, self.k, self.k2, self.inv_k2, self.keep, self.pad_index):
            arr.setflags(write=False)


@lru_cache(maxsize=None)
def wavenumbers(grid: GridSpec) -> Wavenumbers:
    return Wavenumbers(grid)


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: GridSpec
    samples: np.ndarray

    # numpy scalars on the left defer to __rmul__
    __array_ufunc__ = None

    def __post_init__(self):
        if self.samples.shape != self.grid.shape:
            raise GridMismatchError(f"scalar samples shape {self.samples.shape} != {self.grid.shape}")

    @property
    def data(self) -> np.ndarray:
        return self.samples

    def mean(self) -> float:
        return float(np.mean(self.samples))

    def __add__(self, other: "ScalarField") -> "ScalarField":
        self.grid.check_same(other.grid)
        return ScalarField(self.grid, self.samples + other.samples)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        self.grid.check_same(other.grid)
        return ScalarField(self.grid, self.samples - other.samples)

    def __mul__(self, c: float) -> "ScalarField":
        return ScalarField(self.grid, self.samples * c)

    __rmul__ = __mul__

    def __neg__(self) -> "ScalarField":
        return ScalarField(self.grid, -self.samples)

    @classmethod
    def from_function(cls, grid: GridSpec, fn) -> "ScalarField":
        return cls(grid, np.asarray(fn(*grid.coordinates()), dtype=float))


@dataclass(frozen=True, eq=False)
class VectorField:
    """
    n-component real field on a grid

    `components` has shape (n, m, ..., m). `solenoidal` is a tag set by
    operations whose output is divergence free.
    """

    grid: GridSpec
    components: np.ndarray
    solenoidal: bool = field(default=False)

    __array_ufunc__ = None

    def __post_init__(self):
        expected = (self.grid.n,) + self.grid.shape
        if self.components.shape != expected:
            raise GridMismatchError(f"vector components shape {self.components.shape} != {expected}")

    @property
    def data(self) -> np.ndarray:
        return self.components

    def component(self, j: int) -> ScalarField:
        return ScalarField(self.grid, self.components[j])

    def _combine(self, other: "VectorField", values: np.ndarray) -> "VectorField":
        return VectorField(self.grid, values, self.solenoidal and other.solenoidal)

    def __add__(self, other: "VectorField") -> "VectorField":
        self.grid.check_same(other.grid)
        return self._combine(other, self.components + other.components)

    def __sub__(self, other: "VectorField") -> "VectorField":
        self.grid.check_same(other.grid)
        return self._combine(other, self.components - other.components)

    def __mul__(self, c: float) -> "VectorField":
        return VectorField(self.grid, self.components * c, self.solenoidal)

    __rmul__ = __mul__

    def __truediv__(self, c: float) -> "VectorField":
        return VectorField(self.grid, self.components / c, self.solenoidal)

    def __neg__(self) -> "VectorField":
        return VectorField(self.grid, -self.components, self.solenoidal)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.components)))

    def max_magnitude(self) -> float:
        return float(np.sqrt(np.max(np.sum(self.components ** 2, axis=0))))

    @classmethod
    def zeros(cls, grid: GridSpec) -> "VectorField":
        return cls(grid, np.zeros((grid.n,) + grid.shape), solenoidal=True)

    @classmethod
    def constant(cls, grid: GridSpec, vector) -> "VectorField":
        vector = np.asarray(vector, dtype=float)
        values = np.broadcast_to(vector.reshape((grid.n,) + (1,) * grid.n), (grid.n,) + grid.shape)
        return cls(grid, values.copy(), solenoidal=True)

    @classmethod
    def from_function(cls, grid: GridSpec, fn, solenoidal: bool = False) -> "VectorField":
        """Sample `fn(*coords)` returning a sequence of n component arrays"""
        coords = grid.coordinates()
        values = [np.broadcast_to(np.asarray(c, dtype=float), grid.shape) for c in fn(*coords)]
        return cls(grid, np.stack(values), solenoidal)


Field = Union[ScalarField, VectorField]


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Fourier amplitudes in numpy FFT order; a constant c maps to c at k=0"""

    grid: GridSpec
    coefficients: np.ndarray

    @property
    def is_vector(self) -> bool:
        return self.coefficients.ndim == self.grid.n + 1


# ---------------------------------------------------------------------------
# array-level transforms shared by the service modules
# ---------------------------------------------------------------------------

def fft(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Forward transform over the trailing n axes with Nyquist modes removed"""
    coeffs = np.fft.fftn(values, axes=grid.axes, norm="forward")
    return coeffs * wavenumbers(grid).keep


def ifft(coeffs: np.ndarray, grid: GridSpec) -> np.ndarray:
    return np.fft.ifftn(coeffs, axes=grid.axes, norm="forward").real


def to_padded(coeffs: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Physical samples of a band-limited field on the 3/2-refined grid"""
    wn = wavenumbers(grid)
    padded = np.zeros(coeffs.shape[:-grid.n] + (wn.padded,) * grid.n, dtype=complex)
    padded[(Ellipsis,) + np.ix_(*([wn.pad_index] * grid.n))] = coeffs
    return np.fft.ifftn(padded, axes=grid.axes, norm="forward").real


def from_padded(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Truncate samples on the refined grid back to the grid's spectrum"""
    wn = wavenumbers(grid)
    coeffs = np.fft.fftn(values, axes=grid.axes, norm="forward")
    coeffs = coeffs[(Ellipsis,) + np.ix_(*([wn.pad_index] * grid.n))]
    return coeffs * wn.keep


def spectral_gradient(coeffs: np.ndarray, grid: GridSpec) -> np.ndarray:
    """∂_j of every leading component: output shape (n,) + coeffs.shape"""
    k = wavenumbers(grid).k
    extra = coeffs.ndim - grid.n
    ik = 1j * k.reshape((grid.n,) + (1,) * extra + grid.shape)
    return ik * coeffs[np.newaxis]


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def dft_forward(f: Field) -> SpectralField:
    return SpectralField(f.grid, fft(f.data, f.grid))


def dft_inverse(F: SpectralField) -> Field:
    values = ifft(F.coefficients, F.grid)
    if F.is_vector:
        return VectorField(F.grid, values)
    return ScalarField(F.grid, values)


def gradient(f: ScalarField) -> VectorField:
    grid = f.grid
    return VectorField(grid, ifft(spectral_gradient(fft(f.samples, grid), grid), grid))


def divergence(v: VectorField) -> ScalarField:
    grid = v.grid
    k = wavenumbers(grid).k
    return ScalarField(grid, ifft(np.sum(1j * k * fft(v.components, grid), axis=0), grid))


def vector_laplacian(v: VectorField) -> VectorField:
    grid = v.grid
    k2 = wavenumbers(grid).k2
    return VectorField(grid, ifft(-k2 * fft(v.components, grid), grid), v.solenoidal)


def _dealiased_directional(u: np.ndarray, xi: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Σ_j u_j ∂_j ξ_i on the refined grid, returned as grid spectrum"""
    u_hat = fft(u, grid)
    dxi_hat = spectral_gradient(fft(xi, grid), grid)  # [j, i]
    u_pad = to_padded(u_hat, grid)
    dxi_pad = to_padded(dxi_hat, grid)
    product = np.einsum("j...,ji...->i...", u_pad, dxi_pad)
    return from_padded(product, grid)


def _dealiased_transpose(u: np.ndarray, xi: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Σ_j ∂_i u_j ξ_j on the refined grid, returned as grid spectrum"""
    du_hat = spectral_gradient(fft(u, grid), grid)  # [i, j]
    xi_pad = to_padded(fft(xi, grid), grid)
    du_pad = to_padded(du_hat, grid)
    product = np.einsum("ij...,j...->i...", du_pad, xi_pad)
    return from_padded(product, grid)


def directional_derivative(u: VectorField, xi: VectorField) -> VectorField:
    """∇_u ξ = ⟨u, ∇⟩ ξ with the product dealiased"""
    u.grid.check_same(xi.grid)
    grid = u.grid
    return VectorField(grid, ifft(_dealiased_directional(u.components, xi.components, grid), grid))


def transpose_gradient_product(u: VectorField, xi: VectorField) -> VectorField:
    """u′⊗ξ = (∇u)ᵀ ξ, component i = Σ_j ∂_i u_j ξ_j"""
    u.grid.check_same(xi.grid)
    grid = u.grid
    return VectorField(grid, ifft(_dealiased_transpose(u.components, xi.components, grid), grid))


def project_coefficients(coeffs: np.ndarray, grid: GridSpec) -> np.ndarray:
    """v̂ − k⟨k, v̂⟩/|k|² per mode; the k = 0 mode passes through"""
    wn = wavenumbers(grid)
    k_dot = np.sum(wn.k * coeffs, axis=0)
    return coeffs - wn.k * (k_dot * wn.inv_k2)


def leray_project(v: VectorField) -> VectorField:
    grid = v.grid
    return VectorField(grid, ifft(project_coefficients(fft(v.components, grid), grid), grid), solenoidal=True)


def gradient_part(v: VectorField) -> VectorField:
    """(I − P)v, the gradient component of the Helmholtz decomposition"""
    grid = v.grid
    coeffs = fft(v.components, grid)
    return VectorField(grid, ifft(coeffs - project_coefficients(coeffs, grid), grid))


def solve_poisson(g: ScalarField) -> ScalarField:
    """Mean-zero solution f of Δf = g"""
    grid = g.grid
    mean = g.mean()
    if abs(mean) > 1e-10 * norm_l2(g):
        raise NonZeroMeanError(mean)
    wn = wavenumbers(grid)
    return ScalarField(grid, ifft(-fft(g.samples, grid) * wn.inv_k2, grid))


def band_limit(values: np.ndarray, grid: GridSpec, kmax: float) -> np.ndarray:
    """Drop every mode with |k| > kmax"""
    wn = wavenumbers(grid)
    return ifft(fft(values, grid) * (wn.k2 <= kmax ** 2), grid)


def inner_product_l2(a: Field, b: Field) -> float:
    """⟪a, b⟫ = ∫⟨a, b⟩ dx with ∫dx = (2π)^n"""
    a.grid.check_same(b.grid)
    return float(np.sum(a.data * b.data) * a.grid.cell_volume)


def norm_l2(a: Field) -> float:
    return float(np.sqrt(max(inner_product_l2(a, a), 0.0)))


def evaluate_at(f: Field, points: np.ndarray) -> np.ndarray:
    """
    Trigonometric interpolation of a band-limited field at arbitrary points

    Args:
        f: scalar or vector field
        points: array of shape (P, n)

    Returns:
        (P,) for scalar fields, (P, n) for vector fields
    """
    grid = f.grid
    points = np.atleast_2d(np.asarray(points, dtype=float))
    coeffs = fft(f.data, grid)
    if coeffs.ndim == grid.n:
        coeffs = coeffs[np.newaxis]
    k1 = wavenumbers(grid).k1
    phases = [np.exp(1j * np.outer(points[:, j], k1)) for j in range(grid.n)]
    partial = np.tensordot(phases[0], coeffs, axes=([1], [1]))  # (P, c, ...)
    if grid.n == 2:
        values = np.einsum("pcb,pb->pc", partial, phases[1]).real
    else:
        partial = np.einsum("pcbd,pb->pcd", partial, phases[1])
        values = np.einsum("pcd,pd->pc", partial, phases[2]).real
    if isinstance(f, ScalarField):
        return values[:, 0]
    return values
