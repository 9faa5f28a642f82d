"""
Initial velocity fields shipped with the presets
"""
import numpy as np

from app.services.errors import ConfigError
from app.services.spectral_core import GridSpec, VectorField, band_limit, fft, ifft, leray_project, norm_l2, wavenumbers


def taylor_green(grid: GridSpec, amplitude: float = 1.0) -> VectorField:
    """(A sin x₁ cos x₂, −A cos x₁ sin x₂), extended by cos x₃ and a zero third component in 3D"""
    if grid.n == 2:
        return VectorField.from_function(
            grid, lambda x, y: (amplitude * np.sin(x) * np.cos(y), -amplitude * np.cos(x) * np.sin(y)),
            solenoidal=True)
    return VectorField.from_function(
        grid, lambda x, y, z: (amplitude * np.sin(x) * np.cos(y) * np.cos(z),
                               -amplitude * np.cos(x) * np.sin(y) * np.cos(z),
                               0.0 * x),
        solenoidal=True)


def random_band(grid: GridSpec, band: int, amplitude: float = 1.0, seed: int = 0,
                solenoidal: bool = True) -> VectorField:
    """
    Random field with modes |k| <= band, scaled to RMS speed `amplitude`

    Spectral amplitudes decay like |k|^{-2} so the field stays smooth.
    """
    if band >= grid.m // 2:
        raise ConfigError("initial.band", f"band {band} is not resolved on m={grid.m}")
    rng = np.random.default_rng(seed)
    wn = wavenumbers(grid)
    coeffs = fft(rng.standard_normal((grid.n,) + grid.shape), grid)
    coeffs = coeffs * (wn.k2 <= band ** 2) / (1.0 + wn.k2)
    field = VectorField(grid, ifft(coeffs, grid))
    if solenoidal:
        field = leray_project(field)
    # remove the mean flow
    field = VectorField(grid, field.components - field.components.mean(axis=tuple(range(1, grid.n + 1)), keepdims=True),
                        field.solenoidal)
    rms = norm_l2(field) / np.sqrt(grid.volume)
    if rms == 0:
        return field
    return field * (amplitude / rms)


def random_scalar(grid: GridSpec, band: int, seed: int = 0) -> np.ndarray:
    """Mean-zero band-limited scalar samples"""
    rng = np.random.default_rng(seed)
    values = band_limit(rng.standard_normal(grid.shape), grid, band)
    return values - values.mean()


def build_initial_condition(preset: str, grid: GridSpec, amplitude: float = 1.0, band: int = 4,
                            seed: int = 1) -> VectorField:
    if preset == "taylor_green":
        return taylor_green(grid, amplitude)
    if preset == "random_band":
        return random_band(grid, band, amplitude, seed)
    if preset == "zero":
        return VectorField.zeros(grid)
    raise ConfigError("initial.preset", f"unknown preset {preset!r}")
