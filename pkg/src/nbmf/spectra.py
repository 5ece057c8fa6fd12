"""Energy grids, normalised X-ray spectra and mass-attenuation tables.

Units: energies in keV, mass attenuation in cm^2/g, densities in g/cm^3.
Spectra and attenuation curves live on a shared :class:`EnergyGrid` whose
sample energies are the left edges ``e_min + i * delta_e`` of its bins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

# nominal densities (g/cm^3) of the bundled tables
BUNDLED_DENSITY = {"water": 1.0, "bone": 1.92, "copper": 8.96, "aluminium": 2.699}


class TableError(ValueError):
    """Malformed or insufficient tabulated data."""


@dataclass(frozen=True)
class EnergyGrid:
    e_min: float = 10.0
    e_max: float = 150.0
    delta_e: float = 1.0

    def __post_init__(self):
        if not self.delta_e > 0:
            raise ValueError("delta_e must be positive")
        if not self.e_min > 0:
            raise ValueError("e_min must be positive")
        n = (self.e_max - self.e_min) / self.delta_e
        if n < 1 or abs(n - round(n)) > 1e-9:
            raise ValueError(
                f"[{self.e_min}, {self.e_max}] is not a whole number of {self.delta_e} keV bins")

    @property
    def n_bins(self) -> int:
        return int(round((self.e_max - self.e_min) / self.delta_e))

    @property
    def energies(self) -> np.ndarray:
        return self.e_min + np.arange(self.n_bins) * self.delta_e


@dataclass(frozen=True)
class SpectrumTable:
    """Normalised spectrum: ``sum(weights) * delta_e == 1``."""

    grid: EnergyGrid
    weights: np.ndarray
    label: str = ""

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.grid.n_bins,):
            raise ValueError(f"expected {self.grid.n_bins} weights, got shape {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("spectrum weights must be finite and nonnegative")
        if not np.any(w > 0):
            raise ValueError("spectrum has no positive weight")
        if abs(w.sum() * self.grid.delta_e - 1.0) > 1e-10:
            raise ValueError("spectrum is not normalised; use normalize_spectrum")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def bin_weights(self) -> np.ndarray:
        """``S_E * delta_E`` per bin; sums to one."""
        return self.weights * self.grid.delta_e

    def mean_energy(self) -> float:
        return float(np.sum(self.bin_weights * self.grid.energies))


@dataclass(frozen=True)
class MaterialTable:
    grid: EnergyGrid
    theta: np.ndarray
    name: str = ""
    density: float | None = field(default=None)

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64)
        if th.shape != (self.grid.n_bins,):
            raise ValueError(f"expected {self.grid.n_bins} values, got shape {th.shape}")
        if not np.all(np.isfinite(th)) or np.any(th <= 0):
            raise ValueError(f"attenuation of {self.name!r} must be finite and positive")
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)


def read_table(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an ``energy_kev,value`` CSV with a header line."""
    path = Path(path)
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, encoding="utf-8")
    except ValueError as exc:
        raise TableError(f"{path}: {exc}") from None
    if data.shape[1] != 2 or data.shape[0] < 1:
        raise TableError(f"{path}: expected two columns energy_kev,value")
    e, v = data[:, 0], data[:, 1]
    if np.any(np.diff(e) <= 0):
        bad = int(np.argmax(np.diff(e) <= 0)) + 3  # header + 1-based + next row
        raise TableError(f"{path}: energies not strictly increasing at line {bad}")
    return e, v


def bundled_table_path(name: str) -> Path:
    p = resources.files("nbmf") / "data" / f"{name}.csv"
    if not p.is_file():
        raise FileNotFoundError(f"no bundled table named {name!r}")
    return Path(str(p))


def loglog_interp(x, xp, fp) -> np.ndarray:
    """Piecewise-linear interpolation of ``log fp`` against ``log xp``."""
    return np.exp(np.interp(np.log(x), np.log(xp), np.log(fp)))


def load_attenuation_table(path, grid: EnergyGrid, name: str | None = None,
                           density: float | None = None) -> MaterialTable:
    """Resample a tabulated mass-attenuation curve onto ``grid`` (log-log)."""
    e, v = read_table(path)
    energies = grid.energies
    if energies[0] < e[0] - 1e-12 or energies[-1] > e[-1] + 1e-12:
        raise TableError(
            f"{path}: table covers [{e[0]}, {e[-1]}] keV but grid needs "
            f"[{energies[0]}, {energies[-1]}] keV")
    if np.any(v <= 0):
        raise TableError(f"{path}: attenuation values must be positive")
    name = Path(path).stem if name is None else name
    return MaterialTable(grid, loglog_interp(energies, e, v), name, density)


def bundled_material(name: str, grid: EnergyGrid) -> MaterialTable:
    return load_attenuation_table(bundled_table_path(name), grid, name, BUNDLED_DENSITY[name])


def normalize_spectrum(raw, grid: EnergyGrid, label: str = "") -> SpectrumTable:
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("raw spectrum has negative entries")
    total = raw.sum() * grid.delta_e
    if not total > 0:
        raise ValueError("raw spectrum is identically zero")
    return SpectrumTable(grid, raw / total, label)


def load_spectrum_table(path, grid: EnergyGrid, label: str | None = None) -> SpectrumTable:
    """Tabulated spectrum resampled linearly onto ``grid``; zero outside the table."""
    e, v = read_table(path)
    if np.any(v < 0):
        raise TableError(f"{path}: spectrum values must be nonnegative")
    raw = np.interp(grid.energies, e, v, left=0.0, right=0.0)
    return normalize_spectrum(raw, grid, Path(path).stem if label is None else label)


def synth_bremsstrahlung(kvp: float, filter_material: MaterialTable | None,
                         filter_thickness: float, grid: EnergyGrid,
                         filter_density: float | None = None) -> np.ndarray:
    """Kramers-shaped raw spectrum ``E (kvp - E)`` with exponential filtration.

    Parameters
    ----------
    kvp : float
        Tube voltage (kV); photons above ``kvp`` keV get zero weight.
    filter_material : MaterialTable or None
        Attenuation table of the filter; ``None`` means no filter.
    filter_thickness : float
        Filter thickness in cm.
    grid : EnergyGrid
    filter_density : float, optional
        Overrides ``filter_material.density``.

    Returns
    -------
    ndarray
        Unnormalised per-bin weights.
    """
    if kvp <= grid.e_min:
        raise ValueError(f"kvp {kvp} leaves no photons above e_min {grid.e_min}")
    if kvp > grid.e_max:
        raise ValueError(f"kvp {kvp} exceeds grid e_max {grid.e_max}")
    if filter_thickness < 0:
        raise ValueError("filter thickness must be nonnegative")
    e = grid.energies
    raw = np.where(e < kvp, np.maximum(0.0, e * (kvp - e)), 0.0)
    if filter_material is not None and filter_thickness > 0:
        rho = filter_material.density if filter_density is None else filter_density
        if rho is None:
            raise ValueError(f"filter {filter_material.name!r} has no density")
        raw = raw * np.exp(-filter_material.theta * rho * filter_thickness)
    return raw


def synth_spectrum(kvp: float, grid: EnergyGrid, filter_name: str | None = None,
                   thickness_cm: float = 0.0, label: str | None = None) -> SpectrumTable:
    """Normalised synthetic spectrum using a bundled filter table."""
    filt = bundled_material(filter_name, grid) if filter_name else None
    raw = synth_bremsstrahlung(kvp, filt, thickness_cm, grid)
    return normalize_spectrum(raw, grid, label or f"{kvp:g}kVp")


def monochromatic(grid: EnergyGrid, energy: float, label: str = "mono") -> SpectrumTable:
    """Spectrum with all weight in the bin sampled at ``energy``."""
    idx = int(round((energy - grid.e_min) / grid.delta_e))
    if not (0 <= idx < grid.n_bins) or not math.isclose(grid.energies[idx], energy):
        raise ValueError(f"{energy} keV is not a grid node")
    raw = np.zeros(grid.n_bins)
    raw[idx] = 1.0
    return normalize_spectrum(raw, grid, label)
