"""Ray-driven polychromatic forward projection.

A projection value is ``p = -ln sum_E S_E dE exp(-sum_m theta_m(E) g_m)``
where ``g_m`` is the line integral (g/cm^2) of material ``m`` along the ray,
approximated by midpoint sums of the field over the FOV chord.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .geometry import Ray, SamplePlan, ScanGeometry, rays_for, sample_plan
from .spectra import MaterialTable, SpectrumTable

MM_TO_CM = 0.1


class MaterialField(Protocol):
    """Anything mapping points ``(..., 3)`` (mm) to densities ``(..., M)`` (g/cm^3)."""

    n_materials: int

    def eval(self, points: np.ndarray) -> np.ndarray: ...


def line_integrals(fld: MaterialField, ray: Ray, plan: SamplePlan) -> np.ndarray:
    pts = ray.origin[None, :] + plan.t[:, None] * ray.direction[None, :]
    f = np.asarray(fld.eval(pts), dtype=np.float64)
    return f.sum(axis=0) * (plan.step * MM_TO_CM)


def batch_line_integrals(fld: MaterialField, origins, directions, plan: SamplePlan) -> np.ndarray:
    """Line integrals for ``B`` rays at once, shape ``(B, M)``."""
    t = plan.t
    pts = origins[:, None, :] + t[None, :, None] * directions[:, None, :]
    f = np.asarray(fld.eval(pts), dtype=np.float64)
    return f.sum(axis=1) * (plan.step * MM_TO_CM)


def attenuation_matrix(materials: Sequence[MaterialTable]) -> np.ndarray:
    """Stack of ``theta_m(E)``, shape ``(M, n_bins)``."""
    grids = {m.grid for m in materials}
    if len(grids) != 1:
        raise ValueError("materials must share one energy grid")
    return np.stack([m.theta for m in materials])


def spectral_exponents(theta: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``sum_m theta_m(E) g_m`` for each ray, shape ``(..., n_bins)``."""
    return np.asarray(g) @ theta


def spectral_terms(w: np.ndarray, a: np.ndarray):
    """Shifted terms ``w_E exp(-(a_E - a_min))``, their sum, and ``a_min``.

    The shift uses the smallest exponent among bins that carry weight, so the
    sum is at least the weight of that bin and never underflows to zero.
    """
    live = w > 0
    a_min = np.where(live, a, np.inf).min(axis=-1, keepdims=True)
    e = w * np.exp(-np.where(live, a - a_min, np.inf))
    return e, e.sum(axis=-1), a_min[..., 0]


def _poly_from_exponents(w: np.ndarray, a: np.ndarray) -> np.ndarray:
    _, s, a_min = spectral_terms(w, a)
    # dividing by sum(w) (one up to rounding) makes p exactly 0 for a zero object
    return a_min - np.log(s / w.sum())


def poly_projection_batch(w: np.ndarray, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Vectorised projection values.

    Parameters
    ----------
    w : ndarray, shape (n_bins,)
        Bin weights ``S_E * dE`` summing to one.
    theta : ndarray, shape (M, n_bins)
    g : ndarray, shape (..., M)
    """
    g = np.asarray(g, dtype=np.float64)
    if np.isnan(g).any():
        raise ValueError("NaN line integral")
    return _poly_from_exponents(w, spectral_exponents(theta, g))


def poly_projection(spectrum: SpectrumTable, materials: Sequence[MaterialTable], g) -> float:
    if any(m.grid != spectrum.grid for m in materials):
        raise ValueError("spectrum and materials must share one energy grid")
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (len(materials),):
        raise ValueError(f"expected {len(materials)} line integrals, got shape {g.shape}")
    return float(poly_projection_batch(spectrum.bin_weights, attenuation_matrix(materials), g))


@dataclass
class Sinogram:
    """Per-spectrum projection arrays ``data[k]`` of shape ``(n_angles_k, n_det)``."""

    data: list
    geometry: ScanGeometry
    labels: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.data) != self.geometry.n_spectra or len(self.labels) != len(self.data):
            raise ValueError("sinogram needs one array and one label per spectrum")
        for k, (arr, angles) in enumerate(zip(self.data, self.geometry.angle_sets)):
            if arr.shape != (len(angles), self.geometry.n_det):
                raise ValueError(f"spectrum {k}: shape {arr.shape} does not match geometry")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"spectrum {k}: non-finite projection values")

    @property
    def n_spectra(self) -> int:
        return len(self.data)

    def quantized(self) -> "Sinogram":
        """Copy rounded to float32, the on-disk precision."""
        return Sinogram([a.astype("<f4").astype(np.float64) for a in self.data],
                        self.geometry, list(self.labels), dict(self.meta))

    def save(self, stem) -> list[Path]:
        """Write ``<stem>_k<k>.f32`` per spectrum plus a ``<stem>.json`` sidecar."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        files = []
        for k, arr in enumerate(self.data):
            p = stem.with_name(f"{stem.name}_k{k}.f32")
            p.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            files.append(p)
        side = {"geometry": self.geometry.to_dict(), "labels": list(self.labels),
                "files": [p.name for p in files],
                "shapes": [list(a.shape) for a in self.data], "dtype": "float32-le",
                **self.meta}
        sidecar = stem.with_suffix(".json") if not stem.suffix else stem.with_name(stem.name + ".json")
        sidecar.write_text(json.dumps(side, indent=2))
        return [sidecar, *files]

    @classmethod
    def load(cls, sidecar) -> "Sinogram":
        sidecar = Path(sidecar)
        side = json.loads(sidecar.read_text())
        geom = ScanGeometry.from_dict(side["geometry"])
        data = []
        for name, shape in zip(side["files"], side["shapes"]):
            raw = np.frombuffer((sidecar.parent / name).read_bytes(), dtype="<f4")
            if raw.size != shape[0] * shape[1]:
                raise ValueError(f"{name}: expected {shape[0] * shape[1]} values, found {raw.size}")
            data.append(raw.reshape(shape).astype(np.float64))
        meta = {k: v for k, v in side.items()
                if k not in ("geometry", "labels", "files", "shapes", "dtype")}
        return cls(data, geom, side["labels"], meta)

    def to_csv(self, path, k: int = 0) -> None:
        angles = np.asarray(self.geometry.angle_sets[k])
        header = "angle_rad," + ",".join(f"det{j}" for j in range(self.geometry.n_det))
        np.savetxt(path, np.column_stack([angles, self.data[k]]), delimiter=",",
                   header=header, comments="", fmt="%.9g")


def simulate_sinogram(fld: MaterialField, geom: ScanGeometry, spectra: Sequence[SpectrumTable],
                      materials: Sequence[MaterialTable], step: float,
                      chunk_rays: int = 2048, workers: int = 1) -> Sinogram:
    """Polychromatic projections of ``fld`` for every (spectrum, angle, detector).

    With ``workers > 1`` ray chunks are evaluated on a thread pool; results
    are written by index, so the output does not depend on scheduling.
    """
    if len(spectra) != geom.n_spectra:
        raise ValueError(f"{len(spectra)} spectra for {geom.n_spectra} angle sets")
    if len(materials) != fld.n_materials:
        raise ValueError(f"{len(materials)} materials for a {fld.n_materials}-material field")
    theta = attenuation_matrix(materials)
    plan = sample_plan(geom, step)
    out = []
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for spec, angles in zip(spectra, geom.angle_sets):
            if spec.grid != materials[0].grid:
                raise ValueError("spectra and materials must share one energy grid")
            phi = np.repeat(np.asarray(angles), geom.n_det)
            det = np.tile(np.arange(geom.n_det), len(angles))
            p = np.empty(phi.size)

            def work(s, w=spec.bin_weights):
                o, d = rays_for(geom, phi[s:s + chunk_rays], det[s:s + chunk_rays])
                p[s:s + chunk_rays] = poly_projection_batch(w, theta, batch_line_integrals(fld, o, d, plan))

            starts = range(0, phi.size, chunk_rays)
            if pool is None:
                for s in starts:
                    work(s)
            else:
                for f in [pool.submit(work, s) for s in starts]:
                    f.result()
            out.append(p.reshape(len(angles), geom.n_det))
    finally:
        if pool is not None:
            pool.shutdown()
    return Sinogram(out, geom, [s.label for s in spectra], {"step_mm": step})


def add_poisson_noise(sino: Sinogram, i0: float, seed: int) -> Sinogram:
    """Poisson counts ``n ~ Poisson(i0 exp(-p))`` re-logged as ``-ln(max(n, 1) / i0)``.

    Each spectrum draws from its own Philox stream keyed by ``(seed, k)``.
    The number of zero counts clamped to one is stored in ``meta['n_clamped']``.
    """
    if not i0 > 0:
        raise ValueError("i0 must be positive")
    noisy, clamped = [], 0
    for k, p in enumerate(sino.data):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, k])))
        n = rng.poisson(i0 * np.exp(-p)).astype(np.float64)
        zero = n == 0
        clamped += int(zero.sum())
        n[zero] = 1.0
        noisy.append(-np.log(n / i0))
    meta = dict(sino.meta, i0=i0, seed=seed, n_clamped=clamped)
    return Sinogram(noisy, sino.geometry, list(sino.labels), meta)

