"""Fan-beam scan geometry, ray generation and uniform sampling along rays.

Coordinates follow a right-handed frame with the origin on the rotation axis,
``+y`` pointing at the source at angle zero and ``z`` along the rotation axis.
All lengths are in millimetres. The scan is a 2-D slice (``z = 0``, ``v = 0``)
but vectors keep three components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class ScanGeometry:
    """Fan-beam acquisition with one ordered angle list per spectrum.

    Parameters
    ----------
    sod : float
        Source to rotation-centre distance (mm).
    sdd : float
        Source to detector distance (mm).
    n_det : int
        Number of detector units.
    det_size : float
        Detector unit width (mm).
    angle_sets : tuple of tuple of float
        ``angle_sets[k]`` holds the rotation angles (radians, in ``[0, 2pi)``)
        at which spectrum ``k`` was measured.
    """

    sod: float
    sdd: float
    n_det: int
    det_size: float
    angle_sets: tuple = field(default=((0.0,),))

    def __post_init__(self):
        if not self.sod > 0:
            raise ValueError(f"sod must be positive, got {self.sod}")
        if not self.sdd > self.sod:
            raise ValueError(f"sdd ({self.sdd}) must exceed sod ({self.sod})")
        if int(self.n_det) != self.n_det or self.n_det < 1:
            raise ValueError(f"n_det must be a positive integer, got {self.n_det}")
        if not self.det_size > 0:
            raise ValueError(f"det_size must be positive, got {self.det_size}")
        sets = tuple(tuple(float(a) for a in s) for s in self.angle_sets)
        if len(sets) == 0:
            raise ValueError("angle_sets needs one entry per spectrum")
        for k, s in enumerate(sets):
            if len(s) == 0:
                raise ValueError(f"angle set {k} is empty")
            for a in s:
                if not (0.0 <= a < TWO_PI):
                    raise ValueError(f"angle {a} of set {k} outside [0, 2pi)")
        object.__setattr__(self, "n_det", int(self.n_det))
        object.__setattr__(self, "angle_sets", sets)

    @property
    def n_spectra(self) -> int:
        return len(self.angle_sets)

    @property
    def half_width(self) -> float:
        return 0.5 * self.n_det * self.det_size

    def detector_u(self, det_index) -> np.ndarray:
        """Centred detector coordinate (mm) of detector unit(s)."""
        j = np.asarray(det_index)
        return (j + 0.5 - 0.5 * self.n_det) * self.det_size

    def with_angle_sets(self, angle_sets) -> "ScanGeometry":
        return ScanGeometry(self.sod, self.sdd, self.n_det, self.det_size, tuple(angle_sets))

    def to_dict(self) -> dict:
        return {
            "sod_mm": self.sod,
            "sdd_mm": self.sdd,
            "n_det": self.n_det,
            "det_size_mm": self.det_size,
            "angle_sets": [list(s) for s in self.angle_sets],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        return cls(d["sod_mm"], d["sdd_mm"], d["n_det"], d["det_size_mm"],
                   tuple(tuple(s) for s in d["angle_sets"]))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-12:
            raise ValueError(f"ray direction must be a unit vector (norm {n})")


@dataclass(frozen=True)
class SamplePlan:
    """Midpoint sampling ``t_i = t_start + (i - 1/2) * step`` for ``i = 1..n_points``.

    ``t_end`` is ``t_start + n_points * step`` so every midpoint lies inside
    the interval even when ``2R / step`` is not an integer.
    """

    t_start: float
    t_end: float
    step: float
    n_points: int

    @property
    def t(self) -> np.ndarray:
        return self.t_start + (np.arange(self.n_points) + 0.5) * self.step


def uniform_angles(n: int, offset: int = 0, stride: int = 1, total: int | None = None,
                   full_rotation: bool = True) -> tuple:
    """``n`` equally spaced angles taken from a sweep of ``total`` positions.

    With ``stride=2`` and ``offset`` 0 or 1 this produces the even/odd
    interleaved sets used for geometrically inconsistent acquisitions.
    """
    total = n * stride if total is None else total
    span = TWO_PI if full_rotation else math.pi
    idx = offset + stride * np.arange(n)
    if idx.max() >= total:
        raise ValueError(f"angle index {idx.max()} exceeds sweep of {total}")
    return tuple(float(a) for a in idx * (span / total))


def fov_radius(geom: ScanGeometry) -> float:
    """Radius (mm) of the disk covered by the fan at every view."""
    h = geom.half_width
    return geom.sod * h / math.sqrt(geom.sdd ** 2 + h ** 2)


def default_step(geom: ScanGeometry, n_grid: int) -> float:
    """Half a pixel of an ``n_grid`` x ``n_grid`` image over the FOV square."""
    return 2.0 * fov_radius(geom) / (2 * n_grid)


def rotation_matrix(phi: float) -> np.ndarray:
    """Counter-clockwise rotation about ``z``."""
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def ray_for(geom: ScanGeometry, phi: float, det_index: int) -> Ray:
    if int(det_index) != det_index or not (0 <= det_index < geom.n_det):
        raise IndexError(f"detector index {det_index} outside [0, {geom.n_det})")
    o, d = rays_for(geom, phi, det_index)
    return Ray(o[0], d[0])


def rays_for(geom: ScanGeometry, phi, det_index) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`ray_for` returning ``(origins, directions)`` of shape ``(B, 3)``.

    Produces the same numbers as :func:`ray_for` for every element.
    """
    phi = np.asarray(phi, dtype=np.float64).ravel()
    j = np.asarray(det_index).ravel()
    phi, j = np.broadcast_arrays(phi, j)
    if np.any(j < 0) or np.any(j >= geom.n_det):
        raise IndexError("detector index out of range")
    u = geom.detector_u(j).astype(np.float64)
    norm = np.sqrt(u * u + geom.sdd ** 2)
    dx, dy = u / norm, -geom.sdd / norm
    c, s = np.cos(phi), np.sin(phi)
    origins = np.stack([-s * geom.sod, c * geom.sod, np.zeros_like(phi)], axis=-1)
    dirs = np.stack([c * dx - s * dy, s * dx + c * dy, np.zeros_like(phi)], axis=-1)
    return origins, dirs


def sample_plan(geom: ScanGeometry, step: float) -> SamplePlan:
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    r = fov_radius(geom)
    n = max(1, math.ceil(2.0 * r / step - 1e-9))
    t0 = geom.sod - r
    return SamplePlan(t0, t0 + n * step, step, n)


def sample_points(ray: Ray, geom: ScanGeometry, step: float) -> np.ndarray:
    """Midpoint samples along ``ray`` over the FOV chord, shape ``(N, 3)``."""
    t = sample_plan(geom, step).t
    return ray.origin[None, :] + t[:, None] * ray.direction[None, :]
