"""Analytic multi-material ellipse phantoms.

An ellipse assigns its full density vector to every point it contains;
where ellipses overlap the one listed last wins. Image rows run from
``+y`` (top) to ``-y`` and columns from ``-x`` to ``+x``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import ScanGeometry, fov_radius

WATER_DENSITY = 1.0
BONE_DENSITY = 1.92


@dataclass(frozen=True)
class Ellipse:
    center: tuple
    semi_axes: tuple
    rotation: float  # radians, counter-clockwise
    densities: tuple

    def __post_init__(self):
        if len(self.center) != 2 or len(self.semi_axes) != 2:
            raise ValueError("center and semi_axes must be 2-vectors")
        if min(self.semi_axes) <= 0:
            raise ValueError(f"semi-axes must be positive, got {self.semi_axes}")
        if min(self.densities) < 0:
            raise ValueError(f"densities must be nonnegative, got {self.densities}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "semi_axes", tuple(float(a) for a in self.semi_axes))
        object.__setattr__(self, "densities", tuple(float(d) for d in self.densities))

    def contains(self, xy: np.ndarray) -> np.ndarray:
        dx = xy[..., 0] - self.center[0]
        dy = xy[..., 1] - self.center[1]
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        lx = (c * dx + s * dy) / self.semi_axes[0]
        ly = (-s * dx + c * dy) / self.semi_axes[1]
        return lx * lx + ly * ly <= 1.0

    def extent(self) -> float:
        """Upper bound on the distance from the origin to any point of the ellipse."""
        return math.hypot(*self.center) + max(self.semi_axes)


class Phantom:
    """Ordered union of ellipses, evaluable at arbitrary points."""

    def __init__(self, ellipses, n_materials: int | None = None):
        self.ellipses = tuple(ellipses)
        if n_materials is None:
            if not self.ellipses:
                raise ValueError("n_materials required for an empty phantom")
            n_materials = len(self.ellipses[0].densities)
        self.n_materials = int(n_materials)
        for e in self.ellipses:
            if len(e.densities) != self.n_materials:
                raise ValueError(f"ellipse has {len(e.densities)} densities, expected {self.n_materials}")

    def eval(self, points) -> np.ndarray:
        """Density vectors at ``points`` of shape ``(..., 2)`` or ``(..., 3)``."""
        pts = np.asarray(points, dtype=np.float64)
        out = np.zeros(pts.shape[:-1] + (self.n_materials,))
        for e in self.ellipses:
            out[e.contains(pts)] = e.densities
        return out

    def max_extent(self) -> float:
        return max((e.extent() for e in self.ellipses), default=0.0)

    def check_fits(self, radius: float) -> None:
        if self.max_extent() > radius:
            raise ValueError(
                f"phantom extends to {self.max_extent():.2f} mm, beyond FOV radius {radius:.2f} mm")

    def rotated(self, angle: float) -> "Phantom":
        c, s = math.cos(angle), math.sin(angle)
        return Phantom([Ellipse((c * e.center[0] - s * e.center[1], s * e.center[0] + c * e.center[1]),
                                e.semi_axes, e.rotation + angle, e.densities) for e in self.ellipses],
                       self.n_materials)

    def to_dict(self) -> dict:
        return {"n_materials": self.n_materials,
                "ellipses": [{"center_mm": list(e.center), "semi_axes_mm": list(e.semi_axes),
                              "rotation_deg": math.degrees(e.rotation),
                              "densities": list(e.densities)} for e in self.ellipses]}

    @classmethod
    def from_dict(cls, d) -> "Phantom":
        items = d["ellipses"] if isinstance(d, dict) else d
        ells = [Ellipse(tuple(it["center_mm"]), tuple(it["semi_axes_mm"]),
                        math.radians(it.get("rotation_deg", 0.0)), tuple(it["densities"]))
                for it in items]
        n = d.get("n_materials") if isinstance(d, dict) else None
        return cls(ells, n)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Phantom":
        return cls.from_dict(json.loads(Path(path).read_text()))


def eval_phantom(ph: Phantom, x) -> np.ndarray:
    return ph.eval(np.asarray(x, dtype=np.float64)[None, :])[0]


def build_thorax_like_phantom(n_materials: int = 2) -> Phantom:
    """Thorax-like water/bone slice fitting inside a 132 mm FOV radius."""
    if n_materials != 2:
        raise ValueError("the shipped thorax phantom is defined for 2 materials (water, bone)")
    w = lambda rho: (rho, 0.0)
    bone = (0.0, BONE_DENSITY)
    deg = math.radians
    ells = [
        Ellipse((0, 0), (118, 82), 0.0, w(WATER_DENSITY)),           # body
        Ellipse((-52, 8), (34, 50), deg(-8), w(0.3)),                 # lungs
        Ellipse((52, 8), (34, 50), deg(8), w(0.3)),
        Ellipse((-58, 22), (9, 9), 0.0, w(WATER_DENSITY)),            # nodule
        Ellipse((0, 30), (9, 9), 0.0, w(0.05)),                       # airway
        Ellipse((0, -56), (16, 14), 0.0, bone),                       # vertebra
        Ellipse((0, 70), (14, 6), 0.0, bone),                         # sternum
        Ellipse((-97, -33), (9, 6), deg(35), bone),                   # ribs
        Ellipse((97, -33), (9, 6), deg(-35), bone),
        Ellipse((-95, 36), (9, 6), deg(-35), bone),
        Ellipse((95, 36), (9, 6), deg(35), bone),
    ]
    return Phantom(ells, 2)


@dataclass
class DensityImage:
    """Per-material ``n x n`` density grids (g/cm^3) over the FOV square."""

    data: np.ndarray  # (M, n, n)
    pixel_size: float

    @property
    def n_materials(self) -> int:
        return self.data.shape[0]

    @property
    def resolution(self) -> int:
        return self.data.shape[1]


def pixel_centers(radius: float, n: int) -> np.ndarray:
    """Pixel-centre coordinates of an ``n x n`` grid over ``[-radius, radius]^2``, shape ``(n, n, 2)``."""
    if n < 1:
        raise ValueError("resolution must be >= 1")
    c = -radius + (np.arange(n) + 0.5) * (2.0 * radius / n)
    xx, yy = np.meshgrid(c, c[::-1])
    return np.stack([xx, yy], axis=-1)


def rasterize(ph: Phantom, geom: ScanGeometry, n: int) -> DensityImage:
    r = fov_radius(geom)
    vals = ph.eval(pixel_centers(r, n))
    return DensityImage(np.moveaxis(vals, -1, 0).copy(), 2.0 * r / n)
