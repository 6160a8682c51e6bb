"""Single-axis tilt geometry: detector grid, beam models, rays and projections.

Conventions used throughout the package:

* World units: one detector pixel edge = ``pixel_size`` world units (default 1.0).
* The tilt axis is the detector v axis, which coincides with the world y axis.
* At 0 degrees the beam travels along world +z and the detector u axis is world +x.
* The view frame is (u, v, beam): ``p_view = view_rotation(angle) @ p_world``.
* Pixel (u, v) covers the half-open square [u, u+1) x [v, v+1) in continuous
  detector coordinates, so its centre sits at (u + 0.5, v + 0.5); the detector
  centre maps to the world origin.  Functions returning detector positions use
  fractional pixel indices, i.e. the centre of pixel i maps to exactly i.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np

from .errors import DomainError

# Cone-beam points closer to the source than this fraction of source_distance
# are treated as behind the source.
_CONE_NEAR_FRACTION = 1e-6


class BeamKind(Enum):
    PARALLEL = "parallel"
    CONE = "cone"


@dataclass(frozen=True)
class DetectorGrid:
    """Detector sampling: pixel counts and pixel edge length in world units."""

    nu: int
    nv: int
    pixel_size: float = 1.0

    def __post_init__(self):
        if self.nu <= 0 or self.nv <= 0:
            raise DomainError(f"detector needs positive pixel counts, got {self.nu}x{self.nv}")
        if not (self.pixel_size > 0) or not math.isfinite(self.pixel_size):
            raise DomainError(f"pixel_size must be positive and finite, got {self.pixel_size}")

    @property
    def half_extent(self) -> float:
        """Largest half side of the detector in world units."""
        return 0.5 * max(self.nu, self.nv) * self.pixel_size


@dataclass(frozen=True)
class BeamModel:
    """Illumination model.

    ``source_distance`` (world units, cone only) is the distance from the point
    source to the plane through the rotation axis. ``convergence_angle_deg`` and
    ``probe_sigma`` describe the physical probe; the simulator may use
    ``probe_sigma`` for an optional blur, the renderer ignores both.
    """

    kind: BeamKind = BeamKind.PARALLEL
    source_distance: float | None = None
    convergence_angle_deg: float = 0.0
    probe_sigma: float = 0.0

    def __post_init__(self):
        if self.kind is BeamKind.CONE:
            if self.source_distance is None or not (self.source_distance > 0):
                raise DomainError("cone beam requires a positive source_distance")
        if self.probe_sigma < 0:
            raise DomainError("probe_sigma must be non-negative")


@dataclass(frozen=True)
class TiltGeometry:
    """An ordered tilt series: angles plus shared detector and beam."""

    angles_deg: Tuple[float, ...]
    detector: DetectorGrid
    beam: BeamModel = BeamModel()

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles_deg)
        object.__setattr__(self, "angles_deg", angles)
        if len(angles) == 0:
            raise DomainError("tilt series needs at least one angle")
        if any(not abs(a) < 90.0 for a in angles):
            raise DomainError("tilt angles must satisfy |angle| < 90 degrees")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise DomainError("tilt angles must be strictly increasing")
        if self.beam.kind is BeamKind.CONE:
            if self.beam.source_distance <= self.detector.half_extent:
                raise DomainError(
                    "cone source_distance must exceed the detector half extent "
                    f"({self.beam.source_distance} <= {self.detector.half_extent})"
                )

    @property
    def n_views(self) -> int:
        return len(self.angles_deg)

    def check_view(self, view: int) -> int:
        if not 0 <= view < self.n_views:
            raise DomainError(f"view index {view} outside [0, {self.n_views})")
        return view


@dataclass(frozen=True)
class Ray:
    """World-space ray with unit direction."""

    origin: np.ndarray
    direction: np.ndarray


def view_rotation(angle_deg: float) -> np.ndarray:
    """Rotation mapping world coordinates into the view frame (u, v, beam).

    Rotation is about the tilt axis (world y); rows are the world directions of
    the detector u axis, the tilt axis and the beam.
    """
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def view_matrix(geom: TiltGeometry, view: int) -> np.ndarray:
    """view_rotation for one view of a tilt series, with index validation."""
    geom.check_view(view)
    return view_rotation(geom.angles_deg[view])


def _pixel_center_world(det: DetectorGrid, u: float, v: float) -> Tuple[float, float]:
    # Fractional-index coordinates: centre of pixel i sits at index i.
    xu = (u + 0.5 - 0.5 * det.nu) * det.pixel_size
    xv = (v + 0.5 - 0.5 * det.nv) * det.pixel_size
    return xu, xv


def pixel_ray(geom: TiltGeometry, view: int, u: int, v: int) -> Ray:
    """World-space ray through the centre of detector pixel (u, v)."""
    det = geom.detector
    if not (0 <= u < det.nu and 0 <= v < det.nv):
        raise DomainError(f"pixel ({u}, {v}) outside detector {det.nu}x{det.nv}")
    rot_t = view_matrix(geom, view).T
    xu, xv = _pixel_center_world(det, u, v)
    pix_world = rot_t @ np.array([xu, xv, 0.0])
    if geom.beam.kind is BeamKind.PARALLEL:
        return Ray(origin=pix_world, direction=rot_t @ np.array([0.0, 0.0, 1.0]))
    src = rot_t @ np.array([0.0, 0.0, -geom.beam.source_distance])
    d = pix_world - src
    return Ray(origin=src, direction=d / np.linalg.norm(d))


def project_point(geom: TiltGeometry, view: int, p: np.ndarray) -> Tuple[float, float, float]:
    """Project a world point onto the detector of one view.

    Returns fractional pixel indices (u, v) plus a signed depth along the beam:
    distance from the source plane for cone beams, distance from the detector
    plane through the rotation axis for parallel beams.
    """
    det = geom.detector
    p_view = view_matrix(geom, view) @ np.asarray(p, dtype=float)
    if geom.beam.kind is BeamKind.PARALLEL:
        xu, xv, depth = p_view
    else:
        dist = geom.beam.source_distance
        w = dist + p_view[2]
        if w <= _CONE_NEAR_FRACTION * dist:
            raise DomainError("point behind cone source")
        scale = dist / w
        xu, xv = p_view[0] * scale, p_view[1] * scale
        depth = w
    u = xu / det.pixel_size + 0.5 * det.nu - 0.5
    v = xv / det.pixel_size + 0.5 * det.nv - 0.5
    return float(u), float(v), float(depth)
