"""Synthetic ground truth: phantoms, simulated tilt series, view splits.

Phantoms are sums of simple primitives sampled with 2x supersampling per
axis; tilt series come from the ray projector with optional Poisson counting
noise and Gaussian read noise. The bundled core-shell preset (64^3 volume,
45 views over +-70 degrees, every 3rd view kept for training) exercises the
full pipeline at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .classical import GridSpec, Volume, project_stack
from .errors import DomainError
from .geometry import BeamModel, DetectorGrid, TiltGeometry
from .splatter import ProjectionStack

_SUPERSAMPLE = 2  # subdivisions per axis when sampling primitives


# ---------------------------------------------------------------- primitives


@dataclass(frozen=True)
class Sphere:
    center: Tuple[float, float, float]
    radius: float
    value: float

    def bounds(self):
        c, r = np.asarray(self.center), self.radius
        return c - r, c + r

    def sample(self, pts: np.ndarray) -> np.ndarray:
        d2 = ((pts - np.asarray(self.center)) ** 2).sum(axis=-1)
        return np.where(d2 <= self.radius ** 2, self.value, 0.0)


@dataclass(frozen=True)
class Shell:
    center: Tuple[float, float, float]
    r_outer: float
    r_inner: float
    value: float

    def bounds(self):
        c, r = np.asarray(self.center), self.r_outer
        return c - r, c + r

    def sample(self, pts: np.ndarray) -> np.ndarray:
        d2 = ((pts - np.asarray(self.center)) ** 2).sum(axis=-1)
        inside = (d2 <= self.r_outer ** 2) & (d2 > self.r_inner ** 2)
        return np.where(inside, self.value, 0.0)


@dataclass(frozen=True)
class Box:
    center: Tuple[float, float, float]
    half_size: Tuple[float, float, float]
    value: float

    def bounds(self):
        c, h = np.asarray(self.center), np.asarray(self.half_size)
        return c - h, c + h

    def sample(self, pts: np.ndarray) -> np.ndarray:
        off = np.abs(pts - np.asarray(self.center))
        inside = np.all(off <= np.asarray(self.half_size), axis=-1)
        return np.where(inside, self.value, 0.0)


@dataclass(frozen=True)
class Blob:
    """Axis-aligned anisotropic Gaussian bump with peak amplitude ``value``."""

    center: Tuple[float, float, float]
    sigma: Tuple[float, float, float]
    value: float

    def bounds(self):
        c = np.asarray(self.center)
        r = 3.0 * np.asarray(self.sigma)
        return c - r, c + r

    def sample(self, pts: np.ndarray) -> np.ndarray:
        z = (pts - np.asarray(self.center)) / np.asarray(self.sigma)
        return self.value * np.exp(-0.5 * (z ** 2).sum(axis=-1))


Primitive = Union[Sphere, Shell, Box, Blob]


@dataclass(frozen=True)
class PhantomSpec:
    primitives: Tuple[Primitive, ...]
    grid: GridSpec

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        lo = np.asarray(self.grid.origin)
        hi = lo + np.asarray(self.grid.extent)
        for prim in self.primitives:
            if prim.value <= 0:
                raise DomainError(f"non-positive primitive value {prim.value}")
            blo, bhi = prim.bounds()
            if np.any(blo < lo) or np.any(bhi > hi):
                raise DomainError(f"primitive extends outside the grid: {prim}")


def build_phantom(spec: PhantomSpec) -> Volume:
    """Sum of primitive fields at 2x-supersampled voxel centres, averaged."""
    grid = spec.grid
    data = np.zeros(grid.shape)
    if not spec.primitives:
        return Volume(data, grid.voxel_size, grid.origin)
    sub = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE  # subcell centres
    axes = [grid.origin[ax] + grid.voxel_size
            * (np.arange(grid.shape[ax])[:, None] + sub).ravel()
            for ax in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    acc = np.zeros(pts.shape[:3])
    for prim in spec.primitives:
        acc += prim.sample(pts)
    s = _SUPERSAMPLE
    coarse = acc.reshape(grid.nx, s, grid.ny, s, grid.nz, s).mean(axis=(1, 3, 5))
    return Volume(coarse, grid.voxel_size, grid.origin)


# ------------------------------------------------------------------- noise


@dataclass(frozen=True)
class NoiseModel:
    """Poisson counting noise at the given dose plus Gaussian read noise."""

    dose: float = 0.0
    gaussian_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.dose < 0 or self.gaussian_sigma < 0:
            raise DomainError("dose and gaussian_sigma must be >= 0")


def simulate_tilt_series(vol: Volume, geom: TiltGeometry, noise: NoiseModel,
                         probe_blur: bool = False) -> ProjectionStack:
    """Project the volume over all views and apply the noise model.

    Poisson: counts ~ P(dose * intensity) / dose when dose > 0; then additive
    zero-mean Gaussian noise; negative values clamped to zero. Deterministic
    for a fixed rng_seed.
    """
    stack = project_stack(vol, geom)
    data = stack.data
    if probe_blur and geom.beam.probe_sigma > 0:
        sig = geom.beam.probe_sigma / geom.detector.pixel_size
        data = np.stack([gaussian_filter(img, sig, mode="nearest")
                         for img in data])
    rng = np.random.default_rng(noise.rng_seed)
    if noise.dose > 0:
        data = rng.poisson(noise.dose * np.maximum(data, 0.0)) / noise.dose
    if noise.gaussian_sigma > 0:
        data = data + rng.normal(0.0, noise.gaussian_sigma, size=data.shape)
    data = np.maximum(data, 0.0)
    return ProjectionStack(np.asarray(data, dtype=np.float64), geom.angles_deg)


# ------------------------------------------------------------------- splits


@dataclass(frozen=True)
class EveryKthHeldOut:
    """Hold out every k-th view (indices 0, k, 2k, ...) as the test set."""

    k: int

    def __post_init__(self):
        if self.k < 1:
            raise DomainError("k must be >= 1")


@dataclass(frozen=True)
class ExplicitSplit:
    train: Tuple[int, ...]
    test: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(int(i) for i in self.train))
        object.__setattr__(self, "test", tuple(int(i) for i in self.test))


@dataclass(frozen=True)
class ViewSplit:
    train_indices: Tuple[int, ...]
    test_indices: Tuple[int, ...]

    @property
    def n_train(self) -> int:
        return len(self.train_indices)

    @property
    def n_test(self) -> int:
        return len(self.test_indices)


def split_views(angles_deg: Sequence[float],
                pattern: Union[EveryKthHeldOut, ExplicitSplit]) -> ViewSplit:
    """Partition view indices into disjoint, exhaustive train/test sets."""
    n = len(angles_deg)
    if isinstance(pattern, EveryKthHeldOut):
        test = tuple(range(0, n, pattern.k))
        train = tuple(i for i in range(n) if i % pattern.k != 0)
    elif isinstance(pattern, ExplicitSplit):
        train, test = pattern.train, pattern.test
        both = set(train) & set(test)
        if both:
            raise DomainError(f"train/test overlap at indices {sorted(both)}")
        if set(train) | set(test) != set(range(n)):
            raise DomainError("train and test must partition all view indices")
        if len(train) + len(test) != n:
            raise DomainError("duplicate indices in split")
    else:
        raise DomainError(f"unknown split pattern {pattern!r}")
    if not train:
        raise DomainError("empty train set")
    return ViewSplit(tuple(train), tuple(test))


# ---------------------------------------------------------- bundled preset


CORE_SHELL_SIZE = 64
CORE_SHELL_N_VIEWS = 45
CORE_SHELL_TILT_MAX = 70.0
CORE_SHELL_TRAIN_STRIDE = 3
CORE_SHELL_DOSE = 1e4
CORE_SHELL_SEED = 1234


def core_shell_grid() -> GridSpec:
    return GridSpec(CORE_SHELL_SIZE, CORE_SHELL_SIZE, CORE_SHELL_SIZE)


def core_shell_spec() -> PhantomSpec:
    """Bright shell (strong scatterer) around a weaker solid core."""
    return PhantomSpec(
        primitives=(Shell((0.0, 0.0, 0.0), 22.0, 16.0, 2.0),
                    Sphere((0.0, 0.0, 0.0), 16.0, 1.0)),
        grid=core_shell_grid())


def core_shell_angles() -> np.ndarray:
    return np.linspace(-CORE_SHELL_TILT_MAX, CORE_SHELL_TILT_MAX,
                       CORE_SHELL_N_VIEWS)


def core_shell_geometry() -> TiltGeometry:
    det = DetectorGrid(CORE_SHELL_SIZE, CORE_SHELL_SIZE, 1.0)
    return TiltGeometry(core_shell_angles(), det, BeamModel())


def core_shell_split() -> ViewSplit:
    """Every 3rd view trains (15 views); the remaining 30 are held out."""
    n = CORE_SHELL_N_VIEWS
    train = tuple(range(0, n, CORE_SHELL_TRAIN_STRIDE))
    test = tuple(i for i in range(n) if i % CORE_SHELL_TRAIN_STRIDE != 0)
    return split_views(core_shell_angles(), ExplicitSplit(train, test))


def core_shell_noise() -> NoiseModel:
    return NoiseModel(dose=CORE_SHELL_DOSE, gaussian_sigma=0.0,
                      rng_seed=CORE_SHELL_SEED)
