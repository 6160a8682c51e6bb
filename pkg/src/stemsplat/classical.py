"""Voxel volumes, ray projectors and classical reconstructions (FDK, SIRT).

The projector samples each ray with a composite midpoint rule (step 0.5 voxel)
and trilinear interpolation, assembled once per (geometry, grid, view) into a
sparse matrix; ``backproject`` applies the transpose, so the pair is adjoint to
floating-point round-off by construction. Parallel single-axis geometry
factorizes into a shared in-plane 2D operator plus a detector-row/volume-row
interpolation, which keeps the matrices tiny.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import DomainError, SeedingError
from .gaussians import GaussianCloud, identity_rotations, softplus_inverse
from .geometry import BeamKind, TiltGeometry, view_rotation
from .splatter import ProjectionImage, ProjectionStack

# Fraction of a voxel per integration step along rays.
_STEP_FRACTION = 0.5

# Row/column sums below this are treated as zero in SIRT normalization.
_SIRT_EPS = 1e-12


@dataclass(frozen=True)
class GridSpec:
    """Voxel lattice: counts, cubic voxel edge length and world origin.

    ``origin`` is the world position of the low corner of voxel (0, 0, 0);
    omitted it centres the grid on the world origin (the rotation axis).
    """

    nx: int
    ny: int
    nz: int
    voxel_size: float = 1.0
    origin: Tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.nx <= 0 or self.ny <= 0 or self.nz <= 0:
            raise DomainError("grid needs positive voxel counts")
        if not (self.voxel_size > 0) or not math.isfinite(self.voxel_size):
            raise DomainError("voxel_size must be positive and finite")
        if self.origin is None:
            org = (-0.5 * self.nx * self.voxel_size,
                   -0.5 * self.ny * self.voxel_size,
                   -0.5 * self.nz * self.voxel_size)
        else:
            org = tuple(float(c) for c in self.origin)
            if len(org) != 3:
                raise DomainError("origin must have three components")
        object.__setattr__(self, "origin", org)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def extent(self) -> Tuple[float, float, float]:
        return (self.nx * self.voxel_size, self.ny * self.voxel_size,
                self.nz * self.voxel_size)

    def centers(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        return self.origin[axis] + (np.arange(n) + 0.5) * self.voxel_size


@dataclass
class Volume:
    """Scalar field on a GridSpec, data indexed [x, y, z], float64."""

    data: np.ndarray
    voxel_size: float = 1.0
    origin: Tuple[float, float, float] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DomainError(f"volume data must be 3D and non-empty, got {self.data.shape}")
        grid = GridSpec(*self.data.shape, voxel_size=self.voxel_size, origin=self.origin)
        self.voxel_size = grid.voxel_size
        self.origin = grid.origin

    @property
    def grid(self) -> GridSpec:
        return GridSpec(*self.data.shape, voxel_size=self.voxel_size, origin=self.origin)

    @classmethod
    def zeros(cls, grid: GridSpec) -> "Volume":
        return cls(np.zeros(grid.shape), grid.voxel_size, grid.origin)


# ------------------------------------------------------------ ray sampling


def _slab_trange(origin, direction, lo, hi):
    """Entry/exit parameters of rays against an axis-aligned box, vectorized.

    origin/direction: (R, D); lo/hi: (D,). Returns (t0, t1); empty if t1 <= t0.
    """
    t0 = np.full(origin.shape[0], -np.inf)
    t1 = np.full(origin.shape[0], np.inf)
    for ax in range(origin.shape[1]):
        o, d = origin[:, ax], direction[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[ax] - o) / d
            tb = (hi[ax] - o) / d
        near, far = np.minimum(ta, tb), np.maximum(ta, tb)
        parallel = np.abs(d) < 1e-300
        inside = (o >= lo[ax]) & (o <= hi[ax])
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        t0 = np.maximum(t0, near)
        t1 = np.minimum(t1, far)
    return t0, t1


def _midpoint_samples(t0, t1, step):
    """Composite-midpoint sample parameters per ray; returns flat arrays."""
    length = np.maximum(t1 - t0, 0.0)
    n = np.where(length > 0, np.ceil(length / step).astype(np.int64), 0)
    total = int(n.sum())
    ray_id = np.repeat(np.arange(n.size), n)
    first = np.concatenate(([0], np.cumsum(n)[:-1]))
    k = np.arange(total) - np.repeat(first, n)
    dt = np.zeros(n.size)
    np.divide(length, n, out=dt, where=n > 0)
    t = t0[ray_id] + (k + 0.5) * dt[ray_id]
    return ray_id, t, dt


def _linear_weights(g, n):
    """1D linear-interpolation corners/weights with zero outside [0, n-1]."""
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    pairs = []
    for idx, w in ((i0, 1.0 - f), (i0 + 1, f)):
        ok = (idx >= 0) & (idx < n)
        pairs.append((np.clip(idx, 0, n - 1), np.where(ok, w, 0.0)))
    return pairs


class _ViewOperators:
    """Per-view sparse projectors for one (geometry, grid) pair."""

    def __init__(self, geom: TiltGeometry, grid: GridSpec):
        self.geom = geom
        self.grid = grid
        self.step = _STEP_FRACTION * grid.voxel_size
        self._mats: dict = {}
        if geom.beam.kind is BeamKind.PARALLEL:
            self._row_interp = self._build_row_interp()

    # ---- parallel factorized path

    def _build_row_interp(self) -> sp.csr_matrix:
        det = self.geom.detector
        grid = self.grid
        y = (np.arange(det.nv) + 0.5 - 0.5 * det.nv) * det.pixel_size
        g = (y - grid.origin[1]) / grid.voxel_size - 0.5
        rows, cols, vals = [], [], []
        for idx, w in _linear_weights(g, grid.ny):
            rows.append(np.arange(det.nv))
            cols.append(idx)
            vals.append(w)
        mat = sp.coo_matrix((np.concatenate(vals),
                             (np.concatenate(rows), np.concatenate(cols))),
                            shape=(det.nv, grid.ny))
        return mat.tocsr()

    def _build_parallel_plane(self, view: int) -> sp.csr_matrix:
        det, grid = self.geom.detector, self.grid
        t = math.radians(self.geom.angles_deg[view])
        c, s = math.cos(t), math.sin(t)
        xu = (np.arange(det.nu) + 0.5 - 0.5 * det.nu) * det.pixel_size
        origin = np.stack([c * xu, s * xu], axis=1)         # (x, z) world
        direction = np.broadcast_to(np.array([-s, c]), origin.shape)
        lo = np.array([grid.origin[0], grid.origin[2]])
        hi = lo + np.array([grid.nx, grid.nz]) * grid.voxel_size
        t0, t1 = _slab_trange(origin, direction, lo, hi)
        ray_id, tt, dt = _midpoint_samples(t0, t1, self.step)
        px = origin[ray_id, 0] + tt * direction[ray_id, 0]
        pz = origin[ray_id, 1] + tt * direction[ray_id, 1]
        gx = (px - grid.origin[0]) / grid.voxel_size - 0.5
        gz = (pz - grid.origin[2]) / grid.voxel_size - 0.5
        rows, cols, vals = [], [], []
        for ix, wx in _linear_weights(gx, grid.nx):
            for iz, wz in _linear_weights(gz, grid.nz):
                rows.append(ray_id)
                cols.append(ix * grid.nz + iz)
                vals.append(wx * wz * dt[ray_id])
        mat = sp.coo_matrix((np.concatenate(vals),
                             (np.concatenate(rows), np.concatenate(cols))),
                            shape=(det.nu, grid.nx * grid.nz))
        return mat.tocsr()

    # ---- cone general path

    def _build_cone(self, view: int) -> sp.csr_matrix:
        det, grid = self.geom.detector, self.grid
        rot_t = view_rotation(self.geom.angles_deg[view]).T
        uu, vv = np.meshgrid(np.arange(det.nu), np.arange(det.nv))
        xu = (uu.ravel() + 0.5 - 0.5 * det.nu) * det.pixel_size
        xv = (vv.ravel() + 0.5 - 0.5 * det.nv) * det.pixel_size
        pix = np.stack([xu, xv, np.zeros_like(xu)], axis=1) @ rot_t.T
        src = rot_t @ np.array([0.0, 0.0, -self.geom.beam.source_distance])
        direction = pix - src
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        origin = np.broadcast_to(src, direction.shape)
        lo = np.asarray(grid.origin)
        hi = lo + np.array(grid.extent)
        t0, t1 = _slab_trange(origin, direction, lo, hi)
        ray_id, tt, dt = _midpoint_samples(t0, t1, self.step)
        pts = origin[ray_id] + tt[:, None] * direction[ray_id]
        g = (pts - lo) / grid.voxel_size - 0.5
        rows, cols, vals = [], [], []
        for ix, wx in _linear_weights(g[:, 0], grid.nx):
            for iy, wy in _linear_weights(g[:, 1], grid.ny):
                for iz, wz in _linear_weights(g[:, 2], grid.nz):
                    rows.append(ray_id)
                    cols.append((ix * grid.ny + iy) * grid.nz + iz)
                    vals.append(wx * wy * wz * dt[ray_id])
        mat = sp.coo_matrix((np.concatenate(vals),
                             (np.concatenate(rows), np.concatenate(cols))),
                            shape=(det.nu * det.nv, grid.n_voxels))
        return mat.tocsr()

    def _mat(self, view: int) -> sp.csr_matrix:
        if view not in self._mats:
            if self.geom.beam.kind is BeamKind.PARALLEL:
                self._mats[view] = self._build_parallel_plane(view)
            else:
                self._mats[view] = self._build_cone(view)
        return self._mats[view]

    # ---- application

    def forward_view(self, data: np.ndarray, view: int) -> np.ndarray:
        det, grid = self.geom.detector, self.grid
        if self.geom.beam.kind is BeamKind.PARALLEL:
            v2 = data.transpose(0, 2, 1).reshape(grid.nx * grid.nz, grid.ny)
            per_row = self._mat(view) @ v2                   # (nu, ny)
            return self._row_interp @ per_row.T              # (nv, nu)
        flat = self._mat(view) @ data.reshape(-1)
        return flat.reshape(det.nv, det.nu)

    def adjoint_view(self, image: np.ndarray, view: int) -> np.ndarray:
        det, grid = self.geom.detector, self.grid
        if self.geom.beam.kind is BeamKind.PARALLEL:
            per_row = (self._row_interp.T @ image).T         # (nu, ny)
            v2 = self._mat(view).T @ per_row                 # (nx*nz, ny)
            return v2.reshape(grid.nx, grid.nz, grid.ny).transpose(0, 2, 1)
        flat = self._mat(view).T @ image.reshape(-1)
        return flat.reshape(grid.shape)


_OP_CACHE: "OrderedDict[tuple, _ViewOperators]" = OrderedDict()
_OP_CACHE_CAPACITY = 8


def _operators(geom: TiltGeometry, grid: GridSpec) -> _ViewOperators:
    key = (geom, grid)
    op = _OP_CACHE.get(key)
    if op is None:
        op = _ViewOperators(geom, grid)
        _OP_CACHE[key] = op
        while len(_OP_CACHE) > _OP_CACHE_CAPACITY:
            _OP_CACHE.popitem(last=False)
    return op


# ------------------------------------------------------------ projection API


def project_volume(vol: Volume, geom: TiltGeometry, view: int) -> ProjectionImage:
    """Line integrals of a voxel volume over one view's rays."""
    geom.check_view(view)
    op = _operators(geom, vol.grid)
    return ProjectionImage(op.forward_view(vol.data, view), view, geom.angles_deg[view])


def project_stack(vol: Volume, geom: TiltGeometry) -> ProjectionStack:
    op = _operators(geom, vol.grid)
    images = [op.forward_view(vol.data, v) for v in range(geom.n_views)]
    return ProjectionStack(np.stack(images, axis=0), geom.angles_deg)


def backproject(stack: ProjectionStack, geom: TiltGeometry, grid: GridSpec) -> Volume:
    """Exact adjoint of project_volume applied to a stack of residuals."""
    if stack.n_views != geom.n_views:
        raise DomainError("stack/geometry view count mismatch")
    op = _operators(geom, grid)
    acc = np.zeros(grid.shape)
    for v in range(geom.n_views):
        acc += op.adjoint_view(stack.data[v], v)
    return Volume(acc, grid.voxel_size, grid.origin)


# ---------------------------------------------------------------- FDK / FBP


def _ramp_filter_rows(images: np.ndarray, pixel_size: float, filter_name: str) -> np.ndarray:
    """Frequency-domain ramp filtering of each detector row (u axis)."""
    n = images.shape[-1]
    padded = 1 << max(3, int(math.ceil(math.log2(2 * n))))
    freqs = np.fft.rfftfreq(padded, d=pixel_size)
    ramp = np.abs(freqs)
    if filter_name == "hann":
        nyquist = 0.5 / pixel_size
        ramp = ramp * 0.5 * (1.0 + np.cos(np.pi * freqs / nyquist))
    elif filter_name != "ramlak":
        raise DomainError(f"unknown filter {filter_name!r} (expected 'ramlak' or 'hann')")
    spec = np.fft.rfft(images, n=padded, axis=-1)
    out = np.fft.irfft(spec * ramp, n=padded, axis=-1)
    return out[..., :n]


def _bilinear_gather(img: np.ndarray, vi: np.ndarray, ui: np.ndarray) -> np.ndarray:
    """Sample an image at fractional pixel indices, zero outside."""
    nv, nu = img.shape
    out = np.zeros(np.broadcast(vi, ui).shape)
    v0 = np.floor(vi).astype(np.int64)
    u0 = np.floor(ui).astype(np.int64)
    fv = vi - v0
    fu = ui - u0
    for dv, wv in ((0, 1.0 - fv), (1, fv)):
        for du, wu in ((0, 1.0 - fu), (1, fu)):
            v = v0 + dv
            u = u0 + du
            ok = (v >= 0) & (v < nv) & (u >= 0) & (u < nu)
            w = np.where(ok, wv * wu, 0.0)
            out += w * img[np.clip(v, 0, nv - 1), np.clip(u, 0, nu - 1)]
    return out


def fdk_reconstruct(stack: ProjectionStack, geom: TiltGeometry, grid: GridSpec,
                    filter_name: str = "ramlak") -> Volume:
    """Filtered backprojection: per-row ramp filter, voxel-driven backprojection.

    Parallel beams reduce to per-slice FBP; cone beams apply the standard
    cosine pre-weight and inverse-square distance weighting. Output is scaled
    by pi / n_views.
    """
    if stack.n_views != geom.n_views:
        raise DomainError("stack/geometry view count mismatch")
    if geom.n_views < 2:
        raise DomainError("filtered backprojection needs at least 2 views")
    det = geom.detector
    data = stack.data
    if geom.beam.kind is BeamKind.CONE:
        dist = geom.beam.source_distance
        xu = (np.arange(det.nu) + 0.5 - 0.5 * det.nu) * det.pixel_size
        xv = (np.arange(det.nv) + 0.5 - 0.5 * det.nv) * det.pixel_size
        cosw = dist / np.sqrt(dist ** 2 + xu[None, :] ** 2 + xv[:, None] ** 2)
        data = data * cosw[None]
    filtered = _ramp_filter_rows(data, det.pixel_size, filter_name)

    xs = grid.centers(0)[:, None, None]
    ys = grid.centers(1)[None, :, None]
    zs = grid.centers(2)[None, None, :]
    acc = np.zeros(grid.shape)
    for view in range(geom.n_views):
        t = math.radians(geom.angles_deg[view])
        c, s = math.cos(t), math.sin(t)
        x_view = c * xs + s * zs
        z_view = -s * xs + c * zs
        y_view = np.broadcast_to(ys, acc.shape)
        if geom.beam.kind is BeamKind.PARALLEL:
            u_world, v_world = x_view, y_view
            weight = 1.0
        else:
            dist = geom.beam.source_distance
            w = dist + z_view
            mag = dist / w
            u_world, v_world = x_view * mag, y_view * mag
            weight = mag ** 2
        ui = u_world / det.pixel_size + 0.5 * det.nu - 0.5
        vi = v_world / det.pixel_size + 0.5 * det.nv - 0.5
        sample = _bilinear_gather(filtered[view],
                                  np.broadcast_to(vi, acc.shape),
                                  np.broadcast_to(ui, acc.shape))
        acc += weight * sample
    acc *= np.pi / geom.n_views
    return Volume(acc, grid.voxel_size, grid.origin)


# ---------------------------------------------------------------------- SIRT


def sirt_reconstruct(stack: ProjectionStack, geom: TiltGeometry, grid: GridSpec,
                     iterations: int = 100, relaxation: float = 1.0,
                     nonneg: bool = True) -> Volume:
    """Simultaneous iterative reconstruction with row/column normalization.

    v <- v + relaxation * C * A^T R (p - A v), starting from zeros; R and C are
    reciprocal row and column sums of the system matrix, with zero rows and
    columns excluded.
    """
    if iterations < 1:
        raise DomainError("iterations must be >= 1")
    if not 0.0 < relaxation <= 2.0:
        raise DomainError("relaxation must be in (0, 2]")
    if stack.n_views != geom.n_views:
        raise DomainError("stack/geometry view count mismatch")
    op = _operators(geom, grid)
    ones_vol = np.ones(grid.shape)
    row_sums = np.stack([op.forward_view(ones_vol, v) for v in range(geom.n_views)])
    r_w = np.where(row_sums > _SIRT_EPS, 1.0 / np.maximum(row_sums, _SIRT_EPS), 0.0)
    ones_proj = np.ones_like(stack.data[0])
    col_sums = np.zeros(grid.shape)
    for v in range(geom.n_views):
        col_sums += op.adjoint_view(ones_proj, v)
    c_w = np.where(col_sums > _SIRT_EPS, 1.0 / np.maximum(col_sums, _SIRT_EPS), 0.0)

    vol = np.zeros(grid.shape)
    for _ in range(iterations):
        corr = np.zeros(grid.shape)
        for v in range(geom.n_views):
            resid = stack.data[v] - op.forward_view(vol, v)
            corr += op.adjoint_view(r_w[v] * resid, v)
        vol += relaxation * c_w * corr
        if nonneg:
            np.clip(vol, 0.0, None, out=vol)
    return Volume(vol, grid.voxel_size, grid.origin)


# ------------------------------------------------------------------- seeding


def seed_cloud(vol: Volume, n_points: int = 20000, threshold_percentile: float = 75.0,
               seed: int = 0) -> GaussianCloud:
    """Sample a Gaussian cloud from a reference volume.

    Positions are intensity-weighted draws (without replacement) of voxel
    centres above the percentile threshold, jittered uniformly within the
    voxel; denza_raw inverts softplus at the clamped voxel intensity; scales
    start isotropic at 0.7x the mean nearest-neighbour distance.
    """
    if n_points < 0:
        raise DomainError("n_points must be non-negative")
    if not 0.0 <= threshold_percentile <= 100.0:
        raise DomainError("threshold_percentile must be in [0, 100]")
    scale_max = 0.25 * max(vol.grid.extent)
    if n_points == 0:
        empty = np.zeros((0, 3))
        return GaussianCloud(empty, empty.copy(), identity_rotations(0),
                             np.zeros(0), scale_min=0.3, scale_max=scale_max)
    values = np.maximum(vol.data, 0.0)
    threshold = np.percentile(values, threshold_percentile)
    candidates = np.nonzero((values >= threshold) & (values > 0.0))
    cand_vals = values[candidates]
    if cand_vals.size < n_points:
        raise SeedingError(
            f"only {cand_vals.size} voxels above threshold, need {n_points}")

    rng = np.random.default_rng(seed)
    # Exponential-key weighted sampling without replacement.
    keys = rng.exponential(1.0, cand_vals.size) / cand_vals
    chosen = np.argpartition(keys, n_points - 1)[:n_points]
    chosen = chosen[np.argsort(keys[chosen], kind="stable")]

    vs = vol.voxel_size
    centers = np.stack([vol.origin[ax] + (candidates[ax][chosen] + 0.5) * vs
                        for ax in range(3)], axis=1)
    jitter = rng.uniform(-0.5, 0.5, size=(n_points, 3)) * vs
    positions = centers + jitter

    intensities = np.clip(cand_vals[chosen], 1e-3, None)
    denza_raw = softplus_inverse(intensities)

    if n_points > 1:
        dists, _ = cKDTree(positions).query(positions, k=2)
        mean_nn = float(dists[:, 1].mean())
    else:
        mean_nn = vs
    log_scales = np.full((n_points, 3), np.log(max(0.7 * mean_nn, 1e-6)))

    cloud = GaussianCloud(positions, log_scales, identity_rotations(n_points),
                          denza_raw, scale_min=0.3, scale_max=scale_max)
    return cloud.clamp()
