"""Resampling a Gaussian cloud onto a voxel grid, with analytic gradients.

Each Gaussian contributes ``denza * exp(-0.5 * (x - mu)^T Sigma^-1 (x - mu))``
sampled at voxel centres, truncated to the axis-aligned bounding box of its
3-sigma ellipsoid (half extent 3 * sqrt(Sigma_kk) per axis). The peak-denza
convention makes the beam-direction line integral of the field equal the
rendered splat of the same Gaussian, so voxelizing and rendering agree.

Voxelization is linear in the per-Gaussian fields, so co-located Gaussians
superpose exactly; the backward pass uses the same truncation as the forward
pass and returns gradients for every parameter group.
"""

from __future__ import annotations

import numpy as np

from .classical import GridSpec, Volume
from .errors import ConditioningError
from .gaussians import (GaussianCloud, _inv3, _det3, cloud_covariances,
                        scale_rotation_backward, sigmoid)
from .splatter import (CUTOFF_RADIUS, CloudGradients, _CHUNK_ELEMENTS,
                       _bucket_sizes)

__all__ = ["GridSpec", "Volume", "voxelize", "voxelize_backward"]


def _cloud_grid_layout(cloud: GaussianCloud, grid: GridSpec):
    """Covariance inverses plus per-Gaussian patch geometry in index units."""
    sigma = cloud_covariances(cloud)
    det = _det3(sigma)
    if np.any(det <= 0.0) or not np.all(np.isfinite(det)):
        bad = int(np.count_nonzero(~(det > 0.0) | ~np.isfinite(det)))
        raise ConditioningError(f"{bad} Gaussian(s) with degenerate covariance")
    inv = _inv3(sigma, det)
    vs = grid.voxel_size
    origin = np.asarray(grid.origin)
    center_idx = (cloud.positions - origin) / vs - 0.5
    diag = np.stack([sigma[:, 0, 0], sigma[:, 1, 1], sigma[:, 2, 2]], axis=1)
    # Half a voxel of slack keeps every voxel whose center could fall inside
    # the cutoff box regardless of how the box aligns with the lattice.
    half_idx = CUTOFF_RADIUS * np.sqrt(np.maximum(diag, 0.0)) / vs + 0.5
    return inv, center_idx, half_idx


def _iter_blocks(cloud: GaussianCloud, grid: GridSpec):
    """Yield bucketed voxel patches: (ids, index arrays, offsets, weights).

    ids: (n,) Gaussian indices; ix/iy/iz: (n, K) clipped voxel indices;
    dx/dy/dz: (n, K) world-frame offsets of patch voxel centres from mu;
    w: (n, K, K, K) exp(-q/2), zeroed outside the grid and outside the
    per-axis 3-sigma bounding box. Each Gaussian appears in exactly one block.
    """
    inv, center_idx, half_idx = _cloud_grid_layout(cloud, grid)
    dims = np.array(grid.shape)
    vs = grid.voxel_size
    sizes = _bucket_sizes(int(dims.max()))
    needed = 2.0 * half_idx.max(axis=1) + 2.0
    for bi, size in enumerate(sizes):
        lower = 0 if bi == 0 else sizes[bi - 1]
        if bi == len(sizes) - 1:
            sel = np.nonzero(needed > lower)[0]
        else:
            sel = np.nonzero((needed > lower) & (needed <= size))[0]
        if sel.size == 0:
            continue
        chunk = max(1, _CHUNK_ELEMENTS // (size ** 3))
        offs = np.arange(size)
        for lo in range(0, sel.size, chunk):
            ids = sel[lo:lo + chunk]
            n = ids.size
            cen = np.rint(center_idx[ids])
            if bi == len(sizes) - 1:
                cen = np.clip(cen, 0, dims - 1)
            else:
                cen = np.clip(cen, -size, dims - 1 + size)
            start = cen.astype(np.int64) - (size - 1) // 2
            idx = start[:, :, None] + offs                       # (n, 3, K)
            off_idx = idx - center_idx[ids][:, :, None]          # index offsets
            in_box = np.abs(off_idx) <= half_idx[ids][:, :, None]
            in_rng = (idx >= 0) & (idx < dims[None, :, None])
            ok = in_box & in_rng
            d = off_idx * vs                                     # world offsets
            a = inv[ids]
            dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
            x = dx[:, :, None, None]
            y = dy[:, None, :, None]
            z = dz[:, None, None, :]
            q = (a[:, 0, 0, None, None, None] * x * x
                 + a[:, 1, 1, None, None, None] * y * y
                 + a[:, 2, 2, None, None, None] * z * z
                 + 2.0 * (a[:, 0, 1, None, None, None] * x * y
                          + a[:, 0, 2, None, None, None] * x * z
                          + a[:, 1, 2, None, None, None] * y * z))
            mask = (ok[:, 0, :, None, None] & ok[:, 1, None, :, None]
                    & ok[:, 2, None, None, :])
            w = np.where(mask, np.exp(-0.5 * q), 0.0)
            ixc = np.clip(idx[:, 0], 0, dims[0] - 1)
            iyc = np.clip(idx[:, 1], 0, dims[1] - 1)
            izc = np.clip(idx[:, 2], 0, dims[2] - 1)
            yield ids, ixc, iyc, izc, dx, dy, dz, w, inv


def voxelize(cloud: GaussianCloud, grid: GridSpec) -> Volume:
    """Evaluate the cloud's density field at every voxel centre."""
    amp = cloud.denza
    flat = np.zeros(grid.n_voxels)
    ny, nz = grid.ny, grid.nz
    for ids, ixc, iyc, izc, _, _, _, w, _ in _iter_blocks(cloud, grid):
        contrib = amp[ids][:, None, None, None] * w
        pix = ((ixc[:, :, None, None] * ny + iyc[:, None, :, None]) * nz
               + izc[:, None, None, :])
        flat += np.bincount(np.broadcast_to(pix, contrib.shape).ravel(),
                            weights=contrib.ravel(), minlength=flat.size)
    return Volume(flat.reshape(grid.shape), grid.voxel_size, grid.origin)


def voxelize_backward(cloud: GaussianCloud, grid: GridSpec,
                      d_volume: np.ndarray) -> CloudGradients:
    """Gradient of sum(d_volume * voxelize(cloud)) for all parameter groups."""
    d_volume = np.asarray(d_volume, dtype=np.float64)
    if d_volume.shape != grid.shape:
        raise ValueError(f"d_volume shape {d_volume.shape} != grid {grid.shape}")
    amp = cloud.denza
    sig_raw = sigmoid(cloud.denza_raw)
    grads = CloudGradients.zeros_for(cloud)
    d_sigma = np.zeros((cloud.count, 3, 3))
    for ids, ixc, iyc, izc, dx, dy, dz, w, inv in _iter_blocks(cloud, grid):
        g = d_volume[ixc[:, :, None, None], iyc[:, None, :, None],
                     izc[:, None, None, :]]
        s = w * g
        s0 = s.sum(axis=(1, 2, 3))
        s1 = np.stack([np.einsum("nabc,na->n", s, dx),
                       np.einsum("nabc,nb->n", s, dy),
                       np.einsum("nabc,nc->n", s, dz)], axis=1)
        sxx = np.einsum("nabc,na,na->n", s, dx, dx)
        syy = np.einsum("nabc,nb,nb->n", s, dy, dy)
        szz = np.einsum("nabc,nc,nc->n", s, dz, dz)
        sxy = np.einsum("nabc,na,nb->n", s, dx, dy)
        sxz = np.einsum("nabc,na,nc->n", s, dx, dz)
        syz = np.einsum("nabc,nb,nc->n", s, dy, dz)
        s2 = np.empty((ids.size, 3, 3))
        s2[:, 0, 0], s2[:, 1, 1], s2[:, 2, 2] = sxx, syy, szz
        s2[:, 0, 1] = s2[:, 1, 0] = sxy
        s2[:, 0, 2] = s2[:, 2, 0] = sxz
        s2[:, 1, 2] = s2[:, 2, 1] = syz
        a = inv[ids]
        grads.d_denza_raw[ids] = s0 * sig_raw[ids]
        grads.d_positions[ids] = amp[ids][:, None] * np.einsum("nij,nj->ni", a, s1)
        d_sigma[ids] = 0.5 * amp[ids][:, None, None] * np.einsum(
            "nij,njk,nkl->nil", a, s2, a)
    d_ls, d_rot = scale_rotation_backward(cloud, d_sigma)
    grads.d_log_scales += d_ls
    grads.d_rotations += d_rot
    return grads
