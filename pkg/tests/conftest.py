"""Shared fixtures and numerical helpers for the test suite."""

import numpy as np
import pytest

from stemsplat.gaussians import GaussianCloud, identity_rotations
from stemsplat.geometry import BeamKind, BeamModel, DetectorGrid, TiltGeometry

# Mixed tolerance used by every finite-difference comparison: the analytic
# value must match the central difference within rel * |fd| + abs.
FD_REL = 1e-4
FD_ABS = 1e-7


def make_geometry(angles, nu=8, nv=8, pixel_size=1.0, kind=BeamKind.PARALLEL,
                  source_distance=None):
    beam = BeamModel(kind=kind, source_distance=source_distance)
    return TiltGeometry(tuple(angles), DetectorGrid(nu, nv, pixel_size), beam)


def random_cloud(rng, n, spread=2.0, scale_lo=0.6, scale_hi=1.4,
                 scale_min=0.05, scale_max=50.0):
    """Small well-conditioned random cloud centred on the origin."""
    positions = rng.uniform(-spread, spread, size=(n, 3))
    log_scales = np.log(rng.uniform(scale_lo, scale_hi, size=(n, 3)))
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    denza_raw = rng.uniform(-0.5, 1.5, size=n)
    cloud = GaussianCloud(positions, log_scales, rotations, denza_raw,
                          scale_min=scale_min, scale_max=scale_max)
    return cloud.clamp()


def single_gaussian_cloud(position=(0.0, 0.0, 0.0), sigma=2.0, denza=1.0,
                          scale_min=0.05, scale_max=50.0):
    from stemsplat.gaussians import softplus_inverse
    cloud = GaussianCloud(
        np.array([position], dtype=float),
        np.full((1, 3), np.log(sigma)),
        identity_rotations(1),
        np.array([float(softplus_inverse(np.array(denza)))]),
        scale_min=scale_min, scale_max=scale_max)
    return cloud.clamp()


def perturbed(cloud, group, index, h):
    """Copy of the cloud with one raw parameter entry shifted by h."""
    out = cloud.copy()
    arr = getattr(out, group)
    flat = arr.reshape(-1)
    flat[index] += h
    return out


def fd_gradient(value_fn, cloud, group, h=1e-5):
    """Central finite differences of value_fn(cloud) over one parameter group."""
    arr = getattr(cloud, group)
    grad = np.zeros(arr.size)
    for i in range(arr.size):
        vp = value_fn(perturbed(cloud, group, i, +h))
        vm = value_fn(perturbed(cloud, group, i, -h))
        grad[i] = (vp - vm) / (2.0 * h)
    return grad.reshape(arr.shape)


def assert_fd_match(analytic, fd, rel=FD_REL, abs_=FD_ABS, label=""):
    analytic = np.asarray(analytic, dtype=float)
    fd = np.asarray(fd, dtype=float)
    err = np.abs(analytic - fd)
    tol = abs_ + rel * np.abs(fd)
    worst = np.max(err - tol)
    assert np.all(err <= tol), (
        f"{label or 'gradient'} mismatch: worst excess {worst:.3e}, "
        f"max err {err.max():.3e}, max fd {np.abs(fd).max():.3e}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
