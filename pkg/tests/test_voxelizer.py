"""Cloud-to-volume resampling: mass, linearity, truncation, gradients."""

import math

import numpy as np
import pytest

import stemsplat.voxelizer as vox
from stemsplat.classical import GridSpec
from stemsplat.errors import ConditioningError
from stemsplat.gaussians import (GaussianCloud, cloud_covariances,
                                 identity_rotations, sigmoid,
                                 softplus_inverse)
from stemsplat.voxelizer import voxelize, voxelize_backward

from conftest import (assert_fd_match, fd_gradient, random_cloud,
                      single_gaussian_cloud)

GRID24 = GridSpec(24, 24, 24, 1.0)


def empty_cloud():
    return GaussianCloud(np.zeros((0, 3)), np.zeros((0, 3)),
                         identity_rotations(0), np.zeros(0), scale_min=0.05)


def analytic_mass(cloud):
    dets = np.linalg.det(cloud_covariances(cloud))
    return float(np.sum(cloud.denza * (2.0 * math.pi) ** 1.5 * np.sqrt(dets)))


class TestVoxelize:
    def test_empty_cloud_zero_volume(self):
        out = voxelize(empty_cloud(), GRID24)
        assert out.data.shape == (24, 24, 24)
        assert np.all(out.data == 0.0)

    def test_peak_at_voxel_center_equals_denza(self):
        # Voxel (9, 11, 13) of the 24-cube grid has its center at
        # (-2.5, -0.5, 1.5); a Gaussian there evaluates exp(0) at that voxel.
        cloud = single_gaussian_cloud(position=(-2.5, -0.5, 1.5), sigma=1.5,
                                      denza=0.8)
        data = voxelize(cloud, GRID24).data
        assert data[9, 11, 13] == pytest.approx(0.8, abs=1e-15)
        assert data.max() == data[9, 11, 13]

    def test_mass_isotropic(self):
        cloud = single_gaussian_cloud(position=(0.5, -1.0, 0.0), sigma=2.0,
                                      denza=1.3)
        total = float(voxelize(cloud, GRID24).data.sum())
        assert abs(total - analytic_mass(cloud)) / analytic_mass(cloud) < 0.01

    def test_mass_rotated_anisotropic(self):
        quat = np.array([[0.9, 0.3, -0.2, 0.4]])
        quat /= np.linalg.norm(quat)
        cloud = GaussianCloud(np.array([[0.0, 1.0, -0.5]]),
                              np.log([[2.2, 1.4, 1.8]]), quat,
                              softplus_inverse(np.array([2.0])),
                              scale_min=0.05)
        total = float(voxelize(cloud, GRID24).data.sum())
        assert abs(total - analytic_mass(cloud)) / analytic_mass(cloud) < 0.01

    def test_mass_additive_over_gaussians(self, rng):
        cloud = random_cloud(rng, 5, spread=3.0, scale_lo=1.2, scale_hi=2.0)
        total = float(voxelize(cloud, GridSpec(32, 32, 32, 1.0)).data.sum())
        assert abs(total - analytic_mass(cloud)) / analytic_mass(cloud) < 0.01

    def test_linear_in_denza(self, rng):
        cloud = random_cloud(rng, 4, spread=3.0, scale_lo=0.8, scale_hi=1.6)
        doubled = cloud.copy()
        doubled.denza_raw = softplus_inverse(2.0 * cloud.denza)
        one = voxelize(cloud, GRID24).data
        two = voxelize(doubled, GRID24).data
        assert np.allclose(two, 2.0 * one, rtol=1e-10, atol=1e-13)

    def test_colocated_gaussians_superpose(self):
        single = single_gaussian_cloud(position=(0.5, 0.5, 0.5), sigma=1.8)
        pair = GaussianCloud(np.repeat(single.positions, 2, axis=0),
                             np.repeat(single.log_scales, 2, axis=0),
                             np.repeat(single.rotations, 2, axis=0),
                             np.repeat(single.denza_raw, 2),
                             scale_min=single.scale_min)
        assert np.allclose(voxelize(pair, GRID24).data,
                           2.0 * voxelize(single, GRID24).data,
                           rtol=1e-12, atol=1e-15)

    def test_wider_cutoff_changes_mass_little(self, monkeypatch):
        cloud = single_gaussian_cloud(position=(0.0, 0.0, 0.0), sigma=2.0)
        tight = float(voxelize(cloud, GRID24).data.sum())
        monkeypatch.setattr(vox, "CUTOFF_RADIUS", 5.0)
        wide = float(voxelize(cloud, GRID24).data.sum())
        assert wide >= tight
        assert (wide - tight) / wide < 0.015

    def test_degenerate_covariance_rejected(self):
        cloud = GaussianCloud(np.zeros((1, 3)), np.full((1, 3), -400.0),
                              identity_rotations(1), np.zeros(1),
                              scale_min=1e-300)
        with pytest.raises(ConditioningError, match="1 Gaussian"):
            voxelize(cloud, GRID24)


class TestVoxelizeBackward:
    def test_zero_upstream_zero_gradients(self, rng):
        cloud = random_cloud(rng, 3)
        grads = voxelize_backward(cloud, GRID24, np.zeros(GRID24.shape))
        for arr in (grads.d_positions, grads.d_log_scales, grads.d_rotations,
                    grads.d_denza_raw):
            assert np.all(arr == 0.0)

    def test_impulse_at_center(self):
        cloud = single_gaussian_cloud(position=(-2.5, -0.5, 1.5), sigma=1.5,
                                      denza=0.8)
        upstream = np.zeros(GRID24.shape)
        upstream[9, 11, 13] = 1.0
        grads = voxelize_backward(cloud, GRID24, upstream)
        expected = sigmoid(cloud.denza_raw[0])
        assert grads.d_denza_raw[0] == pytest.approx(expected, rel=1e-12)
        assert np.all(np.abs(grads.d_positions) < 1e-10)

    @pytest.mark.parametrize("group", ["positions", "log_scales", "rotations",
                                       "denza_raw"])
    def test_gradients_match_fd(self, group, rng):
        grid = GridSpec(8, 8, 8, 1.0)
        cloud = random_cloud(rng, 4, spread=2.0, scale_lo=0.7, scale_hi=1.5)
        upstream = rng.normal(size=grid.shape)

        def loss(c):
            return float(np.sum(upstream * voxelize(c, grid).data))

        grads = voxelize_backward(cloud, grid, upstream)
        analytic = getattr(grads, f"d_{group}")
        fd = fd_gradient(loss, cloud, group)
        assert_fd_match(analytic, fd, label=f"voxelize-{group}")

    def test_shape_mismatch_rejected(self, rng):
        cloud = random_cloud(rng, 2)
        with pytest.raises(ValueError):
            voxelize_backward(cloud, GRID24, np.zeros((8, 8, 8)))
