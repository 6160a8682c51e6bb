"""Phantom construction, simulated tilt series, and view splits."""

import math

import numpy as np
import pytest

from stemsplat.classical import GridSpec, Volume, fdk_reconstruct, project_stack
from stemsplat.errors import DomainError
from stemsplat.geometry import BeamModel, DetectorGrid, TiltGeometry
from stemsplat.metrics import psnr
from stemsplat.synthdata import (Blob, Box, EveryKthHeldOut, ExplicitSplit,
                                 NoiseModel, PhantomSpec, Shell, Sphere,
                                 build_phantom, core_shell_angles,
                                 core_shell_split, simulate_tilt_series,
                                 split_views)

from conftest import make_geometry

GRID24 = GridSpec(24, 24, 24, 1.0)


class TestBuildPhantom:
    def test_empty_spec_zero_volume(self):
        vol = build_phantom(PhantomSpec((), GRID24))
        assert vol.data.shape == (24, 24, 24)
        assert np.all(vol.data == 0.0)

    def test_sphere_volume_mass(self):
        radius, value = 8.0, 1.5
        spec = PhantomSpec((Sphere((0.0, 0.0, 0.0), radius, value),), GRID24)
        total = float(build_phantom(spec).data.sum())
        analytic = 4.0 / 3.0 * math.pi * radius ** 3 * value
        assert abs(total - analytic) / analytic < 0.02

    def test_shell_interior_empty(self):
        spec = PhantomSpec((Shell((0.0, 0.0, 0.0), 9.0, 5.0, 2.0),), GRID24)
        data = build_phantom(spec).data
        centers = np.arange(24) - 11.5
        r = np.sqrt(centers[:, None, None] ** 2 + centers[None, :, None] ** 2
                    + centers[None, None, :] ** 2)
        assert np.all(data[r < 4.0] == 0.0)
        assert np.any(data[(r > 6.0) & (r < 8.0)] > 0.0)
        assert data.max() <= 2.0

    def test_primitives_superpose(self):
        box = Box((2.0, 0.0, 0.0), (3.0, 3.0, 3.0), 1.0)
        blob = Blob((-3.0, 0.0, 0.0), (2.0, 2.0, 2.0), 0.5)
        both = build_phantom(PhantomSpec((box, blob), GRID24)).data
        only_box = build_phantom(PhantomSpec((box,), GRID24)).data
        only_blob = build_phantom(PhantomSpec((blob,), GRID24)).data
        assert np.allclose(both, only_box + only_blob, atol=1e-15)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(DomainError, match="outside the grid"):
            PhantomSpec((Sphere((10.0, 0.0, 0.0), 5.0, 1.0),), GRID24)

    def test_nonpositive_value_rejected(self):
        with pytest.raises(DomainError, match="non-positive"):
            PhantomSpec((Sphere((0.0, 0.0, 0.0), 3.0, 0.0),), GRID24)


class SlabFixture:
    @staticmethod
    def volume():
        data = np.zeros((24, 24, 24))
        data[4:20, 4:20, 4:20] = 1.0
        return Volume(data, 1.0, (-12.0, -12.0, -12.0))


class TestSimulateTiltSeries:
    def test_noise_disabled_is_projection(self):
        vol = SlabFixture.volume()
        geom = make_geometry([-40.0, 0.0, 25.0], nu=24, nv=24)
        stack = simulate_tilt_series(vol, geom, NoiseModel())
        clean = project_stack(vol, geom)
        assert np.array_equal(stack.data, clean.data)
        assert stack.angles_deg == geom.angles_deg

    def test_poisson_sample_mean(self):
        # Mean of (noisy - clean) over all pixels should sit within 3 standard
        # errors of zero: Var(noisy_i) = clean_i / dose.
        vol = SlabFixture.volume()
        geom = make_geometry(list(np.linspace(-60, 60, 18)), nu=24, nv=24)
        clean = project_stack(vol, geom).data
        dose = 1e4
        noisy = simulate_tilt_series(vol, geom, NoiseModel(dose=dose,
                                                           rng_seed=5)).data
        n = clean.size
        assert n >= 10_000
        bound = 3.0 * math.sqrt(float(clean.sum()) / dose) / n
        assert abs(float((noisy - clean).mean())) <= bound
        assert not np.array_equal(noisy, clean)

    def test_zero_volume_zero_stack(self):
        vol = Volume(np.zeros((16, 16, 16)), 1.0, (-8.0, -8.0, -8.0))
        geom = make_geometry([0.0, 30.0], nu=16, nv=16)
        stack = simulate_tilt_series(vol, geom, NoiseModel(dose=1e4))
        assert np.all(stack.data == 0.0)

    def test_deterministic_given_seed(self):
        vol = SlabFixture.volume()
        geom = make_geometry([0.0, 30.0], nu=24, nv=24)
        noise = NoiseModel(dose=100.0, gaussian_sigma=0.05, rng_seed=9)
        a = simulate_tilt_series(vol, geom, noise)
        b = simulate_tilt_series(vol, geom, noise)
        c = simulate_tilt_series(vol, geom, NoiseModel(dose=100.0,
                                                       gaussian_sigma=0.05,
                                                       rng_seed=10))
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_linear_without_noise(self):
        vol = SlabFixture.volume()
        doubled = Volume(2.0 * vol.data, vol.voxel_size, vol.origin)
        geom = make_geometry([10.0], nu=24, nv=24)
        one = simulate_tilt_series(vol, geom, NoiseModel()).data
        two = simulate_tilt_series(doubled, geom, NoiseModel()).data
        assert np.allclose(two, 2.0 * one, rtol=1e-12, atol=1e-12)

    def test_output_nonnegative_under_read_noise(self):
        vol = SlabFixture.volume()
        geom = make_geometry([0.0], nu=24, nv=24)
        stack = simulate_tilt_series(vol, geom,
                                     NoiseModel(gaussian_sigma=3.0, rng_seed=2))
        assert stack.data.min() >= 0.0

    def test_probe_blur_softens_edges(self):
        vol = SlabFixture.volume()
        det = DetectorGrid(24, 24, 1.0)
        geom = TiltGeometry((0.0,), det, BeamModel(probe_sigma=1.5))
        sharp = simulate_tilt_series(vol, geom, NoiseModel())
        blurred = simulate_tilt_series(vol, geom, NoiseModel(), probe_blur=True)
        assert not np.array_equal(sharp.data, blurred.data)
        steep = np.abs(np.diff(sharp.data[0], axis=1)).max()
        soft = np.abs(np.diff(blurred.data[0], axis=1)).max()
        assert soft < steep
        assert abs(blurred.data.sum() - sharp.data.sum()) / sharp.data.sum() < 0.01


class TestSplitViews:
    def test_every_kth_held_out(self):
        angles = list(range(45))
        split = split_views(angles, EveryKthHeldOut(5))
        assert split.n_train == 36
        assert split.n_test == 9
        assert split.test_indices == tuple(range(0, 45, 5))
        assert set(split.train_indices) | set(split.test_indices) == set(range(45))
        assert set(split.train_indices) & set(split.test_indices) == set()

    def test_explicit_passthrough(self):
        split = split_views([0.0, 1.0, 2.0, 3.0],
                            ExplicitSplit((2, 0, 3), (1,)))
        assert split.train_indices == (2, 0, 3)
        assert split.test_indices == (1,)

    def test_explicit_overlap_rejected(self):
        with pytest.raises(DomainError, match="overlap"):
            split_views([0.0, 1.0, 2.0], ExplicitSplit((0, 1), (1, 2)))

    def test_explicit_must_partition(self):
        with pytest.raises(DomainError):
            split_views([0.0, 1.0, 2.0], ExplicitSplit((0,), (1,)))

    def test_empty_train_rejected(self):
        with pytest.raises(DomainError, match="empty train"):
            split_views([0.0, 1.0], EveryKthHeldOut(1))

    def test_bad_k_rejected(self):
        with pytest.raises(DomainError):
            EveryKthHeldOut(0)


class TestCoreShellPreset:
    def test_angles(self):
        angles = core_shell_angles()
        assert angles.shape == (45,)
        assert angles[0] == -70.0
        assert angles[-1] == 70.0
        assert np.all(np.diff(angles) > 0)

    def test_split_is_every_third(self):
        split = core_shell_split()
        assert split.train_indices == tuple(range(0, 45, 3))
        assert split.n_train == 15
        assert split.n_test == 30
        assert set(split.train_indices) & set(split.test_indices) == set()
        assert len(split.train_indices) + len(split.test_indices) == 45


class TestMissingWedge:
    def test_full_range_beats_missing_wedge(self):
        grid = GridSpec(32, 32, 32, 1.0)
        spec = PhantomSpec((Blob((0.0, 0.0, 0.0), (4.0, 3.5, 5.0), 1.0),), grid)
        vol = build_phantom(spec)
        scores = {}
        for label, tilt in (("wedge", 70.0), ("full", 89.0)):
            geom = make_geometry(np.linspace(-tilt, tilt, 45), nu=32, nv=32)
            stack = simulate_tilt_series(vol, geom, NoiseModel())
            recon = fdk_reconstruct(stack, geom, grid)
            scores[label] = psnr(recon.data, vol.data, float(vol.data.max()))
        assert scores["full"] > scores["wedge"]
