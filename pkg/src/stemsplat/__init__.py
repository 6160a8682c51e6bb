"""Sparse-view ADF-STEM tilt-series reconstruction with Gaussian splatting.

Two-stage pipeline: a classical coarse reconstruction (FDK or SIRT) seeds an
anisotropic 3D Gaussian cloud whose per-Gaussian scattering strength (denza)
and view-consistent splat weighting are then optimized against the measured
projections with a composite pixel/Fourier/SSIM/TV loss.
"""

from .classical import (GridSpec, Volume, backproject, fdk_reconstruct,
                        project_stack, project_volume, seed_cloud,
                        sirt_reconstruct)
from .errors import (ConditioningError, DivergenceError, DomainError,
                     FormatError, SeedingError)
from .gaussians import (GaussianCloud, activate_denza, cloud_covariances,
                        compute_splat_view, gamma, identity_rotations,
                        softplus, softplus_inverse)
from .geometry import (BeamKind, BeamModel, DetectorGrid, Ray, TiltGeometry,
                       pixel_ray, project_point, view_matrix, view_rotation)
from .io import (FixedRange, MinMax, export_png, load_cloud, read_angles,
                 read_mrc, save_cloud, write_angles, write_mrc)
from .losses import (LossReport, LossWeights, TVMode, fourier_amplitude,
                     pixel_l1, ssim_loss, total_loss, tv3d)
from .metrics import EvalReport, evaluate_run, psnr, ssim, volume_ssim
from .splatter import (CloudGradients, ProjectionImage, ProjectionStack,
                       render_all, render_backward, render_view)
from .synthdata import (Blob, Box, EveryKthHeldOut, ExplicitSplit, NoiseModel,
                        PhantomSpec, Shell, Sphere, ViewSplit, build_phantom,
                        simulate_tilt_series, split_views)
from .trainer import TrainConfig, TrainLog, TrainState, adam_step, train
from .voxelizer import voxelize, voxelize_backward

__version__ = "0.1.0"
