"""PSNR and SSIM evaluation in projection and volume domains.

Projection metrics compare rendered (or reprojected) views against measured
ones per train/test split; volume metrics compare a reconstruction against a
reference volume directly (PSNR) and as the mean SSIM over all 2D slices of
the three axis-aligned orientations.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .classical import Volume, project_volume
from .errors import DomainError
from .gaussians import GaussianCloud
from .geometry import TiltGeometry
from .losses import ssim_loss
from .splatter import ProjectionStack, render_view
from .voxelizer import voxelize

PSNR_CAP_DB = 99.0


def psnr(a, b, data_range: float) -> float:
    """10*log10(data_range^2 / MSE), capped at 99 dB (exact match included)."""
    x = np.asarray(getattr(a, "data", a), dtype=np.float64)
    y = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if x.shape != y.shape:
        raise DomainError(f"shape mismatch: {x.shape} vs {y.shape}")
    if not data_range > 0 or not math.isfinite(data_range):
        raise DomainError("data_range must be positive and finite")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(data_range ** 2 / mse))


def ssim(a, b, data_range: float) -> float:
    """Mean SSIM map over valid windows; shares the loss-term kernel."""
    value, _ = ssim_loss(a, b, data_range)
    return 1.0 - value


def volume_ssim(vol_a, vol_b, data_range: float) -> float:
    """Mean per-slice SSIM over all slices of all three orientations."""
    x = np.asarray(getattr(vol_a, "data", vol_a), dtype=np.float64)
    y = np.asarray(getattr(vol_b, "data", vol_b), dtype=np.float64)
    if x.shape != y.shape:
        raise DomainError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 3:
        raise DomainError("volume_ssim expects 3D volumes")
    if min(x.shape) < 11:
        raise DomainError("volume dims must be >= 11 for the SSIM window")
    scores = []
    for axis in range(3):
        for i in range(x.shape[axis]):
            sa = np.take(x, i, axis=axis)
            sb = np.take(y, i, axis=axis)
            scores.append(ssim(sa, sb, data_range))
    return float(np.mean(scores))


@dataclass
class EvalRow:
    split: str
    n_views: int
    psnr_mean: float
    ssim_mean: float


@dataclass
class EvalReport:
    """Per-split projection metrics, plus an optional volume row."""

    data_range: float
    rows: List[EvalRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# data_range={self.data_range!r}\n")
        buf.write("split,n_views,psnr_mean,ssim_mean\n")
        for row in self.rows:
            buf.write(f"{row.split},{row.n_views},{row.psnr_mean:.6f},"
                      f"{row.ssim_mean:.6f}\n")
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'split':<10} {'views':>5} {'PSNR (dB)':>10} {'SSIM':>8}"]
        for row in self.rows:
            lines.append(f"{row.split:<10} {row.n_views:>5} "
                         f"{row.psnr_mean:>10.2f} {row.ssim_mean:>8.4f}")
        return "\n".join(lines)


def _model_view(model, geom: TiltGeometry, view: int,
                use_gamma: bool) -> np.ndarray:
    if isinstance(model, GaussianCloud):
        return render_view(model, geom, view, use_gamma=use_gamma).data
    if isinstance(model, Volume):
        return project_volume(model, geom, view).data
    raise DomainError(f"cannot evaluate model of type {type(model).__name__}")


def evaluate_run(model, stack: ProjectionStack, geom: TiltGeometry, split,
                 gt_volume: Optional[Volume] = None,
                 use_gamma: bool = True) -> EvalReport:
    """Mean view-domain PSNR/SSIM per split; volume metrics when gt is given.

    ``model`` is a Gaussian cloud (rendered) or a volume (reprojected);
    ``split`` carries ``train_indices`` and ``test_indices``. The data range
    is the maximum of the measured stack (volume metrics use the reference
    volume's maximum). ``use_gamma`` must match the convention the cloud was
    trained under so its renders use its own forward model.
    """
    if stack.n_views != geom.n_views:
        raise DomainError("stack/geometry view count mismatch")
    for name in ("train_indices", "test_indices"):
        idx = getattr(split, name)
        if any(i < 0 or i >= geom.n_views for i in idx):
            raise DomainError(f"{name} out of range for {geom.n_views} views")

    peak = float(stack.data.max())
    data_range = peak if peak > 0 else 1.0
    report = EvalReport(data_range=data_range)
    for name, idx in (("train", tuple(split.train_indices)),
                      ("test", tuple(split.test_indices))):
        if not idx:
            continue
        psnrs, ssims = [], []
        for view in idx:
            rendered = _model_view(model, geom, view, use_gamma)
            psnrs.append(psnr(rendered, stack.data[view], data_range))
            ssims.append(ssim(rendered, stack.data[view], data_range))
        report.rows.append(EvalRow(name, len(idx), float(np.mean(psnrs)),
                                   float(np.mean(ssims))))

    if gt_volume is not None:
        if isinstance(model, GaussianCloud):
            recon = voxelize(model, gt_volume.grid)
        else:
            recon = model
        vol_peak = float(gt_volume.data.max())
        vol_range = vol_peak if vol_peak > 0 else 1.0
        n_slices = sum(gt_volume.data.shape)
        report.rows.append(EvalRow(
            "volume", n_slices,
            psnr(recon.data, gt_volume.data, vol_range),
            volume_ssim(recon.data, gt_volume.data, vol_range)))
    return report
