"""Composite training loss: pixel L1, Fourier amplitude, SSIM and 3D TV.

Every term returns its scalar value together with an exact analytic gradient
(with respect to the rendered image, or the voxel volume for TV). Reported
values are true L1 / SSIM quantities; the absolute-value kinks inside the
pixel and TV gradients are Huber-smoothed with a tiny delta so optimization
sees a continuous slope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.ndimage import correlate1d

from .classical import Volume
from .errors import DomainError

# Half width of the Huber well replacing |.| inside gradients.
HUBER_DELTA = 1e-6

# Spectral amplitudes below this contribute no phase direction to the gradient.
_AMP_EPS = 1e-12

_DIAG_WEIGHT = 1.0 / math.sqrt(2.0)


class TVMode(Enum):
    AXIAL3 = "axial3"
    NEIGHBOR8 = "neighbor8"


def _image_data(img) -> np.ndarray:
    data = getattr(img, "data", img)
    return np.asarray(data, dtype=np.float64)


def _pair(render, meas):
    r, m = _image_data(render), _image_data(meas)
    if r.shape != m.shape:
        raise DomainError(f"image shape mismatch: {r.shape} vs {m.shape}")
    return r, m


def _huber_sign(diff: np.ndarray) -> np.ndarray:
    return np.clip(diff / HUBER_DELTA, -1.0, 1.0)


# ------------------------------------------------------------------ pixel L1


def pixel_l1(render, meas):
    """Mean absolute intensity difference; gradient sign(diff)/n_pixels."""
    r, m = _pair(render, meas)
    diff = r - m
    value = float(np.abs(diff).mean())
    grad = _huber_sign(diff) / diff.size
    return value, grad


# ------------------------------------------------------- Fourier amplitude


def _radial_weight(shape) -> np.ndarray:
    """Radial frequency magnitude over the DFT plane, normalized to [0, 1]."""
    fv = np.fft.fftfreq(shape[0])
    fu = np.fft.fftfreq(shape[1])
    radial = np.sqrt(fv[:, None] ** 2 + fu[None, :] ** 2)
    top = math.hypot(np.abs(fv).max(), np.abs(fu).max())
    return radial / top


def fourier_amplitude(render, meas, lambda_hf: float = 1.0):
    """Weighted mean DFT-amplitude mismatch with high-frequency emphasis.

    value = mean over all frequency bins of (1 + lambda_hf * w) * ||R| - |M||,
    w rising linearly from 0 (DC) to 1 (corner Nyquist). The gradient maps
    back through the inverse transform and is exactly real.
    """
    r, m = _pair(render, meas)
    if min(r.shape) < 2:
        raise DomainError("images must be at least 2x2 for the Fourier term")
    spec_r = np.fft.fft2(r)
    amp_r = np.abs(spec_r)
    amp_m = np.abs(np.fft.fft2(m))
    coeff = 1.0 + lambda_hf * _radial_weight(r.shape)
    diff = amp_r - amp_m
    value = float((coeff * np.abs(diff)).mean())
    phase = np.where(amp_r > _AMP_EPS, spec_r / np.maximum(amp_r, _AMP_EPS), 0.0)
    grad = np.real(np.fft.ifft2(coeff * np.sign(diff) * phase))
    return value, grad


# ------------------------------------------------------------------- SSIM


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - 0.5 * (size - 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _windowed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-region windowed mean (separable correlation, then crop)."""
    r = kernel.size // 2
    out = correlate1d(img, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    return out[r:-r, r:-r]


def _windowed_adjoint(gmap: np.ndarray, kernel: np.ndarray, shape) -> np.ndarray:
    """Exact adjoint of _windowed for the symmetric kernel."""
    r = kernel.size // 2
    full = np.zeros(shape)
    full[r:-r, r:-r] = gmap
    full = correlate1d(full, kernel, axis=0, mode="constant")
    return correlate1d(full, kernel, axis=1, mode="constant")


def ssim_loss(render, meas, data_range: float, window_size: int = 11,
              sigma: float = 1.5):
    """1 - mean local SSIM over valid sliding windows, with exact gradient."""
    r, m = _pair(render, meas)
    if not data_range > 0 or not math.isfinite(data_range):
        raise DomainError("data_range must be positive and finite")
    if min(r.shape) < window_size:
        raise DomainError(f"images must be at least {window_size} pixels per side")
    kernel = _gaussian_kernel(window_size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    mu1 = _windowed(r, kernel)
    mu2 = _windowed(m, kernel)
    var1 = _windowed(r * r, kernel) - mu1 ** 2
    var2 = _windowed(m * m, kernel) - mu2 ** 2
    cov = _windowed(r * m, kernel) - mu1 * mu2

    a1 = 2.0 * mu1 * mu2 + c1
    a2 = 2.0 * cov + c2
    b1 = mu1 ** 2 + mu2 ** 2 + c1
    b2 = var1 + var2 + c2
    p = a1 / b1
    q = a2 / b2
    ssim_map = p * q
    value = float(1.0 - ssim_map.mean())

    # dS/dx through the windowed statistics (mu1, var1, cov channels).
    g_mu = 2.0 * q * (mu2 - mu1 * p) / b1
    g_cov = 2.0 * p / b2
    g_var = -p * a2 / b2 ** 2
    local = g_mu - g_cov * mu2 - 2.0 * g_var * mu1
    grad = (_windowed_adjoint(local, kernel, r.shape)
            + m * _windowed_adjoint(g_cov, kernel, r.shape)
            + r * _windowed_adjoint(2.0 * g_var, kernel, r.shape))
    grad *= -1.0 / ssim_map.size
    return value, grad


# ------------------------------------------------------------------ 3D TV


def _tv_families(mode: TVMode):
    families = [((1, 0, 0), 1.0), ((0, 1, 0), 1.0), ((0, 0, 1), 1.0)]
    if mode is TVMode.NEIGHBOR8:
        # In-slice diagonals: within the beam plane (x-z), across the tilt axis.
        families += [((1, 0, 1), _DIAG_WEIGHT), ((1, 0, -1), _DIAG_WEIGHT)]
    return families


def tv3d(vol, mode: TVMode = TVMode.AXIAL3):
    """Anisotropic total variation over forward neighbor differences.

    Axial3 sums |forward difference| along x, y and z; Neighbor8 adds the two
    in-slice diagonal directions at weight 1/sqrt(2). Value is normalized by
    the voxel count; axes too short for a difference contribute nothing.
    """
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol, dtype=np.float64)
    if data.ndim != 3:
        raise DomainError("tv3d expects a 3D volume")
    if max(data.shape) < 2:
        raise DomainError("volume has no neighboring voxels along any axis")
    n = data.size
    value = 0.0
    grad = np.zeros_like(data)
    for shift, weight in _tv_families(mode):
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        skip = False
        for ax, s in enumerate(shift):
            if s == 0:
                continue
            if data.shape[ax] < 2:
                skip = True
                break
            if s > 0:
                src[ax], dst[ax] = slice(None, -1), slice(1, None)
            else:
                src[ax], dst[ax] = slice(1, None), slice(None, -1)
        if skip:
            continue
        diff = data[tuple(dst)] - data[tuple(src)]
        value += weight * float(np.abs(diff).sum())
        h = weight * _huber_sign(diff)
        grad[tuple(dst)] += h
        grad[tuple(src)] -= h
    return value / n, grad / n


# ------------------------------------------------------------- aggregation


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights for the four terms plus high-frequency emphasis."""

    lambda_pixel: float = 1.0
    lambda_freq: float = 0.1
    lambda_ssim: float = 0.2
    lambda_3dtv: float = 0.01
    lambda_hf: float = 1.0

    def __post_init__(self):
        vals = (self.lambda_pixel, self.lambda_freq, self.lambda_ssim,
                self.lambda_3dtv, self.lambda_hf)
        if any(not (v >= 0) or not math.isfinite(v) for v in vals):
            raise DomainError("loss weights must be finite and non-negative")
        if self.lambda_pixel + self.lambda_freq + self.lambda_ssim <= 0:
            raise DomainError("at least one data-term weight must be positive")


@dataclass
class LossReport:
    """Per-term values, the weighted total, and aggregated gradients."""

    pixel: float
    freq: float
    ssim: float
    tv3d: float
    total: float
    grad_renders: np.ndarray          # (n_views, nv, nu), d total / d render
    grad_volume: np.ndarray | None    # grid-shaped, d total / d voxel


def total_loss(renders, measurements, volume, weights: LossWeights,
               data_range: float | None = None,
               tv_mode: TVMode = TVMode.AXIAL3) -> LossReport:
    """Weighted sum of the four terms, values averaged over views.

    ``renders``/``measurements`` are (n_views, nv, nu) arrays or stacks with a
    ``.data`` attribute; ``volume`` may be None to skip the TV term. The SSIM
    data range defaults to the maximum of the measured stack.
    """
    r_stack = _image_data(renders)
    m_stack = _image_data(measurements)
    if r_stack.shape != m_stack.shape:
        raise DomainError(f"stack shape mismatch: {r_stack.shape} vs {m_stack.shape}")
    if r_stack.ndim != 3 or r_stack.shape[0] == 0:
        raise DomainError("expected a non-empty stack of views")
    n_views = r_stack.shape[0]
    if data_range is None:
        peak = float(m_stack.max()) if m_stack.size else 0.0
        data_range = peak if peak > 0 else 1.0

    vals = {"pixel": 0.0, "freq": 0.0, "ssim": 0.0}
    grad_renders = np.zeros_like(r_stack)
    for v in range(n_views):
        pv, pg = pixel_l1(r_stack[v], m_stack[v])
        fv, fg = fourier_amplitude(r_stack[v], m_stack[v], weights.lambda_hf)
        sv, sg = ssim_loss(r_stack[v], m_stack[v], data_range)
        vals["pixel"] += pv
        vals["freq"] += fv
        vals["ssim"] += sv
        grad_renders[v] = (weights.lambda_pixel * pg + weights.lambda_freq * fg
                           + weights.lambda_ssim * sg) / n_views
    for key in vals:
        vals[key] /= n_views

    if volume is not None:
        tv_val, tv_grad = tv3d(volume, tv_mode)
        grad_volume = weights.lambda_3dtv * tv_grad
    else:
        tv_val, grad_volume = 0.0, None

    total = (weights.lambda_pixel * vals["pixel"]
             + weights.lambda_freq * vals["freq"]
             + weights.lambda_ssim * vals["ssim"]
             + weights.lambda_3dtv * tv_val)
    return LossReport(vals["pixel"], vals["freq"], vals["ssim"], tv_val,
                      total, grad_renders, grad_volume)
