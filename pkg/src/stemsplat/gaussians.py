"""Anisotropic 3D Gaussian clouds and their per-view 2D projections.

Each Gaussian carries a position, per-axis log scale, a unit quaternion
(w, x, y, z) and a raw scattering coefficient ``denza_raw``; the effective
coefficient is ``softplus(denza_raw)``, a single learnable scalar standing in
for density times Z^alpha along with any constant prefactor.

The projection of a Gaussian into a view multiplies its 2D footprint by

    gamma = sqrt(2*pi * det(cov_view) / det(cov2d))

which makes the splat's total image mass equal the analytic line integral of
the 3D Gaussian, so a Gaussian deposits the same total signal in every view.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import ConditioningError, DomainError
from .geometry import BeamKind, TiltGeometry, view_matrix

# Isotropic regularizer added to the diagonal of cone-beam 2D covariances, in
# squared pixels; keeps footprints resolvable after extreme foreshortening.
BLUR_FLOOR_PX2 = 0.09

# Determinants at or below this are treated as numerically singular.
DET_EPS = 1e-12

_IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------- activations


def softplus(x):
    """log(1 + e^x), overflow-safe; maps denza_raw to the positive coefficient."""
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    """Inverse of softplus for y > 0: y + log(1 - e^-y)."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise DomainError("softplus_inverse requires positive input")
    return y + np.log1p(-np.exp(-y))


def sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate_denza(denza_raw):
    """Effective scattering coefficient of each Gaussian."""
    return softplus(np.asarray(denza_raw, dtype=float))


# ---------------------------------------------------------------- cloud type


@dataclass
class GaussianCloud:
    """Parameter arrays for N Gaussians, float64 in memory.

    ``scale_min``/``scale_max`` bound exp(log_scales) in world units; the
    trainer re-applies them after every step, so in-range values are an
    invariant rather than something enforced lazily here.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    denza_raw: np.ndarray
    scale_min: float = 0.3
    scale_max: float = np.inf

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(self.rotations, dtype=np.float64))
        self.denza_raw = np.atleast_1d(np.asarray(self.denza_raw, dtype=np.float64))
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3) or self.log_scales.shape != (n, 3):
            raise DomainError("positions and log_scales must be (N, 3)")
        if self.rotations.shape != (n, 4):
            raise DomainError("rotations must be (N, 4) quaternions (w, x, y, z)")
        if self.denza_raw.shape != (n,):
            raise DomainError("denza_raw must be (N,)")
        if not (0 < self.scale_min <= self.scale_max):
            raise DomainError("need 0 < scale_min <= scale_max")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return self.count

    @property
    def denza(self) -> np.ndarray:
        return activate_denza(self.denza_raw)

    def validate(self):
        for name in ("positions", "log_scales", "rotations", "denza_raw"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"non-finite values in {name}")
        norms = np.linalg.norm(self.rotations, axis=1)
        if self.count and not np.allclose(norms, 1.0, atol=1e-6):
            raise DomainError("rotations must be unit quaternions")
        scales = np.exp(self.log_scales)
        if self.count and (scales.min() < self.scale_min * (1 - 1e-9) or
                           scales.max() > self.scale_max * (1 + 1e-9)):
            raise DomainError("scales outside [scale_min, scale_max]")

    def clamp(self):
        """Renormalize quaternions and clip scales into bounds, in place.

        Rows already unit-norm are left untouched so repeated clamping is a
        bitwise no-op.
        """
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DomainError("zero-norm quaternion")
        off = np.abs(norms * norms - 1.0) > 1e-12
        if np.any(off):
            self.rotations /= np.where(off, norms, 1.0)
        np.clip(self.log_scales, np.log(self.scale_min), np.log(self.scale_max),
                out=self.log_scales)
        return self

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.positions.copy(), self.log_scales.copy(),
                             self.rotations.copy(), self.denza_raw.copy(),
                             self.scale_min, self.scale_max)

    def subset(self, keep) -> "GaussianCloud":
        return GaussianCloud(self.positions[keep], self.log_scales[keep],
                             self.rotations[keep], self.denza_raw[keep],
                             self.scale_min, self.scale_max)


# ------------------------------------------------------- small matrix helpers


def _det2(m):
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def _det3(m):
    return (m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
            - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
            + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]))


def _inv2(m, det=None):
    if det is None:
        det = _det2(m)
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 1, 1] = m[..., 0, 0]
    out[..., 0, 1] = -m[..., 0, 1]
    out[..., 1, 0] = -m[..., 1, 0]
    return out / det[..., None, None]


def _inv3(m, det=None):
    if det is None:
        det = _det3(m)
    adj = np.empty_like(m)
    adj[..., 0, 0] = m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1]
    adj[..., 0, 1] = m[..., 0, 2] * m[..., 2, 1] - m[..., 0, 1] * m[..., 2, 2]
    adj[..., 0, 2] = m[..., 0, 1] * m[..., 1, 2] - m[..., 0, 2] * m[..., 1, 1]
    adj[..., 1, 0] = m[..., 1, 2] * m[..., 2, 0] - m[..., 1, 0] * m[..., 2, 2]
    adj[..., 1, 1] = m[..., 0, 0] * m[..., 2, 2] - m[..., 0, 2] * m[..., 2, 0]
    adj[..., 1, 2] = m[..., 0, 2] * m[..., 1, 0] - m[..., 0, 0] * m[..., 1, 2]
    adj[..., 2, 0] = m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]
    adj[..., 2, 1] = m[..., 0, 1] * m[..., 2, 0] - m[..., 0, 0] * m[..., 2, 1]
    adj[..., 2, 2] = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    return adj / det[..., None, None]


# ----------------------------------------------------- quaternions/covariance


def quat_to_rot(q, normalize=True):
    """Rotation matrices for quaternions (..., 4) in (w, x, y, z) order."""
    q = np.asarray(q, dtype=float)
    if normalize:
        q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3))
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def _rot_quat_jacobian(q_hat):
    """dR/dq for unit quaternions: shape (..., 4, 3, 3)."""
    w, x, y, z = q_hat[..., 0], q_hat[..., 1], q_hat[..., 2], q_hat[..., 3]
    zero = np.zeros_like(w)
    jac = np.empty(q_hat.shape[:-1] + (4, 3, 3))
    jac[..., 0, :, :] = 2 * np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1)], axis=-2)
    jac[..., 1, :, :] = 2 * np.stack([
        np.stack([zero, y, z], axis=-1),
        np.stack([y, -2 * x, -w], axis=-1),
        np.stack([z, w, -2 * x], axis=-1)], axis=-2)
    jac[..., 2, :, :] = 2 * np.stack([
        np.stack([-2 * y, x, w], axis=-1),
        np.stack([x, zero, z], axis=-1),
        np.stack([-w, z, -2 * y], axis=-1)], axis=-2)
    jac[..., 3, :, :] = 2 * np.stack([
        np.stack([-2 * z, -w, x], axis=-1),
        np.stack([w, -2 * z, y], axis=-1),
        np.stack([x, y, zero], axis=-1)], axis=-2)
    return jac


def cloud_covariances(cloud: GaussianCloud) -> np.ndarray:
    """World-frame covariances Sigma = R diag(exp(2 log_s)) R^T, shape (N, 3, 3)."""
    rot = quat_to_rot(cloud.rotations)
    s2 = np.exp(2.0 * cloud.log_scales)
    return np.einsum("nij,nj,nkj->nik", rot, s2, rot)


def covariance_from_scale_rotation(log_scale, rotation) -> np.ndarray:
    """Covariance of a single Gaussian from its log scales and quaternion."""
    rot = quat_to_rot(np.asarray(rotation, dtype=float))
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=float))
    return (rot * s2) @ rot.T


def gamma(cov_view: np.ndarray, cov2d: np.ndarray) -> float:
    """Line-integral normalization sqrt(2 pi det(cov_view) / det(cov2d))."""
    det_c = float(_det2(np.asarray(cov2d, dtype=float)))
    det_v = float(_det3(np.asarray(cov_view, dtype=float)))
    if det_c <= DET_EPS:
        raise ConditioningError(f"cov2d determinant {det_c:g} below {DET_EPS:g}")
    if det_v <= 0:
        raise ConditioningError("cov_view is not positive definite")
    return float(np.sqrt(2.0 * np.pi * det_v / det_c))


def project_covariance(sigma: np.ndarray, geom: TiltGeometry, view: int,
                       position: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(cov2d, cov_view) of one Gaussian in one view.

    Parallel beams marginalize: cov2d is the top-left 2x2 block of the
    view-frame covariance. Cone beams use the perspective Jacobian at the
    Gaussian centre plus the blur floor. Centres behind a cone source raise
    DomainError; batch callers cull those instead.
    """
    rot_v = view_matrix(geom, view)
    sigma_view = rot_v @ np.asarray(sigma, dtype=float) @ rot_v.T
    if geom.beam.kind is BeamKind.PARALLEL:
        return sigma_view[:2, :2].copy(), sigma_view
    dist = geom.beam.source_distance
    p_view = rot_v @ np.asarray(position, dtype=float)
    w = dist + p_view[2]
    if w <= 1e-6 * dist:
        raise DomainError("Gaussian centre behind cone source")
    jac = np.array([[dist / w, 0.0, -p_view[0] * dist / w ** 2],
                    [0.0, dist / w, -p_view[1] * dist / w ** 2]])
    floor = BLUR_FLOOR_PX2 * geom.detector.pixel_size ** 2
    cov2d = jac @ sigma_view @ jac.T + floor * np.eye(2)
    return cov2d, sigma_view


# ------------------------------------------------------------ per-view cache


@dataclass
class SplatView:
    """Per-view projection of a cloud.

    ``mean2d`` holds fractional pixel indices (pixel i's centre at i.0);
    ``cov2d`` is in squared world units. ``valid`` flags Gaussians that
    actually contribute (cone culling can clear it).
    """

    mean2d: np.ndarray
    cov2d: np.ndarray
    gamma: np.ndarray
    depth: np.ndarray
    valid: np.ndarray


class _ViewIntermediates:
    """Everything the backward pass needs, kept from the forward projection."""

    __slots__ = ("kind", "rot_v", "q_hat", "q_norm", "rot3", "s2", "sigma",
                 "mu_view", "sigma_view", "jac", "center2d", "cov2d",
                 "inv_cov2d", "det_c", "det_sv", "gamma", "depth", "valid",
                 "w_persp", "source_distance")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def _view_intermediates(cloud: GaussianCloud, geom: TiltGeometry, view: int) -> _ViewIntermediates:
    rot_v = view_matrix(geom, view)
    n = cloud.count
    q = cloud.rotations
    q_norm = np.linalg.norm(q, axis=1)
    if np.any(q_norm == 0):
        raise DomainError("zero-norm quaternion")
    q_hat = q / q_norm[:, None]
    rot3 = quat_to_rot(q_hat, normalize=False)
    s2 = np.exp(2.0 * cloud.log_scales)
    sigma = np.einsum("nij,nj,nkj->nik", rot3, s2, rot3)
    mu_view = cloud.positions @ rot_v.T
    sigma_view = np.einsum("ij,njk,lk->nil", rot_v, sigma, rot_v)

    if geom.beam.kind is BeamKind.PARALLEL:
        jac = np.broadcast_to(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), (n, 2, 3))
        center2d = mu_view[:, :2].copy()
        cov2d = sigma_view[:, :2, :2].copy()
        depth = mu_view[:, 2].copy()
        valid = np.ones(n, dtype=bool)
        w_persp = None
        dist = None
    else:
        dist = geom.beam.source_distance
        w_persp = dist + mu_view[:, 2]
        valid = w_persp > 1e-6 * dist
        w_safe = np.where(valid, w_persp, dist)
        jac = np.zeros((n, 2, 3))
        jac[:, 0, 0] = dist / w_safe
        jac[:, 1, 1] = dist / w_safe
        jac[:, 0, 2] = -mu_view[:, 0] * dist / w_safe ** 2
        jac[:, 1, 2] = -mu_view[:, 1] * dist / w_safe ** 2
        center2d = mu_view[:, :2] * (dist / w_safe)[:, None]
        floor = BLUR_FLOOR_PX2 * geom.detector.pixel_size ** 2
        cov2d = np.einsum("nij,njk,nlk->nil", jac, sigma_view, jac)
        cov2d[:, 0, 0] += floor
        cov2d[:, 1, 1] += floor
        depth = w_persp.copy()
        w_persp = w_safe

    det_c = _det2(cov2d)
    det_sv = _det3(sigma_view)
    bad = ~(det_c > DET_EPS) | ~(det_sv > 0)
    if np.any(bad & valid):
        raise ConditioningError("degenerate projected covariance; check scale clamps")
    valid = valid & ~bad
    det_c_safe = np.where(valid, det_c, 1.0)
    inv_cov2d = _inv2(cov2d, det_c_safe)
    gam = np.where(valid, np.sqrt(2.0 * np.pi * np.maximum(det_sv, 0.0) / det_c_safe), 0.0)
    return _ViewIntermediates(
        kind=geom.beam.kind, rot_v=rot_v, q_hat=q_hat, q_norm=q_norm, rot3=rot3,
        s2=s2, sigma=sigma, mu_view=mu_view, sigma_view=sigma_view, jac=jac,
        center2d=center2d, cov2d=cov2d, inv_cov2d=inv_cov2d, det_c=det_c_safe,
        det_sv=det_sv, gamma=gam, depth=depth, valid=valid, w_persp=w_persp,
        source_distance=dist)


def compute_splat_view(cloud: GaussianCloud, geom: TiltGeometry, view: int) -> SplatView:
    """Project every Gaussian of a cloud into one view."""
    inter = _view_intermediates(cloud, geom, view)
    det = geom.detector
    offset = np.array([0.5 * det.nu - 0.5, 0.5 * det.nv - 0.5])
    mean2d = inter.center2d / det.pixel_size + offset
    return SplatView(mean2d=mean2d, cov2d=inter.cov2d.copy(), gamma=inter.gamma.copy(),
                     depth=inter.depth.copy(), valid=inter.valid.copy())


# ------------------------------------------------------------- backward chains


def scale_rotation_backward(inter_or_cloud, d_sigma: np.ndarray):
    """Pull a gradient w.r.t. Sigma back to (log_scales, rotations).

    ``d_sigma`` uses the full-matrix convention (entries treated independently);
    it is symmetrized here, which is a no-op for gradients of symmetric-in,
    symmetric-out functions.
    """
    if isinstance(inter_or_cloud, GaussianCloud):
        cloud = inter_or_cloud
        q = cloud.rotations
        q_norm = np.linalg.norm(q, axis=1)
        q_hat = q / q_norm[:, None]
        rot3 = quat_to_rot(q_hat, normalize=False)
        s2 = np.exp(2.0 * cloud.log_scales)
    else:
        inter = inter_or_cloud
        q_hat, q_norm, rot3, s2 = inter.q_hat, inter.q_norm, inter.rot3, inter.s2
    d_sigma = 0.5 * (d_sigma + np.swapaxes(d_sigma, -1, -2))
    # Sigma = R diag(s2) R^T
    d_log_scales = 2.0 * s2 * np.einsum("nik,nij,njk->nk", rot3, d_sigma, rot3)
    d_rot = 2.0 * np.einsum("nij,njk,nk->nik", d_sigma, rot3, s2)
    jac_q = _rot_quat_jacobian(q_hat)
    d_q_hat = np.einsum("nqij,nij->nq", jac_q, d_rot)
    # through the normalization q_hat = q / |q|
    d_q = (d_q_hat - q_hat * np.sum(q_hat * d_q_hat, axis=1, keepdims=True)) / q_norm[:, None]
    return d_log_scales, d_q


def view_projection_backward(inter: _ViewIntermediates, d_center2d: np.ndarray,
                             d_cov2d: np.ndarray, d_gamma: np.ndarray):
    """Chain gradients w.r.t. (center2d, cov2d, gamma) back to cloud parameters.

    ``d_center2d`` is w.r.t. the projected centre in world detector units;
    returns (d_positions, d_log_scales, d_rotations). Invalid (culled)
    Gaussians must carry zero input gradients.
    """
    d_sv = np.zeros_like(inter.sigma_view)
    d_cov = np.array(d_cov2d, dtype=float, copy=True)

    # gamma = sqrt(2 pi det_sv / det_c)
    half_g = 0.5 * d_gamma * inter.gamma
    inv_sv = _inv3(inter.sigma_view, np.where(inter.valid, inter.det_sv, 1.0))
    d_sv += half_g[:, None, None] * inv_sv
    d_cov -= half_g[:, None, None] * inter.inv_cov2d

    # cov2d = J Sigma_v J^T (+ constant floor)
    d_sv += np.einsum("nji,njk,nkl->nil", inter.jac, d_cov, inter.jac)
    d_mu_view = np.einsum("nij,ni->nj", inter.jac, d_center2d)

    if inter.kind is BeamKind.CONE:
        dist = inter.source_distance
        w = inter.w_persp
        d_jac = 2.0 * np.einsum("nij,njk,nkl->nil", d_cov, inter.jac, inter.sigma_view)
        dw2 = -dist / w ** 2
        dw3 = 2.0 * dist / w ** 3
        d_mu_view[:, 0] += d_jac[:, 0, 2] * dw2
        d_mu_view[:, 1] += d_jac[:, 1, 2] * dw2
        d_mu_view[:, 2] += ((d_jac[:, 0, 0] + d_jac[:, 1, 1]) * dw2
                            + d_jac[:, 0, 2] * inter.mu_view[:, 0] * dw3
                            + d_jac[:, 1, 2] * inter.mu_view[:, 1] * dw3)

    # view frame -> world frame
    d_sigma = np.einsum("ji,njk,kl->nil", inter.rot_v, d_sv, inter.rot_v)
    d_positions = d_mu_view @ inter.rot_v
    d_log_scales, d_rotations = scale_rotation_backward(inter, d_sigma)
    return d_positions, d_log_scales, d_rotations


# ------------------------------------------------------------------- misc


def identity_rotations(n: int) -> np.ndarray:
    return np.tile(_IDENTITY_QUAT, (n, 1))
