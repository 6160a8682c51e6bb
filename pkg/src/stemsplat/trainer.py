"""Stage-two optimization: Adam over all Gaussian parameter groups.

Each step renders the scheduled views, voxelizes onto the TV grid, evaluates
the composite loss, backpropagates analytically, and applies per-group
bias-corrected Adam updates followed by quaternion renormalization and scale
clamping. Periodic density control prunes negligible or persistently clamped
Gaussians and splits high-gradient ones. The loop is deterministic for a
fixed config and seed.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .classical import GridSpec
from .errors import DivergenceError, DomainError
from .gaussians import GaussianCloud, quat_to_rot, softplus, softplus_inverse
from .losses import LossReport, LossWeights, TVMode, total_loss
from .splatter import CloudGradients, ProjectionStack, render_backward, render_view
from .voxelizer import voxelize, voxelize_backward

log = logging.getLogger(__name__)

_PARAM_GROUPS = ("positions", "log_scales", "rotations", "denza_raw")

# Consecutive density-control events a Gaussian may sit at a scale clamp
# bound before being removed.
_MAX_CLAMP_STRIKES = 2

_DENSIFY_SCALE_SHRINK = 1.6
_DENSIFY_OFFSET_SIGMA = 0.5


@dataclass
class TrainConfig:
    """Optimization hyperparameters; every field is overridable from config."""

    iterations: int = 5000
    lr_position: float = 2e-3          # multiplied by the scene extent
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_denza_raw: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    prune_interval: int = 500
    prune_denza_floor: float = 1e-3
    densify_interval: int = 500
    densify_grad_percentile: float = 90.0
    densify_until: Optional[int] = None   # default 0.6 * iterations
    max_growth_factor: float = 4.0
    tv_grid: Optional[GridSpec] = None
    weights: LossWeights = dc_field(default_factory=LossWeights)
    tv_mode: TVMode = TVMode.AXIAL3
    tv_stride: int = 1
    rng_seed: int = 0
    views_per_step: int = 0               # 0 = all training views each step
    checkpoint_interval: int = 0          # 0 = no intermediate checkpoints
    data_range: Optional[float] = None    # SSIM range; default stack maximum
    use_gamma: bool = True                # False: view-consistency factor -> 1

    def __post_init__(self):
        if self.iterations < 0:
            raise DomainError("iterations must be >= 0")
        rates = (self.lr_position, self.lr_log_scale, self.lr_rotation,
                 self.lr_denza_raw)
        if any(not r > 0 for r in rates):
            raise DomainError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise DomainError("invalid Adam moment parameters")
        if self.prune_interval < 1 or self.densify_interval < 1 or self.tv_stride < 1:
            raise DomainError("intervals must be >= 1")
        if not 0 <= self.densify_grad_percentile <= 100:
            raise DomainError("densify_grad_percentile must be in [0, 100]")
        if self.max_growth_factor < 1:
            raise DomainError("max_growth_factor must be >= 1")

    def resolved_densify_until(self) -> int:
        if self.densify_until is not None:
            return self.densify_until
        return int(0.6 * self.iterations)


@dataclass
class TrainState:
    """Cloud plus optimizer state; array lengths follow the cloud count."""

    cloud: GaussianCloud
    moments_m: Dict[str, np.ndarray]
    moments_v: Dict[str, np.ndarray]
    step_count: int = 0
    seed_count: int = 0
    accum_grad_norm: np.ndarray = dc_field(default_factory=lambda: np.zeros(0))
    clamp_strikes: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, np.int64))

    @classmethod
    def initial(cls, cloud: GaussianCloud) -> "TrainState":
        n = cloud.count
        zeros = {name: np.zeros_like(getattr(cloud, name)) for name in _PARAM_GROUPS}
        return cls(cloud=cloud,
                   moments_m={k: v.copy() for k, v in zeros.items()},
                   moments_v=zeros,
                   seed_count=n,
                   accum_grad_norm=np.zeros(n),
                   clamp_strikes=np.zeros(n, np.int64))

    def select(self, keep: np.ndarray) -> None:
        """Restrict all per-Gaussian state to ``keep`` (mask or indices)."""
        self.cloud = self.cloud.subset(keep)
        for store in (self.moments_m, self.moments_v):
            for name in _PARAM_GROUPS:
                store[name] = store[name][keep]
        self.accum_grad_norm = self.accum_grad_norm[keep]
        self.clamp_strikes = self.clamp_strikes[keep]

    def append(self, cloud_tail: GaussianCloud) -> None:
        """Grow the state by fresh Gaussians with zeroed optimizer memory."""
        base = self.cloud
        merged = GaussianCloud(
            np.concatenate([base.positions, cloud_tail.positions]),
            np.concatenate([base.log_scales, cloud_tail.log_scales]),
            np.concatenate([base.rotations, cloud_tail.rotations]),
            np.concatenate([base.denza_raw, cloud_tail.denza_raw]),
            scale_min=base.scale_min, scale_max=base.scale_max)
        n_new = cloud_tail.count
        self.cloud = merged
        for store in (self.moments_m, self.moments_v):
            for name in _PARAM_GROUPS:
                pad = np.zeros((n_new,) + store[name].shape[1:])
                store[name] = np.concatenate([store[name], pad])
        self.accum_grad_norm = np.concatenate([self.accum_grad_norm, np.zeros(n_new)])
        self.clamp_strikes = np.concatenate(
            [self.clamp_strikes, np.zeros(n_new, np.int64)])


@dataclass
class TrainLog:
    """Per-iteration loss terms plus density-control events."""

    rows: List[Tuple[int, float, float, float, float, float]] = dc_field(
        default_factory=list)
    events: List[str] = dc_field(default_factory=list)

    def add(self, iteration: int, report: LossReport) -> None:
        self.rows.append((iteration, report.pixel, report.freq, report.ssim,
                          report.tv3d, report.total))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "pixel", "freq", "ssim", "tv3d", "total"])
        for row in self.rows:
            writer.writerow([row[0]] + [f"{v:.10e}" for v in row[1:]])
        return buf.getvalue()


def scene_extent(cloud: GaussianCloud, fallback: float) -> float:
    """Largest bounding-box side of the cloud positions; fallback if flat."""
    if cloud.count == 0:
        return fallback
    span = cloud.positions.max(axis=0) - cloud.positions.min(axis=0)
    ext = float(span.max())
    return ext if ext > 0 else fallback


def _learning_rates(cfg: TrainConfig, extent: float) -> Dict[str, float]:
    return {"positions": cfg.lr_position * extent,
            "log_scales": cfg.lr_log_scale,
            "rotations": cfg.lr_rotation,
            "denza_raw": cfg.lr_denza_raw}


def adam_step(state: TrainState, grads: CloudGradients, cfg: TrainConfig,
              lrs: Dict[str, float]) -> None:
    """One bias-corrected Adam update over all parameter groups, in place."""
    state.step_count += 1
    t = state.step_count
    grad_map = {"positions": grads.d_positions, "log_scales": grads.d_log_scales,
                "rotations": grads.d_rotations, "denza_raw": grads.d_denza_raw}
    for name in _PARAM_GROUPS:
        g = grad_map[name]
        m = state.moments_m[name]
        v = state.moments_v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        getattr(state.cloud, name)[...] -= lrs[name] * m_hat / (np.sqrt(v_hat) + cfg.eps)


def prune(state: TrainState, cfg: TrainConfig) -> int:
    """Drop negligible-denza and persistently scale-clamped Gaussians."""
    cloud = state.cloud
    at_low = np.any(cloud.log_scales <= np.log(cloud.scale_min) + 1e-12, axis=1)
    at_high = np.zeros(cloud.count, bool)
    if np.isfinite(cloud.scale_max):
        at_high = np.any(cloud.log_scales >= np.log(cloud.scale_max) - 1e-12, axis=1)
    at_bound = at_low | at_high
    state.clamp_strikes = np.where(at_bound, state.clamp_strikes + 1, 0)
    keep = (cloud.denza >= cfg.prune_denza_floor) \
        & (state.clamp_strikes <= _MAX_CLAMP_STRIKES)
    removed = int(np.count_nonzero(~keep))
    if removed == cloud.count:
        raise DivergenceError("pruning removed every Gaussian",
                              iteration=state.step_count, cloud=cloud.copy())
    if removed:
        state.select(keep)
    return removed


def densify(state: TrainState, cfg: TrainConfig) -> int:
    """Split Gaussians with large accumulated position gradients in two.

    Children sit at +-0.5 sigma_max along the principal axis with scales
    shrunk by 1.6 and denza_raw set so their summed activated denza equals
    the parent's exactly. Growth is capped at max_growth_factor x seed count.
    """
    cloud = state.cloud
    cap = int(cfg.max_growth_factor * state.seed_count)
    room = cap - cloud.count
    norms = state.accum_grad_norm
    if norms.size == 0 or not np.any(norms > 0):
        return 0
    threshold = np.percentile(norms, cfg.densify_grad_percentile)
    candidates = np.nonzero(norms > threshold)[0]
    if candidates.size == 0:
        return 0
    if room <= 0:
        log.warning("densify skipped: cloud at capacity (%d Gaussians)", cloud.count)
        return 0
    if candidates.size > room:
        order = np.argsort(-norms[candidates], kind="stable")
        candidates = candidates[order[:room]]
        candidates = np.sort(candidates)

    parents = cloud.subset(candidates)
    rot = quat_to_rot(parents.rotations)
    k_max = np.argmax(parents.log_scales, axis=1)
    axes = rot[np.arange(parents.count), :, k_max]
    sigma_max = np.exp(parents.log_scales[np.arange(parents.count), k_max])
    offset = _DENSIFY_OFFSET_SIGMA * sigma_max[:, None] * axes
    child_raw = softplus_inverse(0.5 * softplus(parents.denza_raw))
    child_ls = parents.log_scales - math.log(_DENSIFY_SCALE_SHRINK)

    children = GaussianCloud(
        np.concatenate([parents.positions + offset, parents.positions - offset]),
        np.concatenate([child_ls, child_ls]),
        np.concatenate([parents.rotations, parents.rotations]),
        np.concatenate([child_raw, child_raw]),
        scale_min=cloud.scale_min, scale_max=cloud.scale_max)

    keep = np.ones(cloud.count, bool)
    keep[candidates] = False
    state.select(keep)
    state.append(children)
    state.cloud.clamp()
    return int(candidates.size)


def _schedule_views(train_views: Sequence[int], step: int, per_step: int):
    if per_step <= 0 or per_step >= len(train_views):
        return tuple(train_views)
    n = len(train_views)
    start = (step * per_step) % n
    return tuple(train_views[(start + j) % n] for j in range(per_step))


def train(stack: ProjectionStack, geom, init: GaussianCloud, cfg: TrainConfig,
          train_views: Optional[Sequence[int]] = None,
          out_dir: Optional[str] = None):
    """Optimize a Gaussian cloud against measured views.

    Returns (cloud, TrainLog). ``train_views`` selects the measured views used
    for the loss (default: all views in the stack). A non-finite loss aborts
    with a DivergenceError carrying the last finite-loss cloud.
    """
    if init.count == 0:
        raise DomainError("initial cloud is empty")
    if stack.n_views != geom.n_views:
        raise DomainError("stack/geometry view count mismatch")
    views = tuple(range(stack.n_views)) if train_views is None else tuple(train_views)
    if not views:
        raise DomainError("no training views selected")
    for v in views:
        geom.check_view(v)

    init.validate()
    if cfg.iterations == 0:
        return init.copy(), TrainLog()
    state = TrainState.initial(init.copy().clamp())
    extent = scene_extent(state.cloud, fallback=2.0 * geom.detector.half_extent)
    lrs = _learning_rates(cfg, extent)
    tlog = TrainLog()
    use_tv = cfg.tv_grid is not None and cfg.weights.lambda_3dtv > 0

    if cfg.data_range is not None:
        data_range = cfg.data_range
    else:
        peak = float(stack.data.max())
        data_range = peak if peak > 0 else 1.0

    last_good = state.cloud.copy()
    densify_until = cfg.resolved_densify_until()

    for it in range(cfg.iterations):
        sel = _schedule_views(views, it, cfg.views_per_step)
        renders = np.stack([render_view(state.cloud, geom, v, cfg.use_gamma).data
                            for v in sel])
        measured = stack.data[list(sel)]
        tv_now = use_tv and (it % cfg.tv_stride == 0)
        volume = voxelize(state.cloud, cfg.tv_grid) if tv_now else None
        report = total_loss(renders, measured, volume, cfg.weights,
                            data_range=data_range, tv_mode=cfg.tv_mode)
        if not math.isfinite(report.total):
            raise DivergenceError(
                f"non-finite loss {report.total!r} at iteration {it}",
                iteration=it, cloud=last_good)
        tlog.add(it, report)
        last_good = state.cloud.copy()

        grads = CloudGradients.zeros_for(state.cloud)
        for j, v in enumerate(sel):
            grads += render_backward(state.cloud, geom, v, report.grad_renders[j],
                                     cfg.use_gamma)
        if tv_now and report.grad_volume is not None:
            grads += voxelize_backward(state.cloud, cfg.tv_grid, report.grad_volume)

        adam_step(state, grads, cfg, lrs)
        state.cloud.clamp()
        state.accum_grad_norm += np.linalg.norm(grads.d_positions, axis=1)

        tick = it + 1
        if tick % cfg.prune_interval == 0 and tick < cfg.iterations:
            removed = prune(state, cfg)
            if removed:
                tlog.events.append(f"iteration {tick}: pruned {removed}")
        if (tick % cfg.densify_interval == 0 and tick <= densify_until
                and tick < cfg.iterations):
            added = densify(state, cfg)
            if added:
                tlog.events.append(f"iteration {tick}: split {added}")
            state.accum_grad_norm[...] = 0.0
        if out_dir and cfg.checkpoint_interval > 0 \
                and tick % cfg.checkpoint_interval == 0:
            from .io import save_cloud
            save_cloud(os.path.join(out_dir, f"cloud_{tick:06d}.dzgc"), state.cloud)

    state.cloud.validate()
    return state.cloud, tlog
