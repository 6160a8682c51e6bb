"""Command-line surface: dataset generation, reconstruction, training, eval.

Every command resolves a flat key/value RunConfig (defaults -> --config file
-> command-line flags), writes the fully resolved configuration into the
output directory, and uses canonical output filenames, so any run can be
reproduced by pointing --config at the echoed file.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Dict, Optional, Sequence

import numpy as np

from . import synthdata
from .classical import (GridSpec, Volume, fdk_reconstruct, seed_cloud,
                        sirt_reconstruct)
from .errors import DivergenceError, DomainError, FormatError, SeedingError
from .gaussians import GaussianCloud
from .geometry import BeamKind, BeamModel, DetectorGrid, TiltGeometry
from .io import (load_cloud, read_angles, read_mrc, save_cloud, write_angles,
                 write_mrc, write_text)
from .losses import LossWeights, TVMode
from .metrics import evaluate_run
from .splatter import render_all
from .synthdata import NoiseModel, simulate_tilt_series, split_views
from .trainer import TrainConfig, train
from .voxelizer import voxelize


class CliError(Exception):
    """Validation problem: bad flags, bad config, bad inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


DEFAULT_CONFIG: Dict[str, object] = {
    # paths
    "out_dir": None,
    "stack": None,
    "angles": None,
    # detector / beam geometry
    "detector_nu": 64,
    "detector_nv": 64,
    "pixel_size": 1.0,
    "beam": "parallel",
    "source_distance": None,
    "probe_sigma": 0.0,
    # tilt schedule (used when no angles file is given)
    "n_views": 45,
    "tilt_min": -70.0,
    "tilt_max": 70.0,
    # reconstruction grid
    "grid_nx": 64,
    "grid_ny": 64,
    "grid_nz": 64,
    "voxel_size": 1.0,
    # phantom / simulation
    "preset": "core-shell-64",
    "dose": 1e4,
    "gaussian_sigma": 0.0,
    "probe_blur": False,
    # view split (train_every_k wins over holdout_every_k; explicit wins over both)
    "train_every_k": 3,
    "holdout_every_k": 0,
    "train_views": None,
    "test_views": None,
    # seeding
    "n_points": 20000,
    "threshold_percentile": 75.0,
    # classical baselines
    "fdk_filter": "ramlak",
    "sirt_iterations": 100,
    "sirt_relaxation": 1.0,
    "sirt_nonneg": True,
    # training
    "iterations": 5000,
    "lr_position": 2e-3,
    "lr_log_scale": 5e-3,
    "lr_rotation": 1e-3,
    "lr_denza_raw": 5e-2,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-15,
    "prune_interval": 500,
    "prune_denza_floor": 1e-3,
    "densify_interval": 500,
    "densify_grad_percentile": 90.0,
    "densify_until": None,
    "max_growth_factor": 4.0,
    "views_per_step": 0,
    "tv_stride": 1,
    "tv_mode": "axial3",
    "checkpoint_interval": 0,
    "use_gamma": True,
    "data_range": None,
    # loss weights
    "lambda_pixel": 1.0,
    "lambda_freq": 0.1,
    "lambda_ssim": 0.2,
    "lambda_3dtv": 0.01,
    "lambda_hf": 1.0,
    # rng
    "seed": 0,
}

_PRESETS = {"core-shell-64": synthdata.core_shell_spec}


# -------------------------------------------------------- config resolution


def _resolve_config(args) -> Dict[str, object]:
    config = dict(DEFAULT_CONFIG)
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError as exc:
            raise CliError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise CliError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(DEFAULT_CONFIG))
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(unknown)}")
        config.update(loaded)
    for key in DEFAULT_CONFIG:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            config[key] = flag_val
    return config


def _require(config, key):
    value = config.get(key)
    if value in (None, ""):
        raise CliError(f"missing required setting: {key} "
                       f"(flag --{key.replace('_', '-')})")
    return value


def _echo_config(config: Dict[str, object]) -> str:
    out_dir = str(_require(config, "out_dir"))
    os.makedirs(out_dir, exist_ok=True)
    write_text(os.path.join(out_dir, "resolved_config.json"),
               json.dumps(config, indent=2, sort_keys=True) + "\n")
    return out_dir


# ----------------------------------------------------------- construction


def _beam(config) -> BeamModel:
    kind_name = str(config["beam"]).lower()
    try:
        kind = BeamKind(kind_name)
    except ValueError:
        raise CliError(f"unknown beam kind {config['beam']!r} "
                       f"(expected 'parallel' or 'cone')") from None
    sd = config["source_distance"]
    return BeamModel(kind=kind, source_distance=None if sd is None else float(sd),
                     probe_sigma=float(config["probe_sigma"]))


def _geometry(config, angles: Optional[np.ndarray] = None) -> TiltGeometry:
    if angles is None:
        angles = np.linspace(float(config["tilt_min"]), float(config["tilt_max"]),
                             int(config["n_views"]))
    det = DetectorGrid(int(config["detector_nu"]), int(config["detector_nv"]),
                       float(config["pixel_size"]))
    return TiltGeometry(angles, det, _beam(config))


def _grid(config) -> GridSpec:
    return GridSpec(int(config["grid_nx"]), int(config["grid_ny"]),
                    int(config["grid_nz"]), float(config["voxel_size"]))


def _split(config, n_views: int):
    angles = range(n_views)
    if config["train_views"] is not None or config["test_views"] is not None:
        train_v = config["train_views"] or []
        test_v = config["test_views"] or []
        return split_views(angles, synthdata.ExplicitSplit(tuple(train_v),
                                                           tuple(test_v)))
    k_train = int(config["train_every_k"] or 0)
    if k_train > 0:
        train_v = tuple(range(0, n_views, k_train))
        test_v = tuple(i for i in range(n_views) if i % k_train != 0)
        return split_views(angles, synthdata.ExplicitSplit(train_v, test_v))
    k_hold = int(config["holdout_every_k"] or 0)
    if k_hold > 0:
        return split_views(angles, synthdata.EveryKthHeldOut(k_hold))
    return synthdata.ViewSplit(tuple(range(n_views)), ())


def _load_stack(config):
    stack_path = _require(config, "stack")
    angles_path = _require(config, "angles")
    angles = read_angles(str(angles_path))
    stack = read_mrc(str(stack_path), angles_deg=angles)
    return stack, angles


def _load_model(path: str):
    if path.endswith(".dzgc"):
        return load_cloud(path)
    return read_mrc(path)


def _train_config(config, grid: GridSpec) -> TrainConfig:
    weights = LossWeights(float(config["lambda_pixel"]), float(config["lambda_freq"]),
                          float(config["lambda_ssim"]), float(config["lambda_3dtv"]),
                          float(config["lambda_hf"]))
    mode_name = str(config["tv_mode"]).lower()
    try:
        tv_mode = TVMode(mode_name)
    except ValueError:
        raise CliError(f"unknown tv_mode {config['tv_mode']!r}") from None
    dr = config["data_range"]
    du = config["densify_until"]
    return TrainConfig(
        iterations=int(config["iterations"]),
        lr_position=float(config["lr_position"]),
        lr_log_scale=float(config["lr_log_scale"]),
        lr_rotation=float(config["lr_rotation"]),
        lr_denza_raw=float(config["lr_denza_raw"]),
        beta1=float(config["beta1"]), beta2=float(config["beta2"]),
        eps=float(config["eps"]),
        prune_interval=int(config["prune_interval"]),
        prune_denza_floor=float(config["prune_denza_floor"]),
        densify_interval=int(config["densify_interval"]),
        densify_grad_percentile=float(config["densify_grad_percentile"]),
        densify_until=None if du is None else int(du),
        max_growth_factor=float(config["max_growth_factor"]),
        tv_grid=grid,
        weights=weights,
        tv_mode=tv_mode,
        tv_stride=int(config["tv_stride"]),
        rng_seed=int(config["seed"]),
        views_per_step=int(config["views_per_step"]),
        checkpoint_interval=int(config["checkpoint_interval"]),
        data_range=None if dr is None else float(dr),
        use_gamma=bool(config["use_gamma"]))


# ---------------------------------------------------------------- commands


def _cmd_phantom(config, args) -> int:
    preset = str(config["preset"])
    if preset not in _PRESETS:
        raise CliError(f"unknown preset {preset!r} "
                       f"(available: {', '.join(sorted(_PRESETS))})")
    out_dir = _echo_config(config)
    volume = synthdata.build_phantom(_PRESETS[preset]())
    write_mrc(os.path.join(out_dir, "phantom.mrc"), volume)
    print(f"wrote {os.path.join(out_dir, 'phantom.mrc')} "
          f"shape={volume.data.shape} sum={volume.data.sum():.3f}")
    return 0


def _cmd_simulate(config, args) -> int:
    out_dir = _echo_config(config)
    volume = read_mrc(_require_path(args, "volume"))
    geom = _geometry(config)
    noise = NoiseModel(dose=float(config["dose"]),
                       gaussian_sigma=float(config["gaussian_sigma"]),
                       rng_seed=int(config["seed"]))
    stack = simulate_tilt_series(volume, geom, noise,
                                 probe_blur=bool(config["probe_blur"]))
    write_mrc(os.path.join(out_dir, "stack.mrc"), stack,
              voxel_size=geom.detector.pixel_size)
    write_angles(os.path.join(out_dir, "angles.tlt"), geom.angles_deg)
    print(f"wrote {stack.n_views}-view stack to {out_dir}")
    return 0


def _require_path(args, name: str) -> str:
    value = getattr(args, name, None)
    if not value:
        raise CliError(f"missing required flag: --{name.replace('_', '-')}")
    return str(value)


def _cmd_fdk(config, args) -> int:
    out_dir = _echo_config(config)
    stack, angles = _load_stack(config)
    geom = _geometry(config, angles)
    volume = fdk_reconstruct(stack, geom, _grid(config),
                             filter_name=str(config["fdk_filter"]))
    write_mrc(os.path.join(out_dir, "fdk.mrc"), volume)
    print(f"wrote {os.path.join(out_dir, 'fdk.mrc')}")
    return 0


def _cmd_sirt(config, args) -> int:
    out_dir = _echo_config(config)
    stack, angles = _load_stack(config)
    geom = _geometry(config, angles)
    volume = sirt_reconstruct(stack, geom, _grid(config),
                              iterations=int(config["sirt_iterations"]),
                              relaxation=float(config["sirt_relaxation"]),
                              nonneg=bool(config["sirt_nonneg"]))
    write_mrc(os.path.join(out_dir, "sirt.mrc"), volume)
    print(f"wrote {os.path.join(out_dir, 'sirt.mrc')}")
    return 0


def _cmd_seed(config, args) -> int:
    out_dir = _echo_config(config)
    volume = read_mrc(_require_path(args, "volume"))
    cloud = seed_cloud(volume, n_points=int(config["n_points"]),
                       threshold_percentile=float(config["threshold_percentile"]),
                       seed=int(config["seed"]))
    save_cloud(os.path.join(out_dir, "seed.dzgc"), cloud)
    print(f"wrote {cloud.count}-Gaussian seed to "
          f"{os.path.join(out_dir, 'seed.dzgc')}")
    return 0


def _run_training(config, args, out_dir: str) -> GaussianCloud:
    stack, angles = _load_stack(config)
    geom = _geometry(config, angles)
    init = load_cloud(_require_path(args, "init"))
    grid = _grid(config)
    cfg = _train_config(config, grid)
    split = _split(config, geom.n_views)
    cloud, tlog = train(stack, geom, init, cfg,
                        train_views=split.train_indices, out_dir=out_dir)
    save_cloud(os.path.join(out_dir, "final.dzgc"), cloud)
    write_text(os.path.join(out_dir, "loss_log.csv"), tlog.to_csv())
    write_mrc(os.path.join(out_dir, "final_volume.mrc"), voxelize(cloud, grid))
    if tlog.events:
        write_text(os.path.join(out_dir, "density_events.txt"),
                   "\n".join(tlog.events) + "\n")
    return cloud


def _cmd_train(config, args) -> int:
    out_dir = _echo_config(config)
    cloud = _run_training(config, args, out_dir)
    print(f"trained cloud with {cloud.count} Gaussians -> "
          f"{os.path.join(out_dir, 'final.dzgc')}")
    return 0


def _cmd_render(config, args) -> int:
    out_dir = _echo_config(config)
    cloud = load_cloud(_require_path(args, "cloud"))
    angles = None
    if config["angles"]:
        angles = read_angles(str(config["angles"]))
    geom = _geometry(config, angles)
    stack = render_all(cloud, geom, use_gamma=bool(config["use_gamma"]))
    write_mrc(os.path.join(out_dir, "render.mrc"), stack,
              voxel_size=geom.detector.pixel_size)
    write_angles(os.path.join(out_dir, "angles.tlt"), geom.angles_deg)
    print(f"rendered {stack.n_views} views to {os.path.join(out_dir, 'render.mrc')}")
    return 0


def _cmd_voxelize(config, args) -> int:
    out_dir = _echo_config(config)
    cloud = load_cloud(_require_path(args, "cloud"))
    volume = voxelize(cloud, _grid(config))
    write_mrc(os.path.join(out_dir, "volume.mrc"), volume)
    print(f"wrote {os.path.join(out_dir, 'volume.mrc')}")
    return 0


def _cmd_evaluate(config, args) -> int:
    out_dir = _echo_config(config)
    stack, angles = _load_stack(config)
    geom = _geometry(config, angles)
    model = _load_model(_require_path(args, "model"))
    gt = read_mrc(str(args.gt)) if getattr(args, "gt", None) else None
    split = _split(config, geom.n_views)
    report = evaluate_run(model, stack, geom, split, gt_volume=gt,
                          use_gamma=bool(config["use_gamma"]))
    write_text(os.path.join(out_dir, "metrics.csv"), report.to_csv())
    print(report.table())
    return 0


_VARIANTS = {"gamma-off": {"use_gamma": False},
             "freq-off": {"lambda_freq": 0.0},
             "both": {"use_gamma": False, "lambda_freq": 0.0}}


def _cmd_ablate(config, args) -> int:
    variant = _require_path(args, "variant")
    if variant not in _VARIANTS:
        raise CliError(f"unknown variant {variant!r} "
                       f"(available: {', '.join(sorted(_VARIANTS))})")
    config = dict(config)
    config.update(_VARIANTS[variant])
    out_dir = _echo_config(config)
    cloud = _run_training(config, args, out_dir)
    stack, angles = _load_stack(config)
    geom = _geometry(config, angles)
    split = _split(config, geom.n_views)
    report = evaluate_run(cloud, stack, geom, split,
                          use_gamma=bool(config["use_gamma"]))
    write_text(os.path.join(out_dir, "ablation.csv"), report.to_csv())
    print(f"variant {variant}:")
    print(report.table())
    return 0


# ------------------------------------------------------------------ parser


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with RunConfig keys")
    parser.add_argument("--out-dir", dest="out_dir", help="output directory")
    parser.add_argument("--seed", type=int, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stemsplat",
                     description="Sparse-view ADF-STEM reconstruction with "
                                 "scattering-aware Gaussian splatting")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("phantom", parents=[], help="generate a preset phantom")
    _add_common(p)
    p.add_argument("--preset", help="phantom preset name")

    p = sub.add_parser("simulate", help="simulate a tilt series from a volume")
    _add_common(p)
    p.add_argument("--volume", required=True, help="ground-truth volume (MRC)")
    p.add_argument("--dose", type=float, help="expected counts at unit intensity")
    p.add_argument("--gaussian-sigma", dest="gaussian_sigma", type=float,
                   help="additive read-noise sigma")
    p.add_argument("--n-views", dest="n_views", type=int, help="number of views")
    p.add_argument("--tilt-min", dest="tilt_min", type=float)
    p.add_argument("--tilt-max", dest="tilt_max", type=float)

    for name in ("fdk", "sirt"):
        p = sub.add_parser(name, help=f"{name} reconstruction of a stack")
        _add_common(p)
        p.add_argument("--stack", help="measured stack (MRC)")
        p.add_argument("--angles", help="tilt angles file")
        if name == "fdk":
            p.add_argument("--filter", dest="fdk_filter",
                           choices=["ramlak", "hann"], help="ramp filter window")
        else:
            p.add_argument("--sirt-iterations", dest="sirt_iterations", type=int)
            p.add_argument("--sirt-relaxation", dest="sirt_relaxation", type=float)

    p = sub.add_parser("seed", help="seed a Gaussian cloud from a volume")
    _add_common(p)
    p.add_argument("--volume", required=True, help="reference volume (MRC)")
    p.add_argument("--n-points", dest="n_points", type=int)
    p.add_argument("--threshold-percentile", dest="threshold_percentile", type=float)

    p = sub.add_parser("train", help="optimize a cloud against measured views")
    _add_common(p)
    p.add_argument("--stack", help="measured stack (MRC)")
    p.add_argument("--angles", help="tilt angles file")
    p.add_argument("--init", required=True, help="initial cloud (.dzgc)")
    p.add_argument("--iterations", type=int, help="optimization steps")

    p = sub.add_parser("render", help="render a cloud over a tilt schedule")
    _add_common(p)
    p.add_argument("--cloud", required=True, help="cloud checkpoint (.dzgc)")
    p.add_argument("--angles", help="tilt angles file")

    p = sub.add_parser("voxelize", help="sample a cloud onto a voxel grid")
    _add_common(p)
    p.add_argument("--cloud", required=True, help="cloud checkpoint (.dzgc)")

    p = sub.add_parser("evaluate", help="PSNR/SSIM against a measured stack")
    _add_common(p)
    p.add_argument("--model", required=True, help="cloud (.dzgc) or volume (MRC)")
    p.add_argument("--stack", help="measured stack (MRC)")
    p.add_argument("--angles", help="tilt angles file")
    p.add_argument("--gt", help="ground-truth volume (MRC) for volume metrics")

    p = sub.add_parser("ablate", help="train and evaluate an ablated variant")
    _add_common(p)
    p.add_argument("--variant", required=True,
                   choices=sorted(_VARIANTS), help="which ablation to run")
    p.add_argument("--stack", help="measured stack (MRC)")
    p.add_argument("--angles", help="tilt angles file")
    p.add_argument("--init", required=True, help="initial cloud (.dzgc)")
    p.add_argument("--iterations", type=int, help="optimization steps")

    return parser


_HANDLERS = {
    "phantom": _cmd_phantom,
    "simulate": _cmd_simulate,
    "fdk": _cmd_fdk,
    "sirt": _cmd_sirt,
    "seed": _cmd_seed,
    "train": _cmd_train,
    "render": _cmd_render,
    "voxelize": _cmd_voxelize,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            return 1
        config = _resolve_config(args)
        return _HANDLERS[args.command](config, args)
    except (CliError, DomainError, FormatError, SeedingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
