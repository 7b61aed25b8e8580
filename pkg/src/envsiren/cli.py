"""Command-line front end: fit, render, invert, perturb, and eval.

Every command resolves its settings as flags > config file > built-in
defaults, runs deterministically for a given seed, and writes artifacts that
are byte-identical across repeated runs. Exit codes: 0 success, 1 runtime
failure such as divergence, 2 bad arguments or config, 3 missing or
malformed input files.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError

from envsiren.fitting import (
    DivergenceError,
    FitConfig,
    TrainedModel,
    load_model,
    perturb,
    predict_envmap,
    save_model,
    train,
)
from envsiren.hdr_image import (
    PfmError,
    load_pfm,
    log_normalize,
    log_normalize_with,
    save_pfm,
    tone_map_preview,
)
from envsiren.inversion import METHODS, InversionConfig, optimize
from envsiren.metrics import format_report, metric_row, report_json, ssim
from envsiren.mlp import MlpArch
from envsiren.transport import (
    Scene,
    build_transport,
    load_scene,
    load_transport,
    render,
    save_transport,
    transport_cache_key,
)


class ConfigError(Exception):
    """Bad flags or config file contents (exit 2)."""


class InputError(Exception):
    """Missing or malformed input file (exit 3)."""


def _load_map(path) -> np.ndarray:
    try:
        return load_pfm(path)
    except FileNotFoundError as exc:
        raise InputError(f"environment map not found: {path}") from exc
    except (PfmError, ValueError) as exc:
        raise InputError(f"bad environment map {path}: {exc}") from exc


def _load_scene_file(path) -> Scene:
    try:
        return load_scene(path)
    except FileNotFoundError as exc:
        raise InputError(f"scene file not found: {path}") from exc
    except ValueError as exc:
        raise InputError(f"bad scene file {path}: {exc}") from exc


def _load_model_file(path) -> TrainedModel:
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise InputError(f"checkpoint not found: {path}") from exc
    except ValueError as exc:
        raise InputError(f"bad checkpoint {path}: {exc}") from exc


def _load_target_render(path) -> np.ndarray:
    """Target rendering: PFM stays linear; 8-bit images are de-gammaed."""
    if str(path).lower().endswith(".pfm"):
        return _load_map(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError as exc:
        raise InputError(f"target rendering not found: {path}") from exc
    except UnidentifiedImageError as exc:
        raise InputError(f"cannot decode target rendering {path}: {exc}") from exc
    return arr**2.2


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > defaults, complaining about unknown config keys."""
    merged = dict(defaults)
    if getattr(args, "config", None) is not None:
        try:
            with open(args.config, "r") as fh:
                loaded = yaml.safe_load(fh) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        for key, value in loaded.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _write_log(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fields = []
            for key, value in rec.items():
                if isinstance(value, float):
                    fields.append(f"{key}={value:.10e}")
                else:
                    fields.append(f"{key}={value}")
            fh.write(" ".join(fields) + "\n")


def _get_transport(scene: Scene, env_w: int, env_rows: int, spp: int, seed: int, cache_dir):
    if cache_dir is None:
        return build_transport(scene, env_w, env_rows, spp, seed)
    os.makedirs(cache_dir, exist_ok=True)
    key = transport_cache_key(scene, env_w, env_rows, spp, seed)
    path = os.path.join(cache_dir, f"transport_{key}.bin")
    if os.path.exists(path):
        try:
            op = load_transport(path)
        except ValueError as exc:
            raise InputError(f"bad transport cache {path}: {exc}") from exc
        if (op.env_w, op.env_rows, op.spp, op.seed) != (env_w, env_rows, spp, seed):
            raise InputError(f"transport cache {path} does not match the request")
        return op
    op = build_transport(scene, env_w, env_rows, spp, seed)
    save_transport(path, op)
    return op


# --- commands ----------------------------------------------------------------

FIT_DEFAULTS = {
    "epochs": 1500,
    "lr": 5e-5,
    "lr_min": 0.0,
    "t0": 100,
    "t_mult": 1,
    "lambda_log_mse": 0.85,
    "lambda_log_ssim": 0.25,
    "lambda_hdr": 1e-2,
    "robust": False,
    "gamma": 0.01,
    "proxy_lr": 1e-4,
    "eps": 0.01,
    "seed": 0,
    "hidden_dim": 256,
    "hidden_layers": 6,
    "omega0": 30.0,
}


def cmd_fit(args: argparse.Namespace) -> int:
    opts = _resolve(args, FIT_DEFAULTS)
    target = _load_map(args.input)
    arch = MlpArch(
        hidden_dim=int(opts["hidden_dim"]),
        hidden_layers=int(opts["hidden_layers"]),
        omega0=float(opts["omega0"]),
    )
    cfg = FitConfig(
        epochs=int(opts["epochs"]),
        lr=float(opts["lr"]),
        lr_min=float(opts["lr_min"]),
        t0=int(opts["t0"]),
        t_mult=int(opts["t_mult"]),
        lambda_log_mse=float(opts["lambda_log_mse"]),
        lambda_log_ssim=float(opts["lambda_log_ssim"]),
        lambda_hdr=float(opts["lambda_hdr"]),
        robust=bool(opts["robust"]),
        awp_gamma=float(opts["gamma"]),
        awp_proxy_lr=float(opts["proxy_lr"]),
        eps=float(opts["eps"]),
        seed=int(opts["seed"]),
    )
    records: list[dict] = []
    sink = records.append if args.log else None
    model = train(target, arch=arch, cfg=cfg, log=sink)
    save_model(args.out, model)
    if args.log:
        _write_log(args.log, records)
    if args.preview:
        with open(args.preview, "wb") as fh:
            fh.write(tone_map_preview(predict_envmap(model)))
    return 0


RENDER_DEFAULTS = {"spp": 128, "seed": 0}


def cmd_render(args: argparse.Namespace) -> int:
    opts = _resolve(args, RENDER_DEFAULTS)
    scene = _load_scene_file(args.scene)
    env = _load_map(args.env)
    rows, width = env.shape[:2]
    op = _get_transport(scene, width, rows, int(opts["spp"]), int(opts["seed"]), args.cache_dir)
    image = render(op, env)
    save_pfm(args.out, image)
    if args.preview:
        with open(args.preview, "wb") as fh:
            fh.write(tone_map_preview(image, gamma=1.0))
    return 0


INVERT_DEFAULTS = {
    "iterations": 400,
    "lr": None,
    "lambda_ssim": [1.0, 1e4],
    "lambda_l1": [1e-4, 1e-8],
    "lambda_lum": [1e-4, 1e-8],
    "lambda_percep": 0.6,
    "lambda_tv": 0.0,
    "eps": 0.01,
    "spp": 128,
    "seed": 0,
}


def cmd_invert(args: argparse.Namespace) -> int:
    opts = _resolve(args, INVERT_DEFAULTS)
    scene = _load_scene_file(args.scene)
    target = _load_target_render(args.target)

    model = None
    init_env = None
    if args.method in ("siren", "r_siren"):
        if args.model is None:
            raise ConfigError(f"method {args.method!r} needs --model")
        if args.init is not None:
            raise ConfigError("siren methods derive the initial map from the checkpoint")
        model = _load_model_file(args.model)
        rows, width = model.height, model.width
    else:
        if args.init is None:
            raise ConfigError(f"method {args.method!r} needs --init")
        init_env = _load_map(args.init)
        rows, width = init_env.shape[:2]

    op = _get_transport(scene, width, rows, int(opts["spp"]), int(opts["seed"]), args.cache_dir)
    if target.shape != (op.render_h, op.render_w, 3):
        raise InputError(
            f"target rendering {target.shape} does not match the {op.render_w}x{op.render_h} camera"
        )
    pair = "lambda_ssim", "lambda_l1", "lambda_lum"
    for key in pair:
        if len(opts[key]) != 2:
            raise ConfigError(f"{key} needs two values (start, end)")
    cfg = InversionConfig(
        iterations=int(opts["iterations"]),
        lr=None if opts["lr"] is None else float(opts["lr"]),
        lambda_ssim=(float(opts["lambda_ssim"][0]), float(opts["lambda_ssim"][1])),
        lambda_l1=(float(opts["lambda_l1"][0]), float(opts["lambda_l1"][1])),
        lambda_lum=(float(opts["lambda_lum"][0]), float(opts["lambda_lum"][1])),
        lambda_percep=float(opts["lambda_percep"]),
        lambda_tv=float(opts["lambda_tv"]),
        eps=float(opts["eps"]),
    )
    records: list[dict] = []
    sink = records.append if args.trace else None
    result = optimize(op, target, args.method, cfg=cfg, init_env=init_env, model=model, log=sink)
    save_pfm(args.out, result.env)
    if args.trace:
        _write_log(args.trace, records)
    if args.preview:
        with open(args.preview, "wb") as fh:
            fh.write(tone_map_preview(result.env))
    return 0


PERTURB_DEFAULTS = {"alpha": 1e-3, "seed": 0}


def cmd_perturb(args: argparse.Namespace) -> int:
    opts = _resolve(args, PERTURB_DEFAULTS)
    model = _load_model_file(args.model)
    noisy = perturb(model, float(opts["alpha"]), int(opts["seed"]))
    save_model(args.out, noisy)
    base = predict_envmap(model)
    bumped = predict_envmap(noisy)
    norm = model.norm
    score = ssim(log_normalize_with(bumped, norm), log_normalize_with(base, norm))
    print(f"log-space ssim vs original: {score:.6f}")
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(report_json({"perturbed": {"ssim": score, "alpha": float(opts["alpha"]),
                                                "seed": int(opts["seed"])}}))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    rows: dict[str, dict[str, float]] = {}
    if (args.pred_env is None) != (args.gt_env is None):
        raise ConfigError("--pred-env and --gt-env must be given together")
    if (args.pred_render is None) != (args.gt_render is None):
        raise ConfigError("--pred-render and --gt-render must be given together")
    if args.pred_env is None and args.pred_render is None:
        raise ConfigError("nothing to evaluate: give an envmap pair and/or a render pair")

    if args.pred_env is not None:
        pred = _load_map(args.pred_env)
        gt = _load_map(args.gt_env)
        if pred.shape != gt.shape:
            raise InputError(f"envmap shapes differ: {pred.shape} vs {gt.shape}")
        norm = log_normalize(gt)[1]
        rows["envmap"] = metric_row(log_normalize_with(pred, norm), log_normalize_with(gt, norm))
    if args.pred_render is not None:
        pred = _load_map(args.pred_render)
        gt = _load_map(args.gt_render)
        if pred.shape != gt.shape:
            raise InputError(f"render shapes differ: {pred.shape} vs {gt.shape}")
        rows["render"] = metric_row(np.clip(pred, 0.0, 1.0), np.clip(gt, 0.0, 1.0))

    sys.stdout.write(format_report(rows))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report_json(rows))
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="envsiren", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a network to an HDR map")
    p_fit.add_argument("--input", required=True, help="target envmap (.pfm)")
    p_fit.add_argument("--out", required=True, help="output checkpoint")
    p_fit.add_argument("--config", help="YAML config file")
    p_fit.add_argument("--epochs", type=int)
    p_fit.add_argument("--lr", type=float)
    p_fit.add_argument("--lr-min", dest="lr_min", type=float)
    p_fit.add_argument("--t0", type=int)
    p_fit.add_argument("--t-mult", dest="t_mult", type=int)
    p_fit.add_argument("--lambda-log-mse", dest="lambda_log_mse", type=float)
    p_fit.add_argument("--lambda-log-ssim", dest="lambda_log_ssim", type=float)
    p_fit.add_argument("--lambda-hdr", dest="lambda_hdr", type=float)
    p_fit.add_argument("--robust", action=argparse.BooleanOptionalAction, default=None)
    p_fit.add_argument("--gamma", type=float, help="adversarial perturbation scale")
    p_fit.add_argument("--proxy-lr", dest="proxy_lr", type=float)
    p_fit.add_argument("--eps", type=float)
    p_fit.add_argument("--seed", type=int)
    p_fit.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p_fit.add_argument("--hidden-layers", dest="hidden_layers", type=int)
    p_fit.add_argument("--omega0", type=float)
    p_fit.add_argument("--log", help="training log path")
    p_fit.add_argument("--preview", help="tone-mapped PNG of the reconstruction")
    p_fit.set_defaults(func=cmd_fit)

    p_render = sub.add_parser("render", help="render an envmap through a scene")
    p_render.add_argument("--scene", required=True, help="scene description (.yaml)")
    p_render.add_argument("--env", required=True, help="upper-crop envmap (.pfm)")
    p_render.add_argument("--out", required=True, help="output rendering (.pfm)")
    p_render.add_argument("--config", help="YAML config file")
    p_render.add_argument("--spp", type=int)
    p_render.add_argument("--seed", type=int)
    p_render.add_argument("--cache-dir", dest="cache_dir", help="transport cache directory")
    p_render.add_argument("--preview", help="clamped PNG of the rendering")
    p_render.set_defaults(func=cmd_render)

    p_invert = sub.add_parser("invert", help="recover an envmap from a rendering")
    p_invert.add_argument("--scene", required=True)
    p_invert.add_argument("--target", required=True, help="target rendering (.pfm or 8-bit image)")
    p_invert.add_argument("--method", required=True, choices=METHODS)
    p_invert.add_argument("--out", required=True, help="recovered envmap (.pfm)")
    p_invert.add_argument("--model", help="checkpoint for siren / r_siren")
    p_invert.add_argument("--init", help="initial envmap for pixels / log_pixels")
    p_invert.add_argument("--config", help="YAML config file")
    p_invert.add_argument("--iterations", type=int)
    p_invert.add_argument("--lr", type=float)
    p_invert.add_argument("--lambda-ssim", dest="lambda_ssim", nargs=2, type=float)
    p_invert.add_argument("--lambda-l1", dest="lambda_l1", nargs=2, type=float)
    p_invert.add_argument("--lambda-lum", dest="lambda_lum", nargs=2, type=float)
    p_invert.add_argument("--lambda-percep", dest="lambda_percep", type=float)
    p_invert.add_argument("--lambda-tv", dest="lambda_tv", type=float)
    p_invert.add_argument("--eps", type=float)
    p_invert.add_argument("--spp", type=int)
    p_invert.add_argument("--seed", type=int)
    p_invert.add_argument("--cache-dir", dest="cache_dir")
    p_invert.add_argument("--trace", help="loss trace path")
    p_invert.add_argument("--preview", help="tone-mapped PNG of the recovered map")
    p_invert.set_defaults(func=cmd_invert)

    p_perturb = sub.add_parser("perturb", help="add Gaussian noise to a checkpoint")
    p_perturb.add_argument("--model", required=True)
    p_perturb.add_argument("--out", required=True)
    p_perturb.add_argument("--config", help="YAML config file")
    p_perturb.add_argument("--alpha", type=float)
    p_perturb.add_argument("--seed", type=int)
    p_perturb.add_argument("--report", help="JSON report path")
    p_perturb.set_defaults(func=cmd_perturb)

    p_eval = sub.add_parser("eval", help="compare predicted maps and renderings")
    p_eval.add_argument("--pred-env", dest="pred_env")
    p_eval.add_argument("--gt-env", dest="gt_env")
    p_eval.add_argument("--pred-render", dest="pred_render")
    p_eval.add_argument("--gt-render", dest="gt_render")
    p_eval.add_argument("--out", help="JSON report path")
    p_eval.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
