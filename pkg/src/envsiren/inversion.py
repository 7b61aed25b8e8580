"""Recovering an environment map that reproduces a target rendering.

The forward model is a fixed TransportOperator, so the only unknown is the
sky map. Gradient descent minimizes a tone-mapped SSIM term against the
target rendering plus regularizers that keep the map plausible: total
luminance anchored to the initial map, a multi-scale SSIM perceptual term
against the initial map in log space, an L1 energy penalty, and optional
total variation. The map can be parameterized directly (pixels), through an
exponential (log_pixels), or through a fitted network's weights (siren /
r_siren, differing only in how the supplied checkpoint was trained).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from envsiren.fitting import DivergenceError, TrainedModel, make_coord_grid
from envsiren.hdr_image import (
    DEFAULT_EPS,
    EXP_GUARD,
    LUMA_WEIGHTS,
    NormalizationParams,
    ensure_hdr,
    log_normalize,
    log_normalize_with,
    luminance,
)
from envsiren.metrics import ssim_grad
from envsiren.mlp import clone_params, siren_backward, siren_forward
from envsiren.optim import adam_init, adam_step, lambda_at
from envsiren.transport import TransportOperator, adjoint, render

METHODS = ("pixels", "log_pixels", "siren", "r_siren")

DEFAULT_LR = {"pixels": 1e-2, "log_pixels": 1e-2, "siren": 5e-6, "r_siren": 5e-6}

PERCEP_SCALES = 3


@dataclass(frozen=True)
class InversionConfig:
    iterations: int = 400
    lr: float | None = None  # None picks the per-method default
    lambda_ssim: tuple[float, float] = (1.0, 1e4)
    lambda_l1: tuple[float, float] = (1e-4, 1e-8)
    lambda_lum: tuple[float, float] = (1e-4, 1e-8)
    lambda_percep: float = 0.6
    lambda_tv: float = 0.0
    eps: float = DEFAULT_EPS


@dataclass
class InversionResult:
    method: str
    env: np.ndarray
    trace: list[dict] = field(default_factory=list)


# --- regularizers -----------------------------------------------------------


def luminance_reg(env: np.ndarray, lum0: float) -> tuple[float, np.ndarray]:
    """|Lum(E) - Lum(E0)| with its exact sign * luma-coefficient gradient."""
    lum = luminance(env)
    value = abs(lum - lum0)
    sign = np.sign(lum - lum0)
    grad = np.empty_like(env)
    for k, w in enumerate(LUMA_WEIGHTS):
        grad[:, :, k] = env.dtype.type(sign * w)
    return value, grad


def l1_reg(env: np.ndarray) -> tuple[float, np.ndarray]:
    """Total absolute radiance; the gradient is the elementwise sign."""
    value = float(np.sum(np.abs(env), dtype=np.float64))
    return value, np.sign(env)


def tv_reg(env: np.ndarray) -> tuple[float, np.ndarray]:
    """Anisotropic total variation over both axes, channels summed."""
    dy = env[1:, :, :] - env[:-1, :, :]
    dx = env[:, 1:, :] - env[:, :-1, :]
    value = float(np.sum(np.abs(dy), dtype=np.float64) + np.sum(np.abs(dx), dtype=np.float64))
    grad = np.zeros_like(env)
    sy = np.sign(dy)
    sx = np.sign(dx)
    grad[1:, :, :] += sy
    grad[:-1, :, :] -= sy
    grad[:, 1:, :] += sx
    grad[:, :-1, :] -= sx
    return value, grad


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[:2]
    x = x[: h - h % 2, : w - w % 2]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _avg_pool2_adjoint(g: np.ndarray, shape: tuple) -> np.ndarray:
    out = np.zeros(shape, dtype=g.dtype)
    quarter = 0.25 * g
    out[0 : 2 * g.shape[0] : 2, 0 : 2 * g.shape[1] : 2] = quarter
    out[1 : 2 * g.shape[0] : 2, 0 : 2 * g.shape[1] : 2] = quarter
    out[0 : 2 * g.shape[0] : 2, 1 : 2 * g.shape[1] : 2] = quarter
    out[1 : 2 * g.shape[0] : 2, 1 : 2 * g.shape[1] : 2] = quarter
    return out


def _scale_window(shape: tuple) -> int:
    """Largest odd window <= min dimension, capped at the standard 11 taps."""
    win = min(11, shape[0], shape[1])
    return win if win % 2 == 1 else win - 1


def log_pyramid(env: np.ndarray, params: NormalizationParams, levels: int = PERCEP_SCALES) -> list[np.ndarray]:
    """Log-normalized map at scales 1, 1/2, ... (average pooling)."""
    level = log_normalize_with(env, params)
    pyramid = [level]
    for _ in range(levels - 1):
        level = _avg_pool2(level)
        pyramid.append(level)
    return pyramid


def perceptual_reg(
    env: np.ndarray, ref_pyramid: list[np.ndarray], params: NormalizationParams
) -> tuple[float, np.ndarray]:
    """Mean multi-scale SSIM dissimilarity against the reference pyramid.

    Both maps are log-normalized with the reference map's bounds; windows
    shrink with the scale so quarter-size maps stay defined.
    """
    dt = env.dtype
    norm = log_normalize_with(env, params)
    levels = [norm]
    for _ in range(len(ref_pyramid) - 1):
        levels.append(_avg_pool2(levels[-1]))

    value = 0.0
    g_levels = []
    for lev, ref in zip(levels, ref_pyramid):
        win = _scale_window(lev.shape)
        s_val, s_grad = ssim_grad(lev, ref, window=win)
        value += 1.0 - s_val
        g_levels.append(-s_grad)
    value /= len(ref_pyramid)

    g_norm = np.zeros_like(norm)
    for depth in range(len(levels) - 1, -1, -1):
        g = g_levels[depth]
        for up in range(depth, 0, -1):
            g = _avg_pool2_adjoint(g, levels[up - 1].shape)
        g_norm += g
    g_norm /= dt.type(len(ref_pyramid))

    # Chain through the log normalization of env.
    log_range = params.log_range if params.log_range > 0 else 1.0
    grad = g_norm / ((env + dt.type(params.eps)) * dt.type(log_range))
    return value, grad


# --- the main loss ----------------------------------------------------------


def total_loss(
    op: TransportOperator,
    env: np.ndarray,
    target_tone: np.ndarray,
    anchors: dict,
    lambdas: dict[str, float],
) -> tuple[float, dict[str, float], np.ndarray]:
    """Full objective and its gradient with respect to the env map.

    The rendering term compares tone-mapped (clamped to [0, 1]) images; the
    clamp gates the gradient flowing back through the adjoint.  Its SSIM
    window shrinks with the rendering so tiny debug cameras stay usable.
    """
    dt = env.dtype
    rendered = render(op, env)
    tone = np.clip(rendered, 0.0, 1.0)
    s_val, s_grad = ssim_grad(tone, target_tone, window=_scale_window(tone.shape))
    inside = ((rendered >= 0.0) & (rendered <= 1.0)).astype(dt)
    g_render = -dt.type(lambdas["ssim"]) * s_grad * inside
    grad = adjoint(op, g_render)

    lum_val, lum_grad = luminance_reg(env, anchors["lum0"])
    per_val, per_grad = perceptual_reg(env, anchors["ref_pyramid"], anchors["norm"])
    l1_val, l1_grad = l1_reg(env)
    grad += dt.type(lambdas["lum"]) * lum_grad
    grad += dt.type(lambdas["percep"]) * per_grad
    grad += dt.type(lambdas["l1"]) * l1_grad

    value = (
        lambdas["ssim"] * (1.0 - s_val)
        + lambdas["lum"] * lum_val
        + lambdas["percep"] * per_val
        + lambdas["l1"] * l1_val
    )
    parts = {
        "render_ssim": s_val,
        "lum": lum_val,
        "percep": per_val,
        "l1": l1_val,
    }
    if lambdas.get("tv", 0.0) > 0.0:
        tv_val, tv_grad = tv_reg(env)
        grad += dt.type(lambdas["tv"]) * tv_grad
        value += lambdas["tv"] * tv_val
        parts["tv"] = tv_val
    return value, parts, grad


# --- parameterizations ------------------------------------------------------


class _PixelParam:
    def __init__(self, env0: np.ndarray):
        self.params = [env0.copy()]

    def decode(self) -> tuple[np.ndarray, object]:
        return self.params[0], None

    def backward(self, grad_env: np.ndarray, ctx) -> list[np.ndarray]:
        return [grad_env]

    def project(self) -> None:
        np.maximum(self.params[0], 0.0, out=self.params[0])


class _LogPixelParam:
    FLOOR = 1e-6

    def __init__(self, env0: np.ndarray):
        self.params = [np.log(np.maximum(env0, env0.dtype.type(self.FLOOR)))]

    def decode(self) -> tuple[np.ndarray, object]:
        env = np.exp(self.params[0])
        return env, env

    def backward(self, grad_env: np.ndarray, ctx) -> list[np.ndarray]:
        return [grad_env * ctx]

    def project(self) -> None:
        # Keep exp() finite; radiance beyond e^80 is divergence, not signal.
        np.minimum(self.params[0], self.params[0].dtype.type(EXP_GUARD), out=self.params[0])


class _SirenParam:
    def __init__(self, model: TrainedModel, dtype):
        self.model = model
        self.params = [p.astype(dtype) for p in clone_params(model.params)]
        self.coords = make_coord_grid(model.width, model.height, dtype=dtype)

    def decode(self) -> tuple[np.ndarray, object]:
        model = self.model
        out, cache = siren_forward(model.arch, self.params, self.coords)
        dt = out.dtype
        arg = out * dt.type(model.norm.log_range) + dt.type(model.norm.log_min)
        decoded = np.exp(arg) - dt.type(model.norm.eps)
        env = np.maximum(decoded, 0.0).reshape(model.height, model.width, 3)
        d_out = np.exp(arg) * dt.type(model.norm.log_range) * (decoded > 0)
        return env, (cache, d_out)

    def backward(self, grad_env: np.ndarray, ctx) -> list[np.ndarray]:
        cache, d_out = ctx
        d_net = grad_env.reshape(d_out.shape) * d_out
        grads, _ = siren_backward(self.model.arch, self.params, cache, d_net)
        return grads

    def project(self) -> None:
        pass


def optimize(
    op: TransportOperator,
    target_render: np.ndarray,
    method: str,
    cfg: InversionConfig = InversionConfig(),
    init_env: np.ndarray | None = None,
    model: TrainedModel | None = None,
    log=None,
    dtype=np.float32,
) -> InversionResult:
    """Descend the total loss for one parameterization of the sky map.

    pixels / log_pixels need `init_env`; siren / r_siren need `model` (the
    initial map defaults to the model's own prediction). The trace holds one
    record per iteration plus a final post-update evaluation.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    target_render = np.asarray(target_render, dtype=dtype)
    if target_render.shape != (op.render_h, op.render_w, 3):
        raise ValueError(f"target rendering shape {target_render.shape} does not match "
                         f"operator ({op.render_h}, {op.render_w}, 3)")
    target_tone = np.clip(target_render, 0.0, 1.0)

    if method in ("siren", "r_siren"):
        if model is None:
            raise ValueError(f"method {method!r} needs a trained model")
        state_holder = _SirenParam(model, dtype)
        env0, _ = state_holder.decode()
        env0 = env0.copy()
    else:
        if init_env is None:
            raise ValueError(f"method {method!r} needs an initial environment map")
        env0 = ensure_hdr(init_env).astype(dtype)
        if env0.shape != (op.env_rows, op.env_w, 3):
            raise ValueError(f"initial map shape {env0.shape} does not match operator "
                             f"({op.env_rows}, {op.env_w}, 3)")
        state_holder = _PixelParam(env0) if method == "pixels" else _LogPixelParam(env0)

    norm0 = log_normalize(env0, cfg.eps)[1]
    anchors = {
        "lum0": luminance(env0),
        "ref_pyramid": log_pyramid(env0, norm0),
        "norm": norm0,
    }
    lr = cfg.lr if cfg.lr is not None else DEFAULT_LR[method]
    adam = adam_init(state_holder.params)
    total = max(cfg.iterations - 1, 1)

    def lambdas_at(t: int) -> dict[str, float]:
        return {
            "ssim": lambda_at(t, total, *cfg.lambda_ssim),
            "l1": lambda_at(t, total, *cfg.lambda_l1),
            "lum": lambda_at(t, total, *cfg.lambda_lum),
            "percep": cfg.lambda_percep,
            "tv": cfg.lambda_tv,
        }

    trace: list[dict] = []
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(cfg.iterations):
            lams = lambdas_at(t)
            env, ctx = state_holder.decode()
            if not np.all(np.isfinite(env)):
                raise DivergenceError(t)
            value, parts, grad_env = total_loss(op, env, target_tone, anchors, lams)
            if not np.isfinite(value):
                raise DivergenceError(t)
            grads = state_holder.backward(grad_env, ctx)
            adam_step(state_holder.params, grads, adam, lr)
            state_holder.project()
            record = {"iter": t, "loss": value, "lr": lr, **parts, **{f"lambda_{k}": v for k, v in lams.items()}}
            trace.append(record)
            if log is not None:
                log(record)

    lams = lambdas_at(cfg.iterations - 1)
    env, _ = state_holder.decode()
    value, parts, _ = total_loss(op, env, target_tone, anchors, lams)
    record = {"iter": cfg.iterations, "loss": value, "lr": lr, **parts,
              **{f"lambda_{k}": v for k, v in lams.items()}}
    trace.append(record)
    if log is not None:
        log(record)

    final = ensure_hdr(np.ascontiguousarray(env, dtype=np.float32), what="recovered map")
    return InversionResult(method=method, env=final, trace=trace)
