"""Fitting sinusoidal MLPs to HDR maps in log space, with optional robustness.

The target map is log-normalized to [0, 1] and the network regresses it over
a texel-center coordinate grid. The loss mixes log-space MSE, log-space SSIM,
and a small linear-radiance MSE after denormalization. Robust training adds
adversarial weight perturbation: before every update a proxy copy takes one
Adam step that lowers the log-space SSIM, the per-tensor normalized difference
(scaled by gamma) is added to the weights, the usual update runs on the
perturbed weights, and the perturbation is subtracted back out.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from envsiren.hdr_image import (
    DEFAULT_EPS,
    NormalizationParams,
    denormalize_exp,
    ensure_hdr,
    log_normalize,
)
from envsiren.metrics import ssim_grad
from envsiren.mlp import (
    MlpArch,
    Params,
    clone_params,
    params_add_scaled,
    siren_backward,
    siren_forward,
    siren_init,
)
from envsiren.optim import AdamState, adam_init, adam_step, cosine_warm_restart_lr

AWP_NORM_GUARD = 1e-20


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the iteration index."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class FitConfig:
    epochs: int = 1500
    lr: float = 5e-5
    lr_min: float = 0.0
    t0: int = 100
    t_mult: int = 1
    lambda_log_mse: float = 0.85
    lambda_log_ssim: float = 0.25
    lambda_hdr: float = 1e-2
    robust: bool = False
    awp_gamma: float = 0.01
    awp_proxy_lr: float = 1e-4
    eps: float = DEFAULT_EPS
    seed: int = 0


@dataclass
class TrainedModel:
    """A fitted network plus everything needed to decode it back to radiance."""

    arch: MlpArch
    params: Params
    norm: NormalizationParams
    width: int
    height: int


def make_coord_grid(width: int, height: int, dtype=np.float32) -> np.ndarray:
    """Texel-center coordinates in (-1, 1), row-major: (h*w, 2) as (x, y)."""
    if width < 1 or height < 1:
        raise ValueError(f"bad grid {width} x {height}")
    xs = (2.0 * np.arange(width) + 1.0) / width - 1.0
    ys = (2.0 * np.arange(height) + 1.0) / height - 1.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(dtype)


def fit_loss(
    pred_norm: np.ndarray,
    target_norm: np.ndarray,
    norm: NormalizationParams,
    cfg: FitConfig,
    width: int,
    height: int,
) -> tuple[float, np.ndarray, dict[str, float]]:
    """Weighted log-MSE + log-SSIM dissimilarity + linear-radiance MSE.

    Both inputs are (h*w, 3) batches in normalized log space. Returns the
    scalar loss, its gradient with respect to pred_norm, and the raw terms.
    """
    if pred_norm.shape != target_norm.shape:
        raise ValueError(f"shape mismatch: {pred_norm.shape} vs {target_norm.shape}")
    if pred_norm.shape[0] != width * height:
        raise ValueError(f"batch {pred_norm.shape[0]} does not fill {width}x{height}")
    dt = pred_norm.dtype
    n = pred_norm.size

    diff = pred_norm - target_norm
    log_mse = float(np.mean(diff.astype(np.float64) ** 2))
    g_log_mse = (2.0 / n) * diff

    pred_img = pred_norm.reshape(height, width, 3)
    target_img = target_norm.reshape(height, width, 3)
    ssim_val, g_ssim_img = ssim_grad(pred_img, target_img)
    log_ssim = 1.0 - ssim_val
    g_log_ssim = -g_ssim_img.reshape(n // 3, 3)

    # Linear-radiance term through the exp decode; max(exp - eps, 0) clips
    # the gradient where the decode saturates at zero.
    log_range = dt.type(norm.log_range)
    arg_pred = pred_norm * log_range + dt.type(norm.log_min)
    hdr_pred = denormalize_exp(pred_norm, norm)
    hdr_target = denormalize_exp(target_norm, norm)
    hdr_diff = hdr_pred - hdr_target
    hdr_mse = float(np.mean(hdr_diff.astype(np.float64) ** 2))
    alive = hdr_pred > 0
    g_hdr = (2.0 / n) * hdr_diff * np.exp(arg_pred) * log_range * alive

    total = (
        cfg.lambda_log_mse * log_mse
        + cfg.lambda_log_ssim * log_ssim
        + cfg.lambda_hdr * hdr_mse
    )
    grad = (
        dt.type(cfg.lambda_log_mse) * g_log_mse
        + dt.type(cfg.lambda_log_ssim) * g_log_ssim
        + dt.type(cfg.lambda_hdr) * g_hdr
    )
    parts = {"log_mse": log_mse, "log_ssim": log_ssim, "hdr_mse": hdr_mse}
    return total, grad, parts


def calc_awp(
    arch: MlpArch,
    params: Params,
    coords: np.ndarray,
    target_norm: np.ndarray,
    width: int,
    height: int,
    gamma: float,
    proxy_state: AdamState,
    proxy_lr: float,
) -> Params:
    """Adversarial weight perturbation, one proxy step.

    A cloned network takes an Adam step that reduces the log-space SSIM (the
    perturbation must worsen the fit); each tensor's difference is rescaled to
    gamma times that tensor's norm.
    """
    proxy = clone_params(params)
    out, cache = siren_forward(arch, proxy, coords)
    _, g_ssim_img = ssim_grad(
        out.reshape(height, width, 3), target_norm.reshape(height, width, 3)
    )
    # Descending along +dSSIM/dout lowers the similarity.
    grads, _ = siren_backward(arch, proxy, cache, g_ssim_img.reshape(out.shape))
    adam_step(proxy, grads, proxy_state, proxy_lr)

    perturbation: Params = []
    for p, q in zip(params, proxy):
        diff = q - p
        scale = gamma * float(np.linalg.norm(p)) / (float(np.linalg.norm(diff)) + AWP_NORM_GUARD)
        perturbation.append(p.dtype.type(scale) * diff)
    return perturbation


def train(
    target: np.ndarray,
    arch: MlpArch = MlpArch(),
    cfg: FitConfig = FitConfig(),
    log=None,
    dtype=np.float32,
) -> TrainedModel:
    """Fit a network to one HDR map; `log` receives a dict per iteration."""
    target = ensure_hdr(target).astype(dtype)
    height, width = target.shape[:2]
    target_norm_img, norm = log_normalize(target, cfg.eps)
    target_norm = target_norm_img.reshape(-1, 3)
    coords = make_coord_grid(width, height, dtype=dtype)

    params = siren_init(arch, cfg.seed, dtype=dtype)
    state = adam_init(params)
    proxy_state = adam_init(params) if cfg.robust else None

    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(cfg.epochs):
            lr = cosine_warm_restart_lr(t, cfg.lr, cfg.lr_min, cfg.t0, cfg.t_mult)
            if cfg.robust:
                proxy_lr = cosine_warm_restart_lr(
                    t, cfg.awp_proxy_lr, cfg.lr_min, cfg.t0, cfg.t_mult
                )
                bump = calc_awp(
                    arch, params, coords, target_norm, width, height,
                    cfg.awp_gamma, proxy_state, proxy_lr,
                )
                params_add_scaled(params, bump, 1.0)

            out, cache = siren_forward(arch, params, coords)
            loss, d_out, parts = fit_loss(out, target_norm, norm, cfg, width, height)
            if not np.isfinite(loss):
                raise DivergenceError(t)
            grads, _ = siren_backward(arch, params, cache, d_out)
            adam_step(params, grads, state, lr)

            if cfg.robust:
                params_add_scaled(params, bump, -1.0)

            if log is not None:
                log({"iter": t, "loss": loss, "lr": lr, **parts})

    return TrainedModel(arch=arch, params=params, norm=norm, width=width, height=height)


def predict_envmap(model: TrainedModel, dtype=np.float32) -> np.ndarray:
    """Decode the network over its training grid back to a radiance map."""
    coords = make_coord_grid(model.width, model.height, dtype=dtype)
    params = model.params
    if params[0].dtype != np.dtype(dtype):
        params = [p.astype(dtype) for p in params]
    out, _ = siren_forward(model.arch, params, coords)
    hdr = denormalize_exp(out, model.norm)
    return hdr.reshape(model.height, model.width, 3)


def perturb(model: TrainedModel, alpha: float, seed: int) -> TrainedModel:
    """Add i.i.d. N(0, alpha^2) noise to every weight and bias."""
    rng = np.random.default_rng(seed)
    noisy: Params = []
    for p in model.params:
        noise = rng.standard_normal(p.shape).astype(p.dtype)
        noisy.append(p + p.dtype.type(alpha) * noise)
    return replace_params(model, noisy)


def replace_params(model: TrainedModel, params: Params) -> TrainedModel:
    return TrainedModel(
        arch=model.arch, params=params, norm=model.norm,
        width=model.width, height=model.height,
    )


MODEL_MAGIC = b"ENVSIREN"
MODEL_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIfIIddf")


def save_model(path, model: TrainedModel) -> None:
    """Checkpoint: header (magic, version, arch, grid, normalization) + tensors."""
    header = _HEADER.pack(
        MODEL_MAGIC,
        MODEL_VERSION,
        model.arch.in_dim,
        model.arch.out_dim,
        model.arch.hidden_dim,
        model.arch.hidden_layers,
        model.arch.omega0,
        model.width,
        model.height,
        model.norm.log_min,
        model.norm.log_max,
        model.norm.eps,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for p in model.params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_model(path) -> TrainedModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ValueError(f"checkpoint too short: {len(blob)} bytes")
    (magic, version, in_dim, out_dim, hidden_dim, hidden_layers,
     omega0, width, height, log_min, log_max, eps) = _HEADER.unpack_from(blob)
    if magic != MODEL_MAGIC:
        raise ValueError(f"not a model checkpoint (magic {magic!r})")
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    arch = MlpArch(
        in_dim=in_dim, out_dim=out_dim, hidden_dim=hidden_dim,
        hidden_layers=hidden_layers, omega0=omega0,
    )
    params: Params = []
    offset = _HEADER.size
    for fan_in, fan_out in arch.layer_dims:
        for shape in ((fan_in, fan_out), (fan_out,)):
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(blob):
                raise ValueError("checkpoint truncated mid-tensor")
            params.append(
                np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
                .reshape(shape)
                .astype(np.float32)
            )
            offset = end
    if offset != len(blob):
        raise ValueError(f"trailing data after tensors: {len(blob) - offset} bytes")
    norm = NormalizationParams(log_min=log_min, log_max=log_max, eps=eps)
    return TrainedModel(arch=arch, params=params, norm=norm, width=width, height=height)
