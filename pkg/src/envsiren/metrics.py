"""Image comparison metrics: MSE, PSNR, and a differentiable windowed SSIM.

SSIM uses the standard 11-tap Gaussian window (sigma 1.5), stability constants
(0.01 * L)^2 and (0.03 * L)^2, and averages local scores over the valid
(fully covered) window positions, then over channels. The gradient variant
backpropagates analytically through the filtered moments, so the same core
serves both evaluation and optimization. All routines follow the dtype of
their inputs; pass float64 arrays to check gradients at tight tolerances.
"""

from __future__ import annotations

import json

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

PSNR_CAP = 99.0


def gaussian_kernel(window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; window 1 degenerates to [1]."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    offsets = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    taps = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return taps / taps.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation along both axes of a 2-D array."""
    k = kernel.astype(img.dtype)
    out = sliding_window_view(img, len(k), axis=0) @ k
    out = sliding_window_view(out, len(k), axis=1) @ k
    return out


def _filter_adjoint(grad: np.ndarray, kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of _filter_valid: zero-pad and correlate back to `shape`.

    The kernel is symmetric, so correlation equals convolution and the
    adjoint is an exact transpose (checked by the inner-product tests).
    """
    pad = len(kernel) - 1
    padded = np.zeros((grad.shape[0] + 2 * pad, grad.shape[1] + 2 * pad), dtype=grad.dtype)
    padded[pad : pad + grad.shape[0], pad : pad + grad.shape[1]] = grad
    out = _filter_valid(padded, kernel)
    if out.shape != shape:
        raise AssertionError(f"adjoint shape mismatch: {out.shape} vs {shape}")
    return out


def _as_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        return img[:, :, None]
    if img.ndim == 3:
        return img
    raise ValueError(f"expected a 2-D or (H, W, C) array, got shape {img.shape}")


def _ssim_plane(
    x: np.ndarray,
    y: np.ndarray,
    kernel: np.ndarray,
    c1: float,
    c2: float,
    want_grad: bool,
) -> tuple[float, np.ndarray | None]:
    """Mean local SSIM over one channel plane, optionally with d(mean)/dx."""
    dt = x.dtype
    mu_x = _filter_valid(x, kernel)
    mu_y = _filter_valid(y, kernel)
    xx = _filter_valid(x * x, kernel)
    yy = _filter_valid(y * y, kernel)
    xy = _filter_valid(x * y, kernel)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y

    a1 = 2.0 * mu_x * mu_y + dt.type(c1)
    a2 = 2.0 * cov + dt.type(c2)
    b1 = mu_x * mu_x + mu_y * mu_y + dt.type(c1)
    b2 = var_x + var_y + dt.type(c2)
    smap = (a1 * a2) / (b1 * b2)
    value = float(np.mean(smap, dtype=np.float64))
    if not want_grad:
        return value, None

    # Chain rule through the filtered moments. Per window:
    #   dS/dmu_x = 2 mu_y a2 / (b1 b2) - 2 mu_x a1 a2 / (b1^2 b2)
    #   dS/dvar_x = -a1 a2 / (b1 b2^2)
    #   dS/dcov   = 2 a1 / (b1 b2)
    # with var_x = xx - mu_x^2 and cov = xy - mu_x mu_y folding extra
    # -2 mu_x dS/dvar_x - mu_y dS/dcov into the mu_x slot.
    inv_bb = 1.0 / (b1 * b2)
    d_mu = 2.0 * mu_y * a2 * inv_bb - 2.0 * mu_x * a1 * a2 * inv_bb / b1
    d_var = -a1 * a2 * inv_bb / b2
    d_cov = 2.0 * a1 * inv_bb

    w = dt.type(1.0 / smap.size)
    g_mu = (d_mu - 2.0 * mu_x * d_var - mu_y * d_cov) * w
    g_xx = d_var * w
    g_xy = d_cov * w
    grad = _filter_adjoint(g_mu, kernel, x.shape)
    grad += 2.0 * x * _filter_adjoint(g_xx, kernel, x.shape)
    grad += y * _filter_adjoint(g_xy, kernel, x.shape)
    return value, grad


def _ssim_core(
    a: np.ndarray,
    b: np.ndarray,
    data_range: float,
    window: int,
    sigma: float,
    want_grad: bool,
) -> tuple[float, np.ndarray | None]:
    a = _as_channels(a)
    b = _as_channels(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < window:
        raise ValueError(
            f"image {a.shape[0]}x{a.shape[1]} is smaller than the {window}-tap window"
        )
    kernel = gaussian_kernel(window, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    total = 0.0
    grad = np.zeros_like(a) if want_grad else None
    for ch in range(a.shape[2]):
        value, g = _ssim_plane(a[:, :, ch], b[:, :, ch], kernel, c1, c2, want_grad)
        total += value
        if want_grad:
            grad[:, :, ch] = g
    channels = a.shape[2]
    if want_grad:
        grad = grad / grad.dtype.type(channels)
    return total / channels, grad


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    data_range: float = 1.0,
    window: int = SSIM_WINDOW,
    sigma: float = SSIM_SIGMA,
) -> float:
    """Mean SSIM over valid window positions, channels averaged."""
    value, _ = _ssim_core(a, b, data_range, window, sigma, want_grad=False)
    return value


def ssim_grad(
    a: np.ndarray,
    b: np.ndarray,
    data_range: float = 1.0,
    window: int = SSIM_WINDOW,
    sigma: float = SSIM_SIGMA,
) -> tuple[float, np.ndarray]:
    """SSIM value plus the analytic gradient with respect to `a`."""
    orig_ndim = np.asarray(a).ndim
    value, grad = _ssim_core(a, b, data_range, window, sigma, want_grad=True)
    if orig_ndim == 2 and grad.ndim == 3:
        grad = grad[:, :, 0]
    return value, grad


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / mse), capped at the 99 dB sentinel."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(peak * peak / err), PSNR_CAP)


METRIC_NAMES = ("psnr_db", "mse", "ssim")


def metric_row(pred: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> dict[str, float]:
    """The three comparison metrics for one prediction/reference pair."""
    return {
        "psnr_db": psnr(pred, ref, peak=data_range),
        "mse": mse(pred, ref),
        "ssim": ssim(pred, ref, data_range=data_range),
    }


def format_report(rows: dict[str, dict[str, float]]) -> str:
    """Aligned plain-text table, one row per compared side."""
    name_w = max(len("side"), *(len(k) for k in rows))
    header = f"{'side':<{name_w}}  {'psnr_db':>10}  {'mse':>12}  {'ssim':>9}"
    lines = [header, "-" * len(header)]
    for side, vals in rows.items():
        lines.append(
            f"{side:<{name_w}}  {vals['psnr_db']:>10.4f}  {vals['mse']:>12.6e}  {vals['ssim']:>9.5f}"
        )
    return "\n".join(lines) + "\n"


def report_json(rows: dict[str, dict[str, float]]) -> str:
    """Machine-readable counterpart of format_report."""
    return json.dumps(rows, indent=2, sort_keys=True) + "\n"
