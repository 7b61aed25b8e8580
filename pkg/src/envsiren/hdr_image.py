"""HDR environment map containers, PFM I/O, and log-space normalization.

Maps live in memory as (height, width, 3) float arrays with row 0 at the top
(the zenith side for equirectangular sky maps). PFM stores scanlines bottom to
top, so load/save flip vertically. Radiance is prepared for network fitting by
mapping log(E + eps) linearly onto [0, 1] with global scalar bounds; the exact
inverse exponentiates and subtracts eps back out.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image

# Rec. 709 luma coefficients, also used by the luminance regularizer.
LUMA_WEIGHTS = (0.2126, 0.7152, 0.0722)

# exp(80) ~ 5.5e34; any normalized value mapping past this is a corrupt input
# or a diverged prediction, never legitimate radiance.
EXP_GUARD = 80.0

DEFAULT_EPS = 0.01


class PfmError(ValueError):
    """Malformed PFM file."""


@dataclass(frozen=True)
class NormalizationParams:
    """Global scalar bounds of log(E + eps) for one map."""

    log_min: float
    log_max: float
    eps: float = DEFAULT_EPS

    @property
    def log_range(self) -> float:
        return self.log_max - self.log_min


def ensure_hdr(img: np.ndarray, what: str = "image") -> np.ndarray:
    """Validate the (H, W, 3) nonnegative finite layout and return the array."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{what} must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"{what} has empty dimensions {img.shape}")
    if not np.issubdtype(img.dtype, np.floating):
        raise ValueError(f"{what} must be a float array, got dtype {img.dtype}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{what} contains non-finite values")
    if np.any(img < 0):
        raise ValueError(f"{what} contains negative radiance")
    return img


def load_pfm(path) -> np.ndarray:
    """Read a color PFM file into a (H, W, 3) float32 map, row 0 on top."""
    with open(path, "rb") as fh:
        stream = io.BytesIO(fh.read())

    magic = stream.readline().rstrip()
    if magic == b"Pf":
        raise PfmError("grayscale 'Pf' maps are not supported, expected color 'PF'")
    if magic != b"PF":
        raise PfmError(f"not a PFM file (magic {magic!r})")

    dims = stream.readline().split()
    if len(dims) != 2:
        raise PfmError("malformed dimension line")
    try:
        width, height = int(dims[0]), int(dims[1])
    except ValueError as exc:
        raise PfmError("malformed dimension line") from exc
    if width <= 0 or height <= 0:
        raise PfmError(f"bad dimensions {width} x {height}")

    try:
        scale = float(stream.readline())
    except ValueError as exc:
        raise PfmError("malformed scale line") from exc
    if scale == 0.0:
        raise PfmError("scale must be nonzero")

    payload = stream.read()
    need = width * height * 3 * 4
    if len(payload) < need:
        raise PfmError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    if len(payload) > need:
        raise PfmError(f"trailing data after payload: {len(payload) - need} extra bytes")

    dtype = "<f4" if scale < 0 else ">f4"
    rows = np.frombuffer(payload, dtype=dtype).reshape(height, width, 3)
    img = np.ascontiguousarray(np.flipud(rows)).astype(np.float32)
    return ensure_hdr(img, what=str(path))


def save_pfm(path, img: np.ndarray) -> None:
    """Write a (H, W, 3) map as a little-endian color PFM file."""
    img = ensure_hdr(img)
    height, width = img.shape[:2]
    header = f"PF\n{width} {height}\n-1.0\n".encode("ascii")
    payload = np.flipud(img).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def log_normalize(img: np.ndarray, eps: float = DEFAULT_EPS) -> tuple[np.ndarray, NormalizationParams]:
    """Map log(E + eps) onto [0, 1] with global scalar bounds.

    A constant map normalizes to zeros with log_max == log_min, which
    denormalize_exp inverts exactly.
    """
    img = ensure_hdr(img)
    logv = np.log(img + img.dtype.type(eps))
    log_min = float(logv.min())
    log_max = float(logv.max())
    log_range = log_max - log_min
    if log_range > 0.0:
        norm = (logv - logv.dtype.type(log_min)) / logv.dtype.type(log_range)
    else:
        norm = np.zeros_like(logv)
    return norm, NormalizationParams(log_min=log_min, log_max=log_max, eps=eps)


def log_normalize_with(img: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """Normalize a map with a reference map's bounds (values may leave [0, 1])."""
    img = ensure_hdr(img)
    logv = np.log(img + img.dtype.type(params.eps))
    if params.log_range > 0.0:
        return (logv - logv.dtype.type(params.log_min)) / logv.dtype.type(params.log_range)
    return logv - logv.dtype.type(params.log_min)


def denormalize_exp(norm: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """Exact inverse of log_normalize: exp back to linear radiance, minus eps.

    Raises if any exponent argument exceeds the overflow guard, instead of
    silently producing inf.
    """
    norm = np.asarray(norm)
    arg = norm * norm.dtype.type(params.log_range) + norm.dtype.type(params.log_min)
    if np.any(arg > EXP_GUARD):
        raise ValueError(f"exp argument exceeds {EXP_GUARD}, refusing to overflow")
    return np.maximum(np.exp(arg) - norm.dtype.type(params.eps), norm.dtype.type(0.0))


def luminance(img: np.ndarray) -> float:
    """Summed Rec. 709 luma over all pixels (linear in the map)."""
    img = ensure_hdr(img)
    flat = img.reshape(-1, 3)
    total = 0.0
    for k, w in enumerate(LUMA_WEIGHTS):
        total += w * float(np.sum(flat[:, k], dtype=np.float64))
    return total


def crop_upper_half(img: np.ndarray) -> np.ndarray:
    """Rows [0, H/2): the sky half of an equirectangular map."""
    img = ensure_hdr(img)
    height = img.shape[0]
    if height % 2 != 0:
        raise ValueError(f"cannot split {height} rows evenly")
    return img[: height // 2]


def tone_map_preview(img: np.ndarray, exposure: float = 1.0, gamma: float = 2.2) -> bytes:
    """8-bit PNG payload: clamp((exposure * v) ** (1 / gamma), 0, 1) per channel."""
    img = ensure_hdr(img)
    mapped = np.clip((exposure * img.astype(np.float64)) ** (1.0 / gamma), 0.0, 1.0)
    arr8 = np.rint(mapped * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()
