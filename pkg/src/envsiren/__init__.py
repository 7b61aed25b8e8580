"""Neural HDR environment maps: robust SIREN fits and inverse transport recovery.

The package fits sinusoidal MLPs to high-dynamic-range environment maps in a
normalized log-radiance space, optionally with adversarial weight perturbation
for robustness, builds linear Monte-Carlo transport operators for simple
sphere-and-plane scenes, and recovers environment maps that reproduce a target
rendering by gradient descent through the transport operator.
"""

from envsiren.hdr_image import (
    NormalizationParams,
    PfmError,
    crop_upper_half,
    denormalize_exp,
    load_pfm,
    log_normalize,
    log_normalize_with,
    luminance,
    save_pfm,
    tone_map_preview,
)
from envsiren.metrics import format_report, metric_row, mse, psnr, report_json, ssim, ssim_grad
from envsiren.mlp import (
    MlpArch,
    clone_params,
    param_count,
    params_add_scaled,
    siren_backward,
    siren_forward,
    siren_init,
)
from envsiren.fitting import (
    DivergenceError,
    FitConfig,
    TrainedModel,
    fit_loss,
    load_model,
    make_coord_grid,
    perturb,
    predict_envmap,
    save_model,
    train,
)
from envsiren.transport import (
    Camera,
    Plane,
    Scene,
    Sphere,
    TransportOperator,
    adjoint,
    build_transport,
    dir_to_uv,
    load_scene,
    load_transport,
    parse_scene,
    render,
    save_transport,
    transport_cache_key,
    uv_to_dir,
)
from envsiren.inversion import (
    InversionConfig,
    InversionResult,
    l1_reg,
    log_pyramid,
    luminance_reg,
    optimize,
    perceptual_reg,
    total_loss,
    tv_reg,
)

__all__ = [
    "NormalizationParams",
    "PfmError",
    "crop_upper_half",
    "denormalize_exp",
    "load_pfm",
    "log_normalize",
    "log_normalize_with",
    "luminance",
    "save_pfm",
    "tone_map_preview",
    "format_report",
    "metric_row",
    "mse",
    "psnr",
    "report_json",
    "ssim",
    "ssim_grad",
    "MlpArch",
    "clone_params",
    "param_count",
    "params_add_scaled",
    "siren_backward",
    "siren_forward",
    "siren_init",
    "DivergenceError",
    "FitConfig",
    "TrainedModel",
    "fit_loss",
    "load_model",
    "make_coord_grid",
    "perturb",
    "predict_envmap",
    "save_model",
    "train",
    "Camera",
    "Plane",
    "Scene",
    "Sphere",
    "TransportOperator",
    "adjoint",
    "build_transport",
    "dir_to_uv",
    "load_scene",
    "load_transport",
    "parse_scene",
    "render",
    "save_transport",
    "transport_cache_key",
    "uv_to_dir",
    "InversionConfig",
    "InversionResult",
    "l1_reg",
    "log_pyramid",
    "luminance_reg",
    "optimize",
    "perceptual_reg",
    "total_loss",
    "tv_reg",
]
