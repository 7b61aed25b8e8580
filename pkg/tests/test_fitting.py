"""Fit loss, adversarial weight perturbation, training loop, checkpoints."""

from __future__ import annotations

import numpy as np
import pytest

from envsiren import (
    DivergenceError,
    FitConfig,
    MlpArch,
    TrainedModel,
    fit_loss,
    load_model,
    make_coord_grid,
    perturb,
    predict_envmap,
    save_model,
    siren_forward,
    siren_init,
    train,
)
from envsiren.fitting import calc_awp, replace_params
from envsiren.hdr_image import NormalizationParams, log_normalize
from envsiren.metrics import ssim
from envsiren.optim import adam_init
from conftest import synthetic_sky

TINY_ARCH = MlpArch(in_dim=2, out_dim=3, hidden_dim=16, hidden_layers=2, omega0=30.0)


def _small_target(h: int = 12, w: int = 16) -> np.ndarray:
    return synthetic_sky(width=w, rows=h, sun_peak=50.0, sun_u=0.4, sun_v=0.2)


# ---------------------------------------------------------------------------
# Coordinate grid
# ---------------------------------------------------------------------------


def test_coord_grid_two_by_two():
    """Texel centers of a 2x2 grid sit at (+-0.5, +-0.5), row-major."""
    g = make_coord_grid(2, 2)
    expect = np.array(
        [[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]], dtype=np.float32
    )
    assert np.array_equal(g, expect)


def test_coord_grid_single_texel_and_range():
    assert np.array_equal(make_coord_grid(1, 1), np.zeros((1, 2), dtype=np.float32))
    g = make_coord_grid(9, 5)
    assert g.shape == (45, 2)
    assert np.all(np.abs(g) < 1.0)
    with pytest.raises(ValueError):
        make_coord_grid(0, 3)


# ---------------------------------------------------------------------------
# Fit loss
# ---------------------------------------------------------------------------


def _norm_pair(h=12, w=16, seed=0):
    rng = np.random.default_rng(seed)
    target = _small_target(h, w)
    norm_img, params = log_normalize(target)
    target_norm = norm_img.reshape(-1, 3).astype(np.float64)
    pred = np.clip(target_norm + 0.05 * rng.standard_normal(target_norm.shape), 0, 1)
    return pred, target_norm, params


def test_fit_loss_term_isolation():
    pred, target, norm = _norm_pair()
    h, w = 12, 16
    only_mse = FitConfig(lambda_log_mse=1.0, lambda_log_ssim=0.0, lambda_hdr=0.0)
    loss, _, parts = fit_loss(pred, target, norm, only_mse, w, h)
    assert loss == pytest.approx(np.mean((pred - target) ** 2), rel=1e-9)
    only_ssim = FitConfig(lambda_log_mse=0.0, lambda_log_ssim=1.0, lambda_hdr=0.0)
    loss, _, _ = fit_loss(pred, target, norm, only_ssim, w, h)
    s = ssim(pred.reshape(h, w, 3), target.reshape(h, w, 3))
    assert loss == pytest.approx(1.0 - s, rel=1e-9)
    assert set(parts) == {"log_mse", "log_ssim", "hdr_mse"}


def test_fit_loss_zero_at_target():
    pred, target, norm = _norm_pair()
    loss, grad, parts = fit_loss(target.copy(), target, norm, FitConfig(), 16, 12)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.max(np.abs(grad)) < 1e-12
    assert parts["log_mse"] == 0.0


def test_fit_loss_gradient_matches_finite_differences():
    pred, target, norm = _norm_pair()
    cfg = FitConfig()
    _, grad, _ = fit_loss(pred, target, norm, cfg, 16, 12)
    rng = np.random.default_rng(1)
    h = 1e-7
    flat = pred.reshape(-1)
    for j in rng.choice(flat.size, size=60, replace=False):
        orig = flat[j]
        flat[j] = orig + h
        lp = fit_loss(pred, target, norm, cfg, 16, 12)[0]
        flat[j] = orig - h
        lm = fit_loss(pred, target, norm, cfg, 16, 12)[0]
        flat[j] = orig
        fd = (lp - lm) / (2 * h)
        assert abs(fd - grad.reshape(-1)[j]) < 1e-6 * max(1.0, abs(fd))


def test_fit_loss_shape_checks():
    pred, target, norm = _norm_pair()
    with pytest.raises(ValueError):
        fit_loss(pred[:-1], target, norm, FitConfig(), 16, 12)
    with pytest.raises(ValueError):
        fit_loss(pred, target, norm, FitConfig(), 16, 11)


# ---------------------------------------------------------------------------
# Adversarial weight perturbation
# ---------------------------------------------------------------------------


def _awp_setup():
    target = _small_target()
    norm_img, _ = log_normalize(target)
    target_norm = norm_img.reshape(-1, 3)
    coords = make_coord_grid(16, 12)
    params = siren_init(TINY_ARCH, seed=0)
    return params, coords, target_norm


def test_awp_per_tensor_norm_ratio():
    """Every perturbed tensor satisfies ||delta*|| = gamma ||theta||."""
    params, coords, target_norm = _awp_setup()
    state = adam_init(params)
    pert = calc_awp(TINY_ARCH, params, coords, target_norm, 16, 12, 0.01, state, 1e-4)
    assert len(pert) == len(params)
    for p, d in zip(params, pert):
        p_norm = np.linalg.norm(p)
        if p_norm == 0.0:
            assert np.all(d == 0.0)  # zero-norm tensors stay untouched
        else:
            assert np.linalg.norm(d) == pytest.approx(0.01 * p_norm, rel=1e-5)


def test_awp_worsens_similarity():
    """The perturbation must push the prediction away from the target."""
    target = _small_target()
    model = train(target, TINY_ARCH, FitConfig(epochs=150, lr=1e-4, seed=0))
    norm_img, _ = log_normalize(target)
    target_norm = norm_img.reshape(-1, 3)
    coords = make_coord_grid(16, 12)
    state = adam_init(model.params)
    pert = calc_awp(
        TINY_ARCH, model.params, coords, target_norm, 16, 12, 0.01, state, 1e-4
    )
    out0, _ = siren_forward(TINY_ARCH, model.params, coords)
    bumped = [p + d for p, d in zip(model.params, pert)]
    out1, _ = siren_forward(TINY_ARCH, bumped, coords)
    s0 = ssim(out0.reshape(12, 16, 3), norm_img)
    s1 = ssim(out1.reshape(12, 16, 3), norm_img)
    assert s1 < s0


def test_awp_gamma_zero_is_plain_training():
    target = _small_target()
    cfg_plain = FitConfig(epochs=40, seed=3)
    cfg_robust = FitConfig(epochs=40, seed=3, robust=True, awp_gamma=0.0)
    a = train(target, TINY_ARCH, cfg_plain)
    b = train(target, TINY_ARCH, cfg_robust)
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def test_train_reduces_loss_and_logs():
    records = []
    model = train(
        _small_target(),
        TINY_ARCH,
        FitConfig(epochs=120, lr=3e-3, seed=0),
        log=records.append,
    )
    assert len(records) == 120
    assert records[0]["iter"] == 0
    first = np.mean([r["loss"] for r in records[:10]])
    last = np.mean([r["loss"] for r in records[-10:]])
    assert last < 0.5 * first
    assert isinstance(model, TrainedModel)
    assert model.width == 16 and model.height == 12


def test_train_deterministic():
    target = _small_target()
    cfg = FitConfig(epochs=30, seed=7, robust=True)
    a = train(target, TINY_ARCH, cfg)
    b = train(target, TINY_ARCH, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))


def test_train_divergence_raises():
    with pytest.raises(DivergenceError) as exc:
        train(_small_target(), TINY_ARCH, FitConfig(epochs=10, lr=1e38, seed=0))
    assert 0 <= exc.value.iteration < 10


def test_predict_envmap_properties():
    target = _small_target()
    model = train(target, TINY_ARCH, FitConfig(epochs=200, seed=1))
    env = predict_envmap(model)
    assert env.shape == target.shape
    assert env.dtype == np.float32
    assert np.all(env >= 0.0) and np.all(np.isfinite(env))
    # decoded range is confined to the normalization range of the target
    assert env.max() <= np.exp(model.norm.log_max) + 1.0


# ---------------------------------------------------------------------------
# Weight-noise perturbation
# ---------------------------------------------------------------------------


def test_perturb_zero_alpha_is_identity():
    model = train(_small_target(), TINY_ARCH, FitConfig(epochs=5, seed=0))
    same = perturb(model, alpha=0.0, seed=5)
    assert all(np.array_equal(p, q) for p, q in zip(model.params, same.params))


def test_perturb_deterministic_per_seed():
    model = train(_small_target(), TINY_ARCH, FitConfig(epochs=5, seed=0))
    a = perturb(model, alpha=1e-3, seed=1)
    b = perturb(model, alpha=1e-3, seed=1)
    c = perturb(model, alpha=1e-3, seed=2)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert any(not np.array_equal(p, q) for p, q in zip(a.params, c.params))
    # noise scale: per-tensor rms difference is close to alpha
    rms = np.sqrt(np.mean((a.params[0] - model.params[0]) ** 2))
    assert rms == pytest.approx(1e-3, rel=0.2)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bytes(tmp_path):
    model = train(_small_target(), TINY_ARCH, FitConfig(epochs=5, seed=0))
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_model(p1, model)
    back = load_model(p1)
    save_model(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    assert back.arch == model.arch
    assert back.width == model.width and back.height == model.height
    assert back.norm.eps == pytest.approx(model.norm.eps, rel=1e-6)
    assert all(np.array_equal(p, q) for p, q in zip(model.params, back.params))
    assert np.array_equal(predict_envmap(back), predict_envmap(model))


def test_checkpoint_rejects_corruption(tmp_path):
    model = train(_small_target(), TINY_ARCH, FitConfig(epochs=2, seed=0))
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    blob = path.read_bytes()
    bad_magic = tmp_path / "bad1.ckpt"
    bad_magic.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ValueError):
        load_model(bad_magic)
    truncated = tmp_path / "bad2.ckpt"
    truncated.write_bytes(blob[:-10])
    with pytest.raises(ValueError):
        load_model(truncated)
    trailing = tmp_path / "bad3.ckpt"
    trailing.write_bytes(blob + b"\x00\x00")
    with pytest.raises(ValueError):
        load_model(trailing)


def test_replace_params_keeps_metadata():
    model = train(_small_target(), TINY_ARCH, FitConfig(epochs=2, seed=0))
    fresh = replace_params(model, [np.zeros_like(p) for p in model.params])
    assert fresh.norm == model.norm
    assert fresh.arch == model.arch
    assert all(np.all(p == 0.0) for p in fresh.params)
