"""Inverse rendering: regularizers, total loss, parameterizations, descent."""

from __future__ import annotations

import numpy as np
import pytest

from envsiren import (
    Camera,
    FitConfig,
    InversionConfig,
    MlpArch,
    Plane,
    Scene,
    Sphere,
    build_transport,
    l1_reg,
    log_pyramid,
    luminance_reg,
    optimize,
    perceptual_reg,
    render,
    total_loss,
    train,
    tv_reg,
)
from envsiren.hdr_image import LUMA_WEIGHTS, log_normalize, log_normalize_with, luminance
from envsiren.inversion import (
    METHODS,
    _avg_pool2,
    _avg_pool2_adjoint,
    _scale_window,
    _SirenParam,
)
from conftest import synthetic_sky

ENV_ROWS, ENV_W = 12, 16


def _small_op(width: int = 12, height: int = 12, spp: int = 16, seed: int = 0):
    scene = Scene(
        camera=Camera(width=width, height=height),
        spheres=(Sphere(center=(-0.6, 1.0, 0.0), radius=0.6, kind="mirror"),),
        plane=Plane(height=0.0, albedo=(0.7, 0.7, 0.7)),
    )
    return build_transport(scene, ENV_W, ENV_ROWS, spp=spp, seed=seed)


def _sky(seed: int = 0, dtype=np.float64) -> np.ndarray:
    rng = np.random.default_rng(seed)
    base = synthetic_sky(width=ENV_W, rows=ENV_ROWS, sun_peak=20.0, sun_u=0.3, sun_v=0.2)
    return (base * (0.8 + 0.4 * rng.random(base.shape))).astype(dtype)


def _anchors(env0: np.ndarray) -> dict:
    norm0 = log_normalize(env0)[1]
    return {"lum0": luminance(env0), "ref_pyramid": log_pyramid(env0, norm0), "norm": norm0}


def _fd(f, x: np.ndarray, picks: np.ndarray, h: float = 1e-6) -> np.ndarray:
    flat = x.reshape(-1)
    out = np.zeros(len(picks))
    for i, j in enumerate(picks):
        orig = flat[j]
        flat[j] = orig + h
        fp = f(x)
        flat[j] = orig - h
        fm = f(x)
        flat[j] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# Regularizers
# ---------------------------------------------------------------------------


def test_luminance_reg_hand_values():
    env = np.full((2, 2, 3), 2.0)
    val, grad = luminance_reg(env, lum0=luminance(env) + 1.5)
    assert val == pytest.approx(1.5, rel=1e-9)
    for k, w in enumerate(LUMA_WEIGHTS):
        assert np.allclose(grad[:, :, k], -w)  # below the anchor: sign -1
    val2, grad2 = luminance_reg(env, lum0=luminance(env))
    assert val2 == 0.0
    assert np.all(grad2 == 0.0)


def test_l1_reg_hand_values():
    env = np.array([[[1.0, -2.0, 0.0]]])
    val, grad = l1_reg(env)
    assert val == pytest.approx(3.0)
    assert np.array_equal(grad, np.array([[[1.0, -1.0, 0.0]]]))


def test_tv_reg_hand_values():
    """Column [0, 2, 1]: variation 3, gradient (-1, 2, -1)."""
    env = np.array([0.0, 2.0, 1.0]).reshape(3, 1, 1)
    val, grad = tv_reg(env)
    assert val == pytest.approx(3.0)
    assert np.array_equal(grad.ravel(), [-1.0, 2.0, -1.0])


def test_tv_reg_matches_finite_differences():
    rng = np.random.default_rng(0)
    env = rng.random((5, 6, 3)) + 0.1
    _, grad = tv_reg(env)
    picks = rng.choice(env.size, 30, replace=False)
    fd = _fd(lambda e: tv_reg(e)[0], env, picks)
    assert np.allclose(grad.reshape(-1)[picks], fd, atol=1e-6)


def test_avg_pool_and_adjoint():
    rng = np.random.default_rng(1)
    x = rng.random((6, 8, 3))
    pooled = _avg_pool2(x)
    assert pooled.shape == (3, 4, 3)
    assert pooled[0, 0, 0] == pytest.approx(np.mean(x[0:2, 0:2, 0]), rel=1e-12)
    y = rng.random(pooled.shape)
    lhs = float(np.sum(pooled * y))
    rhs = float(np.sum(x * _avg_pool2_adjoint(y, x.shape)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_scale_window_adapts():
    assert _scale_window((32, 32, 3)) == 11
    assert _scale_window((8, 16, 3)) == 7
    assert _scale_window((2, 4, 3)) == 1


def test_log_pyramid_shapes_and_base():
    env = _sky()
    norm = log_normalize(env)[1]
    pyr = log_pyramid(env, norm)
    assert [p.shape[:2] for p in pyr] == [(12, 16), (6, 8), (3, 4)]
    assert np.allclose(pyr[0], log_normalize_with(env, norm), rtol=1e-12)


def test_perceptual_reg_zero_at_reference():
    env = _sky()
    norm = log_normalize(env)[1]
    pyr = log_pyramid(env, norm)
    val, grad = perceptual_reg(env.copy(), pyr, norm)
    assert val == pytest.approx(0.0, abs=1e-12)
    assert np.max(np.abs(grad)) < 1e-10


def test_perceptual_reg_matches_finite_differences():
    ref = _sky(0)
    env = _sky(1)
    norm = log_normalize(ref)[1]
    pyr = log_pyramid(ref, norm)
    _, grad = perceptual_reg(env, pyr, norm)
    rng = np.random.default_rng(2)
    picks = rng.choice(env.size, 40, replace=False)
    fd = _fd(lambda e: perceptual_reg(e, pyr, norm)[0], env, picks)
    got = grad.reshape(-1)[picks]
    assert np.max(np.abs(got - fd)) < 1e-6 * max(1.0, np.max(np.abs(fd)))


# ---------------------------------------------------------------------------
# Total loss
# ---------------------------------------------------------------------------


LAMBDAS = {"ssim": 2.0, "l1": 1e-4, "lum": 1e-3, "percep": 0.6, "tv": 0.0}


def test_total_loss_gradient_matches_finite_differences():
    op = _small_op()
    true_env = _sky(3)
    target_tone = np.clip(render(op, true_env), 0.0, 1.0)
    env = _sky(4) * 0.9
    anchors = _anchors(_sky(5))
    _, _, grad = total_loss(op, env, target_tone, anchors, LAMBDAS)
    rng = np.random.default_rng(6)
    picks = rng.choice(env.size, 40, replace=False)
    fd = _fd(
        lambda e: total_loss(op, e, target_tone, anchors, LAMBDAS)[0], env, picks
    )
    got = grad.reshape(-1)[picks]
    scale = max(1.0, np.max(np.abs(fd)))
    assert np.max(np.abs(got - fd)) < 1e-6 * scale


def test_total_loss_tv_term_optional():
    op = _small_op()
    env = _sky(7)
    target_tone = np.clip(render(op, _sky(8)), 0.0, 1.0)
    anchors = _anchors(env)
    _, parts, _ = total_loss(op, env, target_tone, anchors, LAMBDAS)
    assert "tv" not in parts
    with_tv = dict(LAMBDAS, tv=1e-3)
    value, parts_tv, _ = total_loss(op, env, target_tone, anchors, with_tv)
    assert "tv" in parts_tv and np.isfinite(value)


def test_total_loss_perfect_env_scores_high():
    op = _small_op()
    env = _sky(9)
    target_tone = np.clip(render(op, env), 0.0, 1.0)
    _, parts, _ = total_loss(op, env, target_tone, _anchors(env), LAMBDAS)
    assert parts["render_ssim"] == pytest.approx(1.0, abs=1e-9)
    assert parts["percep"] == pytest.approx(0.0, abs=1e-9)
    assert parts["lum"] == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------------------
# End-to-end gradient through the network parameterization
# ---------------------------------------------------------------------------


def test_network_path_gradient_matches_finite_differences():
    """Full chain: weights -> sine net -> exp decode -> render -> loss."""
    arch = MlpArch(in_dim=2, out_dim=3, hidden_dim=8, hidden_layers=1, omega0=30.0)
    target = _sky(10).astype(np.float32)
    model = train(target, arch, FitConfig(epochs=30, seed=0))
    op = _small_op(12, 12, spp=8)
    target_tone = np.clip(render(op, _sky(11)), 0.0, 1.0).astype(np.float64)
    holder = _SirenParam(model, np.float64)
    anchors = _anchors(_sky(12))

    def loss_value() -> float:
        env, _ = holder.decode()
        return total_loss(op, env, target_tone, anchors, LAMBDAS)[0]

    env, ctx = holder.decode()
    _, _, grad_env = total_loss(op, env, target_tone, anchors, LAMBDAS)
    grads = holder.backward(grad_env, ctx)

    rng = np.random.default_rng(13)
    h = 1e-6
    worst = 0.0
    for pi in (0, 2, 4, 5):  # a weight/bias mix across layers
        flat = holder.params[pi].reshape(-1)
        for j in rng.choice(flat.size, size=min(10, flat.size), replace=False):
            orig = flat[j]
            flat[j] = orig + h
            lp = loss_value()
            flat[j] = orig - h
            lm = loss_value()
            flat[j] = orig
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - grads[pi].reshape(-1)[j]) / max(1.0, abs(fd))
            worst = max(worst, rel)
    assert worst < 1e-6


# ---------------------------------------------------------------------------
# The optimize loop
# ---------------------------------------------------------------------------


def _recovery_setup(seed: int = 0):
    op = _small_op(12, 12, spp=16, seed=seed)
    true_env = _sky(20).astype(np.float32)
    target = render(op, true_env)
    init = np.roll(true_env, 4, axis=1)  # start from a horizontally shifted sky
    return op, target, init


def test_optimize_rejects_bad_arguments():
    op, target, init = _recovery_setup()
    with pytest.raises(ValueError):
        optimize(op, target, "nope", init_env=init)
    with pytest.raises(ValueError):
        optimize(op, target, "pixels")  # missing init_env
    with pytest.raises(ValueError):
        optimize(op, target, "siren", init_env=init)  # missing model
    with pytest.raises(ValueError):
        optimize(op, target[:, :-1], "pixels", init_env=init)
    with pytest.raises(ValueError):
        optimize(op, target, "pixels", init_env=init[:, :-1])


@pytest.mark.parametrize("method", ["pixels", "log_pixels"])
def test_optimize_pixel_methods_improve_similarity(method):
    op, target, init = _recovery_setup()
    cfg = InversionConfig(iterations=60)
    records = []
    result = optimize(op, target, method, cfg, init_env=init, log=records.append)
    assert result.method == method
    assert result.env.shape == (ENV_ROWS, ENV_W, 3)
    assert np.all(result.env >= 0.0)
    assert len(result.trace) == cfg.iterations + 1
    assert len(records) == cfg.iterations + 1
    assert result.trace[-1]["render_ssim"] > result.trace[0]["render_ssim"]
    # the lambda schedules hit their pinned endpoints
    assert result.trace[0]["lambda_ssim"] == pytest.approx(1.0)
    assert result.trace[-1]["lambda_ssim"] == pytest.approx(1e4)
    assert result.trace[-1]["lambda_l1"] == pytest.approx(1e-8)


def test_optimize_network_method_improves_similarity():
    op, target, init = _recovery_setup()
    arch = MlpArch(in_dim=2, out_dim=3, hidden_dim=16, hidden_layers=2, omega0=30.0)
    model = train(init, arch, FitConfig(epochs=200, seed=0))
    cfg = InversionConfig(iterations=40)
    result = optimize(op, target, "siren", cfg, model=model)
    assert result.trace[-1]["render_ssim"] > result.trace[0]["render_ssim"]
    assert result.env.shape == (ENV_ROWS, ENV_W, 3)
    assert np.all(result.env >= 0.0)


def test_optimize_pixels_projection_keeps_zeros_reachable():
    """Texels driven negative are clamped to zero, not stuck below it."""
    op, target, init = _recovery_setup()
    dark = np.zeros_like(init)
    result = optimize(op, target, "pixels", InversionConfig(iterations=20), init_env=dark)
    assert np.all(result.env >= 0.0)
    assert result.env.max() > 0.0  # zero texels climbed back up


def test_methods_tuple_is_frozen():
    assert METHODS == ("pixels", "log_pixels", "siren", "r_siren")
