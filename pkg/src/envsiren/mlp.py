"""Hand-rolled sinusoidal MLP with explicit forward and backward passes.

The network maps 2-D coordinates to 3 channels: a first sine layer whose
matrix product (but not bias) is scaled by omega0, a stack of plain sine
layers, and a final linear layer squashed through a sigmoid. The forward pass
caches every pre-activation so the backward pass can apply the chain rule by
hand; parameters are a flat list [W0, b0, W1, b1, ...] so optimizers and
perturbations can treat tensors uniformly. Everything follows the dtype of
the parameters (float32 in production, float64 for gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


@dataclass(frozen=True)
class MlpArch:
    """Network shape: in -> [hidden sine] * (1 + hidden_layers) -> out."""

    in_dim: int = 2
    out_dim: int = 3
    hidden_dim: int = 256
    hidden_layers: int = 6
    omega0: float = 30.0

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [(self.in_dim, self.hidden_dim)]
        dims += [(self.hidden_dim, self.hidden_dim)] * self.hidden_layers
        dims.append((self.hidden_dim, self.out_dim))
        return dims

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims)


Params = list[np.ndarray]


def siren_init(arch: MlpArch, seed: int, dtype=np.float32) -> Params:
    """Sine-aware uniform init, all biases zero.

    First matrix ~ U(-1/in_dim, 1/in_dim) (omega0 scales it in the forward
    pass). Hidden sine matrices ~ U(-sqrt(6/fan_in), ...): since omega0 does
    not reappear inside hidden layers, this is the scale that keeps
    pre-activation variance near one through the depth. The final linear
    matrix keeps the conventional sqrt(6/fan_in)/omega0 bound.
    """
    rng = np.random.default_rng(seed)
    params: Params = []
    last = len(arch.layer_dims) - 1
    for i, (fan_in, fan_out) in enumerate(arch.layer_dims):
        if i == 0:
            bound = 1.0 / fan_in
        elif i == last:
            bound = np.sqrt(6.0 / fan_in) / arch.omega0
        else:
            bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params.append(w.astype(dtype))
        params.append(np.zeros(fan_out, dtype=dtype))
    return params


def _check_params(arch: MlpArch, params: Params) -> None:
    dims = arch.layer_dims
    if len(params) != 2 * len(dims):
        raise ValueError(f"expected {2 * len(dims)} tensors, got {len(params)}")
    for i, (fan_in, fan_out) in enumerate(dims):
        if params[2 * i].shape != (fan_in, fan_out) or params[2 * i + 1].shape != (fan_out,):
            raise ValueError(f"layer {i} tensors do not match arch {dims[i]}")


def siren_forward(arch: MlpArch, params: Params, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Batched forward pass; returns (out, cache) with out in (0, 1).

    The cache holds the layer inputs and sine pre-activations that
    siren_backward needs, in the spirit of "remember everything".
    """
    _check_params(arch, params)
    dt = params[0].dtype
    x = np.ascontiguousarray(x, dtype=dt)
    n_layers = len(arch.layer_dims)
    omega0 = dt.type(arch.omega0)

    inputs = [x]
    pres = []
    h = x
    for i in range(n_layers - 1):
        w, b = params[2 * i], params[2 * i + 1]
        z = h @ w
        if i == 0:
            z *= omega0
        z += b
        h = np.sin(z)
        pres.append(z)
        inputs.append(h)
    w, b = params[-2], params[-1]
    logits = inputs[-1] @ w + b
    out = expit(logits)
    cache = [inputs, pres, out]
    return out, cache


def siren_backward(
    arch: MlpArch, params: Params, cache: list, d_out: np.ndarray
) -> tuple[Params, np.ndarray]:
    """Chain rule back through the cached forward pass.

    Returns (grads, d_x) where grads matches the params list layout.
    """
    inputs, pres, out = cache
    dt = params[0].dtype
    omega0 = dt.type(arch.omega0)
    n_layers = len(arch.layer_dims)
    grads: Params = [None] * len(params)  # type: ignore[list-item]

    # Final linear + sigmoid.
    d_logits = d_out.astype(dt, copy=False) * out * (1.0 - out)
    grads[-2] = inputs[-1].T @ d_logits
    grads[-1] = d_logits.sum(axis=0)
    d_h = d_logits @ params[-2].T

    for i in range(n_layers - 2, -1, -1):
        d_z = d_h * np.cos(pres[i])
        grads[2 * i + 1] = d_z.sum(axis=0)
        if i == 0:
            grads[2 * i] = omega0 * (inputs[i].T @ d_z)
            d_h = omega0 * (d_z @ params[2 * i].T)
        else:
            grads[2 * i] = inputs[i].T @ d_z
            d_h = d_z @ params[2 * i].T
    return grads, d_h


def clone_params(params: Params) -> Params:
    return [p.copy() for p in params]


def params_add_scaled(params: Params, deltas: Params, scale: float) -> None:
    """In place: params += scale * deltas, tensor by tensor."""
    for p, d in zip(params, deltas):
        p += p.dtype.type(scale) * d


def param_count(params: Params) -> int:
    return sum(p.size for p in params)
