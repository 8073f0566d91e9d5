"""Learnable temporal opacity and two-key-frame blending.

Each anchor of a key-frame space owns a forward and a backward
(offset, decay) pair. At relative time ``tau`` its Gaussians are scaled by

    w = exp(-decay_base * d * |tau - o|)

where the direction used is picked by the sign of ``tau`` (``tau >= 0``
forward, otherwise backward).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FrozenLeak, InvalidInput, OutOfWindow
from .scene import AnchorSpace, sigmoid, softplus

DEFAULT_DECAY = 2.0


@dataclass(frozen=True)
class BlendConfig:
    decay: float = DEFAULT_DECAY

    def __post_init__(self):
        if not self.decay > 0:
            raise InvalidInput("blend decay coefficient must be positive")


def blend_weight(o, d, tau, decay: float = DEFAULT_DECAY):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0) or not decay > 0:
        raise InvalidInput("blend decay must be positive")
    return np.exp(-decay * d * np.abs(np.asarray(tau, dtype=np.float64) - o))


def weight_with_grads(offset: np.ndarray, decay_raw: np.ndarray, tau: float, decay: float):
    """Weights plus their partials with respect to offset and raw decay."""
    d = softplus(decay_raw)
    diff = tau - offset
    w = np.exp(-decay * d * np.abs(diff))
    dw_do = w * decay * d * np.sign(diff)
    dw_draw = -decay * np.abs(diff) * w * sigmoid(decay_raw)
    return w, dw_do, dw_draw


def direction_for(tau: float) -> str:
    return "fw" if tau >= 0 else "bw"


def space_weights(space: AnchorSpace, tau: float, decay: float, direction: str | None = None):
    direction = direction or direction_for(tau)
    if direction == "fw":
        return weight_with_grads(space.fw_offset, space.fw_decay_raw, tau, decay)
    return weight_with_grads(space.bw_offset, space.bw_decay_raw, tau, decay)


def chunk_layers(kfa_n, field_n, kfa_n1, field_n1, t: int, gop: int, decay: float,
                 total: int | None = None):
    """Layers that render frame ``t`` of chunk ``n`` from two key-frame spaces.

    With no partner (``kfa_n1`` is None, the tail after the last key frame)
    the single space is drawn at full weight.
    """
    from .diff import Layer

    t_n = kfa_n.t_n
    if not t_n <= t <= t_n + gop or (total is not None and t >= total):
        raise OutOfWindow(f"frame {t} outside chunk starting at {t_n}")
    tau_n = (t - t_n) / gop
    if kfa_n1 is None:
        return [Layer(kfa_n, field_n, tau_n)]
    tau_n1 = (t - kfa_n1.t_n) / gop
    return [Layer(kfa_n, field_n, tau_n, blend="fw", decay=decay),
            Layer(kfa_n1, field_n1, tau_n1, blend="bw", decay=decay)]


def blend_frame(kfa_n, field_n, kfa_n1, field_n1, t: int, gop: int, view, *,
                decay: float = DEFAULT_DECAY, cutoff: float | None = None) -> np.ndarray:
    """Render frame ``t`` by compositing both deformed spaces in one pass."""
    from .diff import forward

    layers = chunk_layers(kfa_n, field_n, kfa_n1, field_n1, t, gop, decay)
    kwargs = {} if cutoff is None else {"cutoff": cutoff}
    return forward(layers, view, **kwargs)[0]


def train_ifb_step(layers, view, target, optimizer, *, ssim_weight: float = 0.2,
                   check_frozen: bool = True) -> float:
    """One blending-only optimization step; returns the photometric loss.

    Only the blend arrays of the direction each layer renders with receive
    gradients; everything else must come back exactly zero.
    """
    from .diff import backward, forward, photometric_loss

    image, tape = forward(layers, view)
    loss, g_image = photometric_loss(image, target, ssim_weight)
    grads = backward(tape, g_image, trainable=[{"blend"}] * len(layers))
    params, flat = {}, {}
    for i, (layer, g) in enumerate(zip(layers, grads)):
        if check_frozen:
            for name, arr in g.items():
                if not name.startswith("blend.") and np.any(arr != 0.0):
                    raise FrozenLeak(f"nonzero gradient on frozen array {name}")
        prefix = f"kfa{layer.space.n}/"
        for name in (f"blend.{layer.blend}_offset", f"blend.{layer.blend}_decay_raw"):
            params[prefix + name] = getattr(layer.space, name.split(".", 1)[1])
            flat[prefix + name] = g[name]
    optimizer.step(params, flat)
    for layer in layers:
        off = getattr(layer.space, f"{layer.blend}_offset")
        np.clip(off, -1.0, 1.0, out=off)
    return loss
