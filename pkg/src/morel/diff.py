"""Composite forward/backward pass, photometric loss, Adam and a gradient check.

A frame is rendered from one or more *layers*. Each layer is an anchor space,
optionally deformed by a field at relative time ``tau`` and optionally
weighted by its temporal opacity. All layers are decoded, concatenated and
composited in a single sorted pass, so the backward pass splits the
per-Gaussian gradients back onto the layer that produced them.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import deform as deform_mod
from .blend import space_weights
from .errors import InvalidInput, NonFiniteGradient
from .metrics import ssim_with_grad
from .raster import DEFAULT_CUTOFF, ViewTransform, render_backward, render_with_tape
from .scene import AnchorSpace, GaussianSet, decode, decode_backward

GROUPS = ("anchor", "decoder", "deform", "blend")

DEFAULT_LR = {
    "anchor.feature": 2.5e-3,
    "anchor.offsets": 1e-3,
    "anchor.log_scaling": 5e-3,
    "decoder": 2e-3,
    "deform.plane": 1.6e-2,
    "deform": 1.6e-3,
    "blend": 1e-1,
}


@dataclass
class Layer:
    space: AnchorSpace
    field: Optional[deform_mod.DeformationField] = None
    tau: float = 0.0
    blend: Optional[str] = None  # "fw", "bw" or None for full weight
    decay: float = 2.0


@dataclass
class _LayerTape:
    decode: object
    query: Optional[deform_mod.QueryTape]
    weight_grads: Optional[tuple]
    start: int
    stop: int


@dataclass
class ForwardTape:
    layers: list
    parts: list
    raster: object
    image: np.ndarray


class LayerGrads(dict):
    """Gradients of one layer keyed by parameter name.

    ``screen`` holds the per-Gaussian image-space position gradient, shaped
    (K, I, 2), and ``visible`` flags Gaussians whose footprint hit the image.
    """

    screen: np.ndarray
    visible: np.ndarray
    opacity: np.ndarray


def layer_params(layer: Layer) -> dict[str, np.ndarray]:
    out = dict(layer.space.params())
    if layer.field is not None:
        out.update(layer.field.params())
    return out


def group_of(name: str) -> str:
    return name.rsplit("/", 1)[-1].split(".", 1)[0]


def forward(layers: list[Layer], view: ViewTransform,
            cutoff: float = DEFAULT_CUTOFF) -> tuple[np.ndarray, ForwardTape]:
    sets, parts = [], []
    start = 0
    for layer in layers:
        space = layer.space
        delta = qtape = None
        if layer.field is not None:
            delta, qtape = deform_mod.query(layer.field, space.position, layer.tau)
        weight = wgrads = None
        if layer.blend is not None:
            w, dw_do, dw_draw = space_weights(space, layer.tau, layer.decay, layer.blend)
            weight, wgrads = w, (dw_do, dw_draw)
        gs, dtape = decode(space, view.code, delta, weight)
        sets.append(gs)
        parts.append(_LayerTape(dtape, qtape, wgrads, start, start + len(gs)))
        start += len(gs)
    gaussians = GaussianSet.concat(sets) if sets else GaussianSet.empty()
    image, rtape = render_with_tape(gaussians, view, cutoff)
    return image, ForwardTape(list(layers), parts, rtape, image)


def backward(tape: ForwardTape, grad_image: np.ndarray,
             trainable: Optional[list] = None) -> list[LayerGrads]:
    """Per-layer parameter gradients of a scalar loss given dL/dImage.

    ``trainable`` lists, per layer, the parameter groups to differentiate
    (subset of ``GROUPS``); every other array comes back as exact zeros.
    """
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != tape.image.shape:
        raise InvalidInput("image gradient does not match the recorded forward pass")
    if trainable is None:
        trainable = [set(GROUPS)] * len(tape.layers)
    if len(trainable) != len(tape.layers):
        raise InvalidInput("one trainable set per layer is required")
    rg = render_backward(tape.raster, grad_image)
    visible = tape.raster.visible
    out = []
    for layer, part, groups in zip(tape.layers, tape.parts, trainable):
        sl = slice(part.start, part.stop)
        dg = decode_backward(part.decode, rg.center[sl], rg.cov[sl], rg.color[sl], rg.opacity[sl])
        grads = LayerGrads()
        for name, arr in layer.space.params().items():
            grads[name] = np.zeros_like(arr)
        if layer.field is not None:
            for name, arr in layer.field.params().items():
                grads[name] = np.zeros_like(arr)
        for name, g in dg.params.items():
            if group_of(name) in groups:
                grads[name] = g
        if layer.field is not None and "deform" in groups:
            g_raw = deform_mod.delta_to_raw_grad(layer.field, dg.dpos, dg.dscale, dg.dopacity)
            grads.update(deform_mod.query_backward(layer.field, part.query, g_raw))
        if part.weight_grads is not None and "blend" in groups:
            dw_do, dw_draw = part.weight_grads
            grads[f"blend.{layer.blend}_offset"] = dg.weight * dw_do
            grads[f"blend.{layer.blend}_decay_raw"] = dg.weight * dw_draw
        k, n_off = len(layer.space), layer.space.n_offsets
        grads.screen = rg.mean_image[sl].reshape(k, n_off, 2)
        grads.visible = visible[sl].reshape(k, n_off)
        grads.opacity = tape.raster.gaussians.opacity[sl].reshape(k, n_off)
        out.append(grads)
    return out


def identity_regularizer(field: deform_mod.DeformationField, positions: np.ndarray,
                         weight: float) -> tuple[float, dict[str, np.ndarray]]:
    """``weight * mean_k ||raw(p_k, 0)||^2`` and its field gradients."""
    raw, qtape = deform_mod.query_raw(field, positions, 0.0)
    k = max(len(raw), 1)
    loss = weight * float(np.sum(raw ** 2)) / k
    return loss, deform_mod.query_backward(field, qtape, 2.0 * weight * raw / k)


def photometric_loss(pred: np.ndarray, target: np.ndarray,
                     ssim_weight: float = 0.2) -> tuple[float, np.ndarray]:
    """L1 + ssim_weight * (1 - SSIM) and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidInput("prediction and target shapes differ")
    diff = pred - target
    loss = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    if ssim_weight:
        s, g_s = ssim_with_grad(pred, target)
        loss += ssim_weight * (1.0 - s)
        grad = grad - ssim_weight * g_s
    return loss, grad


# --------------------------------------------------------------------------
# Optimizer


@dataclass
class Adam:
    """Adam with per-group learning rates and named parameter arrays.

    Names may carry a ``prefix/`` (e.g. ``kfa3/anchor.feature``); the group
    is resolved from the part after the last slash by longest prefix match
    in ``lr``.
    """

    lr: dict = dc_field(default_factory=lambda: dict(DEFAULT_LR))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)
    t: dict = dc_field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        bare = name.rsplit("/", 1)[-1]
        best = None
        for key in self.lr:
            hit = bare == key or bare.startswith(key + ".") or bare.startswith(key + "_")
            if hit and (best is None or len(key) > len(best)):
                best = key
        if best is None:
            raise InvalidInput(f"no learning rate for parameter {name}")
        return self.lr[best]

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place. Raises before touching anything if a
        gradient is not finite."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for {name}")
            if name not in params or params[name].shape != np.shape(g):
                raise InvalidInput(f"gradient {name} does not match its parameter")
        self.step_count += 1
        for name, g in grads.items():
            p = params[name]
            if name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.t[name] += 1
            t = self.t[name]
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p -= self.lr_for(name) * m_hat / (np.sqrt(v_hat) + self.eps)

    def remap(self, prefix: str, keep: np.ndarray, n_new: int) -> None:
        """Follow an anchor resize: keep rows ``keep`` then append ``n_new``
        zero-moment rows for every per-anchor array under ``prefix``."""
        for name in list(self.m):
            if not name.startswith(prefix):
                continue
            if group_of(name) not in ("anchor", "blend"):
                continue
            for store in (self.m, self.v):
                arr = store[name][keep]
                pad = np.zeros((n_new,) + arr.shape[1:])
                store[name] = np.concatenate([arr, pad])

    def forget(self, prefix: str) -> None:
        for store in (self.m, self.v, self.t):
            for name in [n for n in store if n.startswith(prefix)]:
                del store[name]


# --------------------------------------------------------------------------
# Finite-difference check


@dataclass
class GradFixture:
    layers: list
    view: ViewTransform
    cutoff: float = 9.0
    trainable: Optional[list] = None


def random_fixture(seed: int = 11, *, n_anchors: int = 3, deform: bool = False,
                   blend: bool = False, size: int = 24) -> GradFixture:
    """Small random scene whose every parameter visibly affects the image.

    With ``blend`` two layers are built, one forward and one backward.
    """
    from .scene import init_anchor_space

    rng = np.random.default_rng(seed)
    n_layers = 2 if blend else 1
    layers = []
    for li in range(n_layers):
        # one point in each of n_anchors distinct 4x4 cells
        side = (size - 8) // 4
        cells = rng.choice(side * side, size=n_anchors, replace=False)
        pts = 4.0 * np.stack([cells % side, cells // side], 1) + 6.0
        pts = pts + rng.uniform(-0.5, 0.5, size=pts.shape)
        space = init_anchor_space(pts, 4.0, seed=seed + li, feature_dim=4, n_offsets=2, hidden=6)
        space.feature[:] = rng.normal(0.0, 0.5, size=space.feature.shape)
        space.log_scaling[:] = np.log(rng.uniform(2.0, 3.0, size=space.log_scaling.shape))
        dec = space.decoder
        dec.w2[:] = rng.normal(0.0, 0.5, size=dec.w2.shape)
        dec.b2[:] = rng.normal(0.0, 0.3, size=dec.b2.shape)
        space.fw_offset[:] = rng.uniform(-0.3, 0.3, size=len(space))
        space.bw_offset[:] = rng.uniform(-0.3, 0.3, size=len(space))
        space.fw_decay_raw[:] = rng.normal(0.5, 0.2, size=len(space))
        space.bw_decay_raw[:] = rng.normal(0.5, 0.2, size=len(space))
        fld = None
        if deform:
            fld = deform_mod.DeformationField.init((0, 0, size, size), space.n_offsets, rng,
                                                   resolution=4, time_resolution=4, channels=3,
                                                   hidden=5, position_scale=1.0)
            fld.plane_xt[:] = rng.uniform(0.5, 1.5, size=fld.plane_xt.shape)
            fld.plane_yt[:] = rng.uniform(0.5, 1.5, size=fld.plane_yt.shape)
            fld.w2[:] = rng.normal(0.0, 0.3, size=fld.w2.shape)
            fld.b2[:] = rng.normal(0.0, 0.1, size=fld.b2.shape)
        tau = 0.35 if li == 0 else -0.65
        layers.append(Layer(space, fld, tau, ("fw" if li == 0 else "bw") if blend else None))
    view = ViewTransform(np.array([[1.0, 0.1], [-0.05, 0.95]]), np.array([0.5, -0.3]), size, size)
    return GradFixture(layers, view)


def grad_check(fixture: GradFixture, h: float = 1e-4, seed: int = 0,
               names: Optional[list] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    The loss is a fixed random linear functional of the image. Error per
    scalar is ``|a - fd| / (|fd| + 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    image, tape = forward(fixture.layers, fixture.view, fixture.cutoff)
    probe = rng.normal(size=image.shape)
    analytic = backward(tape, probe, fixture.trainable)

    def loss() -> float:
        return float(np.sum(probe * forward(fixture.layers, fixture.view, fixture.cutoff)[0]))

    worst = 0.0
    for layer, grads in zip(fixture.layers, analytic):
        for name, arr in layer_params(layer).items():
            if names is not None and name not in names:
                continue
            flat = arr.reshape(-1)
            g = grads[name].reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = loss()
                flat[i] = keep - h
                down = loss()
                flat[i] = keep
                fd = (up - down) / (2.0 * h)
                worst = max(worst, abs(g[i] - fd) / (abs(fd) + 1e-8))
    return worst
