"""Anchor-point scene representation and neural-Gaussian decoding.

Anchors are stored structure-of-arrays inside :class:`AnchorSpace`; the
per-anchor :class:`AnchorPoint` view exists for inspection and for the
single-anchor decoding API.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .errors import InvalidInput, PreconditionViolation

# Per-Gaussian decoder output layout.
COLOR = slice(0, 3)
OPACITY = 3
ROTATION = 4
SCALE = slice(5, 7)
DEPTH = 7
ATTR_DIM = 8

DEFAULT_FEATURE_DIM = 16
DEFAULT_OFFSETS = 4
DEFAULT_HIDDEN = 32

# softplus^-1(1): blend decay starts at d = 1
DECAY_RAW_INIT = float(np.log(np.e - 1.0))


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def softplus(x):
    return np.logaddexp(0.0, x)


def voxel_cells(points: np.ndarray, voxel: float) -> np.ndarray:
    """Integer cell index of each point on a grid of pitch ``voxel``."""
    return np.floor(np.asarray(points, dtype=np.float64) / voxel).astype(np.int64)


@dataclass
class DecoderWeights:
    """Two-layer perceptron: concat(feature, view_code) -> I x ATTR_DIM."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, feature_dim: int, n_offsets: int, hidden: int,
             rng: np.random.Generator) -> "DecoderWeights":
        fan_in = feature_dim + 2
        w1 = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, hidden))
        w2 = rng.normal(0.0, 0.3 / np.sqrt(hidden), size=(hidden, n_offsets * ATTR_DIM))
        return cls(w1, np.zeros(hidden), w2, np.zeros(n_offsets * ATTR_DIM))

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[0] - 2

    @property
    def n_offsets(self) -> int:
        return self.w2.shape[1] // ATTR_DIM

    @property
    def param_count(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def params(self) -> dict[str, np.ndarray]:
        return {"decoder.w1": self.w1, "decoder.b1": self.b1,
                "decoder.w2": self.w2, "decoder.b2": self.b2}

    def copy(self) -> "DecoderWeights":
        return DecoderWeights(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


@dataclass
class AnchorPoint:
    position: np.ndarray
    feature: np.ndarray
    scaling: np.ndarray
    offsets: np.ndarray
    level: int
    blend_fw: tuple[float, float]
    blend_bw: tuple[float, float]
    accum_grad: float = 0.0
    accum_count: int = 0
    opacity_stat: float = 0.0
    # per-slot opacity-logit offsets left by a deformation, if any
    opacity_delta: Optional[np.ndarray] = None


@dataclass
class GaussianAttributes:
    center: np.ndarray
    covariance: np.ndarray
    color: np.ndarray
    opacity: float
    depth_key: float


@dataclass
class GaussianSet:
    """Structure-of-arrays batch of renderable Gaussians."""

    center: np.ndarray  # (G, 2)
    cov: np.ndarray  # (G, 2, 2)
    color: np.ndarray  # (G, 3)
    opacity: np.ndarray  # (G,)
    depth: np.ndarray  # (G,)

    def __len__(self) -> int:
        return self.center.shape[0]

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros(0))

    @classmethod
    def from_list(cls, gaussians: list[GaussianAttributes]) -> "GaussianSet":
        if not gaussians:
            return cls.empty()
        return cls(
            np.array([g.center for g in gaussians], dtype=np.float64),
            np.array([g.covariance for g in gaussians], dtype=np.float64),
            np.array([g.color for g in gaussians], dtype=np.float64),
            np.array([g.opacity for g in gaussians], dtype=np.float64),
            np.array([g.depth_key for g in gaussians], dtype=np.float64),
        )

    def to_list(self) -> list[GaussianAttributes]:
        return [GaussianAttributes(self.center[i], self.cov[i], self.color[i],
                                   float(self.opacity[i]), float(self.depth[i]))
                for i in range(len(self))]

    @staticmethod
    def concat(sets: list["GaussianSet"]) -> "GaussianSet":
        if not sets:
            return GaussianSet.empty()
        return GaussianSet(*(np.concatenate([getattr(s, f.name) for s in sets])
                             for f in fields(GaussianSet)))


# Arrays that grow and shrink with the anchor count, in serialization order.
ANCHOR_ARRAYS = (
    "position", "feature", "log_scaling", "offsets", "level",
    "fw_offset", "fw_decay_raw", "bw_offset", "bw_decay_raw",
    "accum_grad", "accum_count", "opacity_stat", "slot_grad",
)


@dataclass
class AnchorSpace:
    """A canonical scene: anchors plus the decoder shared by all of them.

    ``kind`` is ``"global"`` or ``"key"``; key spaces carry their index
    ``n`` and key-frame time ``t_n``.
    """

    position: np.ndarray  # (K, 2), fixed
    feature: np.ndarray  # (K, F)
    log_scaling: np.ndarray  # (K, 2)
    offsets: np.ndarray  # (K, I, 2), in units of the anchor scaling
    level: np.ndarray  # (K,), -1 until assigned
    fw_offset: np.ndarray
    fw_decay_raw: np.ndarray
    bw_offset: np.ndarray
    bw_decay_raw: np.ndarray
    accum_grad: np.ndarray
    accum_count: np.ndarray
    opacity_stat: np.ndarray
    slot_grad: np.ndarray  # (K, I)
    decoder: DecoderWeights
    grid_voxel: float
    kind: str = "global"
    n: Optional[int] = None
    t_n: Optional[int] = None

    def __len__(self) -> int:
        return self.position.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.feature.shape[1]

    @property
    def n_offsets(self) -> int:
        return self.offsets.shape[1]

    @property
    def scaling(self) -> np.ndarray:
        return np.exp(self.log_scaling)

    def anchor(self, k: int) -> AnchorPoint:
        return AnchorPoint(
            position=self.position[k].copy(),
            feature=self.feature[k].copy(),
            scaling=np.exp(self.log_scaling[k]),
            offsets=self.offsets[k].copy(),
            level=int(self.level[k]),
            blend_fw=(float(self.fw_offset[k]), float(softplus(self.fw_decay_raw[k]))),
            blend_bw=(float(self.bw_offset[k]), float(softplus(self.bw_decay_raw[k]))),
            accum_grad=float(self.accum_grad[k]),
            accum_count=int(self.accum_count[k]),
            opacity_stat=float(self.opacity_stat[k]),
        )

    def params(self) -> dict[str, np.ndarray]:
        """Trainable arrays, keyed by stable names."""
        out = {
            "anchor.feature": self.feature,
            "anchor.log_scaling": self.log_scaling,
            "anchor.offsets": self.offsets,
        }
        out.update(self.decoder.params())
        out.update(self.blend_params())
        return out

    def blend_params(self) -> dict[str, np.ndarray]:
        return {
            "blend.fw_offset": self.fw_offset,
            "blend.fw_decay_raw": self.fw_decay_raw,
            "blend.bw_offset": self.bw_offset,
            "blend.bw_decay_raw": self.bw_decay_raw,
        }

    def cells(self) -> np.ndarray:
        return voxel_cells(self.position, self.grid_voxel)

    def reset_stats(self) -> None:
        self.accum_grad[:] = 0.0
        self.accum_count[:] = 0
        self.opacity_stat[:] = 0.0
        self.slot_grad[:] = 0.0

    def select(self, keep: np.ndarray) -> None:
        """Keep only the anchors at ``keep`` (index array or boolean mask)."""
        for name in ANCHOR_ARRAYS:
            setattr(self, name, getattr(self, name)[keep])

    def append(self, **arrays: np.ndarray) -> None:
        for name in ANCHOR_ARRAYS:
            setattr(self, name, np.concatenate([getattr(self, name), arrays[name]]))

    def copy(self) -> "AnchorSpace":
        return copy.deepcopy(self)


def _empty_anchor_arrays(k: int, n_offsets: int) -> dict[str, np.ndarray]:
    return {
        "level": np.full(k, -1, dtype=np.int64),
        "fw_offset": np.zeros(k),
        "fw_decay_raw": np.full(k, DECAY_RAW_INIT),
        "bw_offset": np.zeros(k),
        "bw_decay_raw": np.full(k, DECAY_RAW_INIT),
        "accum_grad": np.zeros(k),
        "accum_count": np.zeros(k, dtype=np.int64),
        "opacity_stat": np.zeros(k),
        "slot_grad": np.zeros((k, n_offsets)),
    }


def init_anchor_space(points, grid_voxel: float, seed: int = 0, *,
                      feature_dim: int = DEFAULT_FEATURE_DIM,
                      n_offsets: int = DEFAULT_OFFSETS,
                      hidden: int = DEFAULT_HIDDEN) -> AnchorSpace:
    """Build a global anchor space with one anchor per occupied voxel cell.

    Each anchor sits at the centroid of the points that landed in its cell.
    Cells are visited in lexicographic order so the result does not depend
    on the input point order.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] == 0:
        raise InvalidInput("init_anchor_space: empty point list")
    if not grid_voxel > 0:
        raise InvalidInput("init_anchor_space: grid_voxel must be positive")
    cells = voxel_cells(points, grid_voxel)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    k = uniq.shape[0]
    counts = np.bincount(inverse, minlength=k).astype(np.float64)
    centroid = np.stack([np.bincount(inverse, weights=points[:, d], minlength=k)
                         for d in range(2)], axis=1) / counts[:, None]

    rng = np.random.default_rng(seed)
    feature = rng.normal(0.0, 0.1, size=(k, feature_dim))
    offsets = rng.uniform(-0.5, 0.5, size=(k, n_offsets, 2))
    decoder = DecoderWeights.init(feature_dim, n_offsets, hidden, rng)
    return AnchorSpace(
        position=centroid,
        feature=feature,
        log_scaling=np.full((k, 2), np.log(grid_voxel)),
        offsets=offsets,
        decoder=decoder,
        grid_voxel=float(grid_voxel),
        kind="global",
        **_empty_anchor_arrays(k, n_offsets),
    )


def derive_keyframe_space(global_space: AnchorSpace, n: int, gop: int) -> AnchorSpace:
    """Copy the level-assigned global space into key-frame anchor space ``n``."""
    if global_space.kind != "global":
        raise PreconditionViolation("derive_keyframe_space expects the global space")
    if np.any(global_space.level < 0):
        raise PreconditionViolation("derive_keyframe_space: levels are not assigned")
    key = global_space.copy()
    key.kind = "key"
    key.n = int(n)
    key.t_n = int(n) * int(gop)
    key.reset_stats()
    k = len(key)
    key.fw_offset = np.zeros(k)
    key.bw_offset = np.zeros(k)
    key.fw_decay_raw = np.full(k, DECAY_RAW_INIT)
    key.bw_decay_raw = np.full(k, DECAY_RAW_INIT)
    return key


# --------------------------------------------------------------------------
# Decoding


def rotation_matrices(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


@dataclass
class DecodeTape:
    x: np.ndarray
    h: np.ndarray
    out: np.ndarray  # (K, I, ATTR_DIM)
    scaling: np.ndarray  # exp(log_scaling + delta), (K, 2)
    offsets: np.ndarray
    color: np.ndarray
    sig_logit: np.ndarray
    sig_scale: np.ndarray
    scale: np.ndarray  # (K, I, 2)
    rot: np.ndarray  # (K, I, 2, 2)
    weight: np.ndarray  # (K,)
    decoder: DecoderWeights = field(repr=False)


def decode(space: AnchorSpace, view_code, delta=None, weight=None,
           decoder: Optional[DecoderWeights] = None) -> tuple[GaussianSet, DecodeTape]:
    """Decode every anchor of ``space`` into its I neural Gaussians.

    ``delta`` is an optional deformation (``dpos`` (K,2), ``dscale`` (K,2),
    ``dopacity`` (K,I)); ``weight`` multiplies each anchor's opacities.
    """
    dec = decoder if decoder is not None else space.decoder
    k, n_off = len(space), space.n_offsets
    view_code = np.asarray(view_code, dtype=np.float64).reshape(2)
    if dec.feature_dim != space.feature_dim or dec.n_offsets != n_off:
        raise InvalidInput("decoder shape does not match the anchor space")

    x = np.concatenate([space.feature, np.broadcast_to(view_code, (k, 2))], axis=1)
    h = np.tanh(x @ dec.w1 + dec.b1)
    out = (h @ dec.w2 + dec.b2).reshape(k, n_off, ATTR_DIM)

    log_scaling = space.log_scaling
    position = space.position
    logit = out[..., OPACITY]
    if delta is not None:
        log_scaling = log_scaling + delta.dscale
        position = position + delta.dpos
        logit = logit + delta.dopacity
    scaling = np.exp(log_scaling)
    w = np.ones(k) if weight is None else np.asarray(weight, dtype=np.float64)

    center = position[:, None, :] + scaling[:, None, :] * space.offsets
    color = sigmoid(out[..., COLOR])
    sig_logit = sigmoid(logit)
    opacity = sig_logit * w[:, None]
    sig_scale = sigmoid(out[..., SCALE])
    scale = scaling[:, None, :] * sig_scale
    rot = rotation_matrices(out[..., ROTATION])
    cov = np.einsum("kiab,kib,kicb->kiac", rot, scale ** 2, rot)

    gs = GaussianSet(center.reshape(-1, 2), cov.reshape(-1, 2, 2), color.reshape(-1, 3),
                     opacity.reshape(-1), out[..., DEPTH].reshape(-1).copy())
    tape = DecodeTape(x, h, out, scaling, space.offsets, color, sig_logit, sig_scale,
                      scale, rot, w, dec)
    return gs, tape


@dataclass
class DecodeGrads:
    params: dict[str, np.ndarray]
    dpos: np.ndarray
    dscale: np.ndarray
    dopacity: np.ndarray
    weight: np.ndarray


def decode_backward(tape: DecodeTape, g_center, g_cov, g_color, g_opacity) -> DecodeGrads:
    """Reverse pass of :func:`decode` from per-Gaussian gradients."""
    k, n_off = tape.out.shape[:2]
    g_center = g_center.reshape(k, n_off, 2)
    g_cov = g_cov.reshape(k, n_off, 2, 2)
    g_color = g_color.reshape(k, n_off, 3)
    g_opacity = g_opacity.reshape(k, n_off)
    g_out = np.zeros_like(tape.out)

    g_out[..., COLOR] = g_color * tape.color * (1.0 - tape.color)
    g_weight = np.sum(g_opacity * tape.sig_logit, axis=1)
    g_logit = g_opacity * tape.weight[:, None] * tape.sig_logit * (1.0 - tape.sig_logit)
    g_out[..., OPACITY] = g_logit

    # cov = R diag(s^2) R^T
    gsym = 0.5 * (g_cov + np.swapaxes(g_cov, -1, -2))
    rt_g_r = np.einsum("kiba,kibc,kicd->kiad", tape.rot, gsym, tape.rot)
    g_scale = 2.0 * tape.scale * np.stack([rt_g_r[..., 0, 0], rt_g_r[..., 1, 1]], -1)
    c, s = tape.rot[..., 0, 0], tape.rot[..., 1, 0]
    d_rot = np.stack([np.stack([-s, -c], -1), np.stack([c, -s], -1)], -2)
    d2 = tape.scale ** 2
    g_out[..., ROTATION] = 2.0 * np.einsum("kiab,kibc,kic,kiac->ki", gsym, d_rot, d2, tape.rot)

    g_out[..., SCALE] = g_scale * tape.scaling[:, None, :] * tape.sig_scale * (1.0 - tape.sig_scale)
    g_scaling = np.sum(g_scale * tape.sig_scale, axis=1)

    g_pos = g_center.sum(axis=1)
    g_offsets = g_center * tape.scaling[:, None, :]
    g_scaling += np.sum(g_center * tape.offsets, axis=1)
    g_log_scaling = g_scaling * tape.scaling

    dec = tape.decoder
    g_flat = g_out.reshape(k, -1)
    g_w2 = tape.h.T @ g_flat
    g_b2 = g_flat.sum(axis=0)
    g_z = (g_flat @ dec.w2.T) * (1.0 - tape.h ** 2)
    g_w1 = tape.x.T @ g_z
    g_b1 = g_z.sum(axis=0)
    g_x = g_z @ dec.w1.T
    feat_dim = dec.feature_dim
    params = {
        "anchor.feature": g_x[:, :feat_dim],
        "anchor.log_scaling": g_log_scaling,
        "anchor.offsets": g_offsets,
        "decoder.w1": g_w1, "decoder.b1": g_b1,
        "decoder.w2": g_w2, "decoder.b2": g_b2,
    }
    return DecodeGrads(params, g_pos, g_log_scaling.copy(), g_logit, g_weight)


def decode_gaussians(anchor: AnchorPoint, decoder: DecoderWeights, view_code) -> list[GaussianAttributes]:
    """Decode a single anchor-point into its neural Gaussians."""
    feature = np.asarray(anchor.feature, dtype=np.float64)
    offsets = np.asarray(anchor.offsets, dtype=np.float64)
    if feature.shape != (decoder.feature_dim,) or offsets.shape != (decoder.n_offsets, 2):
        raise InvalidInput("anchor shapes do not match the decoder")
    single = AnchorSpace(
        position=np.asarray(anchor.position, dtype=np.float64)[None],
        feature=feature[None],
        log_scaling=np.log(np.asarray(anchor.scaling, dtype=np.float64))[None],
        offsets=offsets[None],
        decoder=decoder,
        grid_voxel=1.0,
        **_empty_anchor_arrays(1, decoder.n_offsets),
    )
    delta = None
    if anchor.opacity_delta is not None:
        from .deform import DeformationDelta

        delta = DeformationDelta(np.zeros((1, 2)), np.zeros((1, 2)),
                                 np.asarray(anchor.opacity_delta, dtype=np.float64)[None])
    gs, _ = decode(single, view_code, delta)
    return gs.to_list()
