"""Bidirectional plane-factorized deformation fields.

A field samples three feature planes over (x, y), (x, tau) and (y, tau),
fuses the samples by element-wise product and decodes the result with a
small MLP into per-anchor deltas: position (2), log-scaling (2) and one
opacity-logit delta per Gaussian slot.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import OutOfWindow

PLANES = ("xy", "xt", "yt")


def normalize_time(t: int, t_n: int, gop: int, total: int) -> float:
    """Relative time of frame ``t`` with respect to key frame ``t_n``."""
    lo, hi = max(0, t_n - gop), min(t_n + gop, total - 1)
    if not lo <= t <= hi:
        raise OutOfWindow(f"frame {t} outside window [{lo}, {hi}] of key frame {t_n}")
    return (t - t_n) / gop


@dataclass
class DeformationDelta:
    dpos: np.ndarray  # (K, 2)
    dscale: np.ndarray  # (K, 2)
    dopacity: np.ndarray  # (K, I)

    def __neg__(self) -> "DeformationDelta":
        return DeformationDelta(-self.dpos, -self.dscale, -self.dopacity)

    @classmethod
    def zeros(cls, k: int, n_offsets: int) -> "DeformationDelta":
        return cls(np.zeros((k, 2)), np.zeros((k, 2)), np.zeros((k, n_offsets)))


@dataclass
class DeformationField:
    plane_xy: np.ndarray  # (R, R, C), indexed [ix, iy]
    plane_xt: np.ndarray  # (R, Rt, C), indexed [ix, it]
    plane_yt: np.ndarray  # (R, Rt, C), indexed [iy, it]
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    bbox: np.ndarray  # (xmin, ymin, xmax, ymax)
    position_scale: float
    owner: int = 0

    @classmethod
    def init(cls, bbox, n_offsets: int, rng: np.random.Generator, *, resolution: int = 16,
             time_resolution: int = 16, channels: int = 8, hidden: int = 32,
             position_scale: float = 10.0, owner: int = 0) -> "DeformationField":
        r, rt, c = resolution, time_resolution, channels
        return cls(
            plane_xy=rng.uniform(0.1, 0.5, size=(r, r, c)),
            plane_xt=np.ones((r, rt, c)),
            plane_yt=np.ones((r, rt, c)),
            w1=rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, hidden)),
            b1=np.zeros(hidden),
            # zero output layer: the field starts as the identity deformation
            w2=np.zeros((hidden, 4 + n_offsets)),
            b2=np.zeros(4 + n_offsets),
            bbox=np.asarray(bbox, dtype=np.float64),
            position_scale=float(position_scale),
            owner=int(owner),
        )

    @property
    def n_offsets(self) -> int:
        return self.w2.shape[1] - 4

    def params(self) -> dict[str, np.ndarray]:
        return {
            "deform.plane_xy": self.plane_xy, "deform.plane_xt": self.plane_xt,
            "deform.plane_yt": self.plane_yt, "deform.w1": self.w1, "deform.b1": self.b1,
            "deform.w2": self.w2, "deform.b2": self.b2,
        }

    def copy(self) -> "DeformationField":
        return DeformationField(*(np.copy(v) for v in (
            self.plane_xy, self.plane_xt, self.plane_yt, self.w1, self.b1, self.w2,
            self.b2, self.bbox)), self.position_scale, self.owner)

    def grid_coords(self, positions: np.ndarray, tau) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Continuous node coordinates of positions/time along each axis."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        r = self.plane_xy.shape[0]
        rt = self.plane_xt.shape[1]
        x0, y0, x1, y1 = self.bbox
        ux = np.clip((positions[:, 0] - x0) / (x1 - x0), 0.0, 1.0) * (r - 1)
        uy = np.clip((positions[:, 1] - y0) / (y1 - y0), 0.0, 1.0) * (r - 1)
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), ux.shape)
        ut = (np.clip(tau, -1.0, 1.0) + 1.0) * 0.5 * (rt - 1)
        return ux, uy, ut


def _bilinear_setup(u: np.ndarray, size: int):
    i0 = np.minimum(np.floor(u).astype(np.int64), size - 2)
    return i0, u - i0


def sample_plane(plane: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup of ``plane[u, v]`` at continuous node coordinates."""
    i, fu = _bilinear_setup(u, plane.shape[0])
    j, fv = _bilinear_setup(v, plane.shape[1])
    fu, fv = fu[:, None], fv[:, None]
    return ((1 - fu) * (1 - fv) * plane[i, j] + fu * (1 - fv) * plane[i + 1, j]
            + (1 - fu) * fv * plane[i, j + 1] + fu * fv * plane[i + 1, j + 1])


def _scatter_plane(grad: np.ndarray, plane_shape, u, v, g_feat):
    i, fu = _bilinear_setup(u, plane_shape[0])
    j, fv = _bilinear_setup(v, plane_shape[1])
    fu, fv = fu[:, None], fv[:, None]
    np.add.at(grad, (i, j), (1 - fu) * (1 - fv) * g_feat)
    np.add.at(grad, (i + 1, j), fu * (1 - fv) * g_feat)
    np.add.at(grad, (i, j + 1), (1 - fu) * fv * g_feat)
    np.add.at(grad, (i + 1, j + 1), fu * fv * g_feat)


@dataclass
class QueryTape:
    coords: tuple
    samples: tuple
    fused: np.ndarray
    h: np.ndarray
    out: np.ndarray


def sample_features(field: DeformationField, positions, tau) -> np.ndarray:
    ux, uy, ut = field.grid_coords(positions, tau)
    return (sample_plane(field.plane_xy, ux, uy) * sample_plane(field.plane_xt, ux, ut)
            * sample_plane(field.plane_yt, uy, ut))


def query_raw(field: DeformationField, positions, tau) -> tuple[np.ndarray, QueryTape]:
    """Unscaled MLP outputs (K, 4 + I) and the tape for :func:`query_backward`."""
    ux, uy, ut = field.grid_coords(positions, tau)
    s_xy = sample_plane(field.plane_xy, ux, uy)
    s_xt = sample_plane(field.plane_xt, ux, ut)
    s_yt = sample_plane(field.plane_yt, uy, ut)
    fused = s_xy * s_xt * s_yt
    h = np.tanh(fused @ field.w1 + field.b1)
    out = h @ field.w2 + field.b2
    return out, QueryTape((ux, uy, ut), (s_xy, s_xt, s_yt), fused, h, out)


def split_output(field: DeformationField, out: np.ndarray) -> DeformationDelta:
    return DeformationDelta(out[:, 0:2] * field.position_scale, out[:, 2:4].copy(),
                            out[:, 4:].copy())


def query(field: DeformationField, positions, tau) -> tuple[DeformationDelta, QueryTape]:
    out, tape = query_raw(field, positions, tau)
    return split_output(field, out), tape


def query_backward(field: DeformationField, tape: QueryTape, g_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the field parameters from gradients on the raw outputs."""
    g_w2 = tape.h.T @ g_out
    g_b2 = g_out.sum(axis=0)
    g_z = (g_out @ field.w2.T) * (1.0 - tape.h ** 2)
    g_w1 = tape.fused.T @ g_z
    g_b1 = g_z.sum(axis=0)
    g_fused = g_z @ field.w1.T
    s_xy, s_xt, s_yt = tape.samples
    ux, uy, ut = tape.coords
    g_xy = np.zeros_like(field.plane_xy)
    g_xt = np.zeros_like(field.plane_xt)
    g_yt = np.zeros_like(field.plane_yt)
    _scatter_plane(g_xy, g_xy.shape, ux, uy, g_fused * s_xt * s_yt)
    _scatter_plane(g_xt, g_xt.shape, ux, ut, g_fused * s_xy * s_yt)
    _scatter_plane(g_yt, g_yt.shape, uy, ut, g_fused * s_xy * s_xt)
    return {"deform.plane_xy": g_xy, "deform.plane_xt": g_xt, "deform.plane_yt": g_yt,
            "deform.w1": g_w1, "deform.b1": g_b1, "deform.w2": g_w2, "deform.b2": g_b2}


def delta_to_raw_grad(field: DeformationField, g_dpos, g_dscale, g_dopacity) -> np.ndarray:
    return np.concatenate([g_dpos * field.position_scale, g_dscale, g_dopacity], axis=1)


def apply(anchor, delta: DeformationDelta):
    """Deformed copy of a single :class:`~morel.scene.AnchorPoint`.

    Features are untouched; position and log-scaling shift by the delta and
    the per-slot opacity-logit offsets accumulate in ``opacity_delta``.
    """
    dpos = np.asarray(delta.dpos, dtype=np.float64).reshape(2)
    dscale = np.asarray(delta.dscale, dtype=np.float64).reshape(2)
    dop = np.asarray(delta.dopacity, dtype=np.float64).reshape(-1)
    base = anchor.opacity_delta if anchor.opacity_delta is not None else np.zeros_like(dop)
    return replace(anchor, position=anchor.position + dpos,
                   scaling=np.exp(np.log(anchor.scaling) + dscale),
                   opacity_delta=base + dop)
