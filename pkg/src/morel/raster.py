"""Differentiable 2D Gaussian rasterization with ordered alpha compositing.

Gaussians are composited front to back in ascending ``depth`` order:

    C(p) = sum_i c_i a_i(p) prod_{j<i} (1 - a_j(p)),
    a_i(p) = opacity_i * exp(-0.5 (p - m_i)^T S_i^-1 (p - m_i))

with pixel ``(x, y)`` sampled at integer image coordinates. Each Gaussian
only touches pixels inside its culling box, which is sized so that the
dropped tail is below ``exp(-cutoff**2 / 2)`` of the peak.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import InvalidInput
from .scene import GaussianSet

# exp(-5.5**2 / 2) ~ 2.7e-7 per Gaussian
DEFAULT_CUTOFF = 5.5


@dataclass(frozen=True)
class ViewTransform:
    """Affine map from scene coordinates to image pixels."""

    linear: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=np.float64).reshape(2, 2)
        if abs(np.linalg.det(lin)) <= 1e-8:
            raise InvalidInput("view transform is singular")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(2))

    @classmethod
    def identity(cls, width: int, height: int) -> "ViewTransform":
        return cls(np.eye(2), np.zeros(2), width, height)

    @property
    def code(self) -> np.ndarray:
        """Normalized translation, fed to the decoders as a view code."""
        return self.translation / np.array([self.width, self.height], dtype=np.float64)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.linear.T + self.translation

    def shifted(self, v) -> "ViewTransform":
        """The view that sees the scene translated by ``v`` at the same place."""
        return ViewTransform(self.linear, self.translation - self.linear @ np.asarray(v, float),
                             self.width, self.height)

    def scaled(self, factor: float) -> "ViewTransform":
        return ViewTransform(self.linear * factor, self.translation * factor,
                             int(round(self.width * factor)), int(round(self.height * factor)))


@numba.njit(cache=True)
def _forward_kernel(means, conics, colors, opac, bbox, order, offsets, cutoff2,
                    image, trans, tbuf):
    for idx in range(order.shape[0]):
        g = order[idx]
        x0, y0, x1, y1 = bbox[g, 0], bbox[g, 1], bbox[g, 2], bbox[g, 3]
        if x1 < x0 or y1 < y0:
            continue
        bw = x1 - x0 + 1
        base = offsets[g]
        mx, my = means[g, 0], means[g, 1]
        ca, cb, cc = conics[g, 0], conics[g, 1], conics[g, 2]
        o = opac[g]
        for y in range(y0, y1 + 1):
            dy = y - my
            row = base + (y - y0) * bw - x0
            for x in range(x0, x1 + 1):
                t = trans[y, x]
                tbuf[row + x] = t
                dx = x - mx
                q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                if q > cutoff2:
                    continue
                a = o * np.exp(-0.5 * q)
                w = a * t
                image[y, x, 0] += colors[g, 0] * w
                image[y, x, 1] += colors[g, 1] * w
                image[y, x, 2] += colors[g, 2] * w
                trans[y, x] = t * (1.0 - a)


@numba.njit(cache=True)
def _backward_kernel(means, conics, colors, opac, bbox, order, offsets, cutoff2,
                     tbuf, grad_image, g_means, g_conics, g_colors, g_opac):
    height, width = grad_image.shape[0], grad_image.shape[1]
    # colour composited behind the current Gaussian, relative to its own
    # transmittance after it; avoids dividing by (1 - a)
    behind = np.zeros((height, width, 3))
    for idx in range(order.shape[0] - 1, -1, -1):
        g = order[idx]
        x0, y0, x1, y1 = bbox[g, 0], bbox[g, 1], bbox[g, 2], bbox[g, 3]
        if x1 < x0 or y1 < y0:
            continue
        bw = x1 - x0 + 1
        base = offsets[g]
        mx, my = means[g, 0], means[g, 1]
        ca, cb, cc = conics[g, 0], conics[g, 1], conics[g, 2]
        o = opac[g]
        c0, c1, c2 = colors[g, 0], colors[g, 1], colors[g, 2]
        gm0 = 0.0
        gm1 = 0.0
        gca = 0.0
        gcb = 0.0
        gcc = 0.0
        gc0 = 0.0
        gc1 = 0.0
        gc2 = 0.0
        go = 0.0
        for y in range(y0, y1 + 1):
            dy = y - my
            row = base + (y - y0) * bw - x0
            for x in range(x0, x1 + 1):
                dx = x - mx
                q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                if q > cutoff2:
                    continue
                e = np.exp(-0.5 * q)
                a = o * e
                t = tbuf[row + x]
                p0, p1, p2 = grad_image[y, x, 0], grad_image[y, x, 1], grad_image[y, x, 2]
                w = a * t
                gc0 += p0 * w
                gc1 += p1 * w
                gc2 += p2 * w
                b0, b1, b2 = behind[y, x, 0], behind[y, x, 1], behind[y, x, 2]
                g_a = t * (p0 * (c0 - b0) + p1 * (c1 - b1) + p2 * (c2 - b2))
                behind[y, x, 0] = c0 * a + (1.0 - a) * b0
                behind[y, x, 1] = c1 * a + (1.0 - a) * b1
                behind[y, x, 2] = c2 * a + (1.0 - a) * b2
                go += g_a * e
                g_q = -0.5 * g_a * a
                gca += g_q * dx * dx
                gcb += g_q * 2.0 * dx * dy
                gcc += g_q * dy * dy
                gm0 += -2.0 * g_q * (ca * dx + cb * dy)
                gm1 += -2.0 * g_q * (cb * dx + cc * dy)
        g_means[g, 0] += gm0
        g_means[g, 1] += gm1
        g_conics[g, 0] += gca
        g_conics[g, 1] += gcb
        g_conics[g, 2] += gcc
        g_colors[g, 0] += gc0
        g_colors[g, 1] += gc1
        g_colors[g, 2] += gc2
        g_opac[g] += go


@dataclass
class RasterTape:
    gaussians: GaussianSet
    view: ViewTransform
    means: np.ndarray
    cov_img: np.ndarray
    conics: np.ndarray
    bbox: np.ndarray
    order: np.ndarray
    offsets: np.ndarray
    tbuf: np.ndarray
    cutoff: float
    image: np.ndarray

    @property
    def visible(self) -> np.ndarray:
        """Per-Gaussian flag: footprint intersects the image."""
        return (self.bbox[:, 2] >= self.bbox[:, 0]) & (self.bbox[:, 3] >= self.bbox[:, 1])


@dataclass
class GaussianGrads:
    center: np.ndarray  # scene-space centers
    cov: np.ndarray  # scene-space covariances
    color: np.ndarray
    opacity: np.ndarray
    mean_image: np.ndarray  # image-space centers, used by densification


def _project(gs: GaussianSet, view: ViewTransform, cutoff: float):
    lin = view.linear
    means = gs.center @ lin.T + view.translation
    cov_img = np.einsum("ab,gbc,dc->gad", lin, gs.cov, lin)
    sxx, sxy, syy = cov_img[:, 0, 0], cov_img[:, 0, 1], cov_img[:, 1, 1]
    det = sxx * syy - sxy * sxy
    if np.any(~np.isfinite(det)) or np.any(det <= 0.0) or np.any(sxx <= 0.0):
        raise InvalidInput("covariance is not positive definite")
    conics = np.stack([syy / det, -sxy / det, sxx / det], axis=1)
    rx = cutoff * np.sqrt(sxx)
    ry = cutoff * np.sqrt(syy)
    w, h = view.width, view.height
    x0 = np.maximum(np.ceil(means[:, 0] - rx), 0)
    x1 = np.minimum(np.floor(means[:, 0] + rx), w - 1)
    y0 = np.maximum(np.ceil(means[:, 1] - ry), 0)
    y1 = np.minimum(np.floor(means[:, 1] + ry), h - 1)
    # clip before the int cast so far-away Gaussians cannot overflow
    lo, hi = -1.0, float(max(w, h)) + 1.0
    bbox = np.clip(np.stack([x0, y0, x1, y1], axis=1), lo, hi).astype(np.int64)
    empty = (bbox[:, 2] < bbox[:, 0]) | (bbox[:, 3] < bbox[:, 1])
    bbox[empty] = (0, 0, -1, -1)
    return means, cov_img, conics, bbox


def render_with_tape(gaussians, view: ViewTransform,
                     cutoff: float = DEFAULT_CUTOFF) -> tuple[np.ndarray, RasterTape]:
    gs = gaussians if isinstance(gaussians, GaussianSet) else GaussianSet.from_list(gaussians)
    means, cov_img, conics, bbox = _project(gs, view, cutoff)
    order = np.argsort(gs.depth, kind="stable").astype(np.int64)
    area = (bbox[:, 2] - bbox[:, 0] + 1) * (bbox[:, 3] - bbox[:, 1] + 1)
    area = np.where((bbox[:, 2] >= bbox[:, 0]), area, 0)
    offsets = np.zeros(len(gs), dtype=np.int64)
    if len(gs):
        offsets[1:] = np.cumsum(area)[:-1]
    tbuf = np.empty(int(area.sum()))
    image = np.zeros((view.height, view.width, 3))
    trans = np.ones((view.height, view.width))
    if len(gs):
        _forward_kernel(means, conics, np.ascontiguousarray(gs.color), np.ascontiguousarray(gs.opacity),
                        bbox, order, offsets, cutoff * cutoff, image, trans, tbuf)
    tape = RasterTape(gs, view, means, cov_img, conics, bbox, order, offsets, tbuf, cutoff, image)
    return image, tape


def render(gaussians, view: ViewTransform, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """Render onto a black background. Values are unclamped."""
    return render_with_tape(gaussians, view, cutoff)[0]


def render_backward(tape: RasterTape, grad_image: np.ndarray) -> GaussianGrads:
    gs = tape.gaussians
    n = len(gs)
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad_image.shape != tape.image.shape:
        raise InvalidInput("image gradient shape does not match the rendered image")
    g_means = np.zeros((n, 2))
    g_conics = np.zeros((n, 3))
    g_colors = np.zeros((n, 3))
    g_opac = np.zeros(n)
    if n:
        _backward_kernel(tape.means, tape.conics, np.ascontiguousarray(gs.color),
                         np.ascontiguousarray(gs.opacity), tape.bbox, tape.order, tape.offsets,
                         tape.cutoff ** 2, tape.tbuf, grad_image, g_means, g_conics, g_colors, g_opac)
    # conic (A, B, C) stands for [[A, B], [B, C]] = inverse image covariance
    g_conic_mat = np.empty((n, 2, 2))
    g_conic_mat[:, 0, 0] = g_conics[:, 0]
    g_conic_mat[:, 0, 1] = g_conic_mat[:, 1, 0] = 0.5 * g_conics[:, 1]
    g_conic_mat[:, 1, 1] = g_conics[:, 2]
    inv = np.empty((n, 2, 2))
    inv[:, 0, 0] = tape.conics[:, 0]
    inv[:, 0, 1] = inv[:, 1, 0] = tape.conics[:, 1]
    inv[:, 1, 1] = tape.conics[:, 2]
    g_cov_img = -np.einsum("gab,gbc,gcd->gad", inv, g_conic_mat, inv)
    lin = tape.view.linear
    g_cov = np.einsum("ba,gbc,cd->gad", lin, g_cov_img, lin)
    g_center = g_means @ lin
    return GaussianGrads(g_center, g_cov, g_colors, g_opac, g_means)
