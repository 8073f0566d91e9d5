"""Image quality and temporal-consistency metrics.

SSIM is computed on luminance (RGB mean) with an 11x11 Gaussian window
(sigma 1.5) over the valid region. Optical flow is a dense pyramidal
Lucas-Kanade estimate (3 levels, 7x7 window); tOF and OFps are built on it,
so their values are only comparable within this package.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import InvalidInput

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
_RADIUS = 5
_SIGMA = 1.5


def _kernel() -> np.ndarray:
    x = np.arange(-_RADIUS, _RADIUS + 1, dtype=np.float64)
    k = np.exp(-x ** 2 / (2 * _SIGMA ** 2))
    return k / k.sum()


_KERNEL = _kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    # zero padding keeps the operator symmetric, so it is its own adjoint
    out = ndimage.correlate1d(img, _KERNEL, axis=0, mode="constant")
    return ndimage.correlate1d(out, _KERNEL, axis=1, mode="constant")


def _valid(img: np.ndarray) -> np.ndarray:
    return img[_RADIUS:-_RADIUS, _RADIUS:-_RADIUS]


def _luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def psnr(a, b) -> float:
    """PSNR in dB on the [0, 1] scale; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInput("psnr: shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _ssim_terms(a, b):
    mu_a, mu_b = _valid(_blur(a)), _valid(_blur(b))
    f_aa, f_bb, f_ab = _valid(_blur(a * a)), _valid(_blur(b * b)), _valid(_blur(a * b))
    a1 = 2 * mu_a * mu_b + SSIM_C1
    a2 = 2 * (f_ab - mu_a * mu_b) + SSIM_C2
    b1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    b2 = (f_aa - mu_a ** 2) + (f_bb - mu_b ** 2) + SSIM_C2
    return mu_a, mu_b, a1, a2, b1, b2


def ssim(a, b) -> float:
    a, b = _luma(a), _luma(b)
    if a.shape != b.shape:
        raise InvalidInput("ssim: shape mismatch")
    if min(a.shape) <= 2 * _RADIUS:
        raise InvalidInput("ssim: image smaller than the window")
    _, _, a1, a2, b1, b2 = _ssim_terms(a, b)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_with_grad(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to ``pred`` (same shape as ``pred``)."""
    color = pred.ndim == 3
    a, b = _luma(pred), _luma(target)
    mu_a, mu_b, a1, a2, b1, b2 = _ssim_terms(a, b)
    smap = a1 * a2 / (b1 * b2)
    value = float(np.mean(smap))
    scale = 1.0 / smap.size
    g_mu = scale * ((2 * mu_b * a2 - 2 * mu_b * a1) / (b1 * b2)
                    - smap * (2 * mu_a / b1 - 2 * mu_a / b2))
    g_ab = scale * 2 * a1 / (b1 * b2)
    g_aa = scale * (-smap / b2)

    def adjoint(g):
        full = np.zeros_like(a)
        _valid(full)[...] = g
        return _blur(full)

    grad = adjoint(g_mu) + 2 * a * adjoint(g_aa) + b * adjoint(g_ab)
    if color:
        grad = np.repeat(grad[..., None] / pred.shape[2], pred.shape[2], axis=2)
    return value, grad


# --------------------------------------------------------------------------
# Optical flow


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [img]
    for _ in range(levels - 1):
        pyr.append(ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")[::2, ::2])
    return pyr


def _resize_flow(flow: np.ndarray, shape) -> np.ndarray:
    factors = (shape[0] / flow.shape[0], shape[1] / flow.shape[1])
    out = np.stack([ndimage.zoom(flow[..., c], factors, order=1, mode="nearest", grid_mode=True)
                    for c in range(2)], -1)
    out[..., 0] *= factors[1]
    out[..., 1] *= factors[0]
    return out


def flow_lk(prev, nxt, *, levels: int = 3, window: int = 7, iterations: int = 5,
            det_eps: float = 1e-8) -> np.ndarray:
    """Dense pyramidal Lucas-Kanade flow from ``prev`` to ``nxt``, shape (H, W, 2).

    Flow is zero where the windowed structure tensor is degenerate and its
    magnitude is capped at the window radius, so unmatched texture (noise,
    popping content) cannot produce runaway vectors.
    """
    a, b = _luma(prev), _luma(nxt)
    if a.shape != b.shape:
        raise InvalidInput("flow_lk: shape mismatch")
    pa, pb = _pyramid(a, levels), _pyramid(b, levels)
    flow = np.zeros(pa[-1].shape + (2,))
    radius = window // 2
    det = None
    for lvl in range(levels - 1, -1, -1):
        i1, i2 = pa[lvl], pb[lvl]
        if flow.shape[:2] != i1.shape:
            flow = _resize_flow(flow, i1.shape)
        gy, gx = np.gradient(i1)
        sxx = ndimage.uniform_filter(gx * gx, window, mode="nearest")
        syy = ndimage.uniform_filter(gy * gy, window, mode="nearest")
        sxy = ndimage.uniform_filter(gx * gy, window, mode="nearest")
        det = sxx * syy - sxy * sxy
        ok = det > det_eps
        safe = np.where(ok, det, 1.0)
        ys, xs = np.mgrid[0:i1.shape[0], 0:i1.shape[1]].astype(np.float64)
        for _ in range(iterations):
            warped = ndimage.map_coordinates(i2, [ys + flow[..., 1], xs + flow[..., 0]],
                                             order=1, mode="nearest")
            it = warped - i1
            sxt = ndimage.uniform_filter(gx * it, window, mode="nearest")
            syt = ndimage.uniform_filter(gy * it, window, mode="nearest")
            du = np.where(ok, -(syy * sxt - sxy * syt) / safe, 0.0)
            dv = np.where(ok, -(sxx * syt - sxy * sxt) / safe, 0.0)
            step = np.hypot(du, dv)
            shrink = np.minimum(1.0, radius / np.maximum(step, 1e-12))
            flow[..., 0] += du * shrink
            flow[..., 1] += dv * shrink
    flow[~(det > det_eps)] = 0.0
    cap = float(radius)
    mag = np.hypot(flow[..., 0], flow[..., 1])
    flow *= np.minimum(1.0, cap / np.maximum(mag, 1e-12))[..., None]
    return flow


def tof(rendered, gt) -> float:
    """Mean L1 distance between consecutive-frame flows of two sequences."""
    if len(rendered) != len(gt) or len(gt) < 2:
        raise InvalidInput("tof: sequences must have equal length >= 2")
    total = 0.0
    for t in range(len(gt) - 1):
        f_gt = flow_lk(gt[t], gt[t + 1])
        f_re = flow_lk(rendered[t], rendered[t + 1])
        total += float(np.mean(np.abs(f_gt - f_re).sum(axis=-1)))
    return total / (len(gt) - 1)


def ofps(seq, fps: int, mag_threshold: float = 0.5) -> float:
    """Average above-threshold flow magnitude over one-second windows.

    A window with no pixel above threshold contributes 0.
    """
    if len(seq) < 2:
        return 0.0
    mags = [np.hypot(*np.moveaxis(flow_lk(seq[t], seq[t + 1]), -1, 0))
            for t in range(len(seq) - 1)]
    values = []
    for start in range(0, len(mags), fps):
        window = np.concatenate([m.ravel() for m in mags[start:start + fps]])
        moving = window[window > mag_threshold]
        values.append(float(moving.mean()) if moving.size else 0.0)
    return float(np.mean(values))


def temporal_profile(seq, row: int) -> np.ndarray:
    """Stack scanline ``row`` of every frame into a (T, W[, 3]) image."""
    return np.stack([np.asarray(frame)[row] for frame in seq])


def row_jumps(profile: np.ndarray) -> np.ndarray:
    """Mean absolute difference between consecutive profile rows, (T-1,)."""
    d = np.abs(np.diff(np.asarray(profile, dtype=np.float64), axis=0))
    return d.reshape(d.shape[0], -1).mean(axis=1)
