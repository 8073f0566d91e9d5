"""Feature-variance-guided hierarchical densification.

Anchors are split into three frequency levels once, from the variance of
their trained features. During later stages each anchor's screen-space
gradient statistic is down-weighted by a level-dependent factor that ramps
to 1 over the stage, so high-variance anchors grow children later and less.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .scene import DECAY_RAW_INIT, AnchorSpace, voxel_cells


@dataclass(frozen=True)
class LevelThresholds:
    tau1: float
    tau2: float
    q1: float = 0.6
    q2: float = 0.9


@dataclass(frozen=True)
class DensifyConfig:
    grad_threshold: float = 2e-4
    opacity_threshold: float = 5e-3
    success_min: int = 50
    level_lambdas: tuple = (1.0, 0.5, 0.25)
    interval: int = 100
    # growth and pruning stop after this fraction of a stage
    active_until: float = 0.8
    child_noise: float = 0.01

    def __post_init__(self):
        if not (self.grad_threshold > 0 and self.opacity_threshold > 0):
            raise InvalidInput("densification thresholds must be positive")
        if any(not 0 < lam <= 1 for lam in self.level_lambdas):
            raise InvalidInput("level factors must lie in (0, 1]")


def rank_cutoff(values: np.ndarray, q: float) -> float:
    """Order statistic with exactly ``floor(q * n)`` samples ranked below it.

    Together with the strict ``<`` split this puts ``floor(q * n)`` anchors
    under the cutoff whenever the values are distinct.
    """
    s = np.sort(np.asarray(values, dtype=np.float64))
    return float(s[min(int(np.floor(q * len(s))), len(s) - 1)])


def assign_levels(space: AnchorSpace, q1: float = 0.6, q2: float = 0.9) -> LevelThresholds:
    """Tag every anchor of ``space`` with level 0, 1 or 2 in place."""
    if len(space) < 3:
        raise InvalidInput("level assignment needs at least 3 anchors")
    if not 0 < q1 < q2 < 1:
        raise InvalidInput("quantile fractions must satisfy 0 < q1 < q2 < 1")
    var = space.feature.var(axis=1)
    tau1, tau2 = rank_cutoff(var, q1), rank_cutoff(var, q2)
    space.level[:] = levels_from_variance(var, tau1, tau2)
    return LevelThresholds(tau1, tau2, q1, q2)


def levels_from_variance(var: np.ndarray, tau1: float, tau2: float) -> np.ndarray:
    var = np.asarray(var)
    return np.where(var < tau1, 0, np.where(var < tau2, 1, 2)).astype(np.int64)


def level_weight(level, j: int, total: int, lambdas=(1.0, 0.5, 0.25)):
    if total <= 0 or not 0 <= j <= total:
        raise InvalidInput("level weight needs 0 <= j <= J and J > 0")
    eta = j / total
    lam = np.asarray(lambdas, dtype=np.float64)[np.asarray(level)]
    return np.where(np.asarray(level) == 0, 1.0, lam + (1.0 - lam) * eta)


def accumulate_stats(space: AnchorSpace, screen_grad: np.ndarray, visible: np.ndarray,
                     opacity: np.ndarray, j: int, total: int, *,
                     lambdas=(1.0, 0.5, 0.25), hierarchical: bool = True) -> None:
    """Fold one step's per-Gaussian statistics into the anchor accumulators.

    ``screen_grad`` is (K, I, 2), ``visible`` and ``opacity`` are (K, I).
    With ``hierarchical`` off every anchor is weighted 1.
    """
    norms = np.linalg.norm(screen_grad, axis=-1) * visible
    seen = visible.any(axis=1)
    if hierarchical:
        w = level_weight(np.maximum(space.level, 0), j, total, lambdas)
    else:
        w = np.ones(len(space))
    space.accum_grad += np.where(seen, w * norms.sum(axis=1), 0.0)
    space.slot_grad += w[:, None] * norms
    space.accum_count += seen.astype(space.accum_count.dtype)
    vis_opacity = np.where(visible, opacity, 0.0).max(axis=1)
    space.opacity_stat[:] = np.where(seen, np.maximum(space.opacity_stat, vis_opacity),
                                     space.opacity_stat)


@dataclass
class DensifyReport:
    step: int
    grown: int
    pruned: int
    total: int
    keep: np.ndarray
    appended: int

    def line(self) -> str:
        return f"densify step={self.step} grown={self.grown} pruned={self.pruned} total={self.total}"


def grow_and_prune(space: AnchorSpace, cfg: DensifyConfig, rng: np.random.Generator, *,
                   step: int = 0, bbox=None) -> DensifyReport:
    """Grow children next to high-gradient anchors and drop faint ones.

    Candidate cells come from the current centres of Gaussians that carried
    gradient; cells already holding an anchor (or outside ``bbox``) are
    skipped and each new cell is filled once. Statistics are reset.
    """
    k = len(space)
    count = np.maximum(space.accum_count, 1)
    avg = np.where(space.accum_count > 0, space.accum_grad / count, 0.0)
    grow_from = np.flatnonzero(avg > cfg.grad_threshold)

    centers = space.position[:, None, :] + space.scaling[:, None, :] * space.offsets
    occupied = {tuple(c) for c in space.cells()}
    new_cells, parents = [], []
    for a in grow_from:
        bearing = space.slot_grad[a] > 0
        for cell in voxel_cells(centers[a][bearing], space.grid_voxel):
            cell = tuple(int(v) for v in cell)
            if cell in occupied:
                continue
            mid = (np.asarray(cell, dtype=np.float64) + 0.5) * space.grid_voxel
            if bbox is not None and not (bbox[0] <= mid[0] <= bbox[2] and bbox[1] <= mid[1] <= bbox[3]):
                continue
            occupied.add(cell)
            new_cells.append(mid)
            parents.append(a)

    prune = (space.accum_count >= cfg.success_min) & (space.opacity_stat < cfg.opacity_threshold)
    keep = np.flatnonzero(~prune)
    parents = np.asarray(parents, dtype=np.int64)
    m = len(parents)
    children = {
        "position": np.asarray(new_cells, dtype=np.float64).reshape(m, 2),
        "feature": space.feature[parents] + rng.normal(0.0, cfg.child_noise, size=(m, space.feature_dim)),
        "log_scaling": space.log_scaling[parents].copy(),
        "offsets": space.offsets[parents].copy(),
        "level": space.level[parents].copy(),
        "fw_offset": np.zeros(m),
        "fw_decay_raw": np.full(m, DECAY_RAW_INIT),
        "bw_offset": np.zeros(m),
        "bw_decay_raw": np.full(m, DECAY_RAW_INIT),
        "accum_grad": np.zeros(m),
        "accum_count": np.zeros(m, dtype=space.accum_count.dtype),
        "opacity_stat": np.zeros(m),
        "slot_grad": np.zeros((m, space.n_offsets)),
    }
    space.select(keep)
    space.append(**children)
    space.reset_stats()
    return DensifyReport(step, m, k - len(keep), len(space), keep, m)
