"""Synthetic multi-view video of animated Gaussians.

Ground truth is rendered with this package's own rasterizer from explicit
per-frame Gaussian states, so a perfectly fitted model can reproduce it.
The scene lives in ``[0, width] x [0, height]`` scene units (one unit per
pixel of the reference view); static Gaussians sit behind a few moving
actors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import InvalidInput, NotFound
from .imageio import read_ppm, to_float, to_uint8, write_ppm
from .raster import ViewTransform, render
from .scene import GaussianSet, voxel_cells
from .store import _pack_sections, _unpack_sections


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    frames: int = 240
    fps: int = 30
    width: int = 128
    height: int = 128
    views: int = 4
    n_static: int = 40
    static_sigma: tuple = (2.5, 6.0)
    static_opacity: tuple = (0.7, 0.95)
    # how many of the standard actors to include: circular, linear, transient
    n_actors: int = 3
    actor_sigma: float = 4.5
    circle_center: tuple = (38.0, 88.0)
    circle_radius: float = 16.0
    circle_period: int = 240
    linear_start: tuple = (15.0, 24.0)
    linear_velocity: tuple = (0.4, 0.05)
    transient_start: tuple = (90.0, 90.0)
    transient_velocity: tuple = (-0.2, 0.1)
    transient_window: tuple = (100, 180)

    def __post_init__(self):
        if self.frames < 1 or self.views < 1 or self.width < 16 or self.height < 16:
            raise InvalidInput("scene needs >= 1 frame, >= 1 view and at least 16x16 pixels")
        if not 0 <= self.n_actors <= 3:
            raise InvalidInput("n_actors must be between 0 and 3")

    @property
    def bbox(self) -> np.ndarray:
        return np.array([0.0, 0.0, float(self.width), float(self.height)])


def load_spec(path) -> SceneSpec:
    return config_mod.apply(SceneSpec(), config_mod.load_flat(path), "scene.")


def make_views(spec: SceneSpec) -> list[ViewTransform]:
    """View 0 is the identity; the rest rotate/scale/shift about the centre."""
    rng = np.random.default_rng([spec.seed, 7])
    center = np.array([spec.width, spec.height], dtype=np.float64) / 2.0
    views = [ViewTransform.identity(spec.width, spec.height)]
    for _ in range(spec.views - 1):
        ang = np.deg2rad(rng.uniform(-6.0, 6.0))
        s = rng.uniform(0.93, 1.05)
        lin = s * np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        shift = rng.uniform(-4.0, 4.0, size=2)
        views.append(ViewTransform(lin, center - lin @ center + shift, spec.width, spec.height))
    return views


@dataclass
class OracleScene:
    """Explicit Gaussian states; actors are re-evaluated per frame."""

    spec: SceneSpec
    static: GaussianSet
    actor_color: np.ndarray  # (A, 3)
    actor_opacity: np.ndarray  # (A,)

    @property
    def n_actors(self) -> int:
        return len(self.actor_opacity)

    def actor_centers(self, t: int) -> np.ndarray:
        sp = self.spec
        out = []
        if self.n_actors > 0:
            phase = 2.0 * np.pi * t / sp.circle_period
            out.append(np.asarray(sp.circle_center) + sp.circle_radius * np.array([np.cos(phase), np.sin(phase)]))
        if self.n_actors > 1:
            out.append(np.asarray(sp.linear_start) + t * np.asarray(sp.linear_velocity))
        if self.n_actors > 2:
            dt = t - sp.transient_window[0]
            out.append(np.asarray(sp.transient_start) + dt * np.asarray(sp.transient_velocity))
        return np.asarray(out, dtype=np.float64).reshape(-1, 2)

    def actor_visible(self, t: int) -> np.ndarray:
        vis = np.ones(self.n_actors, dtype=bool)
        if self.n_actors > 2:
            t0, t1 = self.spec.transient_window
            vis[2] = t0 <= t < t1
        return vis

    def state(self, t: int) -> GaussianSet:
        """All Gaussians at frame ``t``; hidden actors have opacity 0."""
        a = self.n_actors
        sig = self.spec.actor_sigma
        actors = GaussianSet(
            center=self.actor_centers(t),
            cov=np.broadcast_to(np.eye(2) * sig * sig, (a, 2, 2)).copy(),
            color=self.actor_color.copy(),
            opacity=np.where(self.actor_visible(t), self.actor_opacity, 0.0),
            depth=np.arange(a, dtype=np.float64) * 0.01,
        )
        return GaussianSet.concat([actors, self.static])


def build_oracle(spec: SceneSpec) -> OracleScene:
    rng = np.random.default_rng([spec.seed, 1])
    w, h = spec.width, spec.height
    probe = OracleScene(spec, GaussianSet.empty(), np.zeros((spec.n_actors, 3)), np.zeros(spec.n_actors))
    # keep static blobs off the actor paths so occlusions stay partial
    path = np.concatenate([probe.actor_centers(t) for t in range(0, spec.frames, 4)] or [np.zeros((0, 2))])
    centers = []
    while len(centers) < spec.n_static:
        c = rng.uniform([0.08 * w, 0.08 * h], [0.92 * w, 0.92 * h])
        if len(path) and np.min(np.linalg.norm(path - c, axis=1)) < 6.0 and rng.uniform() < 0.8:
            continue
        centers.append(c)
    n = spec.n_static
    sig = rng.uniform(*spec.static_sigma, size=(n, 2))
    ang = rng.uniform(0.0, np.pi, size=n)
    rot = np.stack([np.stack([np.cos(ang), -np.sin(ang)], -1),
                    np.stack([np.sin(ang), np.cos(ang)], -1)], -2)
    cov = np.einsum("nab,nb,ncb->nac", rot, sig ** 2, rot)
    static = GaussianSet(
        center=np.asarray(centers).reshape(n, 2),
        cov=cov,
        color=rng.uniform(0.15, 0.95, size=(n, 3)),
        opacity=rng.uniform(*spec.static_opacity, size=n),
        depth=1.0 + rng.permutation(n).astype(np.float64),
    )
    palette = np.array([[0.95, 0.35, 0.2], [0.25, 0.9, 0.35], [0.3, 0.45, 0.95]])
    return OracleScene(spec, static, palette[:spec.n_actors].copy(), np.full(spec.n_actors, 0.92))


@dataclass
class Dataset:
    spec: SceneSpec
    views: list
    frames: np.ndarray  # (M, T, H, W, 3) uint8
    oracle: OracleScene

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]

    def image(self, m: int, t: int) -> np.ndarray:
        return to_float(self.frames[m, t])


def generate(spec: SceneSpec) -> Dataset:
    oracle = build_oracle(spec)
    for t in range(spec.frames):
        c = oracle.actor_centers(t)[oracle.actor_visible(t)]
        if np.any(c < 0) or np.any(c > [spec.width, spec.height]):
            raise InvalidInput(f"actor leaves the scene at frame {t}")
    views = make_views(spec)
    frames = np.empty((spec.views, spec.frames, spec.height, spec.width, 3), dtype=np.uint8)
    for t in range(spec.frames):
        state = oracle.state(t)
        for m, view in enumerate(views):
            frames[m, t] = to_uint8(render(state, view))
    return Dataset(spec, views, frames, oracle)


def sample_point_cloud(oracle: OracleScene, frames_at, per_frame: int,
                       rng: np.random.Generator, jitter: float = 0.7) -> np.ndarray:
    """Points scattered around the visible Gaussians at the given frames."""
    frames_at = list(frames_at)
    if not frames_at:
        raise InvalidInput("sample_point_cloud needs at least one frame")
    out = []
    for t in frames_at:
        state = oracle.state(int(t))
        live = np.flatnonzero(state.opacity > 0)
        pick = live[rng.integers(0, len(live), size=per_frame)]
        chol = np.linalg.cholesky(state.cov[pick])
        noise = np.einsum("nab,nb->na", chol, rng.normal(size=(per_frame, 2)))
        out.append(state.center[pick] + jitter * noise)
    return np.concatenate(out)


def voxel_decimate(points, voxel: float, max_points: int) -> tuple[np.ndarray, float]:
    """Snap points to voxel-cell centres (one per occupied cell), coarsening
    the voxel 1.5x until fewer than ``max_points`` remain.

    Returns the points and the final voxel size.
    """
    if max_points < 1:
        raise InvalidInput("max_points must be >= 1")
    if not voxel > 0:
        raise InvalidInput("voxel must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    # grid anchored at the lower corner: once the voxel outgrows the extent
    # everything shares one cell, so the loop ends for any cap >= 1
    origin = pts.min(axis=0) if len(pts) else np.zeros(2)
    while True:
        # always re-quantize the input, not the previous pass's centres
        cells = np.unique(voxel_cells(pts - origin, voxel), axis=0)
        if len(cells) < max_points:
            return origin + (cells + 0.5) * voxel, voxel
        voxel *= 1.5


# --------------------------------------------------------------------------
# On-disk layout: views/<m>/frame_<t:05>.ppm, spec.cfg, oracle.morl


def write_dataset(ds: Dataset, out_dir) -> None:
    root = Path(out_dir)
    for m in range(ds.frames.shape[0]):
        vdir = root / "views" / str(m)
        vdir.mkdir(parents=True, exist_ok=True)
        for t in range(ds.n_frames):
            write_ppm(vdir / f"frame_{t:05d}.ppm", ds.frames[m, t])
    (root / "spec.cfg").write_text(config_mod.dump(ds.spec, "scene."))
    o = ds.oracle
    meta = np.frombuffer(json.dumps({"n_actors": o.n_actors}, sort_keys=True).encode(), np.uint8)
    (root / "oracle.morl").write_bytes(_pack_sections([
        ("meta", meta), ("static.center", o.static.center), ("static.cov", o.static.cov),
        ("static.color", o.static.color), ("static.opacity", o.static.opacity),
        ("static.depth", o.static.depth), ("actor.color", o.actor_color),
        ("actor.opacity", o.actor_opacity)]))


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "spec.cfg").is_file() or not (root / "oracle.morl").is_file():
        raise NotFound(f"{root} is not a dataset directory")
    spec = load_spec(root / "spec.cfg")
    sec = _unpack_sections((root / "oracle.morl").read_bytes())
    static = GaussianSet(sec["static.center"], sec["static.cov"], sec["static.color"],
                         sec["static.opacity"], sec["static.depth"])
    oracle = OracleScene(spec, static, sec["actor.color"], sec["actor.opacity"])
    frames = np.empty((spec.views, spec.frames, spec.height, spec.width, 3), dtype=np.uint8)
    for m in range(spec.views):
        for t in range(spec.frames):
            path = root / "views" / str(m) / f"frame_{t:05d}.ppm"
            if not path.is_file():
                raise NotFound(f"missing frame {path}")
            frames[m, t] = read_ppm(path)
    return Dataset(spec, make_views(spec), frames, oracle)
