"""The four training stages: global anchors, key-frame anchors, windowed
deformation and intermediate-frame blending.

Every stage loads what it needs from the store, trains, saves and unloads,
so the residency ledger records exactly which spaces were live at once.
Each (stage, n) draws from its own generator seeded by ``[seed, stage, n]``,
which makes any stage re-runnable on its own with identical results.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import fhd
from .blend import chunk_layers, train_ifb_step
from .deform import DeformationField
from .diff import DEFAULT_LR, Adam, Layer, backward, forward, identity_regularizer, photometric_loss
from .errors import InvalidInput, LedgerViolation
from .imageio import to_uint8
from .metrics import psnr
from .scene import derive_keyframe_space, init_anchor_space
from .scenegen import Dataset, sample_point_cloud, voxel_decimate
from .store import AnchorStore, Bundle

STAGE_IDS = {"gca": 1, "kfa": 2, "pwd": 3, "ifb": 4, "naive": 5, "points": 6}


@dataclass(frozen=True)
class TrainPlan:
    frames: int = 240
    gop: int = 40
    eps: int = 2
    iters_gca: int = 3000
    iters_kfa: int = 1000
    iters_pwd: int = 2000
    iters_ifb: int = 1000

    def __post_init__(self):
        if self.gop <= 0 or self.frames <= 0 or self.eps < 0:
            raise InvalidInput("plan needs frames > 0, gop > 0 and eps >= 0")
        if min(self.iters_gca, self.iters_kfa, self.iters_pwd, self.iters_ifb) <= 0:
            raise InvalidInput("iteration counts must be positive")

    @property
    def n_keys(self) -> int:
        return math.ceil(self.frames / self.gop)

    def key_time(self, n: int) -> int:
        return n * self.gop


def window_of(kind: str, n: int, plan: TrainPlan) -> tuple[int, int]:
    """Inclusive frame range of chunk, BDW or eps window ``n``."""
    if not 0 <= n < plan.n_keys:
        raise InvalidInput(f"key index {n} outside [0, {plan.n_keys})")
    t_n, last = plan.key_time(n), plan.frames - 1
    if kind == "chunk":
        return t_n, min(t_n + plan.gop, last)
    if kind == "bdw":
        return max(0, t_n - plan.gop), min(t_n + plan.gop, last)
    if kind == "eps":
        return max(0, t_n - plan.eps), min(t_n + plan.eps, last)
    raise InvalidInput(f"unknown window kind {kind!r}")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 16
    n_offsets: int = 4
    hidden: int = 32
    grid_voxel: float = 8.0
    field_resolution: int = 16
    field_time_resolution: int = 16
    field_channels: int = 8
    field_hidden: int = 32
    position_scale: float = 10.0
    cutoff: float = 5.5


@dataclass(frozen=True)
class PointConfig:
    frames: int = 8
    per_frame: int = 600
    jitter: float = 0.7
    voxel: float = 0.01
    max_points: int = 60000


@dataclass(frozen=True)
class FhdConfig:
    enabled: bool = True
    q1: float = 0.6
    q2: float = 0.9
    grad_threshold: float = 2e-4
    opacity_threshold: float = 5e-3
    success_min: int = 50
    lambda1: float = 0.5
    lambda2: float = 0.25
    interval: int = 100
    active_until: float = 0.8

    def densify(self) -> fhd.DensifyConfig:
        return fhd.DensifyConfig(self.grad_threshold, self.opacity_threshold, self.success_min,
                                 (1.0, self.lambda1, self.lambda2), self.interval, self.active_until)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    plan: TrainPlan = TrainPlan()
    model: ModelConfig = ModelConfig()
    points: PointConfig = PointConfig()
    fhd: FhdConfig = FhdConfig()
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    decay: float = 2.0
    ssim_weight: float = 0.2
    lambda_id: float = 1e-2
    densify: bool = True
    log_interval: int = 100


def stage_rng(seed: int, stage: str, n: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, STAGE_IDS[stage], n])


class TrainLog:
    """Plain-text log: one ``key=value`` line per event."""

    def __init__(self, path: Optional[Path] = None):
        self.path = path
        self.lines: list[str] = []

    def write(self, **fields) -> None:
        parts = []
        for k, v in fields.items():
            parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
        line = " ".join(parts)
        self.lines.append(line)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")


class Trainer:
    """Runs the stages against one dataset and one store directory."""

    def __init__(self, data: Dataset, store: AnchorStore, cfg: RunConfig,
                 log: Optional[TrainLog] = None,
                 on_stage_end: Optional[Callable[[str, int], None]] = None):
        if cfg.plan.frames != data.n_frames:
            raise InvalidInput(f"plan has {cfg.plan.frames} frames, dataset has {data.n_frames}")
        self.data = data
        self.store = store
        self.cfg = cfg
        self.log = log or TrainLog(store.root / "train.log")
        self.on_stage_end = on_stage_end
        self.bbox = data.spec.bbox

    # ------------------------------------------------------------------
    # progress bookkeeping

    @property
    def _progress_path(self) -> Path:
        return self.store.root / "progress.json"

    def done_stages(self) -> list[str]:
        if not self._progress_path.is_file():
            return []
        return json.loads(self._progress_path.read_text())["done"]

    def _mark_done(self, stage: str, n: int) -> None:
        done = self.done_stages()
        done.append(f"{stage}:{n}")
        self._progress_path.write_text(json.dumps({"done": done}, indent=0) + "\n")
        if self.on_stage_end is not None:
            self.on_stage_end(stage, n)

    def _resident(self) -> str:
        keys = sorted(self.store.ledger.resident, key=str)
        return ",".join(str(k) for k in keys) or "-"

    # ------------------------------------------------------------------

    def _sample(self, rng, lo: int, hi: int) -> tuple[int, int]:
        m = int(rng.integers(self.data.frames.shape[0]))
        t = int(rng.integers(lo, hi + 1))
        return m, t

    def _step(self, layers, groups, m, t, opt, prefix, extra=None):
        view = self.data.views[m]
        image, tape = forward(layers, view, self.cfg.model.cutoff)
        target = self.data.image(m, t)
        loss, g_img = photometric_loss(image, target, self.cfg.ssim_weight)
        grads = backward(tape, g_img, groups)
        params, flat = {}, {}
        for layer, g, gr in zip(layers, grads, groups):
            pfx = prefix(layer)
            space_params = layer.space.params()
            field_params = layer.field.params() if layer.field is not None else {}
            for name, arr in {**space_params, **field_params}.items():
                if name.split(".", 1)[0] in gr:
                    params[pfx + name] = arr
                    flat[pfx + name] = g[name]
        if extra:
            for name, (arr, g) in extra.items():
                params[name] = arr
                flat[name] = flat.get(name, 0.0) + g
        opt.step(params, flat)
        return loss, image, target, grads

    def _densify(self, space, grads, j, total, rng, opt, prefix, stage, n, log_fhd=True):
        fcfg = self.cfg.fhd
        if not self.cfg.densify:
            return
        if j >= fcfg.active_until * total:
            return
        fhd.accumulate_stats(space, grads.screen, grads.visible, grads.opacity, j, total,
                             lambdas=(1.0, fcfg.lambda1, fcfg.lambda2),
                             hierarchical=fcfg.enabled)
        if (j + 1) % fcfg.interval == 0:
            report = fhd.grow_and_prune(space, fcfg.densify(), rng, step=j + 1, bbox=self.bbox)
            opt.remap(prefix, report.keep, report.appended)
            if log_fhd:
                self.log.write(stage=stage, n=n, event="densify", step=j + 1, grown=report.grown,
                               pruned=report.pruned, total=report.total)

    def _log_step(self, stage, n, j, loss, image, target):
        if (j + 1) % self.cfg.log_interval == 0:
            self.log.write(stage=stage, n=n, step=j + 1, loss=loss,
                           psnr=psnr(np.clip(image, 0, 1), target), resident=self._resident())

    # ------------------------------------------------------------------
    # stages

    def initial_points(self) -> np.ndarray:
        pc = self.cfg.points
        frames_at = np.linspace(0, self.data.n_frames - 1, pc.frames).round().astype(int)
        pts = sample_point_cloud(self.data.oracle, frames_at, pc.per_frame,
                                 stage_rng(self.cfg.seed, "points"), pc.jitter)
        return voxel_decimate(pts, pc.voxel, pc.max_points)[0]

    def train_gca(self) -> None:
        cfg, mc = self.cfg, self.cfg.model
        rng = stage_rng(cfg.seed, "gca")
        space = init_anchor_space(self.initial_points(), mc.grid_voxel, seed=cfg.seed,
                                  feature_dim=mc.feature_dim, n_offsets=mc.n_offsets,
                                  hidden=mc.hidden)
        self.store.create("global", Bundle(space), tag="gca")
        opt = Adam(dict(cfg.lr))
        layers = [Layer(space)]
        groups = [{"anchor", "decoder"}]
        for j in range(cfg.plan.iters_gca):
            m, t = self._sample(rng, 0, self.data.n_frames - 1)
            loss, image, target, _ = self._step(layers, groups, m, t, opt, lambda _: "")
            self._log_step("gca", 0, j, loss, image, target)
        thr = fhd.assign_levels(space, cfg.fhd.q1, cfg.fhd.q2)
        counts = np.bincount(space.level, minlength=3)
        self.log.write(stage="gca", event="levels", tau1=thr.tau1, tau2=thr.tau2,
                       level0=int(counts[0]), level1=int(counts[1]), level2=int(counts[2]))
        self.store.save("global", space)
        self.store.unload("global", tag="gca")
        self._mark_done("gca", 0)

    def train_kfa(self, n: int) -> None:
        cfg = self.cfg
        rng = stage_rng(cfg.seed, "kfa", n)
        glob = self.store.load("global", tag=f"kfa{n}").space
        key = derive_keyframe_space(glob, n, cfg.plan.gop)
        self.store.unload("global", tag=f"kfa{n}")
        self.store.create(n, Bundle(key), tag="kfa")
        self._check_keys(1)
        opt = Adam(dict(cfg.lr))
        lo, hi = window_of("eps", n, cfg.plan)
        total = cfg.plan.iters_kfa
        for j in range(total):
            m, t = self._sample(rng, lo, hi)
            loss, image, target, grads = self._step([Layer(key)], [{"anchor", "decoder"}], m, t,
                                                    opt, lambda _: "")
            self._densify(key, grads[0], j, total, rng, opt, "", "kfa", n)
            self._log_step("kfa", n, j, loss, image, target)
        self.store.save(n, key)
        self.store.unload(n, tag="kfa")
        self._mark_done("kfa", n)

    def new_field(self, n: int) -> DeformationField:
        mc = self.cfg.model
        rng = stage_rng(self.cfg.seed, "pwd", n)
        return DeformationField.init(self.bbox, mc.n_offsets, rng, resolution=mc.field_resolution,
                                     time_resolution=mc.field_time_resolution,
                                     channels=mc.field_channels, hidden=mc.field_hidden,
                                     position_scale=mc.position_scale, owner=n)

    def train_pwd(self, n: int) -> None:
        cfg, plan = self.cfg, self.cfg.plan
        key = self.store.load(n, tag="pwd").space
        self._check_keys(1)
        fld = self.new_field(n)
        rng = stage_rng(cfg.seed, "pwd", n + 1000)
        opt = Adam(dict(cfg.lr))
        lo, hi = window_of("bdw", n, plan)
        total = plan.iters_pwd
        groups = [{"anchor", "decoder", "deform"}]
        for j in range(total):
            m, t = self._sample(rng, lo, hi)
            tau = (t - key.t_n) / plan.gop
            extra = None
            if cfg.lambda_id > 0:
                _, g_id = identity_regularizer(fld, key.position, cfg.lambda_id)
                extra = {name: (arr, g_id[name]) for name, arr in fld.params().items()}
            loss, image, target, grads = self._step([Layer(key, fld, tau)], groups, m, t, opt,
                                                    lambda _: "", extra)
            self._densify(key, grads[0], j, total, rng, opt, "", "pwd", n)
            self._log_step("pwd", n, j, loss, image, target)
        self.store.save(n, key, fld)
        self.store.unload(n, tag="pwd")
        self._mark_done("pwd", n)

    def train_ifb(self, n: int) -> list[float]:
        cfg, plan = self.cfg, self.cfg.plan
        if n + 1 >= plan.n_keys:
            raise InvalidInput(f"chunk {n} has no successor key frame to blend with")
        a = self.store.load(n, tag="ifb")
        b = self.store.load(n + 1, tag="ifb")
        self._check_keys(2)
        rng = stage_rng(cfg.seed, "ifb", n)
        opt = Adam(dict(cfg.lr))
        lo, hi = window_of("chunk", n, plan)
        losses = []
        for j in range(plan.iters_ifb):
            m, t = self._sample(rng, lo, hi)
            layers = chunk_layers(a.space, a.field, b.space, b.field, t, plan.gop, cfg.decay)
            loss = train_ifb_step(layers, self.data.views[m], self.data.image(m, t), opt,
                                  ssim_weight=cfg.ssim_weight)
            losses.append(loss)
            if (j + 1) % cfg.log_interval == 0:
                self.log.write(stage="ifb", n=n, step=j + 1, loss=float(np.mean(losses[-cfg.log_interval:])),
                               resident=self._resident())
        self.store.save(n, a.space, a.field)
        self.store.save(n + 1, b.space, b.field)
        self.store.unload(n, tag="ifb")
        self.store.unload(n + 1, tag="ifb")
        self._mark_done("ifb", n)
        return losses

    def _check_keys(self, expected: int) -> None:
        if self.store.ledger.key_count != expected:
            raise LedgerViolation(f"expected {expected} resident key spaces, "
                                  f"found {self.store.ledger.key_count}")

    def run(self, stages=("gca", "kfa", "pwd", "ifb")) -> None:
        """Run the requested stages in order, skipping those already done."""
        done = set(self.done_stages())
        n_keys = self.cfg.plan.n_keys
        todo = []
        for stage in ("gca", "kfa", "pwd", "ifb"):
            if stage not in stages:
                continue
            count = 1 if stage == "gca" else (n_keys - 1 if stage == "ifb" else n_keys)
            todo += [(stage, n) for n in range(count)]
        for stage, n in todo:
            if f"{stage}:{n}" in done:
                continue
            if stage == "gca":
                self.train_gca()
            else:
                getattr(self, f"train_{stage}")(n)


# --------------------------------------------------------------------------
# Contamination experiment


def naive_chunk_retrain(data: Dataset, source: AnchorStore, scratch: AnchorStore, cfg: RunConfig,
                        n: int, steps: int) -> None:
    """Re-train the shared key-frame space ``n`` on chunk ``n`` without windows.

    This is the chunk-wise strategy PWD avoids: key space ``n`` also serves
    the previous chunk through its backward direction, yet here its anchors,
    decoder and field are updated (with densification) for the frames of the
    next chunk only. The result is written to ``scratch``.
    """
    plan = cfg.plan
    trainer = Trainer(data, scratch, dataclasses.replace(cfg), TrainLog(None))
    a = source.load(n, tag="naive")
    b = source.load(n + 1, tag="naive")
    rng = stage_rng(cfg.seed, "naive", n)
    opt = Adam(dict(cfg.lr))
    lo, hi = window_of("chunk", n, plan)
    groups = [{"anchor", "decoder", "deform", "blend"}, {"blend"}]
    for j in range(steps):
        m, t = trainer._sample(rng, lo, hi)
        layers = chunk_layers(a.space, a.field, b.space, b.field, t, plan.gop, cfg.decay)
        _, _, _, grads = trainer._step(layers, groups, m, t, opt, lambda l: f"kfa{l.space.n}/")
        trainer._densify(a.space, grads[0], j, steps, rng, opt, f"kfa{n}/", "naive", n, False)
    scratch.save(n, a.space, a.field)
    source.unload(n, tag="naive")
    source.unload(n + 1, tag="naive")


def render_chunk_psnr(data: Dataset, bundles: dict, cfg: RunConfig, n: int,
                      views=None, stride: int = 1) -> float:
    """Mean PSNR over the interior frames of chunk ``n`` rendered by blending."""
    from .blend import blend_frame

    plan = cfg.plan
    lo, hi = window_of("chunk", n, plan)
    a, b = bundles[n], bundles.get(n + 1)
    views = range(data.frames.shape[0]) if views is None else views
    scores = []
    for t in range(lo, hi, stride):
        for m in views:
            img = blend_frame(a.space, a.field, b.space if b else None, b.field if b else None,
                              t, plan.gop, data.views[m], decay=cfg.decay, cutoff=cfg.model.cutoff)
            scores.append(psnr(to_uint8(img) / 255.0, data.image(m, t)))
    return float(np.mean(scores))
