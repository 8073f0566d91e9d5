"""Random-access rendering with on-demand loading of key-frame pairs.

Frame ``t`` is drawn from the pair ``(n, min(n + 1, N - 1))`` with
``n = t // GOP``. The resident pair is kept until a frame needs a different
one; then both outgoing bundles are unloaded before the new pair is loaded.
A frame exactly on a key frame belongs to the chunk that starts there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .blend import DEFAULT_DECAY, blend_frame
from .diff import Layer, forward
from .errors import InvalidInput
from .imageio import to_uint8, write_ppm
from .metrics import psnr
from .raster import DEFAULT_CUTOFF
from .store import AnchorStore


def required_anchors(t: int, gop: int, total: int) -> tuple[int, int]:
    if not 0 <= t < total:
        raise InvalidInput(f"frame {t} outside [0, {total})")
    n_keys = math.ceil(total / gop)
    n = t // gop
    return n, min(n + 1, n_keys - 1)


@dataclass
class FrameRecord:
    t: int
    file: str
    psnr: Optional[float]
    resident: tuple


class OnDemandRenderer:
    def __init__(self, store: AnchorStore, gop: int, total: int, *,
                 decay: float = DEFAULT_DECAY, cutoff: float = DEFAULT_CUTOFF,
                 hard_switch: bool = False):
        self.store = store
        self.gop = gop
        self.total = total
        self.decay = decay
        self.cutoff = cutoff
        # baseline mode: one key space per chunk at full weight, no blending
        self.hard_switch = hard_switch
        self.pair: Optional[tuple[int, int]] = None

    def _ensure(self, pair: tuple[int, int]) -> None:
        if self.pair == pair:
            return
        if self.pair is not None:
            for key in sorted(set(self.pair)):
                self.store.unload(key, tag="render")
        for key in sorted(set(pair)):
            self.store.load(key, tag="render")
        self.pair = pair

    def render_frame(self, t: int, view) -> np.ndarray:
        pair = required_anchors(t, self.gop, self.total)
        self._ensure(pair)
        a = self.store.get(pair[0])
        if self.hard_switch:
            tau = (t - a.space.t_n) / self.gop
            return forward([Layer(a.space, a.field, tau)], view, self.cutoff)[0]
        b = self.store.get(pair[1]) if pair[1] != pair[0] else None
        return blend_frame(a.space, a.field, b.space if b else None, b.field if b else None,
                           t, self.gop, view, decay=self.decay, cutoff=self.cutoff)

    def close(self) -> None:
        if self.pair is not None:
            for key in sorted(set(self.pair)):
                self.store.unload(key, tag="render")
            self.pair = None


def render_sequence(renderer: OnDemandRenderer, frames, view, out_dir, gt=None) -> list[FrameRecord]:
    """Render ``frames`` to ``out_dir`` as PPM files plus ``manifest.txt``.

    ``gt`` optionally maps a frame index to its ground-truth float image.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for t in frames:
        img = to_uint8(renderer.render_frame(int(t), view))
        name = f"frame_{int(t):05d}.ppm"
        write_ppm(out / name, img)
        score = psnr(img / 255.0, gt(int(t))) if gt is not None else None
        resident = tuple(sorted(renderer.store.ledger.resident, key=str))
        records.append(FrameRecord(int(t), name, score, resident))
    write_manifest(out / "manifest.txt", records)
    return records


def write_manifest(path, records: list[FrameRecord]) -> None:
    lines = ["# frame file psnr resident"]
    for r in records:
        score = "-" if r.psnr is None else ("inf" if math.isinf(r.psnr) else f"{r.psnr:.4f}")
        keys = ",".join(str(k) for k in r.resident) or "-"
        lines.append(f"{r.t} {r.file} {score} {keys}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[FrameRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        t, name, score, keys = line.split()
        val = None if score == "-" else float(score)
        res = () if keys == "-" else tuple(int(k) if k.isdigit() else k for k in keys.split(","))
        out.append(FrameRecord(int(t), name, val, res))
    return out
