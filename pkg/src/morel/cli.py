"""Command-line entry points: gen, train, render, eval, inspect.

Exit codes: 0 success, 1 other failure, 2 malformed configuration,
3 missing or out-of-range inputs.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import ConfigError, InvalidInput, MorelError, NotFound
from .imageio import read_ppm, to_float, write_ppm
from .metrics import ofps, psnr, row_jumps, ssim, temporal_profile, tof
from .store import AnchorStore, decode_bundle

EXIT_CONFIG = 2
EXIT_MISSING = 3


class MissingInput(MorelError):
    pass


def _set_threads(requested) -> None:
    value = requested if requested is not None else os.environ.get("MOREL_THREADS")
    if value is None:
        return
    import numba

    try:
        n = int(value)
    except ValueError:
        raise ConfigError("threads", f"not an integer: {value!r}") from None
    if n < 1:
        raise ConfigError("threads", "must be >= 1")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise MissingInput(f"{what} {p} does not exist")
    return p


def _load_run_config(store_dir: Path):
    from .training import RunConfig

    path = store_dir / "run.cfg"
    if not path.is_file():
        raise MissingInput(f"{store_dir} has no run.cfg; was it produced by 'train'?")
    return config_mod.apply(RunConfig(), config_mod.load_flat(path))


# --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    from .scenegen import SceneSpec, generate, load_spec, write_dataset

    if args.spec is not None:
        if not Path(args.spec).is_file():
            raise MissingInput(f"spec file {args.spec} does not exist")
        spec = load_spec(args.spec)
    else:
        spec = SceneSpec()
    if args.seed is not None:
        spec = config_mod.apply(spec, {"scene.seed": str(args.seed)}, "scene.")
    ds = generate(spec)
    write_dataset(ds, args.out)
    print(f"wrote {spec.views} views x {spec.frames} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .scenegen import load_dataset
    from .training import RunConfig, Trainer

    data = load_dataset(_require_dir(args.data, "dataset"))
    entries = {}
    if args.config is not None:
        if not Path(args.config).is_file():
            raise MissingInput(f"config file {args.config} does not exist")
        entries = config_mod.load_flat(args.config)
    entries.setdefault("plan.frames", str(data.n_frames))
    if args.gop is not None:
        entries["plan.gop"] = str(args.gop)
    if args.seed is not None:
        entries["seed"] = str(args.seed)
    cfg = config_mod.apply(RunConfig(), entries)
    store = AnchorStore(args.out)
    run_cfg = store.root / "run.cfg"
    text = config_mod.dump(cfg)
    if run_cfg.is_file() and run_cfg.read_text() != text:
        raise ConfigError("config", f"{run_cfg} was written with different settings; "
                                    "use a fresh store directory")
    run_cfg.write_text(text)
    # views are rebuilt from the scene description at render time
    (store.root / "scene.cfg").write_text(config_mod.dump(data.spec, "scene."))
    stages = tuple(args.stages.split(",")) if args.stages else ("gca", "kfa", "pwd", "ifb")
    Trainer(data, store, cfg).run(stages)
    report = store.residency_report()
    print(f"training done; peak key residency {report.peak_key}")
    return 0


def _parse_range(text: str) -> tuple[int, int]:
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            return int(a), int(b)
        return int(text), int(text)
    except ValueError:
        raise ConfigError("t", f"expected 'a..b', got {text!r}") from None


def cmd_render(args) -> int:
    from .rendering import OnDemandRenderer, render_sequence
    from .scenegen import SceneSpec, load_spec, make_views

    store_dir = _require_dir(args.store, "store")
    cfg = _load_run_config(store_dir)
    spec_path = store_dir / "scene.cfg"
    spec = load_spec(spec_path) if spec_path.is_file() else SceneSpec(frames=cfg.plan.frames)
    views = make_views(spec)
    a, b = _parse_range(args.t)
    total = cfg.plan.frames
    if not (0 <= a <= b < total):
        raise MissingInput(f"frame range {a}..{b} outside [0, {total})")
    if not 0 <= args.view < len(views):
        raise MissingInput(f"view {args.view} outside [0, {len(views)})")
    gt = None
    if args.data is not None:
        data_dir = _require_dir(args.data, "dataset")

        def gt(t):
            return to_float(read_ppm(data_dir / "views" / str(args.view) / f"frame_{t:05d}.ppm"))

    store = AnchorStore(store_dir)
    renderer = OnDemandRenderer(store, cfg.plan.gop, total, decay=cfg.decay, cutoff=cfg.model.cutoff,
                                hard_switch=args.hard_switch)
    records = render_sequence(renderer, range(a, b + 1), views[args.view], args.out, gt)
    renderer.close()
    peak = store.residency_report().peak_key
    print(f"rendered {len(records)} frames to {args.out}; peak key residency {peak}")
    return 0


def cmd_eval(args) -> int:
    from .rendering import read_manifest

    render_dir = _require_dir(args.render, "render directory")
    gt_dir = _require_dir(args.gt, "ground-truth dataset")
    manifest = render_dir / "manifest.txt"
    if not manifest.is_file():
        raise MissingInput(f"{manifest} does not exist")
    records = read_manifest(manifest)
    fps = 30
    if (gt_dir / "spec.cfg").is_file():
        entries = config_mod.load_flat(gt_dir / "spec.cfg")
        fps = int(entries.get("scene.fps", fps))
    rendered, truth = [], []
    for r in records:
        gt_path = gt_dir / "views" / str(args.view) / f"frame_{r.t:05d}.ppm"
        if not gt_path.is_file():
            raise MissingInput(f"missing ground truth {gt_path}")
        rendered.append(to_float(read_ppm(render_dir / r.file)))
        truth.append(to_float(read_ppm(gt_path)))
    rows = ["frame,psnr,ssim"]
    ps, ss = [], []
    for r, img, gt in zip(records, rendered, truth):
        p, s = psnr(img, gt), ssim(img, gt)
        ps.append(p)
        ss.append(s)
        rows.append(f"{r.t},{'inf' if math.isinf(p) else f'{p:.6f}'},{s:.6f}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(rows) + "\n")
    summary = {
        "frames": len(records),
        "psnr_mean": float(np.mean(ps)) if ps else None,
        "ssim_mean": float(np.mean(ss)) if ss else None,
        "tof": tof(rendered, truth) if len(records) >= 2 else None,
        "ofps_rendered": ofps(rendered, fps) if len(records) >= 2 else None,
        "ofps_gt": ofps(truth, fps) if len(records) >= 2 else None,
    }
    if rendered:
        row = rendered[0].shape[0] // 2 if args.row is None else args.row
        profile = temporal_profile(rendered, row)
        write_ppm(out.with_name(out.stem + "_profile.ppm"), profile)
        jumps = row_jumps(profile)
        summary["profile_row"] = row
        summary["profile_mean_jump"] = float(jumps.mean()) if jumps.size else 0.0
    text = json.dumps(summary, indent=2, sort_keys=True, allow_nan=True)
    out.with_name(out.stem + "_summary.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_inspect(args) -> int:
    store_dir = _require_dir(args.store, "store")
    files = sorted(store_dir.glob("*.morl"))
    print(f"store {store_dir}: {len(files)} bundle(s)")
    for path in files:
        data = path.read_bytes()
        bundle = decode_bundle(data)
        sp = bundle.space
        levels = np.bincount(np.maximum(sp.level, 0), minlength=3) if len(sp) else np.zeros(3, int)
        unassigned = int(np.sum(sp.level < 0))
        field = "yes" if bundle.field is not None else "no"
        print(f"  {path.name}: {len(data)} bytes, kind={sp.kind}, anchors={len(sp)}, "
              f"levels={levels[0]}/{levels[1]}/{levels[2]}"
              + (f" (unassigned {unassigned})" if unassigned else "") + f", field={field}")
    n_key = sum(1 for p in files if p.name.startswith("kfa_"))
    print(f"key-frame bundles: {n_key}")
    progress = store_dir / "progress.json"
    if progress.is_file():
        print("completed stages: " + " ".join(json.loads(progress.read_text())["done"]))
    log = store_dir / "train.log"
    if log.is_file():
        lines = [ln for ln in log.read_text().splitlines() if "event=" in ln]
        print(f"training events ({len(lines)}):")
        for ln in lines:
            print("  " + ln)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morel", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="worker cap (or MOREL_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run the training stages")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--gop", type=int, default=None)
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--stages", default=None, help="comma list from gca,kfa,pwd,ifb")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render frames with on-demand loading")
    r.add_argument("--store", required=True)
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--t", required=True, help="frame range a..b (inclusive)")
    r.add_argument("--out", required=True)
    r.add_argument("--data", default=None, help="dataset for per-frame PSNR")
    r.add_argument("--hard-switch", action="store_true",
                   help="render each chunk from its own key frame only (no blending)")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score rendered frames against ground truth")
    e.add_argument("--render", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--view", type=int, default=0)
    e.add_argument("--row", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="summarize a store")
    i.add_argument("--store", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is not None and args.seed < 0:
        parser.error("--seed must be non-negative")
    try:
        _set_threads(args.threads)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInput, NotFound) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (MorelError, InvalidInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
