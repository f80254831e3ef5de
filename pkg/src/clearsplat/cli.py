"""Command-line front end: synth / train / decompose / eval.

One binary, four subcommands, all sharing the checkpoint format:

  clearsplat synth OUT_DIR [--config c.yaml] [--seed N] [--frames N] [--force]
  clearsplat train DATASET RUN_DIR [--config c.yaml] [--seed N] [--iters N]
                   [--ablation baseline|nom|ad|lim|g3e ...] [--depth-source gt|rendered]
                   [--force]
  clearsplat decompose CHECKPOINT DATASET OUT_DIR [--force]
  clearsplat eval CHECKPOINT DATASET [--out report.csv]

Exit codes: 0 success, 1 usage error, 2 data error (unreadable dataset,
config, or checkpoint), 3 numerical divergence (partial CSV and a
checkpoint of the last finite state are still written).

A train run directory is self-describing: config.yaml (the fully resolved
config actually used), build_id.txt, metrics.csv (stage 1), metrics_g3e.csv
(stage 2, only with --ablation g3e), checkpoints/iter_*.ckpt at the
configured cadence, and final.ckpt.

The eval report is a CSV with fixed columns

    frame,split,compare,region,psnr,ssim

where compare is "transmission" (recovered transmission vs the ground-truth
transmission layer, all frames) or "composed" (re-rendered capture vs the
held-out captured frames), and region is "full" or "obstruction" (pixels
where the ground-truth opacity exceeds 0.05). Mean rows use frame="mean".
Ground-truth layers missing from the dataset drop the rows that need them,
with a warning on stderr.
"""

from __future__ import annotations

import argparse
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ABLATION_LEVELS, ConfigError, RunConfig, load_config, save_config
from .dataio import DatasetError, save_color_png, save_gray_png
from .decomposition import compose, recover_transmission
from .geometry import g3e_pipeline
from .metrics import obstruction_mask, psnr, ssim
from .synthcam import TrajectoryConfig, load_dataset, make_dataset, save_dataset
from .training import TrainingDiverged, render_frame, train, train_test_split


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage by default; the contract reserves 2 for
    # data errors, so remap
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clearsplat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"clearsplat {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(sp, iters=True):
        sp.add_argument("--config", type=Path, default=None,
                        help="YAML config file; CLI flags override its values")
        sp.add_argument("--seed", type=int, default=None)
        if iters:
            sp.add_argument("--iters", type=int, default=None)

    sp = sub.add_parser("synth", help="generate a synthetic capture dataset")
    sp.add_argument("out_dir", type=Path)
    common(sp, iters=False)
    sp.add_argument("--frames", type=int, default=None)
    sp.add_argument("--force", action="store_true",
                    help="overwrite a non-empty output directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="fit the scene model to a dataset")
    sp.add_argument("dataset_dir", type=Path)
    sp.add_argument("run_dir", type=Path)
    common(sp)
    sp.add_argument("--ablation", nargs="+", default=None, metavar="STAGE",
                    choices=ABLATION_LEVELS + ("g3e",),
                    help="model stages to enable (cumulative): baseline, nom, ad, "
                         "lim; add g3e for the geometry-guided second stage")
    sp.add_argument("--depth-source", choices=("gt", "rendered"), default=None,
                    help="depth maps feeding the geometry stage")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("decompose", help="write per-frame layer images")
    sp.add_argument("checkpoint", type=Path)
    sp.add_argument("dataset_dir", type=Path)
    sp.add_argument("out_dir", type=Path)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_decompose)

    sp = sub.add_parser("eval", help="metric report against ground truth")
    sp.add_argument("checkpoint", type=Path)
    sp.add_argument("dataset_dir", type=Path)
    sp.add_argument("--out", type=Path, default=None,
                    help="also write the CSV here (stdout either way)")
    sp.set_defaults(func=cmd_eval)
    return p


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config is not None else RunConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if getattr(args, "iters", None) is not None:
        kw["iters"] = args.iters
    if getattr(args, "frames", None) is not None:
        kw["frames"] = args.frames
    if getattr(args, "depth_source", None) is not None:
        kw["depth_source"] = args.depth_source
    if getattr(args, "ablation", None) is not None:
        stages = set(args.ablation)
        kw["g3e"] = "g3e" in stages
        stages.discard("g3e")
        # cumulative levels: the deepest named stage wins
        kw["ablation"] = max(stages, key=ABLATION_LEVELS.index) if stages else "baseline"
    return cfg.replace(**kw) if kw else cfg


def _build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}+unknown"


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise DatasetError(f"output directory {path} is not empty (pass --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    dataset = make_dataset(
        cfg.seed, n_frames=cfg.frames,
        trajectory=TrajectoryConfig(width=cfg.width, height=cfg.height,
                                    speed=cfg.speed, turn_deg=cfg.turn_deg),
        obstruction_free=cfg.obstruction_free, gain_cycles=cfg.gain_cycles)
    save_dataset(dataset, args.out_dir, force=args.force)
    print(f"wrote {cfg.frames} frames at {cfg.width}x{cfg.height} to {args.out_dir}")
    return 0


def _write_rows(path: Path, rows: list) -> None:
    path.write_text("\n".join(rows) + "\n")


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    dataset = load_dataset(args.dataset_dir)
    run = args.run_dir
    _prepare_dir(run, args.force)
    # echo artifacts first so a diverged run still documents itself
    save_config(cfg, run / "config.yaml")
    (run / "build_id.txt").write_text(_build_id() + "\n")

    def checkpoint_cb(state, it):
        (run / "checkpoints").mkdir(exist_ok=True)
        save_checkpoint(run / "checkpoints" / f"iter_{it:06d}.ckpt", state)

    try:
        state, rows = train(dataset, cfg, checkpoint_cb=checkpoint_cb)
    except TrainingDiverged as exc:
        _write_rows(run / "metrics.csv", exc.rows)
        save_checkpoint(run / "final.ckpt", exc.state)
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    _write_rows(run / "metrics.csv", rows)

    if cfg.g3e:
        try:
            state, rows2 = g3e_pipeline(state, dataset, cfg)
        except TrainingDiverged as exc:
            _write_rows(run / "metrics_g3e.csv", exc.rows)
            save_checkpoint(run / "final.ckpt", exc.state)
            print(f"geometry stage diverged: {exc}", file=sys.stderr)
            return 3
        _write_rows(run / "metrics_g3e.csv", rows2)

    save_checkpoint(run / "final.ckpt", state)
    print(f"run complete: {rows[-1]}")
    return 0


def cmd_decompose(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset_dir)
    out = args.out_dir
    _prepare_dir(out, args.force)
    for sub in ("transmission", "obstruction", "opacity", "recovered", "composed"):
        (out / sub).mkdir(exist_ok=True)
    tau = state.config.tau
    for fr in dataset.frames:
        bundle = render_frame(state, fr.camera)
        recovered = recover_transmission(fr.image, bundle.obstruction,
                                         bundle.phi, bundle.transmission, tau)
        stem = f"{fr.index:04d}.png"
        save_color_png(out / "transmission" / stem, bundle.transmission)
        save_color_png(out / "obstruction" / stem, bundle.obstruction)
        save_gray_png(out / "opacity" / stem, bundle.phi)
        save_color_png(out / "recovered" / stem, recovered)
        save_color_png(out / "composed" / stem, bundle.image)
    print(f"decomposed {len(dataset.frames)} frames into {out}")
    return 0


def _fmt_metric_row(frame, split, compare, region, p, s) -> str:
    return f"{frame},{split},{compare},{region},{p:.4f},{s:.6f}"


def _append_family(rows, entries, compare, region, mask=None):
    """Per-frame rows plus one mean row for a (compare, region) family."""
    if not entries:
        return
    ps, ss = [], []
    splits = set()
    for frame, split, a, b in entries:
        p, s = psnr(a, b, mask), ssim(a, b, mask)
        ps.append(p)
        ss.append(s)
        splits.add(split)
        rows.append(_fmt_metric_row(frame, split, compare, region, p, s))
    mean_split = splits.pop() if len(splits) == 1 else "all"
    rows.append(_fmt_metric_row("mean", mean_split, compare, region,
                                float(np.mean(ps)), float(np.mean(ss))))


EVAL_HEADER = "frame,split,compare,region,psnr,ssim"


def metric_rows(dataset, recovered: dict, composed: dict, test_every: int = 8) -> list:
    """Assemble the eval CSV from per-frame prediction images.

    `recovered` maps frame index -> recovered-transmission image (scored
    against GT transmission on every frame), `composed` maps held-out frame
    index -> re-rendered capture (scored against the captured frame).
    Factored out of cmd_eval so a perfect-prediction report can be built
    directly in tests.
    """
    _, test_idx = train_test_split(len(dataset.frames), test_every)
    test_set = set(test_idx)
    mask = obstruction_mask(dataset.opacity) if dataset.opacity is not None else None

    trans_entries = []
    for j, fr in enumerate(dataset.frames):
        if fr.transmission is None or j not in recovered:
            continue
        split = "test" if j in test_set else "train"
        a = np.clip(recovered[j], 0.0, 1.0)
        trans_entries.append((fr.index, split, a, fr.transmission))
    comp_entries = []
    for j in sorted(composed):
        fr = dataset.frames[j]
        comp_entries.append((fr.index, "test", np.clip(composed[j], 0.0, 1.0), fr.image))

    rows = [EVAL_HEADER]
    _append_family(rows, trans_entries, "transmission", "full")
    if mask is not None:
        _append_family(rows, trans_entries, "transmission", "obstruction", mask)
    _append_family(rows, comp_entries, "composed", "full")
    if mask is not None:
        _append_family(rows, comp_entries, "composed", "obstruction", mask)
    return rows


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset_dir)
    has_gt = any(fr.transmission is not None for fr in dataset.frames)
    if not has_gt:
        print("warning: dataset has no ground-truth transmission layers; "
              "reporting composed-frame metrics only", file=sys.stderr)
    if dataset.opacity is None:
        print("warning: dataset has no ground-truth opacity map; "
              "obstruction-region metrics omitted", file=sys.stderr)
    _, test_idx = train_test_split(len(dataset.frames), state.config.test_every)
    tau = state.config.tau
    recovered, composed = {}, {}
    for j, fr in enumerate(dataset.frames):
        bundle = render_frame(state, fr.camera)
        if fr.transmission is not None:
            recovered[j] = recover_transmission(fr.image, bundle.obstruction,
                                                bundle.phi, bundle.transmission, tau)
        if j in test_idx:
            composed[j] = bundle.image
    rows = metric_rows(dataset, recovered, composed, state.config.test_every)
    text = "\n".join(rows) + "\n"
    sys.stdout.write(text)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # remapped usage errors and --help/--version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
