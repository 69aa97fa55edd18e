"""Command-line entry point.

    sparsevos gen --spec scene.txt --out corpus/scene_000
    sparsevos gen --random 10 --seed 7 --out corpus
    sparsevos init-weights --out w.esm
    sparsevos train-shortcut --weights w.esm --corpus train --heldout held --out w2.esm
    sparsevos run --weights w2.esm --corpus corpus --out report.csv --both
    sparsevos bench --weights w2.esm --corpus corpus --out bench/
    sparsevos diagnose --weights w2.esm --corpus corpus/scene_000 --frame 5 --dump-routing --out diag/

Model hyperparameters come from ``--config`` (flat key = value file), paths
and modes from flags. Failures print one ``error: <Class>: <message>`` line
and exit with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench, plots
from .config import PipelineConfig, load_config
from .corpus import Scene, corpus_specs, iter_corpus, read_scene, spec_from_text, write_corpus, write_pgm, write_scene
from .distill import TrainConfig, train_shortcut
from .encoder import shortcut_prefix
from .pipeline import init_stream, run_stream, step
from .swr import ROUTING_COLUMNS, routing_row
from .weights import init_weights, load_weights, save_weights


class CliError(RuntimeError):
    pass


class FrameRangeError(ValueError):
    pass


def _config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    if not Path(path).is_file():
        raise CliError(f"config not found: {path}")
    return load_config(path)


def _weights(path: str, cfg: PipelineConfig) -> dict[str, np.ndarray]:
    if not Path(path).is_file():
        raise CliError(f"weights not found: {path}")
    return load_weights(path, cfg.model)


def load_corpus(path: str | Path) -> list[Scene]:
    """A scene directory or a directory of scene directories."""
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"corpus not found: {path}")
    if (p / "spec.txt").exists():
        return [read_scene(p)]
    return list(iter_corpus(p))


def _mode(args, cfg: PipelineConfig) -> str:
    for m in ("dense", "swr", "smr", "both"):
        if getattr(args, m, False):
            return m
    return {(False, False): "dense", (True, False): "swr", (False, True): "smr", (True, True): "both"}[
        (cfg.swr_enabled, cfg.smr_enabled)
    ]


# -- subcommands -------------------------------------------------------------------


def cmd_gen(args) -> None:
    if args.spec is not None:
        p = Path(args.spec)
        if not p.is_file():
            raise CliError(f"spec not found: {args.spec}")
        out = Path(args.out)
        write_scene(out.parent, out.name, spec_from_text(p.read_text()))
    else:
        write_corpus(args.out, corpus_specs(args.random, args.seed, args.frames, args.static))


def cmd_init_weights(args) -> None:
    cfg = _config(args.config)
    save_weights(init_weights(cfg.model, args.seed, planted=not args.random), args.out)


def cmd_train_shortcut(args) -> None:
    cfg = _config(args.config)
    w = _weights(args.weights, cfg)
    train = load_corpus(args.corpus)
    held = load_corpus(args.heldout)
    tcfg = TrainConfig(lr=args.lr, epochs=args.epochs, seed=cfg.seed)
    log = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    sc, record = train_shortcut(train, held, w, cfg, tcfg, log=log)
    out = dict(w)
    out.update(sc.to_dict(shortcut_prefix(cfg.model.encoder.routable_blocks()[0])))
    save_weights(out, args.out)
    if args.log:
        record.write_csv(args.log)
    print(f"held-out loss {record.initial_loss:.6g} -> {record.final_loss:.6g} ({100 * record.reduction:.1f}% reduction)")


def cmd_run(args) -> None:
    cfg = _config(args.config)
    w = _weights(args.weights, cfg)
    mode = _mode(args, cfg)
    scenes = load_corpus(args.corpus)
    reports = bench.run_benchmark(scenes, w, cfg, [mode])
    rep = reports[mode]
    out = Path(args.out)
    bench.write_csv(out, rep.rows, bench.FRAME_COLUMNS)
    mask_dir = Path(args.masks) if args.masks else out.with_name(out.stem + "_masks")
    for name, masks in rep.masks.items():
        d = mask_dir / name
        d.mkdir(parents=True, exist_ok=True)
        for t, m in enumerate(masks):
            write_pgm(d / f"{t:05d}.pgm", m)
    s = rep.summary
    print(f"{mode}: {s['frames']} frames, mean IoU {s['mean_iou_gt']:.4f} vs ground truth, {s['mean_iou_dense']:.4f} vs dense")


def cmd_bench(args) -> None:
    cfg = _config(args.config)
    w = _weights(args.weights, cfg)
    scenes = load_corpus(args.corpus)
    out = Path(args.out)
    plot_dir = out / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)
    reports = bench.run_benchmark(scenes, w, cfg)
    bench.write_report(out, reports)
    summaries = [r.summary for r in reports.values()]
    plots.accuracy_vs_speedup(summaries, plot_dir / "accuracy_vs_speedup.svg")
    if not args.no_sweeps:
        taus = bench.tau_sweep(scenes, w, cfg)
        bench.write_csv(out / "tau_sweep.csv", taus, bench.TAU_COLUMNS)
        plots.tau_sweep_plot(taus, plot_dir / "tau_sweep.svg")
        ss = bench.s_sweep(scenes, w, cfg)
        bench.write_csv(out / "s_sweep.csv", ss, bench.S_COLUMNS)
        plots.s_sweep_plot(ss, plot_dir / "s_sweep.svg")
    for s in summaries:
        print(
            f"{s['config']:>5}: IoU {s['mean_iou_gt']:.4f} (vs dense {s['mean_iou_dense']:.4f}), "
            f"speedup stage2 {s['speedup_encoder_stage2']:.2f}x, cross-attn {s['speedup_memory_cross_attention']:.2f}x, "
            f"total {s['speedup_total']:.2f}x"
        )


def cmd_diagnose(args) -> None:
    cfg = _config(args.config)
    w = _weights(args.weights, cfg)
    mode = _mode(args, cfg)
    scenes = load_corpus(args.corpus)
    if len(scenes) != 1:
        raise CliError("diagnose needs a single scene directory")
    sc = scenes[0]
    if not 0 <= args.frame < len(sc):
        raise FrameRangeError(f"frame {args.frame} outside [0, {len(sc)})")
    c = bench.mode_config(cfg, mode)
    state = init_stream(sc.frames[0], sc.masks[0], c, w)
    patterns = []  # queue contents used while processing the frame
    for t in range(1, args.frame + 1):
        if t == args.frame:
            patterns = state.queue.dump()
        step(state, sc.frames[t])
    tr = state.trace[args.frame]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.dump_routing:
        row = routing_row(tr.routing)
        with open(out / f"routing_{args.frame:05d}.txt", "w") as fh:
            fh.write(" ".join(ROUTING_COLUMNS) + "\n")
            fh.write(" ".join(bench._fmt(row[c]) for c in ROUTING_COLUMNS) + "\n")
    if args.dump_patterns:
        with open(out / f"patterns_{args.frame:05d}.txt", "w") as fh:
            for f, layer, idx in patterns:
                fh.write(f"{f} {layer} {' '.join(map(str, idx))}\n")
    if args.dump_attention:
        for layer, rec in enumerate(tr.records):
            rows = rec.rows
            peak = float(rows.max()) if rows.size else 0.0
            write_pgm(out / f"attention_{args.frame:05d}_layer{layer}.pgm", rows / peak if peak > 0 else rows)
    if args.dump_consistency:
        dense = run_stream(sc.frames, sc.masks[0], cfg.dense(), w)
        bench.write_csv(out / "consistency.csv", bench.consistency_rows(dense), bench.CONSISTENCY_COLUMNS)


# -- parser ------------------------------------------------------------------------


def _modes(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--dense", action="store_true", help="no accelerators")
    g.add_argument("--swr", action="store_true", help="sparse window routing only")
    g.add_argument("--smr", action="store_true", help="sparse memory retrieval only")
    g.add_argument("--both", action="store_true", help="both accelerators")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sparsevos", description="Sparse streaming video object segmentation at desk scale.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic corpus")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="scene spec file (key = value); writes one scene directory at --out")
    src.add_argument("--random", type=int, metavar="N", help="write N random scenes under --out")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="corpus seed for --random")
    p.add_argument("--frames", type=int, default=20, help="frames per scene for --random")
    p.add_argument("--static", action="store_true", help="motionless scenes for --random")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("init-weights", help="write initial model weights")
    p.add_argument("--config", help="config file")
    p.add_argument("--seed", type=int, default=0, help="weight seed")
    p.add_argument("--random", action="store_true", help="plain random init without the planted tracker")
    p.add_argument("--out", required=True, help="weights file to write")
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("train-shortcut", help="distill the shortcut branch from the dense model")
    p.add_argument("--weights", required=True, help="teacher weights file")
    p.add_argument("--corpus", required=True, help="training corpus directory")
    p.add_argument("--heldout", required=True, help="held-out corpus directory")
    p.add_argument("--config", help="config file")
    p.add_argument("--lr", type=float, default=1e-4, help="learning rate")
    p.add_argument("--epochs", type=int, default=3, help="epochs")
    p.add_argument("--log", help="training log CSV (step, epoch, loss)")
    p.add_argument("--verbose", action="store_true", help="progress on stderr")
    p.add_argument("--out", required=True, help="weights file to write (teacher plus trained shortcut)")
    p.set_defaults(func=cmd_train_shortcut)

    p = sub.add_parser("run", help="segment a corpus and write per-frame rows")
    p.add_argument("--weights", required=True, help="weights file")
    p.add_argument("--corpus", required=True, help="scene or corpus directory")
    p.add_argument("--config", help="config file")
    p.add_argument("--out", required=True, help="report CSV to write")
    p.add_argument("--masks", help="directory for predicted masks (default: <out stem>_masks)")
    _modes(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="all four modes, sweeps, CSV and SVG figures")
    p.add_argument("--weights", required=True, help="weights file")
    p.add_argument("--corpus", required=True, help="scene or corpus directory")
    p.add_argument("--config", help="config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-sweeps", action="store_true", help="skip the tau and s sweeps")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("diagnose", help="dump routing, patterns or attention for one frame")
    p.add_argument("--weights", required=True, help="weights file")
    p.add_argument("--corpus", required=True, help="scene directory")
    p.add_argument("--config", help="config file")
    p.add_argument("--frame", type=int, required=True, help="frame index")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--dump-attention", action="store_true", help="one PGM per memory layer, N x memory tokens")
    p.add_argument("--dump-patterns", action="store_true", help="kept memory-token indices per queue frame and layer")
    p.add_argument("--dump-routing", action="store_true", help="routing decision of the frame")
    p.add_argument("--dump-consistency", action="store_true", help="first vs second recollection cosine over the whole stream, dense memory attention")
    _modes(p)
    p.set_defaults(func=cmd_diagnose)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except FrameRangeError as exc:
        parser.error(str(exc))
    except Exception as exc:  # noqa: BLE001  every failure becomes one line
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
