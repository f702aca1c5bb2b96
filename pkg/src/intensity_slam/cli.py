"""Command line entry point: ``intensity-slam <command> ...``."""

from __future__ import annotations

import argparse
import codecs
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, load_config
from .errors import SlamError
from .scan_io import iter_scans, list_scans, read_scan, read_trajectory, write_scan

log = logging.getLogger("intensity_slam")


def _config(args):
    return load_config(args.config) if args.config else Config()


def _scans(scans_dir):
    d = Path(scans_dir)
    if not d.is_dir():
        raise SlamError(f"{d}: not a directory")
    paths = list_scans(d)
    if not paths:
        raise SlamError(f"{d}: no .scan files")
    return paths


def _emit(rows, sep):
    for row in rows:
        print(sep.join(str(v) for v in row))


def cmd_run(args):
    from .loop_closure import Vocabulary
    from .pipeline import Pipeline

    cfg = _config(args)
    paths = _scans(args.scans_dir)
    vocab = Vocabulary.load(args.vocabulary) if args.vocabulary else None
    pipe = Pipeline(cfg, vocab)
    if cfg.use_loop_closure and pipe.vocabulary is None:
        log.info("training a vocabulary on %d scans", len(paths))
        pipe.prepare_vocabulary(iter_scans(paths), seed=args.seed)
    result = pipe.run(iter_scans(paths), args.pipeline)
    summary = result.write(args.out_dir, plot=not args.no_plot)
    _emit([("key", "value")] + list(summary.items()), args.sep)
    if args.ground_truth:
        _evaluate(Path(args.out_dir) / "final.txt", args.ground_truth, args.sep,
                  None if args.no_plot else Path(args.out_dir) / "ape.png")
    return 0


def _evaluate(traj_path, gt_path, sep, plot_path=None, align=True):
    from .evaluation import ape, format_stats

    est = read_trajectory(traj_path)
    gt = read_trajectory(gt_path)
    stats = ape(est, gt, align=align)
    print(format_stats(stats, sep))
    if plot_path:
        from .plotting import plot_ape

        plot_ape(stats, plot_path)
    return stats


def cmd_evaluate(args):
    _evaluate(args.trajectory, args.ground_truth, args.sep, args.plot, align=not args.no_align)
    return 0


def cmd_synth_generate(args):
    from .synth import SensorModel, make_sequence, write_sequence

    sensor = SensorModel()
    if args.noiseless:
        sensor = sensor.noiseless()
    scans, truth = make_sequence(args.scenario, args.steps, args.step_size, sensor, seed=args.seed)
    out = write_sequence(args.out_dir, scans, truth)
    print(f"wrote {len(scans)} scans and ground_truth.txt to {out}")
    return 0


def cmd_vocab_train(args):
    from .features import build_frame
    from .intensity_image import NormalizationParams
    from .loop_closure import train_vocabulary

    cfg = _config(args)
    norm = NormalizationParams(cfg.intensity_cap, cfg.row_gain_equalization)
    docs = []
    for d in args.scans_dir:
        for scan in iter_scans(_scans(d)):
            docs.append(build_frame(scan, cfg.feature_cap, cfg.fast_threshold, norm).descriptors)
    branching = args.branching or cfg.vocab_branching
    depth = args.depth or cfg.vocab_depth
    vocab = train_vocabulary(docs, branching, depth, seed=args.seed)
    vocab.save(args.output)
    n = sum(len(x) for x in docs)
    print(f"vocabulary {branching}^{depth} = {vocab.word_count} words from {n} descriptors ({len(docs)} scans)")
    return 0


def cmd_scan_convert(args):
    from .scan_io import convert_ascii

    scan = convert_ascii(args.input, args.rows, args.cols, args.timestamp)
    write_scan(scan, args.output)
    print(f"{args.output}: {scan.rows}x{scan.cols}, {scan.num_valid} valid cells")
    return 0


def cmd_dump_image(args):
    from .intensity_image import NormalizationParams, project, write_pgm

    cfg = _config(args)
    img = project(read_scan(args.scan), NormalizationParams(cfg.intensity_cap, cfg.row_gain_equalization))
    write_pgm(img, args.output)
    rows, cols = img.pixels.shape
    print(f"{args.output}: P5 {cols}x{rows}")
    return 0


def cmd_dump_features(args):
    from .features import build_frame
    from .intensity_image import NormalizationParams

    cfg = _config(args)
    scan = read_scan(args.scan)
    frame = build_frame(scan, cfg.feature_cap, cfg.fast_threshold,
                        NormalizationParams(cfg.intensity_cap, cfg.row_gain_equalization))
    rows = [("row", "col", "response", "descriptor", "x", "y", "z")]
    for f in frame.features:
        x, y, z = f.point3d
        rows.append((f.pixel[0], f.pixel[1], f"{f.response:.1f}", bytes(f.descriptor).hex(),
                     f"{x:.4f}", f"{y:.4f}", f"{z:.4f}"))
    _emit(rows, args.sep)
    if args.plot:
        _plot_features(frame, args.plot)
    return 0


def _plot_features(frame, path):
    from .plotting import plt

    pix = frame.image.pixels
    rc = np.array([f.pixel for f in frame.features]).reshape(-1, 2)
    fig, ax = plt.subplots(figsize=(12, 2.4))
    ax.imshow(pix, cmap="gray", aspect="auto", interpolation="nearest")
    ax.plot(rc[:, 1], rc[:, 0], "o", mfc="none", mec="lime", ms=4)
    ax.set_xlabel("column")
    ax.set_ylabel("ring")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, default=0, help="seed for vocabulary training and synthetic noise")
    common.add_argument("--sep", default=",", help="field separator of the printed tables")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="intensity-slam", description="LiDAR intensity SLAM on organized scans.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run the full pipeline over a scan directory")
    r.add_argument("scans_dir")
    r.add_argument("out_dir")
    r.add_argument("--pipeline", choices=("serial", "parallel"), default="serial")
    r.add_argument("--vocabulary", help="vocabulary file; trained on the input when omitted")
    r.add_argument("--ground-truth", help="evaluate final.txt against this trajectory")
    r.add_argument("--no-plot", action="store_true", help="skip the PNG figures")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("evaluate", parents=[common], help="absolute position error of a trajectory")
    e.add_argument("trajectory")
    e.add_argument("ground_truth")
    e.add_argument("--plot", help="write an APE figure to this PNG")
    e.add_argument("--no-align", action="store_true", help="compare without rigid alignment")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("synth-generate", parents=[common], help="render a synthetic scan sequence")
    g.add_argument("scenario", choices=("corridor", "loop", "slope", "parking"))
    g.add_argument("out_dir", nargs="?", default=".")
    g.add_argument("--steps", type=int, default=50)
    g.add_argument("--step-size", type=float, default=0.2)
    g.add_argument("--noiseless", action="store_true")
    g.set_defaults(func=cmd_synth_generate)

    v = sub.add_parser("vocab-train", parents=[common], help="train a bag-of-words vocabulary")
    v.add_argument("output")
    v.add_argument("scans_dir", nargs="+")
    v.add_argument("--branching", type=int)
    v.add_argument("--depth", type=int)
    v.set_defaults(func=cmd_vocab_train)

    c = sub.add_parser("scan-convert", parents=[common], help="grid an ASCII x y z intensity ring cloud")
    c.add_argument("input")
    c.add_argument("output")
    c.add_argument("--rows", type=int, default=64)
    c.add_argument("--cols", type=int, default=1024)
    c.add_argument("--timestamp", type=float, default=0.0)
    c.set_defaults(func=cmd_scan_convert)

    d = sub.add_parser("dump-image", parents=[common], help="write a scan's intensity image as PGM")
    d.add_argument("scan")
    d.add_argument("output")
    d.set_defaults(func=cmd_dump_image)

    f = sub.add_parser("dump-features", parents=[common], help="print detected features")
    f.add_argument("scan")
    f.add_argument("--plot", help="write the image with features overlaid to this PNG")
    f.set_defaults(func=cmd_dump_features)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    # a shell passes \t as two characters
    args.sep = codecs.decode(args.sep, "unicode_escape")
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SlamError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
