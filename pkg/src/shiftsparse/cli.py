"""Command-line entry point: ``shiftsparse <subcommand> --config FILE``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import DataError, NumericalError, ShapeError, load_tensors, seeded_rng
from .datasets import make_shifted, save_dataset, subset_per_class
from .dictionary import Dictionary, export_pgm
from .experiments import (RUNNERS, ConfigError, emit_plotdata, load_config, load_data,
                          split_train_test, with_overrides)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("shiftsparse")


def build_parser():
    parser = argparse.ArgumentParser(prog="shiftsparse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="INI experiment config")
        p.add_argument("--seed", type=int, help="override [experiment] seed")
        p.add_argument("--out", help="override [experiment] out directory")
        p.add_argument("--scale", type=float, help="multiply per-class counts and training sizes")
        return p

    d = common(sub.add_parser("dist", help="distances between sample pairs"), config_required=False)
    d.add_argument("tensors", nargs="*", help="two tensor files to compare instead of a config")
    d.add_argument("--max-shift", type=int, help="shift window per axis (tensor mode)")
    common(sub.add_parser("cluster-shifted", help="k-means accuracy versus mean shift"))
    common(sub.add_parser("classify", help="feature extractor + linear SVM accuracy"))
    common(sub.add_parser("sweep-patch", help="accuracy versus patch / kernel size"))
    g = common(sub.add_parser("gen-shifted", help="write a shifted-digit dataset"))
    g.add_argument("--frame", type=int, help="override [shift] frame")
    e = common(sub.add_parser("export-atoms", help="learn a dictionary and write its atoms"))
    e.add_argument("--method", help="override [export] method")
    return parser


def _config(args):
    cfg = load_config(args.config)
    return with_overrides(cfg, kind=args.command, seed=args.seed, out=args.out, scale=args.scale)


def cmd_dist_tensors(args):
    from .distances import euclidean_distance, shift_min_distance, xcorr_distance
    if len(args.tensors) != 2:
        raise ConfigError("dist needs either --config or exactly two tensor files")
    a, b = (load_tensors(p)[0] for p in args.tensors)
    dist, shift = shift_min_distance(a, b, args.max_shift)
    print(json.dumps({"euclidean": euclidean_distance(a, b), "shift_min": dist, "shift": list(shift),
                      "xcorr": xcorr_distance(a, b)}))
    return EXIT_OK


def cmd_experiment(args):
    cfg = _config(args)
    results = RUNNERS[args.command](cfg)
    manifest = emit_plotdata(results, cfg.out)
    for f in manifest["files"]:
        print(Path(cfg.out) / f["path"])
    return EXIT_OK


def cmd_gen_shifted(args):
    cfg = _config(args)
    params = cfg.section("shift")
    frame = args.frame if args.frame is not None else params["frame"]
    data, _ = load_data(cfg)
    base = subset_per_class(data, cfg.scaled(params["per_class"]))
    shifted = make_shifted(base, frame, seeded_rng(cfg.seed))
    shifted.seed = cfg.seed
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"shifted-{frame}-seed{cfg.seed}.cskt"
    save_dataset(shifted, path)
    print(path)
    return EXIT_OK


def cmd_export_atoms(args):
    from .clustering import kmeans_shift_invariant
    from .features import fit as fit_features
    cfg = _config(args)
    params = cfg.section("export")
    method = args.method or params["method"]
    train_all, test_all = load_data(cfg)
    train, _ = split_train_test(cfg, train_all, test_all, cfg.scaled(params["train_size"]),
                                cfg.section("classify")["test_per_class"])
    rng = seeded_rng(cfg.seed)
    if method == "KM_si":
        cl = cfg.section("cluster")
        atom = cl.get("atom")
        shape = train.sample_shape if atom is None else (atom,) * len(train.sample_shape)
        dictionary = kmeans_shift_invariant(train, cl["k"], shape, cl["si_iters"], rng, cl["weighting"]).centroids
    else:
        ex = fit_features(method, train.samples, cfg.feature_config(method), rng)
        if ex.dictionary is not None:
            dictionary = ex.dictionary
        elif ex.bank is not None:
            dictionary = Dictionary(ex.bank)
        elif ex.axes is not None:
            dictionary = Dictionary(ex.axes.reshape((-1,) + train.sample_shape))
        else:
            raise ConfigError(f"method {method} has no atoms to export")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"atoms-{method}-seed{cfg.seed}"
    dictionary.save(f"{stem}.cskt")
    export_pgm(dictionary, f"{stem}.pgm", columns=params["columns"] or None)
    print(f"{stem}.cskt")
    print(f"{stem}.pgm")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "dist" and args.config is None:
            return cmd_dist_tensors(args)
        if args.command == "gen-shifted":
            return cmd_gen_shifted(args)
        if args.command == "export-atoms":
            return cmd_export_atoms(args)
        return cmd_experiment(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
