"""Experiment configuration, runners and result files.

Configs are INI files (one ``[section]`` per topic, ``key = value`` lines,
``#`` comments). Per-method overrides live in ``[method.NAME]`` sections.
See README.md for the full key list.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
import re
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .classifier import accuracy, svm_fit
from .clustering import (clustering_accuracy, kmeans, kmeans_shift_invariant,
                         random_assignments)
from .core import DataError, seeded_rng, worker_seed
from .datasets import load_csv_series, load_idx, make_shifted, subset_per_class
from .features import KINDS, FeatureConfig, fit as fit_features

CLUSTER_METHODS = ("KM", "KM_si", "RAND")
EXPERIMENTS = ("cluster-shifted", "classify", "sweep-patch", "dist", "gen-shifted", "export-atoms")


class ConfigError(ValueError):
    """Malformed or schema-violating configuration."""


# --- value parsers -----------------------------------------------------------------

def _int(text):
    return int(text)


def _float(text):
    return float(text)


def _str(text):
    return text.strip()


def _list(item):
    def parse(text):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise ValueError("empty list")
        return [item(p) for p in parts]
    parse.__name__ = f"list of {item.__name__.strip('_')}"
    return parse


def _size(text):
    text = text.strip()
    return "full" if text == "full" else int(text)


def _shape(text):
    return tuple(int(v) for v in re.split(r"[x,\s]+", text.strip()) if v)


def _choice(*options):
    def parse(text):
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    parse.__name__ = "choice"
    return parse


def _label_column(text):
    text = text.strip()
    return text if text in ("first", "last") else int(text)


SCHEMA = {
    "experiment": {"kind": _choice(*EXPERIMENTS), "seed": _int, "out": _str, "workers": _int},
    "data": {"format": _choice("idx", "csv"), "name": _str, "images": _str, "labels": _str,
             "train": _str, "test": _str, "label_column": _label_column, "shape": _shape,
             "delimiter": _str},
    "cluster": {"frames": _list(_int), "methods": _list(_str), "k": _int, "per_class": _int,
                "km_iters": _int, "si_iters": _int, "atom": _int,
                "weighting": _choice("uniform", "coefficient")},
    "classify": {"methods": _list(_str), "train_sizes": _list(_size), "test_per_class": _int,
                 "lam": _float, "epochs": _int},
    "sweep": {"methods": _list(_str), "patch_sizes": _list(_int), "train_size": _size},
    "dist": {"pairs": _list(_str), "max_shift": _int},
    "shift": {"frame": _int, "per_class": _int},
    "export": {"method": _str, "train_size": _size, "columns": _int},
}

REQUIRED = {"experiment": ("kind", "seed")}

DEFAULTS = {
    "experiment": {"out": "results", "workers": 1},
    "data": {"format": "idx", "label_column": 0},
    "cluster": {"frames": [28, 32, 36, 44, 56], "methods": list(CLUSTER_METHODS), "k": 10,
                "per_class": 100, "km_iters": 100, "si_iters": 50, "weighting": "uniform"},
    "classify": {"methods": ["DL", "PDL", "CDL", "GFE", "PCA"], "train_sizes": [2000],
                 "test_per_class": 200, "lam": 1e-4, "epochs": 20},
    "sweep": {"methods": ["DL", "PDL", "CDL"], "patch_sizes": [4, 8, 16, 32], "train_size": "full"},
    "dist": {"pairs": ["0:1"], "max_shift": -1},
    "shift": {"frame": 56, "per_class": 100},
    "export": {"method": "CDL", "train_size": 2000, "columns": 0},
}

log = logging.getLogger(__name__)

_ANNOTATION_TYPES = {"int": _int, "float": _float}


def _feature_schema():
    out = {}
    for f in fields(FeatureConfig):
        base = str(f.type).split("|")[0].strip()
        out[f.name] = _ANNOTATION_TYPES[base]
    return out


FEATURE_SCHEMA = _feature_schema()


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    out: str = "results"
    workers: int = 1
    scale: float = 1.0
    sections: dict = field(default_factory=dict)
    method_params: dict = field(default_factory=dict)
    source: str = "<config>"

    def section(self, name):
        merged = dict(DEFAULTS.get(name, {}))
        merged.update(self.sections.get(name, {}))
        return merged

    def feature_config(self, method, **overrides):
        params = dict(self.method_params.get(method, {}))
        params.update(overrides)
        return FeatureConfig(**params)

    def scaled(self, count):
        if count == "full":
            return count
        return max(1, int(round(count * self.scale)))

    def canonical(self):
        """Everything that determines results (not ``out`` or ``workers``)."""
        return {"kind": self.kind, "seed": self.seed, "scale": self.scale,
                "sections": {k: self.sections[k] for k in sorted(self.sections)},
                "methods": {k: self.method_params[k] for k in sorted(self.method_params)}}

    @property
    def config_hash(self):
        blob = json.dumps(self.canonical(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _line_index(text):
    """Map ``section`` and ``(section, key)`` to the 1-based line defining them."""
    where = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            where.setdefault(section, lineno)
            continue
        m = re.match(r"\s*([^#;\s=:][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip()), lineno)
    return where


def parse_config(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    where = _line_index(text)

    def fail(section, key, message):
        line = where.get((section, key), where.get(section))
        loc = f"{source}:{line}" if line else source
        raise ConfigError(f"{loc}: [{section}] {key}: {message}" if key else f"{loc}: [{section}] {message}")

    sections, method_params = {}, {}
    for name in parser.sections():
        if name.startswith("method."):
            method = name.split(".", 1)[1]
            if method not in KINDS:
                fail(name, None, f"unknown method {method!r}; known: {', '.join(KINDS)}")
            schema, target = FEATURE_SCHEMA, method_params.setdefault(method, {})
        elif name in SCHEMA:
            schema, target = SCHEMA[name], sections.setdefault(name, {})
        else:
            fail(name, None, f"unknown section; known: {', '.join(SCHEMA)}, method.NAME")
        for key, raw in parser.items(name):
            if key not in schema:
                fail(name, key, f"unknown key; allowed: {', '.join(schema)}")
            try:
                target[key] = schema[key](raw)
            except ValueError as exc:
                fail(name, key, f"bad value {raw!r} ({schema[key].__name__.strip('_')}: {exc})")
    for name, keys in REQUIRED.items():
        for key in keys:
            if key not in sections.get(name, {}):
                fail(name, None, f"missing required key {key!r}")
    exp = sections.pop("experiment")
    cfg = ExperimentConfig(kind=exp["kind"], seed=exp["seed"], out=exp.get("out", "results"),
                           workers=exp.get("workers", 1), sections=sections,
                           method_params=method_params, source=source)
    if cfg.seed < 0 or cfg.seed >= 2 ** 63:
        fail("experiment", "seed", "seed must be in [0, 2^63)")
    for name, methods_key, known in (("cluster", "methods", CLUSTER_METHODS), ("classify", "methods", KINDS),
                                     ("sweep", "methods", ("DL", "PDL", "CDL"))):
        for m in sections.get(name, {}).get(methods_key, []):
            if m not in known:
                fail(name, methods_key, f"unknown method {m!r}; known: {', '.join(known)}")
    if "method" in sections.get("export", {}) and sections["export"]["method"] not in KINDS + ("KM_si",):
        fail("export", "method", f"unknown method {sections['export']['method']!r}")
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


# --- data ------------------------------------------------------------------------

def resolve_path(cfg, value):
    p = Path(value)
    if p.is_absolute() or cfg.source.startswith("<"):
        return p
    # relative paths are looked up next to the config file, then in the cwd
    beside = Path(cfg.source).parent / p
    return beside if beside.exists() else p


def load_data(cfg):
    """``(train, test)``; ``test`` is None for single-file (IDX) data."""
    spec = cfg.section("data")
    if spec["format"] == "idx":
        for key in ("images", "labels"):
            if key not in spec:
                raise ConfigError(f"{cfg.source}: [data] idx format needs {key!r}")
        data = load_idx(resolve_path(cfg, spec["images"]), resolve_path(cfg, spec["labels"]),
                        spec.get("name", "mnist"))
        if "shape" in spec:
            data.samples = data.samples.reshape((len(data),) + spec["shape"])
        return data, None
    if "train" not in spec:
        raise ConfigError(f"{cfg.source}: [data] csv format needs 'train'")
    kw = dict(label_column=spec["label_column"], delimiter=spec.get("delimiter"),
              shape=spec.get("shape"))
    train = load_csv_series(resolve_path(cfg, spec["train"]), name=spec.get("name"), **kw)
    test = None
    if "test" in spec:
        test = load_csv_series(resolve_path(cfg, spec["test"]), length=math.prod(train.sample_shape),
                               classes=train.meta["classes"], name=spec.get("name"), **kw)
    return train, test


def split_train_test(cfg, train, test, train_size, test_per_class):
    """Train subset of ``train_size`` samples and the matching test set.

    Single-file data is split per class: the first ``train_size / C`` samples
    of every class train, the next ``test_per_class`` test. Two-file data
    takes a seeded random training subset and the whole test file.
    """
    if test is None:
        C = train.n_classes
        if train_size == "full":
            raise ConfigError(f"{cfg.source}: train size 'full' needs a separate test file")
        per = train_size // C
        if per * C != train_size:
            raise ConfigError(f"{cfg.source}: train size {train_size} is not a multiple of {C} classes")
        return subset_per_class(train, per), subset_per_class(train, cfg.scaled(test_per_class), skip=per)
    if train_size == "full" or train_size >= len(train):
        return train, test
    order = np.sort(seeded_rng(worker_seed(cfg.seed, train_size)).permutation(len(train))[:train_size])
    return train.take(order), test


# --- grid execution -----------------------------------------------------------------

def cell_seed(seed, *key):
    """Seed for one grid cell; depends on the cell, not on grid order or workers."""
    return worker_seed(seed, zlib.crc32(repr(key).encode()))


def run_cells(fn, cells, workers=1):
    """Apply ``fn`` to every cell; results come back in grid order."""
    if workers <= 1 or len(cells) <= 1:
        out = []
        for i, c in enumerate(cells, start=1):
            out.append(fn(c))
            log.info("cell %d/%d done", i, len(cells))
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cells))


def _timed(fn, *args):
    t = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t


# --- clustering -------------------------------------------------------------------

def _cluster_cell(cell):
    method, frame, data, k, params, seed = cell
    rng = seeded_rng(seed)
    if method == "KM":
        res = kmeans(data, k, params["km_iters"], rng)
        assign, iters = res.assignments, res.iterations_run
    elif method == "KM_si":
        atom = params.get("atom")
        shape = tuple(params["base_shape"]) if atom is None else (atom,) * len(data.sample_shape)
        res = kmeans_shift_invariant(data, k, shape, params["si_iters"], rng, params["weighting"])
        assign, iters = res.assignments, res.iterations_run
    else:
        assign, iters = random_assignments(len(data), k, rng), 0
    return clustering_accuracy(assign, data.labels), iters


def _timed_cluster_cell(cell):
    return _timed(_cluster_cell, cell)


def run_cluster_shifted(cfg):
    """Clustering accuracy of each method on digits dropped into larger frames."""
    params = cfg.section("cluster")
    data, _ = load_data(cfg)
    base = subset_per_class(data, cfg.scaled(params["per_class"]))
    params["base_shape"] = list(base.sample_shape)
    extent = base.sample_shape[0]
    for f in params["frames"]:
        if f < extent:
            raise ConfigError(f"{cfg.source}: [cluster] frame {f} smaller than sample extent {extent}")
    cells, meta = [], []
    for frame in params["frames"]:
        shifted = base if frame == extent else make_shifted(base, frame, seeded_rng(cell_seed(cfg.seed, "frame", frame)))
        mean_shift = (frame - extent) / 2
        for method in params["methods"]:
            cells.append((method, frame, shifted, params["k"], params, cell_seed(cfg.seed, method, frame)))
            meta.append((method, frame, mean_shift))
    results = run_cells(_timed_cluster_cell, cells, cfg.workers)
    rows, runtime = [], {}
    for (method, frame, shift), ((acc, iters), secs) in zip(meta, results):
        rows.append({"method": method, "frame": frame, "mean_shift": _fmt_num(shift),
                     "accuracy": f"{acc:.6f}", "iterations": iters, "n_samples": len(base),
                     "seed": cfg.seed, "config_hash": cfg.config_hash})
        runtime[f"{method}@{frame}"] = round(secs, 3)
    return Results("cluster-shifted", rows, runtime, x="mean_shift")


# --- classification ----------------------------------------------------------------

def _classify_cell(cell):
    method, train, test, fconfig, lam, epochs, seed = cell
    rng = seeded_rng(seed)
    extractor = fit_features(method, train.samples, fconfig, rng)
    Ftr = extractor.transform(train.samples)
    Fte = extractor.transform(test.samples)
    model = svm_fit(Ftr, train.labels, lam, epochs, seed, n_classes=max(train.n_classes, test.n_classes))
    return accuracy(model, Fte, test.labels), extractor.output_dim


def _timed_classify_cell(cell):
    return _timed(_classify_cell, cell)


def run_classify(cfg):
    """Test accuracy of each feature extractor plus linear SVM per training size."""
    params = cfg.section("classify")
    train_all, test_all = load_data(cfg)
    cells, meta = [], []
    for size in params["train_sizes"]:
        size = cfg.scaled(size)
        train, test = split_train_test(cfg, train_all, test_all, size, params["test_per_class"])
        for method in params["methods"]:
            cells.append((method, train, test, cfg.feature_config(method), params["lam"], params["epochs"],
                          cell_seed(cfg.seed, method, size)))
            meta.append((method, len(train), len(test)))
    results = run_cells(_timed_classify_cell, cells, cfg.workers)
    rows, runtime = [], {}
    for (method, n_train, n_test), ((acc, dim), secs) in zip(meta, results):
        rows.append({"method": method, "train_size": n_train, "test_size": n_test,
                     "accuracy": f"{acc:.6f}", "feature_dim": dim,
                     "seed": cfg.seed, "config_hash": cfg.config_hash})
        runtime[f"{method}@{n_train}"] = round(secs, 3)
    return Results("classify", rows, runtime, x="train_size")


def run_sweep_patch(cfg):
    """Accuracy of DL (baseline), PDL and CDL as the patch / kernel size varies.

    DL has no patch parameter; it is run once and reported at every size.
    """
    params = cfg.section("sweep")
    cls = cfg.section("classify")
    train_all, test_all = load_data(cfg)
    train, test = split_train_test(cfg, train_all, test_all, cfg.scaled(params["train_size"]),
                                   cls["test_per_class"])
    shape = train.sample_shape
    for p in params["patch_sizes"]:
        if p < 1 or p > min(shape):
            raise ConfigError(f"{cfg.source}: [sweep] patch size {p} outside 1..{min(shape)} for samples {shape}")
    cells, index, meta = [], {}, []
    for p in params["patch_sizes"]:
        for method in params["methods"]:
            key = (method,) if method == "DL" else (method, p)
            if key not in index:
                index[key] = len(cells)
                fconfig = cfg.feature_config(method) if method == "DL" else cfg.feature_config(method, patch=p)
                cells.append((method, train, test, fconfig, cls["lam"], cls["epochs"],
                              cell_seed(cfg.seed, *key)))
            meta.append((method, p, index[key]))
    results = run_cells(_timed_classify_cell, cells, cfg.workers)
    rows, runtime = [], {}
    for method, p, i in meta:
        (acc, dim), secs = results[i]
        rows.append({"method": method, "patch_size": p, "train_size": len(train), "test_size": len(test),
                     "accuracy": f"{acc:.6f}", "feature_dim": dim,
                     "seed": cfg.seed, "config_hash": cfg.config_hash})
        runtime[f"{method}@{p}"] = round(secs, 3)
    return Results("sweep-patch", rows, runtime, x="patch_size")


# --- distances --------------------------------------------------------------------

def run_dist(cfg):
    """Euclidean, shift-minimized and cross-correlation distances between sample pairs."""
    from .distances import euclidean_distance, shift_min_distance, xcorr_distance
    params = cfg.section("dist")
    data, _ = load_data(cfg)
    rows = []
    for pair in params["pairs"]:
        try:
            i, j = (int(v) for v in pair.split(":"))
        except ValueError:
            raise ConfigError(f"{cfg.source}: [dist] pair {pair!r} is not 'i:j'") from None
        for v in (i, j):
            if not 0 <= v < len(data):
                raise ConfigError(f"{cfg.source}: [dist] index {v} outside 0..{len(data) - 1}")
        a, b = data.samples[i], data.samples[j]
        ms = None if params["max_shift"] < 0 else params["max_shift"]
        d_shift, shift = shift_min_distance(a, b, ms)
        rows.append({"a": i, "b": j, "label_a": int(data.labels[i]), "label_b": int(data.labels[j]),
                     "euclidean": f"{euclidean_distance(a, b):.9g}", "shift_min": f"{d_shift:.9g}",
                     "shift": " ".join(str(s) for s in shift), "xcorr": f"{xcorr_distance(a, b):.9g}",
                     "seed": cfg.seed, "config_hash": cfg.config_hash})
    return Results("dist", rows, {}, x=None)


# --- results files -----------------------------------------------------------------

@dataclass
class Results:
    kind: str
    rows: list
    runtime: dict
    x: str | None


def _fmt_num(v):
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_csv(path, rows, columns=None):
    columns = columns or list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def pivot(rows, x, value="accuracy", scale=100.0):
    """Table with one row per ``x`` value and one column per method.

    Methods with no value anywhere are dropped and reported separately.
    """
    methods = list(dict.fromkeys(r["method"] for r in rows))
    xs = list(dict.fromkeys(r[x] for r in rows))
    cells = {(r[x], r["method"]): r.get(value, "") for r in rows}
    kept = [m for m in methods if any(cells.get((v, m), "") != "" for v in xs)]
    dropped = [m for m in methods if m not in kept]
    table = []
    for v in xs:
        row = {x: v}
        for m in kept:
            raw = cells.get((v, m), "")
            row[m] = "" if raw == "" else f"{float(raw) * scale:.4f}"
        table.append(row)
    return table, [x] + kept, dropped


def emit_plotdata(results, out_dir, stem=None):
    """Write the results CSV, one pivoted plot CSV and a JSON manifest.

    Returns the manifest dictionary. Runtimes go to the manifest only so
    that the CSVs of a rerun are byte-identical.
    """
    if not results.rows:
        raise ValueError("no results to write")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or results.kind
    files = []
    results_path = out_dir / f"{stem}.csv"
    write_csv(results_path, results.rows)
    files.append({"path": results_path.name, "role": "results"})
    notes = []
    if results.x is not None:
        table, columns, dropped = pivot(results.rows, results.x)
        plot_path = out_dir / f"{stem}_plot.csv"
        write_csv(plot_path, table, columns)
        files.append({"path": plot_path.name, "role": "plotdata", "x": results.x,
                      "columns": columns[1:], "units": "accuracy %"})
        notes += [f"method {m} has no values and was omitted from {plot_path.name}" for m in dropped]
    row = results.rows[0]
    manifest = {"experiment": results.kind, "seed": row.get("seed"), "config_hash": row.get("config_hash"),
                "files": files, "notes": notes, "runtime_seconds": results.runtime}
    (out_dir / f"{stem}_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


RUNNERS = {
    "cluster-shifted": run_cluster_shifted,
    "classify": run_classify,
    "sweep-patch": run_sweep_patch,
    "dist": run_dist,
}


def with_overrides(cfg, kind=None, seed=None, out=None, scale=None):
    changes = {}
    if kind is not None:
        changes["kind"] = kind
    if seed is not None:
        changes["seed"] = seed
    if out is not None:
        changes["out"] = out
    if scale is not None:
        if scale <= 0:
            raise ConfigError(f"--scale must be positive, got {scale}")
        changes["scale"] = scale
    return replace(cfg, **changes)
