"""Labeled datasets: IDX and CSV ingestion, shifted-digit generation.

Pixel data from IDX files is scaled to [0, 1]. CSV/TSV series files hold
one sample per row with the class label in a configurable column; USPS is
expected in the same row layout (256 values plus a label).
"""

from __future__ import annotations

import csv
import gzip
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DataError, load_tensors, save_tensors

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    name: str = ""
    source: str = ""
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise DataError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.labels.size and self.labels.min() < 0:
            raise DataError("labels must be non-negative")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return tuple(self.samples.shape[1:])

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def take(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.samples[indices], self.labels[indices], name or self.name,
                              self.source, self.seed, dict(self.meta))


# --- IDX ---------------------------------------------------------------------

def _read_maybe_gzip(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, expected_magic, path):
    if len(raw) < 8:
        raise DataError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: bad IDX magic, expected 0x{expected_magic:08X}, got 0x{magic:08X}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    payload = raw[header:]
    if len(payload) < count:
        raise DataError(f"{path}: truncated payload, expected {count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path, labels_path, name="mnist"):
    """Read an IDX image/label file pair (optionally gzipped)."""
    for p in (images_path, labels_path):
        if not Path(p).exists():
            raise DataError(f"missing data file: {p}")
    images = _parse_idx(_read_maybe_gzip(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_maybe_gzip(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    return LabeledDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), name,
                          str(images_path))


def write_idx(path, array):
    """Write a uint8 array as IDX (gzipped when ``path`` ends in ``.gz``)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    blob = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with open(path, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
            gz.write(blob)
    else:
        path.write_bytes(blob)


# --- CSV / TSV -----------------------------------------------------------------

def load_csv_series(path, length=None, label_column=0, delimiter=None, classes=None, name=None,
                    shape=None):
    """One sample per row; ``label_column`` is an index or ``"first"``/``"last"``.

    Labels are mapped onto ``0..C-1`` through ``classes`` (sorted raw label
    values); when omitted the sorted distinct labels of this file are used.
    The mapping is kept in ``meta["classes"]`` so a test split can reuse it.
    ``shape`` reshapes each row (e.g. ``(16, 16)`` for USPS).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing data file: {path}")
    text = _read_maybe_gzip(path).decode("utf-8")
    if delimiter is None:
        first = text.split("\n", 1)[0]
        delimiter = "\t" if "\t" in first else ","
    rows, raw_labels = [], []
    for lineno, row in enumerate(csv.reader(io.StringIO(text), delimiter=delimiter), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        col = {"first": 0, "last": len(row) - 1}.get(label_column, label_column)
        try:
            values = [float(c) for i, c in enumerate(row) if i != col % len(row)]
            label = float(row[col])
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}:{lineno}: non-numeric or missing cell ({exc})") from None
        if length is None:
            length = len(values)
        if len(values) != length:
            raise DataError(f"{path}:{lineno}: ragged row, expected {length} values, got {len(values)}")
        if label != int(label):
            raise DataError(f"{path}:{lineno}: label {label} is not an integer")
        rows.append(values)
        raw_labels.append(int(label))
    samples = np.array(rows, dtype=np.float64).reshape((len(rows), length))
    if not np.all(np.isfinite(samples)):
        raise DataError(f"{path}: non-finite values")
    raw_labels = np.array(raw_labels, dtype=np.int64)
    if classes is None:
        classes = sorted(set(raw_labels.tolist()))
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        labels = np.array([lookup[c] for c in raw_labels.tolist()], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"{path}: label {exc.args[0]} not among known classes {classes}") from None
    if shape is not None:
        samples = samples.reshape((len(samples),) + tuple(shape))
    return LabeledDataset(samples, labels, name or path.stem, str(path),
                          meta={"classes": list(classes)})


# --- derived datasets --------------------------------------------------------------

def make_shifted(data, frame, rng):
    """Drop every sample into a larger zero frame at a uniform random offset.

    Offsets are drawn independently per axis from ``[0, frame - extent]``, so
    the mean offset is ``(frame - extent) / 2``. Offsets are kept in
    ``meta["offsets"]``.
    """
    shape = data.sample_shape
    frames = tuple(int(f) for f in np.broadcast_to(frame, (len(shape),)))
    if any(f < n for f, n in zip(frames, shape)):
        raise DataError(f"frame {frames} smaller than sample {shape}")
    spans = [f - n for f, n in zip(frames, shape)]
    offsets = np.stack([rng.integers(0, s + 1, size=len(data)) for s in spans], axis=1)
    out = np.zeros((len(data),) + frames)
    for i, off in enumerate(offsets):
        region = (i,) + tuple(slice(o, o + n) for o, n in zip(off, shape))
        out[region] = data.samples[i]
    meta = dict(data.meta)
    meta["offsets"] = offsets.tolist()
    meta["frame"] = list(frames)
    return LabeledDataset(out, data.labels.copy(), f"{data.name}-shift{frames[0]}", data.source,
                          data.seed, meta)


def subset_per_class(data, per_class, rng=None, skip=0):
    """First ``per_class`` samples of each class in file order.

    With ``rng`` the picks are a seeded random draw instead. ``skip`` drops
    that many leading occurrences per class first, which gives disjoint
    train/test subsets from one file.
    """
    picks = []
    for c in range(data.n_classes):
        idx = np.flatnonzero(data.labels == c)
        if len(idx) < skip + per_class:
            raise DataError(f"class {c} has {len(idx)} samples, need {skip + per_class}")
        idx = idx[skip:]
        if rng is not None:
            idx = np.sort(rng.choice(idx, size=per_class, replace=False))
        picks.append(idx[:per_class])
    order = np.sort(np.concatenate(picks)) if picks else np.zeros(0, np.int64)
    return data.take(order, name=f"{data.name}-{per_class}pc")


# --- persistence ---------------------------------------------------------------

def save_dataset(data, path):
    """Samples and labels as tensor blocks; descriptive fields in ``path.json``."""
    path = Path(path)
    save_tensors(path, data.samples, data.labels.astype(np.float64))
    side = {"name": data.name, "source": data.source, "seed": data.seed, "meta": data.meta}
    Path(str(path) + ".json").write_text(json.dumps(side, sort_keys=True))


def load_dataset(path):
    path = Path(path)
    samples, labels = load_tensors(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    return LabeledDataset(samples, labels.astype(np.int64), side["name"], side["source"],
                          side["seed"], side["meta"])
