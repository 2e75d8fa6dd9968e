"""Rebuild the bundled benchmark data under ``data/`` from PyPI wheels.

The sandbox this project grew up in only reaches package indexes, so the
datasets are pulled out of wheels that happen to ship them:

* ``mlxtend`` carries 5000 MNIST training digits (500 per class) as CSV.
  They are re-encoded here as gzipped IDX files so the regular IDX loader
  is what reads them.
* ``ucr-datasets`` carries the full UCR ElectricDevices train/test split.

Usage::

    python scripts/fetch_data.py [--out data]
"""

import argparse
import gzip
import io
import pathlib
import subprocess
import sys
import tempfile
import zipfile

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from shiftsparse.datasets import write_idx  # noqa: E402


def _download(package, dest):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", package, "--no-deps", "-q", "-d", str(dest)],
        check=True,
    )
    return next(pathlib.Path(dest).glob(package.replace("-", "_") + "*.whl"))


def fetch_mnist(out, tmp):
    wheel = zipfile.ZipFile(_download("mlxtend", tmp))
    raw = gzip.decompress(wheel.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    write_idx(out / "mnist5k-images-idx3-ubyte.gz", images)
    write_idx(out / "mnist5k-labels-idx1-ubyte.gz", labels)
    print(f"mnist: {len(labels)} digits -> {out}")


def fetch_electric_devices(out, tmp):
    wheel = zipfile.ZipFile(_download("ucr-datasets", tmp))
    for split in ("TRAIN", "TEST"):
        payload = wheel.read(f"ucr_datasets/data/ElectricDevices_{split}.tsv")
        target = out / f"ElectricDevices_{split}.tsv.gz"
        n_rows = payload.count(b"\n")
        # mtime=0 keeps the archive byte-stable across rebuilds
        with open(target, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
            gz.write(payload)
        print(f"electric devices {split}: {n_rows} rows -> {target}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parents[1] / "data"))
    args = parser.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        fetch_mnist(out, pathlib.Path(tmp))
        fetch_electric_devices(out, pathlib.Path(tmp))


if __name__ == "__main__":
    main()
