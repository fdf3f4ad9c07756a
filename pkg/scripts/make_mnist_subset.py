"""Write the 5000-sample MNIST subset bundled with mlxtend as gzipped IDX files.

    pip download --no-deps mlxtend
    python scripts/make_mnist_subset.py mlxtend-*.whl tests/data
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def main(wheel: str, out_dir: str) -> None:
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(raw.decode().splitlines(), delimiter=",", dtype=np.int64)
    pixels = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    # mtime=0 keeps the archives byte-reproducible
    with gzip.GzipFile(out / "mnist5k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">iiii", 2051, n, 28, 28) + pixels.tobytes())
    with gzip.GzipFile(out / "mnist5k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">ii", 2049, n) + labels.tobytes())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
