"""Write the 5000-sample MNIST subset bundled with mlxtend as gzipped IDX files.

Usage: python tools/build_mnist_subset.py path/to/mlxtend-*.whl data/mnist5k
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def main(wheel, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)

    header = struct.pack(">IIII", 0x00000803, len(images), 28, 28)
    # mtime=0 keeps the archives byte-reproducible
    with gzip.GzipFile(out / "train-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(header + images.tobytes())
    with gzip.GzipFile(out / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)) + labels.tobytes())
    print(f"wrote {len(labels)} samples to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
