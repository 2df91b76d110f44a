#!/usr/bin/env python3
"""Packs the 10,000 MNIST digits shipped in the MIT-licensed `mnist` npm
package (src/digits/<d>.json, 784 floats in [0, 1] per image) into gzipped
IDX files under data/.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_digit_bundle.py package/src/digits data
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    images, labels = bytearray(), bytearray()
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(raw) // 784
        for i in range(count):
            images.extend(min(255, max(0, round(v * 255))) for v in raw[i * 784:(i + 1) * 784])
            labels.append(digit)
    n = len(labels)
    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "digits-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28) + bytes(images))
    with gzip.GzipFile(dst / "digits-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n) + bytes(labels))
    print(f"wrote {n} digits to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
