#!/usr/bin/env python3
"""Download the four MNIST IDX files into a target directory.

Usage: fetch_mnist.py [DEST]          (default DEST: /root/data/mnist)

Files are fetched gzipped from the ossci-datasets mirror and stored both as
.gz and decompressed, matching what the loaders accept. Existing files are
kept unless --force is given.
"""

import argparse
import gzip
import hashlib
import sys
import urllib.request
from pathlib import Path

MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"

FILES = {
    "train-images-idx3-ubyte.gz":
        "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609",
    "train-labels-idx1-ubyte.gz":
        "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c",
    "t10k-images-idx3-ubyte.gz":
        "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6",
    "t10k-labels-idx1-ubyte.gz":
        "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6",
}


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("dest", nargs="?", default="/root/data/mnist",
                    type=Path)
    ap.add_argument("--force", action="store_true",
                    help="re-download even if files exist")
    args = ap.parse_args()
    args.dest.mkdir(parents=True, exist_ok=True)

    for name, digest in FILES.items():
        gz = args.dest / name
        plain = args.dest / name[:-3]
        if gz.exists() and not args.force:
            print(f"keep {gz}")
        else:
            url = MIRROR + name
            print(f"get  {url}")
            urllib.request.urlretrieve(url, gz)
        got = sha256(gz)
        if got != digest:
            print(f"checksum mismatch for {name}:\n  want {digest}\n  got  {got}",
                  file=sys.stderr)
            return 1
        if not plain.exists() or args.force:
            plain.write_bytes(gzip.decompress(gz.read_bytes()))
            print(f"wrote {plain}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
