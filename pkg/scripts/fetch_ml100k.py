#!/usr/bin/env python3
"""Materialize the MovieLens-100K raw files (u.data, u.item, u.user).

The GroupLens host is not always reachable from build machines, but the
pytorch-widedeep wheel on PyPI ships the complete ML-100K tables as parquet.
This script downloads that wheel with pip and writes the three files back
out in the original MovieLens layout.

Usage:
  python scripts/fetch_ml100k.py --out data/ml-100k
"""

import argparse
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import pandas as pd

WHEEL_SPEC = "pytorch-widedeep==1.7.0"
PREFIX = "pytorch_widedeep/datasets/data/MovieLens100k_"


def _download_wheel(dest: Path) -> Path:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", WHEEL_SPEC, "--no-deps", "-q", "-d", str(dest)],
        check=True,
    )
    wheels = sorted(dest.glob("pytorch_widedeep-*.whl"))
    if not wheels:
        raise SystemExit("pip download produced no wheel")
    return wheels[0]


def _fmt(value) -> str:
    if pd.isna(value):
        return ""
    return str(value)


def write_ml100k(wheel: Path, out: Path) -> None:
    z = zipfile.ZipFile(wheel)
    tables = {
        name: pd.read_parquet(io.BytesIO(z.read(f"{PREFIX}{name}.parquet.brotli")))
        for name in ("data", "items", "users")
    }
    out.mkdir(parents=True, exist_ok=True)

    data = tables["data"]
    with open(out / "u.data", "w", encoding="latin-1", newline="\n") as fh:
        for row in data.itertuples(index=False):
            fh.write(f"{row.user_id}\t{row.movie_id}\t{row.rating}\t{row.timestamp}\n")

    items = tables["items"]
    with open(out / "u.item", "w", encoding="latin-1", errors="replace", newline="\n") as fh:
        for row in items.itertuples(index=False):
            fh.write("|".join(_fmt(v) for v in row) + "\n")

    users = tables["users"]
    with open(out / "u.user", "w", encoding="latin-1", newline="\n") as fh:
        for row in users.itertuples(index=False):
            fh.write("|".join(_fmt(v) for v in row) + "\n")

    print(f"wrote {len(data)} ratings, {len(items)} items, {len(users)} users to {out}")


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", default="data/ml-100k", help="output directory")
    parser.add_argument("--wheel", default=None, help="use an already-downloaded wheel")
    args = parser.parse_args()

    if args.wheel:
        write_ml100k(Path(args.wheel), Path(args.out))
        return
    with tempfile.TemporaryDirectory() as tmp:
        write_ml100k(_download_wheel(Path(tmp)), Path(args.out))


if __name__ == "__main__":
    main()
