"""Materialize MovieLens 100K as data/ml-100k/u.data.

GroupLens downloads are not always reachable; the pytorch-widedeep wheel ships
the same 100,000 ratings (original u.data row order), so we pull it from PyPI
and rewrite it as tab-separated user, item, rating, timestamp.
"""

import argparse
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import pandas as pd

WHEEL = "pytorch-widedeep==1.7.0"
MEMBER = "pytorch_widedeep/datasets/data/MovieLens100k_data.parquet.brotli"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/ml-100k/u.data")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, WHEEL],
            check=True,
        )
        whl = next(Path(tmp).glob("*.whl"))
        with zipfile.ZipFile(whl) as z:
            df = pd.read_parquet(io.BytesIO(z.read(MEMBER)))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    df = df[["user_id", "movie_id", "rating", "timestamp"]]
    df.to_csv(out, sep="\t", header=False, index=False)
    print(f"wrote {len(df)} rows to {out}")


if __name__ == "__main__":
    main()
