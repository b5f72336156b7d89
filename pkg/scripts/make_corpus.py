#!/usr/bin/env python3
"""Generate a synthetic blob corpus on disk (images/ + masks/ PNGs)."""

import argparse
import sys
from pathlib import Path

from promptpix.data import synth_dataset, write_dataset


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=200)
    parser.add_argument("--height", type=int, default=32)
    parser.add_argument("--width", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True)
    args = parser.parse_args()

    out = Path(args.out)
    if out.exists():
        print(f"error: {out} already exists", file=sys.stderr)
        return 1
    samples = synth_dataset(args.n, args.height, args.width, args.seed)
    write_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
