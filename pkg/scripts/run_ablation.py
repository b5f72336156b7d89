#!/usr/bin/env python3
"""Train and evaluate every architecture variant on one synthetic corpus.

Writes one subdirectory per variant (checkpoint, loss CSV, metrics JSON)
plus a summary CSV comparing all variants.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

from promptpix import backbone as bb
from promptpix import training as tr
from promptpix.checkpoint import save_checkpoint
from promptpix.config import ABLATION_VARIANTS, BackboneConfig, TrainConfig, save_run_config
from promptpix.data import synth_dataset


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=200, help="corpus size (train+test)")
    parser.add_argument("--size", type=int, default=32, help="image height and width")
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--lr", type=float, default=5e-4)
    parser.add_argument("--batch", type=int, default=4)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--test-fraction", type=float, default=0.2)
    parser.add_argument("--out", required=True)
    args = parser.parse_args()

    out = Path(args.out)
    if out.exists():
        print(f"error: {out} already exists", file=sys.stderr)
        return 1
    out.mkdir(parents=True)

    samples = synth_dataset(args.n, args.size, args.size, args.seed)
    n_test = max(1, int(round(args.n * args.test_fraction)))
    train_samples, test_samples = samples[:-n_test], samples[-n_test:]

    bcfg = BackboneConfig(seed=args.seed)
    tcfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        max_epochs=args.epochs,
        seed=args.seed,
    )
    results = tr.run_ablation(bcfg, tcfg, train_samples, test_samples, log=print)

    rows = []
    for variant in ABLATION_VARIANTS:
        res = results[variant]
        vdir = out / variant
        vdir.mkdir()
        model = bb.build_model(bcfg, variant)  # geometry for the config snapshot
        vcfg = TrainConfig(
            learning_rate=args.lr, batch_size=args.batch, max_epochs=args.epochs,
            seed=args.seed, ablation_variant=variant,
        )
        save_run_config(bcfg, vcfg, vdir / "config.json")
        with open(vdir / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            for i, loss in enumerate(res["losses"], start=1):
                w.writerow([i, repr(loss)])
        with open(vdir / "metrics.json", "w") as fh:
            json.dump({"summary": res["summary"].as_dict(),
                       "tunable_params": res["tunable_params"],
                       "seconds": res["seconds"]}, fh, indent=2, sort_keys=True)
        s = res["summary"]
        rows.append([variant, res["tunable_params"], s.dice, s.miou, s.mae,
                     s.accuracy, s.s_measure, s.e_measure, round(res["seconds"], 1)])
        del model

    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "tunable_params", "dice", "miou", "mae",
                    "accuracy", "s_measure", "e_measure", "seconds"])
        w.writerows(rows)
    print(f"\nwrote {out}/summary.csv")
    for row in rows:
        print(f"  {row[0]:24s} dice {row[2]:.4f}  params {row[1]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
