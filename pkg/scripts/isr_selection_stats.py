"""Dump per-category mean ISR selection sizes for a dataset as CSV.

    python scripts/isr_selection_stats.py --data ds.bin --alpha 0.5 --out selection.csv
"""

import argparse

from c2srt.dataio import load_dataset
from c2srt.isr import IsrConfig, batch_selection_weights, write_selection_csv


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True)
    ap.add_argument("--alpha", type=float, default=0.5)
    ap.add_argument("--max-patches", type=int, default=32)
    ap.add_argument("--inv-temp", type=float, default=100.0)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    ds = load_dataset(args.data)
    cfg = IsrConfig(args.alpha, args.max_patches, args.inv_temp)
    # teacher patches: the adapter is the identity before training
    w = batch_selection_weights(ds.test.patches, ds.text, cfg)
    write_selection_csv(args.out, ds.categories.names, w)


if __name__ == "__main__":
    main()
