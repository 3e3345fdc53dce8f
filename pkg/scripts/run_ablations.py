"""Run the module, relation-source, alpha and lambda grids on synthetic data and write CSVs.

    python scripts/run_ablations.py --out results/ --seeds 5 --epochs 10
"""

import argparse
import sys
import time
from pathlib import Path

from c2srt.dataio import SyntheticConfig
from c2srt.experiments import run_suite, write_suite_csv
from c2srt.trainloss import TrainConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--suites", default="table2,table3,alpha,lambda")
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for suite in args.suites.split(","):
        t0 = time.time()
        res = run_suite(suite, range(args.seeds), synth=SyntheticConfig(seed=0),
                        tcfg=TrainConfig(epochs=args.epochs),
                        progress=lambda s: print(f"[{suite}] {s}", file=sys.stderr))
        write_suite_csv(out / f"{suite}.csv", res)
        print(f"{suite}: {time.time() - t0:.0f}s -> {out / (suite + '.csv')}")


if __name__ == "__main__":
    main()
