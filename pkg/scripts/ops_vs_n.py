"""Operation counts against the number of correspondences, as CSV plus a ratio table.

    python3 scripts/ops_vs_n.py --lo 6 --hi 20 -o artifacts/ops.csv
"""
import argparse

from pnpnet.evalbench import ops_series
from pnpnet.io import write_csv
from pnpnet.opcount import OpConfig, count_ops

METHODS = ["net", "refine", "pnp-net", "epnp", "epnp-lm", "ransac", "ransac-expected"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lo", type=int, default=6)
    ap.add_argument("--hi", type=int, default=20)
    ap.add_argument("--lm-layers", type=int, default=10)
    ap.add_argument("-o", "--output", default="artifacts/ops.csv")
    args = ap.parse_args(argv)
    cfg = OpConfig(lm_layers=args.lm_layers)
    rows = ops_series(METHODS, range(args.lo, args.hi + 1), cfg)
    write_csv(args.output, rows, ["n", "method", "additions", "multiplications", "divisions",
                                  "transcendentals", "total"])
    print(f"{'n':>3} " + " ".join(f"{m:>15}" for m in METHODS) + "   net/refine  ransac/pnp-net")
    for n in range(args.lo, args.hi + 1):
        tot = {m: count_ops(m, n, cfg).total for m in METHODS}
        print(f"{n:>3} " + " ".join(f"{tot[m]:>15,}" for m in METHODS)
              + f"   {tot['net'] / tot['refine']:10.2f}  {tot['ransac'] / tot['pnp-net']:13.1f}")


if __name__ == "__main__":
    main()
