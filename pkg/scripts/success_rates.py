"""Success-rate experiments on synthetic data with a trained model.

    python3 scripts/success_rates.py --weights artifacts/desk_n9.pnpw --experiment uniform
    python3 scripts/success_rates.py --weights artifacts/desk_n9.pnpw --experiment gaussian
    python3 scripts/success_rates.py --weights artifacts/desk_n9.pnpw --experiment sweep

``uniform`` compares every method with and without mismatches under the training
pose prior, ``gaussian`` repeats that under a N(0, 25^2) translation prior, and
``sweep`` fixes the number of mismatches at 0..4. Results go to a CSV in the
``evalbench`` summary format and a short table on stdout.
"""
import argparse
import sys

from pnpnet.evalbench import SUMMARY_COLUMNS, SuccessCriteria, evaluate, sweep_outliers
from pnpnet.io import load_weights, write_csv
from pnpnet.pipeline import SolverContext
from pnpnet.synthgen import ScenarioConfig

ALL = ["net", "pnp-net", "epnp", "epnp-lm", "ransac"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--weights", required=True)
    ap.add_argument("--experiment", choices=["uniform", "gaussian", "sweep"], default="uniform")
    ap.add_argument("--methods", default=",".join(ALL))
    ap.add_argument("--trials", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-o", "--output", default=None)
    args = ap.parse_args(argv)

    params, lm, _, _ = load_weights(args.weights)
    ctx = SolverContext(params=params, lm=lm)
    methods = args.methods.split(",")
    crit = SuccessCriteria(1.0, 0.2)
    if args.experiment == "sweep":
        reps = sweep_outliers(methods, ScenarioConfig(), crit, (0, 1, 2, 3, 4), args.trials, args.seed, ctx)
        labelled = [(f"fixed-{k}", r) for k, r in enumerate(reps)]
    else:
        prior = "uniform" if args.experiment == "uniform" else "gaussian"
        labelled = [(f"{prior}-clean", evaluate(methods, ScenarioConfig(pose_prior=prior, outliers=False),
                                                crit, args.trials, args.seed, ctx)),
                    (f"{prior}-outliers", evaluate(methods, ScenarioConfig(pose_prior=prior), crit,
                                                   args.trials, args.seed + 1, ctx))]
    rows = [row for label, rep in labelled for row in rep.summary_rows(label)]
    out = args.output or f"artifacts/{args.experiment}.csv"
    write_csv(out, rows, SUMMARY_COLUMNS)
    print(f"{'scenario':>18} " + " ".join(f"{m:>8}" for m in methods))
    for label, rep in labelled:
        print(f"{label:>18} " + " ".join(f"{rep.joint(m):8.3f}" for m in methods))
    print(f"wrote {out}", file=sys.stderr)


if __name__ == "__main__":
    main()
