"""Desk-scale training run (batch 128, 20k updates) with periodic checkpoints.

    python3 scripts/train_desk.py --out artifacts/desk_n9.pnpw

Re-running with an existing checkpoint at ``--out`` resumes from it.
"""
import argparse
import logging
import sys
import time
from pathlib import Path

from pnpnet.io import load_state, save_state
from pnpnet.synthgen import ScenarioConfig
from pnpnet.trainer import TrainConfig, train


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="artifacts/desk_n9.pnpw")
    ap.add_argument("--updates", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr-schedule", choices=["constant", "cosine"], default="constant")
    ap.add_argument("--log", default=None, help="JSONL log (default: <out>.log.jsonl)")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    tc = TrainConfig(total_updates=args.updates, seed=args.seed, lr_schedule=args.lr_schedule)
    sc = ScenarioConfig()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    state = load_state(out, tc) if out.exists() else None
    t0 = time.time()

    def progress(u, total, terms):
        if u % 500 == 0:
            print(f"[{time.time() - t0:7.0f}s] update {u} loss {total:.4f}", flush=True)

    _, lm, report = train(tc, sc, state=state, checkpoint=lambda st: save_state(out, st, tc, sc),
                          log_path=args.log or str(out) + ".log.jsonl", progress=progress)
    print("intermediate loss:", report.intermediate_loss[0], "->", report.intermediate_loss[-1])
    print("pipeline success:", report.pipeline_success[-1], "net success:", report.net_success[-1])
    print("refiner:", lm)
    return 0


if __name__ == "__main__":
    sys.exit(main())
