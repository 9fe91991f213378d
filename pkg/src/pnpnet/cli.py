"""Command line: ``pnpnet {generate,train,solve,eval,bench-ops,import}``.

Exit codes: 0 success, 1 usage or schema error, 2 file IO error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import re
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .errors import ConfigError, NonFiniteLoss, PnPError, UnknownMethod
from .evalbench import (SUMMARY_COLUMNS, SuccessCriteria, evaluate, evaluate_arrays,
                        ops_series, sweep_outliers)
from .geometry import CameraIntrinsics, Pose, Rotation
from .io import load_state, load_weights, read_dataset, save_state, write_csv, write_dataset
from .irls_lm import LMConfig
from .opcount import METHODS as OP_METHODS, OpConfig
from .pipeline import METHODS, SolverContext, prepare_arrays, run
from .preprocess import ProblemInstance
from .ransac import RansacConfig
from .synthgen import ScenarioConfig, batch_to_instances, sample_batch
from .trainer import TrainConfig, pose_errors, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("pnpnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------- config files

def _build(cls, values, section):
    """Instantiate a config dataclass from a dict, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad value in [{section}]: {exc}") from exc


def load_run_config(path, sections):
    """Read a JSON config with only the given top-level sections."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise ConfigError(f"{path}: unknown section(s): {', '.join(unknown)}")
    return {name: _build(cls, data.get(name, {}), name) for name, cls in sections.items()}


def _on_off(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _threshold_r(text):
    m = re.fullmatch(r"\s*([0-9.eE+-]+)\s*(deg|rad)?\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"bad rotation threshold {text!r} (e.g. 1deg, 0.02rad)")
    return float(m.group(1)), (m.group(2) or "deg") == "deg"


def _n_range(text):
    m = re.fullmatch(r"(\d+)\.\.(\d+)", text)
    if not m or int(m.group(1)) > int(m.group(2)):
        raise argparse.ArgumentTypeError("expected LO..HI, e.g. 6..20")
    return list(range(int(m.group(1)), int(m.group(2)) + 1))


def _methods(text):
    names = [m.strip() for m in text.split(",") if m.strip()]
    if not names:
        raise argparse.ArgumentTypeError("empty method list")
    return names


def _scenario(args, base=None):
    sc = base or ScenarioConfig()
    changes = {}
    for attr, key in (("n", "n"), ("sigma2d", "sigma2d"), ("sigma3d", "sigma3d"),
                      ("pose_prior", "pose_prior"), ("outliers", "outliers"),
                      ("outlier_count", "outlier_count")):
        v = getattr(args, attr, None)
        if v is not None:
            changes[key] = v
    return dataclasses.replace(sc, **changes)


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    base = load_run_config(args.config, {"scenario": ScenarioConfig})["scenario"] if args.config else None
    sc = _scenario(args, base)
    rng = np.random.default_rng(args.seed)
    insts = batch_to_instances(sample_batch(sc, rng, args.trials))
    write_dataset(args.output, insts)
    hist = Counter(int(i.outlier_mask.sum()) for i in insts)
    print(f"wrote {len(insts)} instances (n={sc.n}) to {args.output}")
    print("outlier histogram: " + ", ".join(f"{k}:{hist[k]}" for k in sorted(hist)))
    return EXIT_OK


def cmd_train(args):
    sections = {"train": TrainConfig, "scenario": ScenarioConfig}
    cfg = load_run_config(args.config, sections) if args.config else {"train": TrainConfig(),
                                                                       "scenario": ScenarioConfig()}
    tc, sc = cfg["train"], cfg["scenario"]
    over = {k: v for k, v in (("total_updates", args.updates), ("seed", args.seed),
                              ("batch_size", args.batch_size)) if v is not None}
    tc = dataclasses.replace(tc, **over)
    state = load_state(args.resume, tc) if args.resume else None
    out = Path(args.output)
    if args.log is None:
        args.log = str(out) + ".log.jsonl"
    if state is None and Path(args.log).exists():
        Path(args.log).unlink()  # a fresh run starts a fresh log
    try:
        _, lm, report = train(tc, sc, state=state, checkpoint=lambda st: save_state(out, st, tc, sc),
                              log_path=args.log, stop_at=args.stop_after)
    except NonFiniteLoss as exc:
        print(f"error: {exc}; last checkpoint at update {exc.last_checkpoint} in {out}",
              file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {report.update_count} updates; weights in {out}")
    if report.intermediate_loss:
        print(f"held-out intermediate loss {report.intermediate_loss[0]:.4f} -> "
              f"{report.intermediate_loss[-1]:.4f}; pipeline success {report.pipeline_success[-1]:.3f}")
    return EXIT_OK


def _context(args):
    params, lm = None, LMConfig.constant()
    if getattr(args, "weights", None):
        params, lm, _, _ = load_weights(args.weights)
    return SolverContext(params=params, lm=lm, ransac=RansacConfig())


def _check_methods(methods, ctx):
    for m in methods:
        if m not in METHODS and m != "truth":
            raise UnknownMethod(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if m in ("net", "pnp-net") and ctx.params is None:
            raise ConfigError(f"method {m!r} needs --weights")


POSE_COLUMNS = ["index", "method", "ok", "t_x", "t_y", "t_z", "omega_x", "omega_y", "omega_z",
                "err_r_rad", "err_t"]


def cmd_solve(args):
    ctx = _context(args)
    _check_methods([args.method], ctx)
    insts = read_dataset(args.dataset)
    rows = []
    # group equal-size instances so the batched solvers can run on them together
    by_n = {}
    for i, inst in enumerate(insts):
        by_n.setdefault(inst.n, []).append(i)
    results = {}
    for n, idx in sorted(by_n.items()):
        a = np.array([insts[i].a for i in idx])
        b = np.array([insts[i].b for i in idx])
        f = np.array([insts[i].f for i in idx])
        ap, bp, fp = prepare_arrays(a, b, f, ctx.f_const)
        try:
            t, w, ok = run(args.method, ctx, ap, bp, fp, seed=args.seed)
        except UnknownMethod as exc:
            log.warning("%s", exc)
            t, w, ok = np.zeros((len(idx), 3)), np.zeros((len(idx), 3)), np.zeros(len(idx), bool)
        for k, i in enumerate(idx):
            results[i] = (t[k], w[k], ok[k])
    for i, inst in enumerate(insts):
        t, w, ok = results[i]
        row = {"index": i, "method": args.method, "ok": bool(ok)}
        if ok:
            row.update(zip(POSE_COLUMNS[3:9], map(float, np.concatenate([t, w]))))
            if inst.truth is not None:
                et, er = pose_errors(t, w, inst.truth.t, inst.truth.omega)
                row["err_r_rad"], row["err_t"] = float(er), float(et)
        rows.append(row)
    _emit_csv(args.output, rows, POSE_COLUMNS)
    solved = sum(r["ok"] for r in rows)
    print(f"{solved}/{len(rows)} records solved with {args.method}", file=sys.stderr)
    return EXIT_OK


def _emit_csv(path, rows, columns):
    if path in (None, "-"):
        write_csv(sys.stdout, rows, columns)
    else:
        write_csv(path, rows, columns)


def cmd_eval(args):
    ctx = _context(args)
    _check_methods(args.methods, ctx)
    tr, deg = args.tr
    crit = SuccessCriteria(tr, args.tt, deg)
    if args.dataset:
        insts = read_dataset(args.dataset)
        if any(i.truth is None for i in insts):
            raise ConfigError("evaluation needs ground truth in every record")
        if len({i.n for i in insts}) != 1:
            raise ConfigError("evaluation datasets must have one n")
        a = np.array([i.a for i in insts])
        b = np.array([i.b for i in insts])
        f = np.array([i.f for i in insts])
        t = np.array([i.truth.t for i in insts])
        w = np.array([i.truth.omega for i in insts])
        stats = evaluate_arrays(args.methods, a, b, f, t, w, crit, ctx, args.seed)
        from .evalbench import EvalReport
        reports = [(Path(args.dataset).name, EvalReport(stats, len(insts),
                                                        {"n": insts[0].n, "pose_prior": None,
                                                         "outliers": None}, crit, args.seed))]
    else:
        base = load_run_config(args.config, {"scenario": ScenarioConfig})["scenario"] if args.config else None
        sc = _scenario(args, base)
        if args.outlier_counts is not None:
            reps = sweep_outliers(args.methods, sc, crit, args.outlier_counts, args.trials, args.seed, ctx)
            reports = [(f"fixed-{c}", r) for c, r in zip(args.outlier_counts, reps)]
        else:
            reports = [("synthetic", evaluate(args.methods, sc, crit, args.trials, args.seed, ctx))]
    rows = [row for label, rep in reports for row in rep.summary_rows(label)]
    _emit_csv(args.output, rows, SUMMARY_COLUMNS)
    if args.trial_records:
        with open(args.trial_records, "w", encoding="utf-8") as fh:
            for label, rep in reports:
                for rec in rep.trial_rows():
                    fh.write(json.dumps({"scenario": label, **rec}) + "\n")
    for label, rep in reports:
        for name, st in rep.methods.items():
            print(f"{label:>12} {name:>8}: joint {st.joint_success:.3f}", file=sys.stderr)
    return EXIT_OK


def cmd_bench_ops(args):
    for m in args.methods:
        if m not in OP_METHODS:
            raise UnknownMethod(f"no operation count for {m!r}; choose from {', '.join(OP_METHODS)}")
    cfg = OpConfig(lm_layers=args.lm_layers, transcendental_cost=args.transcendental_cost)
    rows = ops_series(args.methods, args.n_range, cfg)
    _emit_csv(args.output, rows, ["n", "method", "additions", "multiplications", "divisions",
                                  "transcendentals", "total"])
    return EXIT_OK


IMPORT_COLUMNS = ["image_id", "point_id", "X", "Y", "Z", "u", "v", "f",
                  "t_x", "t_y", "t_z", "omega_x", "omega_y", "omega_z"]


def read_correspondence_table(path):
    """Group a correspondence CSV by image: ``{image_id: (a, b, f, pose | None, bounds)}``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in IMPORT_COLUMNS[:8] if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = list(reader)
    images = {}
    for r in rows:
        images.setdefault(r["image_id"], []).append(r)
    out = {}
    for img, rs in images.items():
        try:
            a = np.array([[float(r["X"]), float(r["Y"]), float(r["Z"])] for r in rs])
            b = np.array([[float(r["u"]), float(r["v"])] for r in rs])
            f = float(rs[0]["f"])
            pose = None
            if all(rs[0].get(c) not in (None, "") for c in IMPORT_COLUMNS[8:]):
                v = [float(rs[0][c]) for c in IMPORT_COLUMNS[8:]]
                pose = Pose(v[:3], Rotation(v[3:]))
        except ValueError as exc:
            raise ConfigError(f"{path}: image {img}: {exc}") from exc
        out[img] = (a, b, f, pose)
    return out


def sample_real_instances(table, n, samples, outliers, rng):
    """Draw ``samples`` instances per image: n objects, or n + 1 with two of the first n corrupted.

    With outliers one corrupted slot takes the extra object's image point (a
    wrong match) and the other a uniform point inside the bounding box of the
    image's observations (a wrong detection); which slot gets which is random.
    """
    insts = []
    for img in sorted(table):
        a, b, f, pose = table[img]
        need = n + 1 if outliers else n
        if len(a) < need:
            log.warning("image %s has %d points, needs %d; skipped", img, len(a), need)
            continue
        lo, hi = b.min(axis=0), b.max(axis=0)
        for _ in range(samples):
            idx = rng.choice(len(a), need, replace=False)
            aa, bb = a[idx[:n]].copy(), b[idx[:n]].copy()
            mask = np.zeros(n, dtype=bool)
            if outliers:
                s1, s2 = rng.choice(n, 2, replace=False)
                bb[s1] = b[idx[n]]
                bb[s2] = rng.uniform(lo, hi)
                mask[[s1, s2]] = True
            insts.append(ProblemInstance(CameraIntrinsics(f), aa, bb, truth=pose, outlier_mask=mask))
    return insts


def cmd_import(args):
    table = read_correspondence_table(args.table)
    rng = np.random.default_rng(args.seed)
    insts = sample_real_instances(table, args.n, args.samples, args.outliers, rng)
    write_dataset(args.output, insts)
    print(f"wrote {len(insts)} instances from {len(table)} images to {args.output}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    p = _Parser(prog="pnpnet", description="PnP solvers with a learned initialiser and refiner.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def scenario_flags(q):
        q.add_argument("--config", help="JSON file with a 'scenario' section")
        q.add_argument("--n", type=int)
        q.add_argument("--outliers", type=_on_off, help="on|off")
        q.add_argument("--outlier-count", type=int, help="fixed number of mismatches per instance")
        q.add_argument("--sigma2d", type=float)
        q.add_argument("--sigma3d", type=float)
        q.add_argument("--pose-prior", choices=["uniform", "gaussian"])

    g = sub.add_parser("generate", help="write a synthetic dataset")
    scenario_flags(g)
    g.add_argument("--trials", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train network and refiner")
    t.add_argument("--config", help="JSON file with 'train' and 'scenario' sections")
    t.add_argument("--updates", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="end this session at this update (schedule unchanged)")
    t.add_argument("--log", help="JSONL training log (default: <output>.log.jsonl)")
    t.add_argument("-o", "--output", required=True, help="checkpoint / weight file")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("solve", help="solve every record of a dataset")
    s.add_argument("dataset")
    s.add_argument("--method", required=True)
    s.add_argument("--weights")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("eval", help="success rates on synthetic streams or a dataset")
    scenario_flags(e)
    e.add_argument("--methods", type=_methods, default=["epnp", "epnp-lm", "ransac"])
    e.add_argument("--weights")
    e.add_argument("--tr", type=_threshold_r, default=(1.0, True), help="e.g. 1deg or 0.0175rad")
    e.add_argument("--tt", type=float, default=0.2)
    e.add_argument("--trials", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--outlier-counts", type=lambda s: [int(x) for x in s.split(",")],
                   help="sweep fixed mismatch counts, e.g. 0,1,2,3,4")
    e.add_argument("--dataset", help="evaluate this dataset instead of a synthetic stream")
    e.add_argument("--trial-records", help="also write per-trial JSONL records here")
    e.add_argument("-o", "--output", default="-")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-ops", help="operation counts versus n")
    b.add_argument("--n-range", type=_n_range, default=_n_range("6..20"))
    b.add_argument("--methods", type=_methods, default=["net", "refine", "pnp-net", "epnp",
                                                          "epnp-lm", "ransac"])
    b.add_argument("--lm-layers", type=int, default=10)
    b.add_argument("--transcendental-cost", type=int, default=20)
    b.add_argument("-o", "--output", default="-")
    b.set_defaults(func=cmd_bench_ops)

    i = sub.add_parser("import", help="sample instances from a correspondence table")
    i.add_argument("table", help="CSV with columns " + ",".join(IMPORT_COLUMNS))
    i.add_argument("--n", type=int, default=9)
    i.add_argument("--samples", type=int, default=10, help="instances per image")
    i.add_argument("--outliers", type=_on_off, default=False)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("-o", "--output", required=True)
    i.set_defaults(func=cmd_import)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "eval" and args.trials < 1:
            raise ConfigError("--trials must be at least 1")
        return args.func(args)
    except (ConfigError, UnknownMethod) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLoss, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PnPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
