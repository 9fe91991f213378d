"""File formats: datasets, weight containers and CSV reports.

Dataset (text, UTF-8, one JSON object per line)::

    {"format": "pnpnet-dataset", "version": 1, "count": N}
    {"f": 800.0, "n": 9, "a": [[x, y, z], ...], "b": [[u, v], ...],
     "truth": {"t": [..], "omega": [..]} | null, "outlier_mask": [bool, ...] | null}

Floats are written with ``repr`` precision, so write -> read -> write is byte
identical. Keys are written in the order shown.

Weight container (binary, little endian)::

    magic  b"PNPW"            4 bytes
    version                   uint32
    header length H           uint32
    header                    H bytes of UTF-8 JSON
    payload                   float64 arrays, row-major, in header order

The header lists every array as ``{"name", "shape"}``; arrays are stored back to
back with no padding. Network layers are named ``trunk.<i>.W`` / ``trunk.<i>.b``,
``head_rot.<i>.W`` ... and the refiner as ``lm.alpha``, ``lm.gamma``,
``lm.lam``. Optional ``adam.*`` arrays hold optimiser state for resuming.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import CameraIntrinsics, Pose, Rotation
from .irls_lm import LMConfig
from .mlp import NetParams
from .preprocess import ProblemInstance

DATASET_FORMAT = "pnpnet-dataset"
DATASET_VERSION = 1
WEIGHTS_MAGIC = b"PNPW"
WEIGHTS_VERSION = 1


class FormatError(ConfigError):
    """A file does not follow the documented layout."""


# ------------------------------------------------------------------ datasets

def _floats(arr):
    return [[float(x) for x in row] for row in np.asarray(arr)]


def instance_to_record(inst):
    truth = None
    if inst.truth is not None:
        truth = {"t": [float(x) for x in inst.truth.t],
                 "omega": [float(x) for x in inst.truth.omega]}
    mask = None if inst.outlier_mask is None else [bool(x) for x in inst.outlier_mask]
    return {"f": float(inst.f), "n": inst.n, "a": _floats(inst.a), "b": _floats(inst.b),
            "truth": truth, "outlier_mask": mask}


def record_to_instance(rec):
    try:
        n = int(rec["n"])
        a = np.array(rec["a"], dtype=float).reshape(-1, 3)
        b = np.array(rec["b"], dtype=float).reshape(-1, 2)
        truth = rec.get("truth")
        pose = None if truth is None else Pose(truth["t"], Rotation(truth["omega"]))
        mask = rec.get("outlier_mask")
        inst = ProblemInstance(CameraIntrinsics(float(rec["f"])), a, b, truth=pose,
                               outlier_mask=None if mask is None else np.array(mask, dtype=bool))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad dataset record: {exc}") from exc
    if inst.n != n:
        raise FormatError(f"record says n={n} but holds {inst.n} correspondences")
    return inst


def dumps_dataset(instances):
    lines = [json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION,
                         "count": len(instances)})]
    lines += [json.dumps(instance_to_record(i)) for i in instances]
    return "\n".join(lines) + "\n"


def write_dataset(path, instances):
    Path(path).write_text(dumps_dataset(instances), encoding="utf-8")


def loads_dataset(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad dataset header: {exc}") from exc
    if header.get("format") != DATASET_FORMAT:
        raise FormatError("not a pnpnet dataset (missing format header)")
    if header.get("version") != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {header.get('version')}")
    out = []
    for ln in lines[1:]:
        try:
            out.append(record_to_instance(json.loads(ln)))
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad dataset line: {exc}") from exc
    if header.get("count") not in (None, len(out)):
        raise FormatError(f"header announces {header['count']} records, found {len(out)}")
    return out


def read_dataset(path):
    return loads_dataset(Path(path).read_text(encoding="utf-8"))


# ------------------------------------------------------------ weight files

def _net_arrays(params):
    named = []
    for block in ("trunk", "head_rot", "head_trans"):
        for i, (W, b) in enumerate(getattr(params, block)):
            named.append((f"{block}.{i}.W", W))
            named.append((f"{block}.{i}.b", b))
    named.append(("input_scale", params.input_scale))
    named.append(("output_scale", params.output_scale))
    return named


def pack_weights(params, lm, meta=None, extra_arrays=None):
    """Serialise network + refiner (+ optional extra arrays) to bytes."""
    named = _net_arrays(params)
    named += [("lm.alpha", lm.alpha), ("lm.gamma", lm.gamma), ("lm.lam", lm.lam)]
    named += list(extra_arrays or [])
    header = {
        "n": params.n,
        "blocks": {k: len(getattr(params, k)) for k in ("trunk", "head_rot", "head_trans")},
        "lm": {"m": lm.m, "weight_floor": lm.weight_floor},
        "arrays": [{"name": name, "shape": list(np.shape(arr))} for name, arr in named],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in named)
    return WEIGHTS_MAGIC + struct.pack("<II", WEIGHTS_VERSION, len(hbytes)) + hbytes + payload


def unpack_weights(data):
    """Inverse of ``pack_weights``: returns ``(NetParams, LMConfig, meta, extra)``."""
    if data[:4] != WEIGHTS_MAGIC:
        raise FormatError("not a pnpnet weight file (bad magic)")
    if len(data) < 12:
        raise FormatError("weight file is truncated")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable weight header: {exc}") from exc
    offset = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        buf = data[offset:offset + 8 * count]
        if len(buf) != 8 * count:
            raise FormatError("weight file is truncated")
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(float)
        offset += 8 * count
    if offset != len(data):
        raise FormatError("trailing bytes after weight payload")
    blocks = {k: [(arrays[f"{k}.{i}.W"], arrays[f"{k}.{i}.b"]) for i in range(count)]
              for k, count in header["blocks"].items()}
    params = NetParams(header["n"], blocks["trunk"], blocks["head_rot"], blocks["head_trans"],
                       arrays["input_scale"], arrays["output_scale"])
    lm = LMConfig(arrays["lm.alpha"], arrays["lm.gamma"], arrays["lm.lam"],
                  header["lm"]["weight_floor"])
    known = {n for n, _ in _net_arrays(params)} | {"lm.alpha", "lm.gamma", "lm.lam"}
    extra = {k: v for k, v in arrays.items() if k not in known}
    return params, lm, header.get("meta", {}), extra


def save_weights(path, params, lm, meta=None, extra_arrays=None):
    Path(path).write_bytes(pack_weights(params, lm, meta, extra_arrays))


def load_weights(path):
    return unpack_weights(Path(path).read_bytes())


# ------------------------------------------------------------------ reports

def write_csv(path_or_file, rows, columns):
    """Write dict rows with a fixed column order; ``None`` becomes an empty cell."""
    def emit(fh):
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else _fmt(row.get(k))) for k in columns})

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="", encoding="utf-8") as fh:
            emit(fh)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return v


# --------------------------------------------------------------- checkpoints

def _report_meta(report):
    # wall-clock times vary between runs; keep them out of the file so that
    # checkpoints are bit-reproducible
    d = report.to_dict()
    d.pop("wall_clock", None)
    return d


def pack_state(state, tc, sc):
    """Checkpoint bytes: network, refiner, raw refiner parameters and Adam moments."""
    extra = [("lm.raw", state.lm_raw)]
    extra += [(f"adam.m.{i}", x) for i, x in enumerate(state.adam.m)]
    extra += [(f"adam.v.{i}", x) for i, x in enumerate(state.adam.v)]
    meta = {"update": state.update, "adam_step": state.adam.step, "f_const": tc.f_const,
            "train": tc.to_dict(), "scenario": sc.to_dict(), "report": _report_meta(state.report)}
    return pack_weights(state.params, state.lm_config(), meta, extra)


def save_state(path, state, tc, sc):
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(pack_state(state, tc, sc))
    tmp.replace(path)


def load_state(path, tc):
    """Rebuild a ``TrainState`` from a checkpoint written by ``save_state``."""
    from .trainer import Adam, TrainReport, TrainState

    params, _, meta, extra = load_weights(path)
    if "lm.raw" not in extra or "update" not in meta:
        raise FormatError(f"{path} holds weights only, not a resumable checkpoint")
    count = len(params.arrays()) + 1
    shapes = [x.shape for x in params.arrays()] + [extra["lm.raw"].shape]
    adam = Adam(shapes, tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps)
    adam.load({"step": meta["adam_step"],
               "m": [extra[f"adam.m.{i}"] for i in range(count)],
               "v": [extra[f"adam.v.{i}"] for i in range(count)]})
    rep = dict(meta.get("report", {}))
    rep.setdefault("wall_clock", [])
    report = TrainReport(**rep)
    return TrainState(params, extra["lm.raw"], adam, int(meta["update"]), report)
