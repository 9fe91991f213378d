import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pnpnet.io import (FormatError, dumps_dataset, load_state, load_weights, loads_dataset, pack_weights,
                       read_dataset, save_weights, unpack_weights, write_csv, write_dataset)
from pnpnet.irls_lm import LMConfig
from pnpnet.mlp import init_params
from pnpnet.synthgen import ScenarioConfig, instance_stream
from pnpnet.trainer import TrainConfig


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1), st.integers(4, 12))
def test_dataset_round_trip_is_byte_identical(seed, n):
    insts = instance_stream(ScenarioConfig(n=n), 3, seed=seed)
    text = dumps_dataset(insts)
    back = loads_dataset(text)
    assert dumps_dataset(back) == text
    for x, y in zip(insts, back):
        np.testing.assert_array_equal(x.a, y.a)
        np.testing.assert_array_equal(x.b, y.b)
        np.testing.assert_array_equal(x.truth.omega, y.truth.omega)
        np.testing.assert_array_equal(x.outlier_mask, y.outlier_mask)


def test_dataset_files(tmp_path):
    insts = instance_stream(ScenarioConfig(), 2, seed=1)
    write_dataset(tmp_path / "d.jsonl", insts)
    assert len(read_dataset(tmp_path / "d.jsonl")) == 2


@pytest.mark.parametrize("text", [
    "",
    "not json\n",
    '{"format": "other", "version": 1}\n',
    '{"format": "pnpnet-dataset", "version": 9}\n',
    '{"format": "pnpnet-dataset", "version": 1, "count": 2}\n',
    '{"format": "pnpnet-dataset", "version": 1}\n{"f": 800, "n": 5, "a": [[0, 0, 1]], "b": [[0, 0]]}\n',
])
def test_malformed_datasets(text):
    with pytest.raises(FormatError):
        loads_dataset(text)


def test_weights_round_trip_exactly(tmp_path):
    params = init_params(3, 9)
    lm = LMConfig.alpha_ramp(10)
    save_weights(tmp_path / "w.pnpw", params, lm, {"note": "x"})
    p2, lm2, meta, extra = load_weights(tmp_path / "w.pnpw")
    for x, y in zip(params.arrays(), p2.arrays()):
        np.testing.assert_array_equal(x, y)
    assert lm2 == lm
    assert meta == {"note": "x"} and extra == {}
    assert pack_weights(p2, lm2, meta) == pack_weights(params, lm, {"note": "x"})


def test_weight_header_layout():
    data = pack_weights(init_params(0, 4), LMConfig.constant(2))
    assert data[:4] == b"PNPW"
    assert int.from_bytes(data[4:8], "little") == 1


@pytest.mark.parametrize("mangle", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:-8],
    lambda d: d + b"\0" * 8,
    lambda d: d[:4] + (7).to_bytes(4, "little") + d[8:],
    lambda d: d[:6],
])
def test_corrupt_weight_files(mangle):
    data = pack_weights(init_params(0, 4), LMConfig.constant(2))
    with pytest.raises(FormatError):
        unpack_weights(mangle(data))


def test_weights_only_file_is_not_a_checkpoint(tmp_path):
    save_weights(tmp_path / "w.pnpw", init_params(0, 4), LMConfig.constant(2))
    with pytest.raises(FormatError):
        load_state(tmp_path / "w.pnpw", TrainConfig())


def test_csv_formatting():
    buf = io.StringIO()
    write_csv(buf, [{"a": 0.1, "b": None, "c": True, "d": 3}], ["a", "b", "c", "d"])
    assert buf.getvalue() == "a,b,c,d\n0.1,,1,3\n"
