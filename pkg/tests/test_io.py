import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapetime import starman, network as nw
from shapetime.errors import FormatError, SchemaError, VersionError
from shapetime.gaussian_field import ShapeDataset
from shapetime.io import (write_dataset, read_dataset, dataset_header, regenerate, Checkpoint,
                          save_checkpoint, load_checkpoint, file_sha256, created_timestamp)

from helpers import random_field


@pytest.fixture(scope="module")
def small():
    cfg = starman.StarmanConfig("L", n_train_subjects=6, n_test_subjects=6, seed=3)
    return cfg, starman.generate(cfg)


def test_dataset_round_trip_exact(small, tmp_path):
    _, data = small
    path = tmp_path / "a.psd"
    write_dataset(path, data.train)
    back, header = read_dataset(path)
    assert header["D"] == 2
    assert back.fingerprint() == data.train.fingerprint()


@settings(max_examples=25, deadline=None)
@given(vals=st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64),
                     min_size=4, max_size=4))
def test_float_values_round_trip(vals, tmp_path_factory):
    ds = ShapeDataset([vals[:2]], [vals[2:]], [0.5], [0], [0], [0])
    path = tmp_path_factory.mktemp("rt") / "x.psd"
    write_dataset(path, ds)
    back, _ = read_dataset(path)
    assert back.p.tobytes() == ds.p.tobytes() and back.d.tobytes() == ds.d.tobytes()


def test_empty_body(tmp_path):
    path = tmp_path / "e.psd"
    path.write_text('PRISM-PSD 1\n{"D": 3}\n')
    ds, _ = read_dataset(path)
    assert len(ds) == 0 and ds.n_shapes == 0 and ds.dim == 3


def _write(path, header, records):
    lines = ["PRISM-PSD 1", json.dumps(header)] + [json.dumps(r) for r in records]
    path.write_text("\n".join(lines) + "\n")


def test_dimension_mismatch_names_line(tmp_path):
    path = tmp_path / "bad.psd"
    good = {"p": [0, 0], "d": [0, 0], "t": 0.1, "subject_id": 0}
    _write(path, {"D": 2}, [good, good, {**good, "p": [0, 0, 0]}])
    with pytest.raises(SchemaError) as exc:
        read_dataset(path)
    assert exc.value.line == 5 and "line 5" in str(exc.value)


def test_missing_field(tmp_path):
    path = tmp_path / "bad.psd"
    _write(path, {"D": 2}, [{"p": [0, 0], "d": [0, 0], "subject_id": 0}])
    with pytest.raises(SchemaError, match="t"):
        read_dataset(path)


def test_bad_json_line(tmp_path):
    path = tmp_path / "bad.psd"
    path.write_text('PRISM-PSD 1\n{"D": 2}\n{"p": [0, 0\n')
    with pytest.raises(FormatError) as exc:
        read_dataset(path)
    assert exc.value.line == 3


def test_dataset_version_and_magic(tmp_path):
    path = tmp_path / "v.psd"
    path.write_text('PRISM-PSD 7\n{"D": 2}\n')
    with pytest.raises(VersionError) as exc:
        read_dataset(path)
    assert "7" in str(exc.value) and "1" in str(exc.value)
    path.write_text("hello\n")
    with pytest.raises(FormatError):
        read_dataset(path)
    path.write_text("")
    with pytest.raises(FormatError):
        read_dataset(path)


def test_shapes_grouped_without_obs_id(tmp_path):
    path = tmp_path / "g.psd"
    recs = [{"p": [k, 0], "d": [0, 0], "t": t, "subject_id": s}
            for s, t in ((0, 0.1), (0, 0.5), (1, 0.1)) for k in range(3)]
    _write(path, {"D": 2}, recs)
    ds, _ = read_dataset(path)
    assert ds.n_shapes == 3


def test_regenerated_file_identical(small, tmp_path):
    cfg, data = small
    prov = {"generator": "starman", "config": cfg.to_dict(), "split": "test", "lag": 0,
            "control": 0}
    a, b = tmp_path / "a.psd", tmp_path / "b.psd"
    write_dataset(a, data.test, dataset_header(data.test, provenance=prov, seed=cfg.seed))
    _, header = read_dataset(a)
    again = regenerate(header)
    write_dataset(b, again, dataset_header(again, provenance=prov, seed=cfg.seed))
    assert file_sha256(a) == file_sha256(b)


def test_checkpoint_round_trip_bit_identical(tmp_path):
    params = random_field(seed=2)
    params.t_range = (0.0, 2.0)
    path = tmp_path / "m.pck"
    save_checkpoint(path, Checkpoint.from_params(params, {"epochs": 3}, "abc",
                                                 metadata={"k": 1}))
    ck = load_checkpoint(path)
    assert ck.weights.tobytes() == params.weights.tobytes()
    assert ck.arch == params.arch and ck.t_range == (0.0, 2.0)
    assert ck.train_config == {"epochs": 3} and ck.metadata == {"k": 1}
    assert ck.dataset_fingerprint == "abc"
    out = nw.forward_field(ck.params(), np.zeros(2), 0.3)[0]
    np.testing.assert_array_equal(out, nw.forward_field(params, np.zeros(2), 0.3)[0])
    # same inputs and timestamp give the same bytes
    path2 = tmp_path / "m2.pck"
    save_checkpoint(path2, Checkpoint.from_params(params, {"epochs": 3}, "abc",
                                                  metadata={"k": 1}))
    assert file_sha256(path) == file_sha256(path2)


def test_created_at_follows_source_date_epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "86400")
    assert created_timestamp() == "1970-01-02T00:00:00Z"


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "m.pck"
    save_checkpoint(path, Checkpoint.from_params(random_field(seed=3)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(raw[:20])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_corrupt_weights_detected(tmp_path):
    path = tmp_path / "m.pck"
    save_checkpoint(path, Checkpoint.from_params(random_field(seed=3)))
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="digest"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "m.pck"
    save_checkpoint(path, Checkpoint.from_params(random_field(seed=3)))
    raw = path.read_bytes()
    path.write_bytes(raw.replace(b"PRISM-PCK 1", b"PRISM-PCK 2", 1))
    with pytest.raises(VersionError) as exc:
        load_checkpoint(path)
    assert exc.value.found == 2 and exc.value.expected == 1
    assert "2" in str(exc.value) and "1" in str(exc.value)
