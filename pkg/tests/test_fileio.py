"""Binary measurement files, estimate JSON, and content hashing."""

import hashlib
import json
import math

import numpy as np
import pytest

from mpcsounder.beampattern import analytic_pattern
from mpcsounder.dmc import DmcModel
from mpcsounder.estimators import EstimateSet, EstMpc
from mpcsounder.fileio import (
    blob_sha1,
    load_estimates,
    load_measurement,
    save_estimates,
    save_measurement,
)
from mpcsounder.geometry import MpcParam, SounderConfig
from mpcsounder.synthesis import synthesize_multi_fov


def small_config(**kw):
    kw.setdefault("noise_psd", 1e-20)
    return SounderConfig.from_band(
        fc=28e9, bandwidth_w=1e9, duration_t=16e-9, nx=4, ny=3,
        spacing_d=3.75e-3, **kw,
    )


def small_measurement(seed=7):
    cfg = small_config()
    mpcs = [
        MpcParam(id=0, az_global=math.radians(80.0),
                 el_global=math.radians(85.0), delay=5e-9,
                 amp=[[0.9 - 0.2j, 0.0], [0.0, 0.0]]),
        MpcParam(id=1, az_global=math.radians(200.0),
                 el_global=math.radians(100.0), delay=9e-9,
                 amp=[[0.3 + 0.4j, 0.0], [0.0, 0.0]]),
    ]
    meas = synthesize_multi_fov(mpcs, cfg, analytic_pattern("isotropic"),
                                seed=seed)
    return meas


def test_measurement_round_trip(tmp_path):
    meas = small_measurement()
    path = tmp_path / "m.bin"
    save_measurement(path, meas)
    back = load_measurement(path)
    assert back.config == meas.config
    assert back.seed == meas.seed
    assert back.provenance == meas.provenance
    assert len(back.tensors) == len(meas.tensors)
    for a, b in zip(back.tensors, meas.tensors):
        # complex128 payload, so the round trip is bit-exact
        assert np.array_equal(a, b)


def test_measurement_header_is_one_json_line(tmp_path):
    path = tmp_path / "m.bin"
    save_measurement(path, small_measurement())
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
    assert header["magic"] == "mpcsounder-measurement-v1"
    assert header["dtype"] == "<c16"
    assert header["n_rotations"] == 3


def test_load_rejects_non_measurement_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"\x00\xff not json at all\n")
    with pytest.raises(ValueError, match="not a measurement file"):
        load_measurement(path)


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "m.bin"
    path.write_bytes(json.dumps({"magic": "something-else"}).encode() + b"\n")
    with pytest.raises(ValueError, match="bad magic"):
        load_measurement(path)


def test_load_rejects_unknown_layout(tmp_path):
    path = tmp_path / "m.bin"
    save_measurement(path, small_measurement())
    raw = path.read_bytes()
    head, _, payload = raw.partition(b"\n")
    header = json.loads(head.decode())
    header["layout"] = "freq-fastest"
    path.write_bytes(json.dumps(header).encode() + b"\n" + payload)
    with pytest.raises(ValueError, match="unsupported layout"):
        load_measurement(path)


def test_load_rejects_truncated_payload(tmp_path):
    path = tmp_path / "m.bin"
    save_measurement(path, small_measurement())
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(ValueError, match="truncated payload"):
        load_measurement(path)


def test_load_rejects_trailing_bytes(tmp_path):
    path = tmp_path / "m.bin"
    save_measurement(path, small_measurement())
    with open(path, "ab") as fh:
        fh.write(b"extra")
    with pytest.raises(ValueError, match="trailing bytes"):
        load_measurement(path)


def test_blob_sha1_matches_git_blob_hash(tmp_path):
    # git hash-object of an empty file is a well-known constant
    empty = tmp_path / "empty"
    empty.write_bytes(b"")
    assert blob_sha1(empty) == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"

    content = b"hello world\n"
    f = tmp_path / "f"
    f.write_bytes(content)
    h = hashlib.sha1(b"blob %d\x00" % len(content) + content)
    assert blob_sha1(f) == h.hexdigest()


def sample_estimates():
    est = EstimateSet(algorithm="rimax")
    est.mpcs.append(
        EstMpc(az_global=math.radians(123.5), el_global=math.radians(78.25),
               delay=4.5e-9, amp=0.7 - 0.1j, power_db=-3.2,
               iteration_found=1, relvar=0.02)
    )
    est.mpcs.append(
        EstMpc(az_global=math.radians(310.0), el_global=math.radians(95.0),
               delay=11.25e-9, amp=0.1 + 0.2j, power_db=-13.0,
               iteration_found=2, relvar=None)
    )
    est.nmse_trajectory = [1.0, 0.2, 0.01]
    est.residual_power_trajectory = [3.0, 0.6, 0.03]
    est.rejection_log = [
        {"mu": (1.0, 2.0, 3e-9), "criterion": "power"},
    ]
    est.dmc_params = DmcModel(base_power=1e-3, peak_power=8e8,
                              decay_rate=2e8, onset_delay=3e-9)
    return est


def test_estimates_round_trip(tmp_path):
    est = sample_estimates()
    cfg = small_config()
    path = tmp_path / "est.json"
    save_estimates(path, est, cfg, measurement_sha1="ab" * 20)
    back, cfg_back, sha = load_estimates(path)
    assert sha == "ab" * 20
    assert cfg_back == cfg
    assert back.algorithm == "rimax"
    assert len(back.mpcs) == 2
    for a, b in zip(back.mpcs, est.mpcs):
        assert a.az_global == pytest.approx(b.az_global, abs=1e-12)
        assert a.el_global == pytest.approx(b.el_global, abs=1e-12)
        assert a.delay == pytest.approx(b.delay, rel=1e-12)
        assert a.amp == pytest.approx(b.amp)
        assert a.power_db == pytest.approx(b.power_db)
        assert a.iteration_found == b.iteration_found
    assert back.mpcs[0].relvar == pytest.approx(0.02)
    assert back.mpcs[1].relvar is None
    assert back.nmse_trajectory == est.nmse_trajectory
    assert back.residual_power_trajectory == est.residual_power_trajectory
    assert back.rejection_log == [{"mu": (1.0, 2.0, 3e-9),
                                   "criterion": "power"}]
    assert back.dmc_params == est.dmc_params


def test_estimates_units_are_degrees_and_ns(tmp_path):
    est = sample_estimates()
    path = tmp_path / "est.json"
    save_estimates(path, est, small_config())
    with open(path) as fh:
        doc = json.load(fh)
    assert doc["mpcs"][0]["az_deg"] == pytest.approx(123.5)
    assert doc["mpcs"][0]["el_deg"] == pytest.approx(78.25)
    assert doc["mpcs"][0]["delay_ns"] == pytest.approx(4.5)
    assert doc["measurement_sha1"] is None


def test_load_estimates_rejects_non_json(tmp_path):
    path = tmp_path / "est.json"
    path.write_text("{not json")
    with pytest.raises(ValueError, match="not an estimate-set file"):
        load_estimates(path)
