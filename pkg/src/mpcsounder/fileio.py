"""On-disk formats: binary measurement tensors and JSON estimate sets.

A measurement file is one JSON header line (UTF-8, newline-terminated)
followed by the raw little-endian complex128 payload of each rotation tensor
in vectorized order (x fastest, then y, then frequency).  Estimate sets are
plain JSON and carry a git-style blob SHA-1 of the measurement file they
were derived from.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np

from .dmc import DmcModel
from .estimators import EstimateSet, EstMpc
from .geometry import SounderConfig
from .synthesis import MeasurementSet, unvec, vec

MEAS_MAGIC = "mpcsounder-measurement-v1"
_LAYOUT = "x-fastest,y,freq"


def _config_dict(cfg: SounderConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["rotations"] = list(cfg.rotations)
    return d


def _config_from_dict(d: dict) -> SounderConfig:
    d = dict(d)
    d["rotations"] = tuple(d["rotations"])
    return SounderConfig(**d)


def save_measurement(path, measurement: MeasurementSet) -> None:
    cfg = measurement.config
    header = {
        "magic": MEAS_MAGIC,
        "layout": _LAYOUT,
        "dtype": "<c16",
        "n_rotations": len(measurement.tensors),
        "config": _config_dict(cfg),
        "seed": measurement.seed,
        "provenance": measurement.provenance,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for t in measurement.tensors:
            fh.write(vec(t).astype("<c16").tobytes())


def load_measurement(path) -> MeasurementSet:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: not a measurement file") from exc
        if header.get("magic") != MEAS_MAGIC:
            raise ValueError(f"{path}: bad magic {header.get('magic')!r}")
        if header.get("layout") != _LAYOUT:
            raise ValueError(f"{path}: unsupported layout {header.get('layout')!r}")
        cfg = _config_from_dict(header["config"])
        n_rot = int(header["n_rotations"])
        count = cfg.nx * cfg.ny * cfg.n_freq
        tensors = []
        for i in range(n_rot):
            buf = fh.read(count * 16)
            if len(buf) != count * 16:
                raise ValueError(
                    f"{path}: truncated payload (rotation {i})"
                )
            v = np.frombuffer(buf, dtype="<c16").astype(np.complex128)
            tensors.append(unvec(v, cfg.nx, cfg.ny, cfg.n_freq))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after payload")
    return MeasurementSet(
        config=cfg,
        tensors=tuple(tensors),
        seed=header.get("seed"),
        provenance=header.get("provenance", ""),
    )


def blob_sha1(path) -> str:
    """Git-style content hash: sha1 of b'blob <size>\\0' + contents."""
    with open(path, "rb") as fh:
        data = fh.read()
    h = hashlib.sha1()
    h.update(b"blob %d\x00" % len(data))
    h.update(data)
    return h.hexdigest()


def _mpc_dict(m: EstMpc) -> dict:
    return {
        "az_deg": float(np.degrees(m.az_global)),
        "el_deg": float(np.degrees(m.el_global)),
        "delay_ns": float(m.delay * 1e9),
        "amp_re": float(m.amp.real),
        "amp_im": float(m.amp.imag),
        "power_db": float(m.power_db),
        "iteration_found": int(m.iteration_found),
        "relvar": None if m.relvar is None else float(m.relvar),
    }


def save_estimates(path, estimates: EstimateSet, config: SounderConfig,
                   measurement_sha1=None) -> None:
    doc = {
        "algorithm": estimates.algorithm,
        "mpcs": [_mpc_dict(m) for m in estimates.mpcs],
        "nmse_trajectory": list(estimates.nmse_trajectory),
        "residual_power_trajectory": list(estimates.residual_power_trajectory),
        "rejection_log": [
            {"mu": list(r["mu"]), "criterion": r["criterion"]}
            for r in estimates.rejection_log
        ],
        "dmc_params": (
            None if estimates.dmc_params is None
            else dataclasses.asdict(estimates.dmc_params)
        ),
        "config": _config_dict(config),
        "measurement_sha1": measurement_sha1,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_estimates(path):
    """Returns (EstimateSet, config, measurement_sha1)."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not an estimate-set file") from exc
    est = EstimateSet(algorithm=doc["algorithm"])
    for d in doc["mpcs"]:
        est.mpcs.append(
            EstMpc(
                az_global=np.radians(d["az_deg"]),
                el_global=np.radians(d["el_deg"]),
                delay=d["delay_ns"] * 1e-9,
                amp=complex(d["amp_re"], d["amp_im"]),
                power_db=d["power_db"],
                iteration_found=d["iteration_found"],
                relvar=d.get("relvar"),
            )
        )
    est.nmse_trajectory = list(doc.get("nmse_trajectory", []))
    est.residual_power_trajectory = list(
        doc.get("residual_power_trajectory", [])
    )
    est.rejection_log = [
        {"mu": tuple(r["mu"]), "criterion": r["criterion"]}
        for r in doc.get("rejection_log", [])
    ]
    if doc.get("dmc_params") is not None:
        est.dmc_params = DmcModel(**doc["dmc_params"])
    cfg = _config_from_dict(doc["config"])
    return est, cfg, doc.get("measurement_sha1")
