"""Builtin sounder presets and deterministic ground-truth scenarios."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .geometry import DEFAULT_ROTATIONS, MpcParam, SounderConfig, wrap_two_pi
from .synthesis import noise_psd_for_snr

# measurement window; 1 and 2 GHz bands then give 32 and 64 frequency bins
_DURATION_T = 32e-9
_FC = 28e9
_SPACING = 3.75e-3

PRESETS = {
    "17x17-1ghz": dict(nx=17, ny=17, bandwidth_w=1e9),
    "17x17-2ghz": dict(nx=17, ny=17, bandwidth_w=2e9),
    "35x35-1ghz": dict(nx=35, ny=35, bandwidth_w=1e9),
    "35x35-2ghz": dict(nx=35, ny=35, bandwidth_w=2e9),
}

SCENARIOS = ("single-mpc", "five-scatterers", "rich")


def preset(name: str) -> SounderConfig:
    try:
        p = PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}"
        ) from None
    return SounderConfig.from_band(
        fc=_FC,
        bandwidth_w=p["bandwidth_w"],
        duration_t=_DURATION_T,
        nx=p["nx"],
        ny=p["ny"],
        spacing_d=_SPACING,
        rotations=DEFAULT_ROTATIONS,
        noise_psd=0.0,
    )


def _deg(x):
    return math.radians(x)


def builtin_mpcs(name: str, config: SounderConfig, seed: int = 0):
    """Deterministic ground-truth MPC list for one builtin scenario."""
    t = config.duration_t
    if name == "single-mpc":
        return [
            MpcParam.specular(
                id=0,
                az_global=config.rotations[0],
                el_global=math.pi / 2,
                delay=t / 4,
                a_vv=1.0 + 0.0j,
            )
        ]
    if name == "five-scatterers":
        # five unit-gain scatterers in the first field of view; two azimuth
        # pairs sit closer than one broadside resolution bin but are
        # separated in delay
        az_deg = (45.0, 50.0, 100.0, 104.0, 140.0)
        delays = (0.125 * t, 0.3125 * t, 0.5 * t, 0.6875 * t, 0.875 * t)
        phases = (0.0, 2.1, 4.0, 1.1, 5.3)
        return [
            MpcParam.specular(
                id=i,
                az_global=_deg(a),
                el_global=math.pi / 2,
                delay=d,
                a_vv=np.exp(1j * p),
            )
            for i, (a, d, p) in enumerate(zip(az_deg, delays, phases))
        ]
    if name == "rich":
        rng = np.random.default_rng([int(seed), 7421])
        mpcs = []
        n_spec = 30
        az = rng.uniform(0.0, 2 * math.pi, n_spec)
        el = rng.uniform(_deg(60), _deg(120), n_spec)
        tau = rng.uniform(0.0, 0.8 * t, n_spec)
        gain_db = np.concatenate(([0.0], rng.uniform(-25.0, 0.0, n_spec - 1)))
        phase = rng.uniform(0.0, 2 * math.pi, n_spec)
        for i in range(n_spec):
            mpcs.append(
                MpcParam.specular(
                    id=i,
                    az_global=float(az[i]),
                    el_global=float(el[i]),
                    delay=float(tau[i]),
                    a_vv=10.0 ** (gain_db[i] / 20.0) * np.exp(1j * phase[i]),
                )
            )
        # weak diffuse-like components clustered around the first speculars
        next_id = n_spec
        for i in range(6):
            parent = mpcs[i]
            for _ in range(8):
                daz = rng.normal(0.0, _deg(3.0))
                dele = rng.normal(0.0, _deg(2.0))
                dtau = abs(rng.normal(0.0, 1e-9))
                amp = (
                    abs(parent.a_vv)
                    * 10.0 ** (rng.uniform(-26.0, -18.0) / 20.0)
                    * np.exp(1j * rng.uniform(0.0, 2 * math.pi))
                )
                mpcs.append(
                    MpcParam.specular(
                        id=next_id,
                        az_global=float(wrap_two_pi(parent.az_global + daz)),
                        el_global=float(
                            np.clip(parent.el_global + dele, 0.0, math.pi)
                        ),
                        delay=float(min(parent.delay + dtau, 0.95 * t)),
                        a_vv=complex(amp),
                    )
                )
                next_id += 1
        return mpcs
    raise ValueError(f"unknown scenario {name!r}; choose from {SCENARIOS}")


def with_noise_for_snr(config: SounderConfig, mpcs, pattern, snr_db):
    """Copy of config whose noise PSD realizes the requested mean SNR."""
    psd = noise_psd_for_snr(mpcs, config, pattern, snr_db)
    return dataclasses.replace(config, noise_psd=psd)
