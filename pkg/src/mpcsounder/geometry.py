"""Domain types, angle conventions and field-of-view geometry.

Angle conventions used throughout the package:

* global azimuth in [0, 2*pi), global elevation in [0, pi] (0 = zenith,
  pi/2 = horizon);
* local (array) azimuth in [-pi, pi), local elevation in [-pi/2, pi/2],
  both measured from the array broadside;
* all angles are radians internally, degrees only at file/CLI boundaries.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

C_LIGHT = 299792458.0

TWO_PI = 2.0 * math.pi

DEFAULT_ROTATIONS = (math.pi / 2, 7 * math.pi / 6, 11 * math.pi / 6)  # 90, 210, 330 deg


def wrap_pm_pi(angle):
    """Wrap angle(s) into the half-open interval [-pi, pi)."""
    out = np.mod(np.asarray(angle) + math.pi, TWO_PI) - math.pi
    # np.mod can return the modulus itself for tiny negative inputs
    return np.where(out >= math.pi, -math.pi, out)


def wrap_two_pi(angle):
    """Wrap angle(s) into [0, 2*pi)."""
    out = np.mod(np.asarray(angle), TWO_PI)
    return np.where(out >= TWO_PI, 0.0, out)


@dataclass(frozen=True)
class MpcParam:
    """One multipath component: polarimetric amplitude plus global geometry.

    ``amp`` is the 2x2 complex polarization matrix
    ``[[aVV, aVH], [aHV, aHH]]`` in linear scale.
    """

    id: int
    az_global: float
    el_global: float
    delay: float
    amp: np.ndarray

    def __post_init__(self):
        amp = np.asarray(self.amp, dtype=np.complex128)
        if amp.shape != (2, 2):
            raise ValueError(f"amp must be a 2x2 matrix, got shape {amp.shape}")
        object.__setattr__(self, "amp", amp)
        if not (0.0 <= self.az_global < TWO_PI):
            raise ValueError(f"az_global {self.az_global} outside [0, 2pi)")
        if not (0.0 <= self.el_global <= math.pi):
            raise ValueError(f"el_global {self.el_global} outside [0, pi]")
        if self.delay < 0.0:
            raise ValueError(f"delay {self.delay} must be >= 0")
        if abs(amp[1, 0]) > abs(amp[0, 0]) or abs(amp[0, 1]) > abs(amp[1, 1]):
            warnings.warn(
                f"MPC {self.id}: cross-polar amplitude exceeds co-polar",
                stacklevel=2,
            )

    @property
    def a_vv(self) -> complex:
        return complex(self.amp[0, 0])

    @classmethod
    def specular(cls, id, az_global, el_global, delay, a_vv):
        """Convenience constructor for a purely co-polar (VV) component."""
        amp = np.zeros((2, 2), dtype=np.complex128)
        amp[0, 0] = a_vv
        return cls(id=id, az_global=az_global, el_global=el_global, delay=delay, amp=amp)


@dataclass(frozen=True)
class SounderConfig:
    """Array geometry, band plan and noise level of the sounder.

    ``n_freq`` must equal ``round(duration_t * bandwidth_w)`` (Nyquist-rate
    temporal sampling); the frequency step is ``1 / duration_t``.
    """

    fc: float
    bandwidth_w: float
    n_freq: int
    duration_t: float
    nx: int
    ny: int
    spacing_d: float
    rotations: tuple = DEFAULT_ROTATIONS
    tx_power_dbm: float = 30.0
    noise_psd: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "rotations", tuple(float(r) for r in self.rotations))
        if self.n_freq != round(self.duration_t * self.bandwidth_w):
            raise ValueError(
                f"n_freq={self.n_freq} inconsistent with "
                f"T*W={self.duration_t * self.bandwidth_w:.6g}"
            )
        if self.nx < 1 or self.ny < 1:
            raise ValueError("array dimensions must be >= 1")
        if self.noise_psd < 0:
            raise ValueError("noise_psd must be >= 0")
        lam_hi = C_LIGHT / (self.fc + self.bandwidth_w / 2)
        if self.spacing_d / lam_hi > 0.5 + 1e-12:
            warnings.warn(
                f"element spacing {self.spacing_d} exceeds half-wavelength at "
                f"band edge (grating lobes possible)",
                stacklevel=2,
            )
        wrapped = np.sort(wrap_two_pi(np.asarray(self.rotations)))
        if len(wrapped) > 1 and np.min(np.diff(wrapped)) < 1e-12:
            raise ValueError("rotations must be pairwise distinct modulo 2pi")

    @classmethod
    def from_band(cls, fc, bandwidth_w, duration_t, nx, ny, spacing_d, **kw):
        n_freq = round(duration_t * bandwidth_w)
        return cls(
            fc=fc,
            bandwidth_w=bandwidth_w,
            n_freq=n_freq,
            duration_t=duration_t,
            nx=nx,
            ny=ny,
            spacing_d=spacing_d,
            **kw,
        )

    @property
    def delta_f(self) -> float:
        return 1.0 / self.duration_t

    @property
    def wavelength(self) -> float:
        # narrowband: lambda evaluated at fc for the spatial-frequency map
        return C_LIGHT / self.fc

    @property
    def d_over_lambda(self) -> float:
        return self.spacing_d / self.wavelength

    def freq_grid(self) -> np.ndarray:
        """Absolute band frequencies at bin centers, f_k = fc - W/2 + (k - 1/2) df."""
        k = np.arange(self.n_freq)
        return self.fc - self.bandwidth_w / 2 + (k + 0.5) * self.delta_f

    @property
    def tx_amp_scale(self) -> float:
        """Amplitude scale from TX power; 30 dBm (1 W) maps to unity."""
        return math.sqrt(10.0 ** ((self.tx_power_dbm - 30.0) / 10.0))

    def az_resolution(self) -> float:
        """Broadside azimuth resolution in radians (critical theta-x bin)."""
        return 1.0 / (self.nx * self.d_over_lambda)

    def el_resolution(self) -> float:
        return 1.0 / (self.ny * self.d_over_lambda)

    @property
    def delay_resolution(self) -> float:
        return 1.0 / self.bandwidth_w


@dataclass(frozen=True)
class LocalAngles:
    """Local array angles and the spatial/delay frequencies they induce."""

    az_local: float
    el_local: float
    theta_x: float
    theta_y: float
    theta_tau: float = 0.0

    @classmethod
    def from_global(cls, az_global, el_global, phi_rot, config: SounderConfig, tau=0.0):
        az_l, el_l = global_to_local(az_global, el_global, phi_rot)
        tx, ty = az_el_to_spatial_freq(
            az_l, el_l, config.spacing_d, config.wavelength
        )
        return cls(
            az_local=az_l,
            el_local=el_l,
            theta_x=tx,
            theta_y=ty,
            theta_tau=tau * config.bandwidth_w / config.n_freq,
        )


def az_el_to_spatial_freq(az_local, el_local, d, lam):
    """Map local angles to spatial frequencies in cycles/element.

    theta_x = (d/lam) sin(az) cos(el), theta_y = (d/lam) sin(el).
    """
    az_local = np.asarray(az_local, dtype=float)
    el_local = np.asarray(el_local, dtype=float)
    if d <= 0 or lam <= 0:
        raise ValueError("spacing and wavelength must be positive")
    if np.any(az_local < -math.pi) or np.any(az_local >= math.pi):
        raise ValueError("az_local outside [-pi, pi)")
    if np.any(np.abs(el_local) > math.pi / 2 + 1e-12):
        raise ValueError("el_local outside [-pi/2, pi/2]")
    c = d / lam
    theta_x = c * np.sin(az_local) * np.cos(el_local)
    theta_y = c * np.sin(el_local)
    if theta_x.ndim == 0:
        return float(theta_x), float(theta_y)
    return theta_x, theta_y


def global_to_local(az_global, el_global, phi_rot):
    """Rotate global (az, el) into the local frame of an array at phi_rot.

    Returns (az_local in [-pi, pi), el_local in [-pi/2, pi/2]).
    """
    az_global = np.asarray(az_global, dtype=float)
    el_global = np.asarray(el_global, dtype=float)
    if np.any(az_global < 0) or np.any(az_global >= TWO_PI):
        raise ValueError("az_global outside [0, 2pi)")
    if np.any(el_global < 0) or np.any(el_global > math.pi):
        raise ValueError("el_global outside [0, pi]")
    az_local = wrap_pm_pi(az_global - phi_rot)
    el_local = math.pi / 2 - el_global
    if az_local.ndim == 0:
        return float(az_local), float(el_local)
    return az_local, el_local


def local_to_global(az_local, el_local, phi_rot):
    """Inverse of :func:`global_to_local`."""
    az_global = wrap_two_pi(np.asarray(az_local, dtype=float) + phi_rot)
    el_global = math.pi / 2 - np.asarray(el_local, dtype=float)
    if az_global.ndim == 0:
        return float(az_global), float(el_global)
    return az_global, el_global


def principal_alias(az_local):
    """Fold a local azimuth into the principal range [-pi/2, pi/2].

    Angles in the rear half-plane alias onto the front: phi -> -pi - phi for
    phi in [-pi, -pi/2) and phi -> pi - phi for phi in (pi/2, pi).
    """
    az = np.asarray(az_local, dtype=float)
    out = np.where(az < -math.pi / 2, -math.pi - az, az)
    out = np.where(az > math.pi / 2, math.pi - az, out)
    if out.ndim == 0:
        return float(out)
    return out


def fov_contains(phi_rot, az_global):
    """True iff az_global lies in the half-plane [phi_rot - pi/2, phi_rot + pi/2)."""
    rel = wrap_two_pi(np.asarray(az_global, dtype=float) - (phi_rot - math.pi / 2))
    res = rel < math.pi
    if res.ndim == 0:
        return bool(res)
    return res


# -- ground-truth CSV interface ------------------------------------------------

GT_CSV_HEADER = [
    "id", "az_deg", "el_deg", "delay_ns",
    "aVV_re", "aVV_im", "aVH_re", "aVH_im",
    "aHV_re", "aHV_im", "aHH_re", "aHH_im",
]


def load_mpc_csv(path) -> list[MpcParam]:
    """Load ground-truth MPCs from the CSV interchange format."""
    mpcs = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(GT_CSV_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing CSV columns {sorted(missing)}")
        for row in reader:
            amp = np.array(
                [
                    [
                        float(row["aVV_re"]) + 1j * float(row["aVV_im"]),
                        float(row["aVH_re"]) + 1j * float(row["aVH_im"]),
                    ],
                    [
                        float(row["aHV_re"]) + 1j * float(row["aHV_im"]),
                        float(row["aHH_re"]) + 1j * float(row["aHH_im"]),
                    ],
                ]
            )
            mpcs.append(
                MpcParam(
                    id=int(row["id"]),
                    az_global=math.radians(float(row["az_deg"])),
                    el_global=math.radians(float(row["el_deg"])),
                    delay=float(row["delay_ns"]) * 1e-9,
                    amp=amp,
                )
            )
    return mpcs


def save_mpc_csv(path, mpcs) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GT_CSV_HEADER)
        for m in mpcs:
            a = m.amp
            writer.writerow(
                [
                    m.id,
                    f"{math.degrees(m.az_global):.12g}",
                    f"{math.degrees(m.el_global):.12g}",
                    f"{m.delay * 1e9:.12g}",
                ]
                + [
                    f"{v:.12g}"
                    for pol in (a[0, 0], a[0, 1], a[1, 0], a[1, 1])
                    for v in (pol.real, pol.imag)
                ]
            )
