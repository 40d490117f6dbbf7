"""Complex element beampatterns on (azimuth, elevation, frequency) grids.

Grids store the co-polar (VV) and cross-polar (HV) receive gains of a single
array element over local angles.  Evaluation is bilinear in angle (with
azimuth wraparound) and linear in frequency; queries outside the measured
band are clamped with a warning.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

BACKLOBE_FLOOR_DB = -40.0

_PATTERN_MAGIC = "mpcsounder-pattern-v1"


@dataclass(frozen=True)
class BeampatternGrid:
    az_axis: np.ndarray    # radians, uniform over [-pi, pi)
    el_axis: np.ndarray    # radians, uniform over [-pi/2, pi/2]
    freq_axis: np.ndarray  # Hz, uniform
    g_co: np.ndarray       # complex [az][el][freq]
    g_xpol: np.ndarray     # complex, same shape
    metadata: str = "unknown"

    def __post_init__(self):
        for name in ("az_axis", "el_axis", "freq_axis"):
            ax = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, ax)
            if ax.ndim != 1 or ax.size < 1:
                raise ValueError(f"{name} must be a non-empty 1D axis")
            if ax.size > 1:
                steps = np.diff(ax)
                if np.any(steps <= 0):
                    raise ValueError(f"{name} must be strictly increasing")
                if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
                    raise ValueError(f"{name} must be uniformly spaced")
        shape = (self.az_axis.size, self.el_axis.size, self.freq_axis.size)
        for name in ("g_co", "g_xpol"):
            g = np.asarray(getattr(self, name), dtype=np.complex128)
            object.__setattr__(self, name, g)
            if g.shape != shape:
                raise ValueError(f"{name} shape {g.shape} does not match axes {shape}")
            if not np.all(np.isfinite(g)):
                raise ValueError(f"{name} contains non-finite samples")

    @property
    def is_frequency_flat(self) -> bool:
        return self.freq_axis.size == 1

    def uniform_gain(self, pol="co"):
        """The single gain value if the table is constant, else None."""
        cache = self.__dict__.get("_uniform")
        if cache is None:
            cache = {}
            object.__setattr__(self, "_uniform", cache)
        if pol not in cache:
            g = self.g_co if pol == "co" else self.g_xpol
            flat = g.reshape(-1)
            cache[pol] = complex(flat[0]) if np.all(flat == flat[0]) else None
        return cache[pol]


def default_axes(n_az=360, n_el=181, freqs=(28e9,)):
    az = -math.pi + np.arange(n_az) * (2 * math.pi / n_az)
    el = np.linspace(-math.pi / 2, math.pi / 2, n_el)
    return az, el, np.asarray(freqs, dtype=float)


def analytic_pattern(kind, params=None, axes=None) -> BeampatternGrid:
    """Generate an analytic element pattern on a grid.

    ``kind`` is "isotropic" or "cosine_power".  For cosine_power the co-polar
    gain is cos^p(az) cos^p(el) over the forward hemisphere with a -40 dB
    back-lobe floor behind; the cross-polar gain is the co-polar one scaled
    by ``xpol_floor_db``.
    """
    params = dict(params or {})
    if axes is None:
        axes = default_axes()
    az, el, freqs = axes
    az = np.asarray(az, dtype=float)
    el = np.asarray(el, dtype=float)
    freqs = np.asarray(freqs, dtype=float)
    shape = (az.size, el.size, freqs.size)
    if kind == "isotropic":
        g_co = np.ones(shape, dtype=np.complex128)
        g_xpol = np.zeros(shape, dtype=np.complex128)
        return BeampatternGrid(az, el, freqs, g_co, g_xpol, metadata="isotropic")
    if kind == "cosine_power":
        p = float(params.get("exponent", 1.0))
        if p < 0:
            raise ValueError("cosine exponent must be >= 0")
        xpol_db = float(params.get("xpol_floor_db", -15.0))
        floor = 10.0 ** (BACKLOBE_FLOOR_DB / 20.0)
        azg, elg = np.meshgrid(az, el, indexing="ij")
        forward = np.abs(azg) < math.pi / 2
        co2d = np.where(
            forward,
            np.cos(azg) ** p * np.cos(elg) ** p,
            floor,
        )
        g_co = np.broadcast_to(
            co2d[:, :, None].astype(np.complex128), shape
        ).copy()
        g_xpol = g_co * 10.0 ** (xpol_db / 20.0)
        return BeampatternGrid(
            az, el, freqs, g_co, g_xpol, metadata=f"cosine_power p={p}"
        )
    raise ValueError(f"unknown analytic pattern kind {kind!r}")


def _axis_weights(axis, query, periodic=False):
    """Indices and weights for 1D linear interpolation on a uniform axis."""
    query = np.asarray(query, dtype=float)
    n = axis.size
    if n == 1:
        i0 = np.zeros(query.shape, dtype=np.intp)
        return i0, i0, np.zeros(query.shape)
    step = axis[1] - axis[0]
    t = (query - axis[0]) / step
    if periodic:
        t = np.mod(t, n)
        i0 = np.floor(t).astype(np.intp) % n
        i1 = (i0 + 1) % n
        w = t - np.floor(t)
    else:
        t = np.clip(t, 0.0, n - 1.0)
        i0 = np.clip(np.floor(t).astype(np.intp), 0, n - 2)
        i1 = i0 + 1
        w = t - i0
    return i0, i1, w


def eval_pattern(grid: BeampatternGrid, az_local, el_local, f, pol="co"):
    """Interpolated complex gain; inputs broadcast elementwise."""
    g = grid.g_co if pol == "co" else grid.g_xpol
    u = grid.uniform_gain(pol)
    if u is not None:
        shape = np.broadcast_shapes(
            np.shape(az_local), np.shape(el_local), np.shape(f)
        )
        if shape == ():
            return u
        return np.full(shape, u, dtype=np.complex128)
    az_local, el_local, f = np.broadcast_arrays(
        np.asarray(az_local, dtype=float),
        np.asarray(el_local, dtype=float),
        np.asarray(f, dtype=float),
    )
    if grid.freq_axis.size > 1:
        fmin, fmax = grid.freq_axis[0], grid.freq_axis[-1]
        if np.any(f < fmin - 1e-6) or np.any(f > fmax + 1e-6):
            warnings.warn(
                "frequency query outside pattern band; clamping", stacklevel=2
            )
    ia0, ia1, wa = _axis_weights(grid.az_axis, az_local, periodic=True)
    ie0, ie1, we = _axis_weights(grid.el_axis, el_local)
    if0, if1, wf = _axis_weights(grid.freq_axis, f)

    def corner(ia, ie):
        lo = g[ia, ie, if0]
        hi = g[ia, ie, if1]
        return lo * (1 - wf) + hi * wf

    v00 = corner(ia0, ie0)
    v01 = corner(ia0, ie1)
    v10 = corner(ia1, ie0)
    v11 = corner(ia1, ie1)
    out = (
        v00 * (1 - wa) * (1 - we)
        + v01 * (1 - wa) * we
        + v10 * wa * (1 - we)
        + v11 * wa * we
    )
    if out.ndim == 0:
        return complex(out)
    return out


def freq_profile(grid: BeampatternGrid, az_local, el_local, config, pol="co"):
    """Gain sampled over the sounder frequency grid; complex vector length N."""
    freqs = config.freq_grid()
    az = np.full(freqs.shape, az_local)
    el = np.full(freqs.shape, el_local)
    return np.atleast_1d(eval_pattern(grid, az, el, freqs, pol=pol))


def freq_profile_grid(grid, az_local, el_local, config, pol="co"):
    """Vectorized freq_profile: returns [n_angle..., n_freq] complex tensor.

    ``az_local`` and ``el_local`` broadcast against each other; the frequency
    axis is appended.
    """
    az = np.asarray(az_local, dtype=float)
    el = np.asarray(el_local, dtype=float)
    az, el = np.broadcast_arrays(az, el)
    freqs = config.freq_grid()
    out = eval_pattern(
        grid,
        az[..., None],
        el[..., None],
        freqs.reshape((1,) * az.ndim + (-1,)),
        pol=pol,
    )
    return np.asarray(out)


def pattern_pdp(grid: BeampatternGrid, fc, w):
    """Band-integrated power |G|^2 per direction (trapezoidal in frequency).

    Returns a real map over the grid's (az, el) axes, units gain^2 * Hz.
    """
    lo, hi = fc - w / 2, fc + w / 2
    fax = grid.freq_axis
    if fax.size == 1:
        return np.abs(grid.g_co[:, :, 0]) ** 2 * w
    if hi < fax[0] or lo > fax[-1]:
        raise ValueError("requested band does not overlap the pattern band")
    # clamp the band to the measured axis, then integrate on the grid
    fsel = np.clip(np.array([lo, hi]), fax[0], fax[-1])
    pts = np.unique(np.concatenate([fsel, fax[(fax > fsel[0]) & (fax < fsel[1])]]))
    vals = np.empty((grid.az_axis.size, grid.el_axis.size, pts.size))
    for k, f in enumerate(pts):
        azg, elg = np.meshgrid(grid.az_axis, grid.el_axis, indexing="ij")
        vals[:, :, k] = np.abs(eval_pattern(grid, azg, elg, f)) ** 2
    integral = np.trapz(vals, pts, axis=2)
    # account for clamped band edges (constant extension outside the axis)
    pad = max(0.0, fax[0] - lo) * np.abs(grid.g_co[:, :, 0]) ** 2 + max(
        0.0, hi - fax[-1]
    ) * np.abs(grid.g_co[:, :, -1]) ** 2
    return integral + pad


def pattern_pdp_at(grid: BeampatternGrid, az_local, el_local, config):
    """Band power of the co-polar pattern at specific local angles."""
    prof = freq_profile_grid(grid, az_local, el_local, config)
    return np.sum(np.abs(prof) ** 2, axis=-1) * config.delta_f


# -- binary pattern file -------------------------------------------------------

def save_grid(path, grid: BeampatternGrid) -> None:
    header = {
        "magic": _PATTERN_MAGIC,
        "az": {"start": grid.az_axis[0], "step": float(np.diff(grid.az_axis)[0]) if grid.az_axis.size > 1 else 0.0, "count": int(grid.az_axis.size)},
        "el": {"start": grid.el_axis[0], "step": float(np.diff(grid.el_axis)[0]) if grid.el_axis.size > 1 else 0.0, "count": int(grid.el_axis.size)},
        "freq": {"start": grid.freq_axis[0], "step": float(np.diff(grid.freq_axis)[0]) if grid.freq_axis.size > 1 else 0.0, "count": int(grid.freq_axis.size)},
        "polarizations": ["co", "xpol"],
        "byte_order": "little",
        "metadata": grid.metadata,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(np.ascontiguousarray(grid.g_co, dtype="<c8").tobytes())
        fh.write(np.ascontiguousarray(grid.g_xpol, dtype="<c8").tobytes())


def load_grid(path) -> BeampatternGrid:
    with open(path, "rb") as fh:
        line = fh.readline()
        if not line:
            raise ValueError(f"{path}: empty pattern file")
        try:
            header = json.loads(line.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: malformed pattern header") from exc
        if header.get("magic") != _PATTERN_MAGIC:
            raise ValueError(f"{path}: not a pattern file")
        axes = []
        for name in ("az", "el", "freq"):
            spec = header[name]
            n = int(spec["count"])
            axes.append(spec["start"] + np.arange(n) * spec["step"])
        shape = tuple(a.size for a in axes)
        count = int(np.prod(shape))
        raw = fh.read()
    expected = 2 * count * 8
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload size {len(raw)} does not match axes ({expected})"
        )
    data = np.frombuffer(raw, dtype="<c8")
    g_co = data[:count].reshape(shape).astype(np.complex128)
    g_xpol = data[count:].reshape(shape).astype(np.complex128)
    return BeampatternGrid(
        axes[0], axes[1], axes[2], g_co, g_xpol,
        metadata=str(header.get("metadata", "file")),
    )
