"""Beamspace transforms, model vectors and the matched-filter objective.

The estimators search a global (azimuth, elevation, delay) grid shared by
all array rotations; local angles and spatial frequencies are derived per
rotation inside the model-vector construction.  Grid evaluation exploits the
separable structure of the model (per-elevation spatial beamforming, then a
delay-domain transform) so the composite objective over a full 3D grid costs
a handful of BLAS products per rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .beampattern import BeampatternGrid, freq_profile, freq_profile_grid
from .geometry import SounderConfig, az_el_to_spatial_freq, global_to_local
from .synthesis import MeasurementSet, steering_vector, vec


@dataclass(frozen=True)
class SearchGrid:
    """Uniform global-coordinate search axes with their resolution bins."""

    az_axis: np.ndarray
    el_axis: np.ndarray
    tau_axis: np.ndarray
    az_res: float       # one broadside resolution bin, radians
    el_res: float
    tau_res: float
    os_fine: int = 9    # points per resolution bin in the local refinement

    def axes(self):
        return self.az_axis, self.el_axis, self.tau_axis


def make_search_grid(config: SounderConfig, os_coarse=2, os_fine=9) -> SearchGrid:
    """Global grid at ``os_coarse`` times the critical sampling density."""
    az_res = config.az_resolution()
    el_res = config.el_resolution()
    tau_res = config.delay_resolution
    az_step = az_res / os_coarse
    n_az = int(math.ceil(2 * math.pi / az_step))
    az_axis = np.arange(n_az) * (2 * math.pi / n_az)
    el_step = el_res / os_coarse
    n_el = max(2, int(math.ceil(math.pi / el_step)) + 1)
    el_axis = np.linspace(0.0, math.pi, n_el)
    n_tau = config.n_freq * os_coarse
    tau_axis = np.arange(n_tau) * (config.duration_t / n_tau)
    return SearchGrid(
        az_axis=az_axis,
        el_axis=el_axis,
        tau_axis=tau_axis,
        az_res=az_res,
        el_res=el_res,
        tau_res=tau_res,
        os_fine=os_fine,
    )


@dataclass(frozen=True)
class ModelVector:
    """Per-rotation space-frequency model vectors for one global parameter."""

    mu: tuple  # (az_global, el_global, delay)
    vectors: tuple  # one vec'd complex vector per rotation
    norms_sq: tuple  # per-rotation squared norms

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate(self.vectors)

    @property
    def stacked_norm_sq(self) -> float:
        return float(sum(self.norms_sq))


def model_tensor(mu, config: SounderConfig, pattern: BeampatternGrid, rotation):
    """Rank-one [nx, ny, n_freq] response for one MPC seen by one rotation."""
    az_g, el_g, tau = mu
    az_l, el_l = global_to_local(az_g, el_g, rotation)
    tx, ty = az_el_to_spatial_freq(az_l, el_l, config.spacing_d, config.wavelength)
    g = freq_profile(pattern, az_l, el_l, config, pol="co")
    ax = steering_vector(config.nx, tx)
    ay = steering_vector(config.ny, ty)
    phase = np.exp(-2j * np.pi * tau * config.freq_grid())
    return ax[:, None, None] * np.conj(ay)[None, :, None] * (g * phase)[None, None, :]


def model_vector(mu, config: SounderConfig, pattern: BeampatternGrid) -> ModelVector:
    vectors = []
    norms = []
    for rot in config.rotations:
        t = model_tensor(mu, config, pattern, rot)
        v = vec(t)
        vectors.append(v)
        norms.append(float(np.vdot(v, v).real))
    return ModelVector(mu=tuple(mu), vectors=tuple(vectors), norms_sq=tuple(norms))


def _beamform_columns(tensor, theta_x, theta_y, nx, ny):
    """a_x^H H a_y per frequency for one (theta_x, theta_y): vector length N."""
    ax = steering_vector(nx, theta_x)
    ay = steering_vector(ny, theta_y)
    return np.einsum("x,xyk,y->k", np.conj(ax), tensor, ay, optimize=True)


def _rotation_numerator(tensor, mu, config, pattern, rotation, r_inv=None):
    """Complex inner product h_i(mu)^H (R^-1) h_ms,i via the beamspace route."""
    az_g, el_g, tau = mu
    az_l, el_l = global_to_local(az_g, el_g, rotation)
    tx, ty = az_el_to_spatial_freq(az_l, el_l, config.spacing_d, config.wavelength)
    y = tensor
    if r_inv is not None:
        y = apply_freq_matrix(tensor, r_inv)
    b = _beamform_columns(y, tx, ty, config.nx, config.ny)
    g = freq_profile(pattern, az_l, el_l, config, pol="co")
    freqs = config.freq_grid()
    return complex(np.sum(np.conj(g) * np.exp(2j * np.pi * tau * freqs) * b))


def apply_freq_matrix(tensor, mat):
    """Apply an [N, N] matrix along the frequency axis of [nx, ny, N]."""
    nx, ny, n = tensor.shape
    flat = tensor.reshape(nx * ny, n)
    return (flat @ mat.T).reshape(nx, ny, n)


def whitened_norm_sq(mu, config, pattern, r_inv=None):
    """Stacked (optionally whitened) squared norm of the model vector."""
    az_g, el_g, tau = mu
    freqs = config.freq_grid()
    phase = np.exp(-2j * np.pi * tau * freqs)
    total = 0.0
    for rot in config.rotations:
        az_l, el_l = global_to_local(az_g, el_g, rot)
        g = freq_profile(pattern, az_l, el_l, config, pol="co")
        fp = g * phase
        if r_inv is None:
            q = float(np.vdot(fp, fp).real)
        else:
            q = float(np.vdot(fp, r_inv @ fp).real)
        total += config.nx * config.ny * q
    return total


def objective(measurement: MeasurementSet, mu, config=None, pattern=None, r_inv=None):
    """Stacked matched-filter metric |h(mu)^H h_ms|^2 / ||h(mu)||^2.

    The numerator is evaluated through per-frequency spatial beamforming,
    conjugate-pattern weighting and a delay-domain correlation, summed over
    rotations before squaring.
    """
    config = config or measurement.config
    num = 0.0 + 0.0j
    for tensor, rot in zip(measurement.tensors, config.rotations):
        num += _rotation_numerator(tensor, mu, config, pattern, rot, r_inv=r_inv)
    denom = whitened_norm_sq(mu, config, pattern, r_inv=r_inv)
    if denom == 0.0:
        return 0.0
    return float(abs(num) ** 2 / denom)


def matched_amplitude(measurement, mu, config, pattern, r_inv=None):
    """Matched-filter amplitude h(mu)^H h_ms / ||h(mu)||^2 (whitened if given)."""
    num = 0.0 + 0.0j
    for tensor, rot in zip(measurement.tensors, config.rotations):
        num += _rotation_numerator(tensor, mu, config, pattern, rot, r_inv=r_inv)
    denom = whitened_norm_sq(mu, config, pattern, r_inv=r_inv)
    return num / denom


class GridEvaluator:
    """Precomputed steering/pattern tables for fast objective-grid evaluation.

    Bound to one (config, pattern, az/el axes) triple; the delay axis is
    supplied per call so the same evaluator serves both the coarse composite
    grid and local refinements.
    """

    def __init__(self, config: SounderConfig, pattern: BeampatternGrid,
                 az_axis, el_axis):
        self.config = config
        self.pattern = pattern
        self.az_axis = np.asarray(az_axis, dtype=float)
        self.el_axis = np.asarray(el_axis, dtype=float)
        self.freqs = config.freq_grid()
        self._rot = []
        for rot in config.rotations:
            az_l, el_l = global_to_local(
                self.az_axis[:, None],
                self.el_axis[None, :],
                rot,
            )
            tx, ty = az_el_to_spatial_freq(
                az_l, el_l, config.spacing_d, config.wavelength
            )
            # ty varies only with elevation
            ey = np.exp(-2j * np.pi * np.outer(np.arange(config.ny), ty[0, :]))
            ex = np.exp(2j * np.pi * np.arange(config.nx)[:, None, None] * tx[None, :, :])
            if pattern.is_frequency_flat:
                g = freq_profile_grid(pattern, az_l, el_l, config)[:, :, :1]
            else:
                g = freq_profile_grid(pattern, az_l, el_l, config)
            self._rot.append({"ey": ey, "ex": ex, "g": g})

    def _beamform(self, tensor, rot_idx):
        """B[a, e, k] = a_x^H H(f_k) a_y over the bound angle grid."""
        cfg = self.config
        tab = self._rot[rot_idx]
        na, ne = self.az_axis.size, self.el_axis.size
        # contract y:  C[x, e, k]
        c = (
            tensor.transpose(0, 2, 1).reshape(cfg.nx * cfg.n_freq, cfg.ny)
            @ tab["ey"]
        ).reshape(cfg.nx, cfg.n_freq, ne)
        # contract x as one batched product over elevation
        ext = tab["ex"].transpose(2, 1, 0)          # (ne, na, nx)
        ct = c.transpose(2, 0, 1)                   # (ne, nx, n_freq)
        b = np.matmul(ext, ct)                      # (ne, na, n_freq)
        return np.ascontiguousarray(b.transpose(1, 0, 2))

    def accumulate_w(self, tensors, r_inv=None):
        """Pre-transform numerator weights w[a, e, k] summed over rotations."""
        cfg = self.config
        na, ne = self.az_axis.size, self.el_axis.size
        w = np.zeros((na, ne, cfg.n_freq), dtype=np.complex128)
        for i, tensor in enumerate(tensors):
            y = tensor
            if r_inv is not None:
                y = apply_freq_matrix(tensor, r_inv)
            b = self._beamform(y, i)
            w += b * np.conj(self._rot[i]["g"])
        return w

    def model_w(self, mu, r_inv=None):
        """``accumulate_w`` of the unit-amplitude rank-one model at ``mu``.

        The spatial beamform of a_x a_y^H collapses to two inner products
        per rotation, so a residual's weights can be formed by subtracting
        path contributions from a cached measurement ``w`` instead of
        re-beamforming the full residual tensor.
        """
        cfg = self.config
        az_g, el_g, tau = mu
        phase = np.exp(-2j * np.pi * tau * self.freqs)
        na, ne = self.az_axis.size, self.el_axis.size
        w = np.zeros((na, ne, cfg.n_freq), dtype=np.complex128)
        for i, rot in enumerate(cfg.rotations):
            az_l, el_l = global_to_local(az_g, el_g, rot)
            tx, ty = az_el_to_spatial_freq(
                az_l, el_l, cfg.spacing_d, cfg.wavelength
            )
            prof = freq_profile(self.pattern, az_l, el_l, cfg, pol="co") * phase
            if r_inv is not None:
                prof = r_inv @ prof
            tab = self._rot[i]
            ax = steering_vector(cfg.nx, tx)
            ay = steering_vector(cfg.ny, ty)
            u = np.conj(ay) @ tab["ey"]                   # (ne,)
            v = np.tensordot(ax, tab["ex"], axes=(0, 0))  # (na, ne)
            vu = v * u[None, :]
            g = tab["g"]
            if g.shape[2] == 1:
                w += np.multiply.outer(vu * np.conj(g[:, :, 0]), prof)
            else:
                w += vu[:, :, None] * (np.conj(g) * prof)
        return w

    def delay_transform(self, w, tau_axis):
        """Delay correlation sum_k w_k e^{+j 2 pi tau f_k} along the last axis.

        On the aligned uniform grid tau_t = t T / n_tau the bin-index part
        is a padded inverse DFT and only the band-edge phase remains outside
        it.
        """
        cfg = self.config
        tau_axis = np.asarray(tau_axis, dtype=float)
        na, ne = self.az_axis.size, self.el_axis.size
        n_tau = tau_axis.size
        aligned = n_tau >= cfg.n_freq and np.allclose(
            tau_axis, np.arange(n_tau) * (cfg.duration_t / n_tau),
            rtol=0.0, atol=1e-15 * cfg.duration_t,
        )
        if aligned:
            out = np.fft.ifft(w, n=n_tau, axis=2) * n_tau
            out *= np.exp(2j * np.pi * self.freqs[0] * tau_axis)[None, None, :]
            return out
        dmat = np.exp(2j * np.pi * np.outer(self.freqs, tau_axis))
        return (w.reshape(na * ne, -1) @ dmat).reshape(na, ne, -1)

    def numerator_grid(self, tensors, tau_axis, r_inv=None):
        """Complex stacked numerator h(mu)^H h_ms on (az, el, tau)."""
        return self.delay_transform(
            self.accumulate_w(tensors, r_inv=r_inv), tau_axis
        )

    def norm_grid(self, tau_axis, r_inv=None):
        """Stacked ||h(mu)||^2 (whitened if r_inv given) on (az, el, tau)."""
        cfg = self.config
        tau_axis = np.asarray(tau_axis, dtype=float)
        na, ne = self.az_axis.size, self.el_axis.size
        nxny = cfg.nx * cfg.ny
        if r_inv is None:
            # delay-independent: return a broadcastable (na, ne, 1) slab
            denom = np.zeros((na, ne))
            for tab in self._rot:
                g = tab["g"]
                if g.shape[2] == 1:
                    denom += np.abs(g[:, :, 0]) ** 2 * cfg.n_freq
                else:
                    denom += np.sum(np.abs(g) ** 2, axis=2)
            return nxny * denom[:, :, None]
        lag_phase = np.exp(
            -2j * np.pi * np.outer(tau_axis, np.arange(cfg.n_freq) * cfg.delta_f)
        )  # e^{-j 2 pi tau m df} for lag m = l - k
        if self.pattern.is_frequency_flat:
            # separable: |G|^2 * (delay-phasor quadratic form in R^-1)
            tr = np.array(
                [np.sum(np.diagonal(r_inv, offset=m)) for m in range(cfg.n_freq)]
            )
            q = tr[0].real + 2 * np.real(lag_phase[:, 1:] @ tr[1:])
            gain = np.zeros((na, ne))
            for tab in self._rot:
                gain += np.abs(tab["g"][:, :, 0]) ** 2
            return nxny * gain[:, :, None] * q[None, None, :]
        denom = np.zeros((na, ne, tau_axis.size))
        for tab in self._rot:
            g = tab["g"]
            for m in range(cfg.n_freq):
                diag = np.diagonal(r_inv, offset=m)
                s = np.sum(
                    np.conj(g[:, :, : cfg.n_freq - m]) * g[:, :, m:] * diag, axis=2
                )
                if m == 0:
                    denom += s[:, :, None].real
                else:
                    denom += 2 * np.real(s[:, :, None] * lag_phase[None, None, :, m])
        return nxny * denom

    def objective_grid(self, tensors, tau_axis, r_inv=None):
        """Composite objective P(az, el, tau) over the bound axes."""
        num = self.numerator_grid(tensors, tau_axis, r_inv=r_inv)
        denom = self.norm_grid(tau_axis, r_inv=r_inv)
        with np.errstate(invalid="ignore", divide="ignore"):
            p = np.abs(num) ** 2 / denom
        return np.where(denom > 0, p, 0.0)


def composite_objective(measurement: MeasurementSet, grid: SearchGrid,
                        pattern: BeampatternGrid, tensors=None, r_inv=None):
    """Objective tensor over a full SearchGrid for the composite measurement."""
    ev = GridEvaluator(measurement.config, pattern, grid.az_axis, grid.el_axis)
    if tensors is None:
        tensors = measurement.tensors
    return ev.objective_grid(tensors, grid.tau_axis, r_inv=r_inv)


def pdp_1d(p, grid: SearchGrid, axis):
    """Cell-volume weighted marginal of the 3D objective tensor."""
    axes = {"az": 0, "el": 1, "delay": 2}
    if axis not in axes:
        raise ValueError(f"axis must be one of {sorted(axes)}")
    keep = axes[axis]
    steps = []
    for i, ax in enumerate(grid.axes()):
        steps.append(ax[1] - ax[0] if ax.size > 1 else 1.0)
    other = [i for i in range(3) if i != keep]
    weight = steps[other[0]] * steps[other[1]]
    return np.sum(p, axis=tuple(other)) * weight


# -- critically sampled beam-frequency transforms ------------------------------

def dft_matrix(n: int) -> np.ndarray:
    """Spatial DFT matrix with steering-vector columns a_n(i/n)/n, i = 1..n."""
    i = np.arange(1, n + 1)
    m = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(m, i) / n) / n


def to_beam_frequency(tensor, nx, ny):
    """U_x^H H(f) U_y for every frequency slice."""
    ux = dft_matrix(nx)
    uy = dft_matrix(ny)
    return np.einsum("xi,xyk,yj->ijk", np.conj(ux), tensor, uy, optimize=True)


def from_beam_frequency(hb, nx, ny):
    """Inverse transform: H(f) = nx * ny * U_x Hb(f) U_y^H."""
    ux = dft_matrix(nx)
    uy = dft_matrix(ny)
    return nx * ny * np.einsum("xi,ijk,yj->xyk", ux, hb, np.conj(uy), optimize=True)


def beamspace_tensor(measurement: MeasurementSet, rotation_index: int,
                     oversampling=(1, 1, 1)):
    """|H_b|^2 on the uniform (theta_x, theta_y, delay) lattice of one rotation.

    Computed with zero-padded FFTs; at critical sampling this is the
    normalized 3D DFT power of the space-frequency tensor.
    """
    cfg = measurement.config
    tensor = measurement.tensors[rotation_index]
    osx, osy, ost = oversampling
    nx, ny, nf = cfg.nx, cfg.ny, cfg.n_freq
    # sum_x H e^{+j2pi theta_x x}: inverse FFT over x (padded)
    a = np.fft.ifft(tensor, n=nx * osx, axis=0) * nx * osx
    # sum_y (.) e^{-j2pi theta_y y}: forward FFT over y (padded)
    a = np.fft.fft(a, n=ny * osy, axis=1)
    # delay: sum_k (.) e^{+j2pi tau f_k}: inverse FFT over frequency (padded)
    a = np.fft.ifft(a, n=nf * ost, axis=2) * nf * ost
    return np.abs(a / (nf * nx * ny)) ** 2
