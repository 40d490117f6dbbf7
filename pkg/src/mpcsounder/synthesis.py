"""Forward sounder model: multipath list -> noisy space-frequency tensors.

Each rotation produces a complex tensor of shape [nx, ny, n_freq]; entry
(ix, iy, k) is the response of element (ix, iy) at absolute band frequency
f_k.  Vectorized order (x fastest, then y, then frequency) matches the
stacked model vectors used by the estimators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .beampattern import BeampatternGrid, freq_profile
from .geometry import MpcParam, SounderConfig, global_to_local, az_el_to_spatial_freq


@dataclass(frozen=True)
class MeasurementSet:
    config: SounderConfig
    tensors: tuple  # one complex [nx, ny, n_freq] tensor per rotation
    seed: int | None = None
    provenance: str = "synthetic"

    def __post_init__(self):
        tensors = tuple(np.asarray(t, dtype=np.complex128) for t in self.tensors)
        object.__setattr__(self, "tensors", tensors)
        if len(tensors) != len(self.config.rotations):
            raise ValueError("one tensor per rotation required")
        shape = (self.config.nx, self.config.ny, self.config.n_freq)
        for t in tensors:
            if t.shape != shape:
                raise ValueError(f"tensor shape {t.shape} != {shape}")

    def stacked(self) -> np.ndarray:
        """All rotations concatenated in vectorized order."""
        return np.concatenate([vec(t) for t in self.tensors])

    def total_power(self) -> float:
        return float(sum(np.sum(np.abs(t) ** 2) for t in self.tensors))


def vec(tensor: np.ndarray) -> np.ndarray:
    """Vectorize [nx, ny, n_freq] with x fastest, then y, then frequency."""
    return np.transpose(tensor, (2, 1, 0)).reshape(-1)


def unvec(v: np.ndarray, nx: int, ny: int, n_freq: int) -> np.ndarray:
    return np.transpose(v.reshape(n_freq, ny, nx), (2, 1, 0))


def steering_vector(n: int, theta) -> np.ndarray:
    """Discrete spatial sinusoid: entries exp(-j 2 pi theta m), m = 0..n-1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    m = np.arange(n)
    return np.exp(-2j * np.pi * np.asarray(theta) * m)


def effective_v_amplitude(amp, g_co, g_xpol):
    """V-port receive amplitude of one MPC for a V-only excited TX.

    With unit TX gains the received VV chain combines all four polarimetric
    amplitudes: g_co*(aVV + aVH) + g_xpol*(aHV + aHH), where g_xpol is the
    element's cross-polar gain (reciprocal on TX and RX sides).
    """
    amp = np.asarray(amp, dtype=np.complex128)
    return g_co * (amp[0, 0] + amp[0, 1]) + np.asarray(g_xpol) * (
        amp[1, 0] + amp[1, 1]
    )


def synthesize(mpcs, config: SounderConfig, pattern: BeampatternGrid, rotation):
    """Noise-free space-frequency tensor for one array rotation."""
    out = np.zeros((config.nx, config.ny, config.n_freq), dtype=np.complex128)
    freqs = config.freq_grid()
    scale = config.tx_amp_scale
    for mpc in mpcs:
        if mpc.delay > config.duration_t:
            raise ValueError(
                f"MPC {mpc.id} delay {mpc.delay:.3g} s exceeds window "
                f"T={config.duration_t:.3g} s"
            )
        az_l, el_l = global_to_local(mpc.az_global, mpc.el_global, rotation)
        tx, ty = az_el_to_spatial_freq(az_l, el_l, config.spacing_d, config.wavelength)
        g_co = freq_profile(pattern, az_l, el_l, config, pol="co")
        g_xpol = freq_profile(pattern, az_l, el_l, config, pol="xpol")
        amp_f = scale * effective_v_amplitude(mpc.amp, g_co, g_xpol)
        ax = steering_vector(config.nx, tx)
        ay = steering_vector(config.ny, ty)
        phase = np.exp(-2j * np.pi * mpc.delay * freqs)
        out += ax[:, None, None] * np.conj(ay)[None, :, None] * (amp_f * phase)[None, None, :]
    return out


def add_noise(tensor, noise_psd, seed, delta_f):
    """Add circular complex AWGN with per-bin variance noise_psd * delta_f."""
    if noise_psd < 0:
        raise ValueError("noise_psd must be >= 0")
    if noise_psd == 0:
        return np.array(tensor, copy=True)
    rng = np.random.default_rng(seed)
    sigma = np.sqrt(noise_psd * delta_f / 2.0)
    noise = rng.standard_normal(tensor.shape) + 1j * rng.standard_normal(tensor.shape)
    return tensor + sigma * noise


def synthesize_multi_fov(mpcs, config: SounderConfig, pattern: BeampatternGrid, seed=0):
    """One noisy tensor per configured rotation, independent noise streams."""
    tensors = []
    for i, rot in enumerate(config.rotations):
        clean = synthesize(mpcs, config, pattern, rot)
        tensors.append(
            add_noise(clean, config.noise_psd, seed=[seed, i], delta_f=config.delta_f)
        )
    return MeasurementSet(config=config, tensors=tuple(tensors), seed=seed)


def noise_psd_for_snr(mpcs, config: SounderConfig, pattern: BeampatternGrid, snr_db):
    """Noise PSD giving the requested mean per-sample SNR across rotations."""
    p_sig = 0.0
    n_samp = 0
    for rot in config.rotations:
        t = synthesize(mpcs, config, pattern, rot)
        p_sig += float(np.sum(np.abs(t) ** 2))
        n_samp += t.size
    if p_sig == 0:
        raise ValueError("cannot set SNR for a zero signal")
    p_bin = p_sig / n_samp
    return p_bin / (10.0 ** (snr_db / 10.0)) / config.delta_f
