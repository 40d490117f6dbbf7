"""CLEAN, SAGE and RiMAX multipath extraction.

All three share one loop skeleton: search the composite objective grid for
candidate regions, refine the best candidate on a fine local grid, run the
rejection checks, refresh every accepted amplitude by least squares, and
subtract the model from the residual.  SAGE re-optimizes each accepted path
against its own partial residual; RiMAX additionally alternates the specular
sweep with a maximum-likelihood fit of the diffuse (dense multipath)
covariance and whitens every inner product with it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .beampattern import BeampatternGrid, pattern_pdp_at
from .beamspace import (
    GridEvaluator,
    SearchGrid,
    apply_freq_matrix,
    make_search_grid,
    model_tensor,
)
from .dmc import DelayWhitener, DmcModel, fit_dmc
from .geometry import (
    SounderConfig,
    fov_contains,
    global_to_local,
    principal_alias,
    wrap_pm_pi,
    wrap_two_pi,
)
from .synthesis import MeasurementSet, vec

_EPS = 1e-30


@dataclass(frozen=True)
class EstimatorConfig:
    gamma_peak_db: float = 18.0         # region threshold below per-axis peaks
    gamma_det_db: float = 40.0          # detection range below strongest path
    closeness_fraction: float = 0.5     # duplicate gate, fraction of a bin
    nmse_tol: float = 0.02              # relative NMSE improvement floor
    max_mpcs: int = 40
    consecutive_rejects_stop: int = 3
    os_coarse: int = 2
    os_fine: int = 9
    max_regions_per_iter: int = 8
    relvar_threshold: float = 0.5       # RiMAX amplitude-variance gate
    sage_inner_iters: int = 2
    fit_dmc: bool = True
    rimax_outer_iters: int = 3
    dmc_converge_rtol: float = 1e-3

    def __post_init__(self):
        if self.gamma_peak_db <= 0:
            raise ValueError("gamma_peak_db must be > 0")
        if not 0.0 < self.nmse_tol <= 0.1:
            raise ValueError("nmse_tol must lie in (0, 0.1]")
        if self.os_coarse < 1 or self.os_fine < 1:
            raise ValueError("oversampling factors must be >= 1")
        if self.max_mpcs < 1 or self.consecutive_rejects_stop < 1:
            raise ValueError("max_mpcs and consecutive_rejects_stop must be >= 1")


@dataclass
class EstMpc:
    az_global: float
    el_global: float
    delay: float
    amp: complex
    power_db: float
    iteration_found: int
    relvar: float | None = None

    @property
    def mu(self):
        return (self.az_global, self.el_global, self.delay)


@dataclass
class EstimateSet:
    algorithm: str
    mpcs: list = field(default_factory=list)
    nmse_trajectory: list = field(default_factory=list)
    residual_power_trajectory: list = field(default_factory=list)
    rejection_log: list = field(default_factory=list)
    dmc_params: DmcModel | None = None

    @property
    def nmse(self) -> float:
        return self.nmse_trajectory[-1] if self.nmse_trajectory else 1.0


# -- region search -------------------------------------------------------------

def _peaks_1d(values, threshold, circular=False):
    v = np.asarray(values)
    if circular and v.size > 2:
        left = np.roll(v, 1)
        right = np.roll(v, -1)
    else:
        left = np.concatenate(([-np.inf], v[:-1]))
        right = np.concatenate((v[1:], [-np.inf]))
    return np.nonzero((v >= left) & (v > right) & (v >= threshold))[0]


def find_search_regions(p3d, grid: SearchGrid, gamma_peak_db):
    """Ordered candidate regions from the composite 3D objective tensor.

    Per-axis marginal peaks within gamma_peak of each axis maximum are
    combined, pruned by the 3D threshold, sorted by power and deduplicated
    within half a resolution bin.
    """
    from .beamspace import pdp_1d

    thr_lin = 10.0 ** (-gamma_peak_db / 10.0)
    marg = {
        "az": pdp_1d(p3d, grid, "az"),
        "el": pdp_1d(p3d, grid, "el"),
        "delay": pdp_1d(p3d, grid, "delay"),
    }
    ia = _peaks_1d(marg["az"], marg["az"].max() * thr_lin, circular=True)
    ie = _peaks_1d(marg["el"], marg["el"].max() * thr_lin)
    it = _peaks_1d(marg["delay"], marg["delay"].max() * thr_lin)
    if ia.size == 0 or ie.size == 0 or it.size == 0:
        return []
    sub = p3d[np.ix_(ia, ie, it)]
    floor3d = p3d.max() * thr_lin
    keep = np.argwhere(sub >= floor3d)
    if keep.size == 0:
        return []
    cands = [
        (float(sub[a, e, t]), ia[a], ie[e], it[t])
        for a, e, t in keep
    ]
    cands.sort(key=lambda c: -c[0])
    regions = []
    half = (grid.az_res / 2, grid.el_res / 2, grid.tau_res / 2)
    kept = np.empty((0, 3))
    for val, a, e, t in cands:
        az = grid.az_axis[a]
        el = grid.el_axis[e]
        tau = grid.tau_axis[t]
        if kept.size:
            dup = np.any(
                (np.abs(wrap_pm_pi(az - kept[:, 0])) < half[0])
                & (np.abs(el - kept[:, 1]) < half[1])
                & (np.abs(tau - kept[:, 2]) < half[2])
            )
            if dup:
                continue
        regions.append({"az": az, "el": el, "tau": tau, "value": val})
        kept = np.vstack([kept, (az, el, tau)])
    return regions


# -- single-MPC update ---------------------------------------------------------

def single_mpc_update(tensors, center, config: SounderConfig,
                      pattern: BeampatternGrid, grid: SearchGrid,
                      r_inv=None, half_width_bins=0.5):
    """Fine local maximization of the matched-filter objective around a region.

    Returns (mu, matched amplitude, objective value) for the fine-grid argmax
    within +-half_width_bins resolution bins of the region center.
    """
    n = grid.os_fine
    az0, el0, tau0 = center
    haz = half_width_bins * grid.az_res
    hel = half_width_bins * grid.el_res
    htau = half_width_bins * grid.tau_res
    az_axis = wrap_two_pi(az0 + np.linspace(-haz, haz, n))
    el_axis = np.clip(el0 + np.linspace(-hel, hel, n), 0.0, math.pi)
    t_max = config.duration_t * (1.0 - 1e-12)
    tau_axis = np.clip(tau0 + np.linspace(-htau, htau, n), 0.0, t_max)
    ev = GridEvaluator(config, pattern, az_axis, el_axis)
    num = ev.numerator_grid(tensors, tau_axis, r_inv=r_inv)
    den = ev.norm_grid(tau_axis, r_inv=r_inv)
    with np.errstate(invalid="ignore", divide="ignore"):
        obj = np.where(den > 0, np.abs(num) ** 2 / den, 0.0)
    idx = np.unravel_index(int(np.argmax(obj)), obj.shape)
    mu = (float(az_axis[idx[0]]), float(el_axis[idx[1]]), float(tau_axis[idx[2]]))
    d = den[idx[0], idx[1], min(idx[2], den.shape[2] - 1)]
    amp = complex(num[idx] / max(d, _EPS))
    return mu, amp, float(obj[idx])


# -- amplitude estimation ------------------------------------------------------

_MODEL_CACHE = {}


def _cached_model(mu, config, pattern):
    """Per-rotation model tensors at ``mu``, memoized across extractions.

    The same accepted parameters recur across CLEAN, SAGE, and RiMAX runs on
    one measurement; callers must treat the returned tensors as read-only.
    """
    key = (mu, config, id(pattern))
    ent = _MODEL_CACHE.get(key)
    if ent is None:
        if len(_MODEL_CACHE) > 32:
            _MODEL_CACHE.clear()
        ent = [model_tensor(mu, config, pattern, rot) for rot in config.rotations]
        _MODEL_CACHE[key] = ent
    return ent


def _stack(tensors):
    return np.concatenate([vec(t) for t in tensors])


def _path_col(p):
    """Stacked model vector of an accepted path, built once per location."""
    col = p.get("col")
    if col is None:
        col = _stack(p["tensors"])
        p["col"] = col
    return col


def _whiten_stacked(a, r_inv, n_rot):
    """Apply R^-1 along the frequency axis of stacked vectors/column blocks.

    Stacked layout per rotation is [freq][y][x] (frequency outermost), so the
    matrix acts on the middle axis of an (n_rot, n_freq, rest) view.
    """
    arr = np.asarray(a)
    n = r_inv.shape[0]
    view = arr.reshape(n_rot, n, -1)
    out = np.matmul(r_inv, view)
    return out.reshape(arr.shape)


def _ls_solve(columns, y, mus, r_inv=None, cond_limit=1e12, n_rot=1):
    """Normal-equation LS over stacked model columns (whitened if r_inv)."""
    a = np.stack(columns, axis=1)
    ah = a.conj().T
    if r_inv is not None:
        b = _whiten_stacked(a, r_inv, n_rot)
        gram = ah @ b
        rhs = b.conj().T @ y
    else:
        gram = ah @ a
        rhs = ah @ y
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > cond_limit:
        # name the most correlated pair in the error
        k = len(mus)
        worst, pair = -1.0, (0, min(1, k - 1))
        for i in range(k):
            for j in range(i + 1, k):
                rho = abs(gram[i, j]) / max(
                    math.sqrt(abs(gram[i, i] * gram[j, j]).real), _EPS
                )
                if rho > worst:
                    worst, pair = rho, (i, j)
        raise ValueError(
            "ill-conditioned amplitude system (cond "
            f"{cond:.2e}); closest parameter pair: {mus[pair[0]]} and "
            f"{mus[pair[1]]} (correlation {worst:.4f})"
        )
    return np.linalg.solve(gram, rhs)


def ls_amplitudes(measurement: MeasurementSet, mus, pattern: BeampatternGrid,
                  r_inv=None):
    """Joint LS amplitudes for a list of (az, el, delay) parameters."""
    cfg = measurement.config
    cols = [_stack(_cached_model(mu, cfg, pattern)) for mu in mus]
    y = measurement.stacked()
    return _ls_solve(cols, y, mus, r_inv=r_inv, n_rot=len(cfg.rotations))


# -- rejection -----------------------------------------------------------------

def _per_rotation_power(tensors, mu, config, pattern, r_inv=None):
    """Objective value of mu against each rotation separately."""
    vals = []
    for i, rot in enumerate(config.rotations):
        v = vec(model_tensor(mu, config, pattern, rot))
        y = tensors[i]
        if r_inv is not None:
            y = apply_freq_matrix(y, r_inv)
        num = np.vdot(v, vec(y))
        den = float(np.vdot(v, v).real)
        vals.append(abs(num) ** 2 / max(den, _EPS))
    return np.array(vals)


def _complement_hypotheses(az_global, config):
    """Global azimuths whose front-half alias matches az in the other FoVs."""
    hyps = []
    for rot in config.rotations:
        if fov_contains(rot, az_global):
            continue
        la = wrap_pm_pi(az_global - rot)
        hyps.append(float(wrap_two_pi(rot + principal_alias(la))))
    return hyps


def _expected_triple(az_global, el_global, config, pattern):
    """Band-integrated element gain toward (az, el) for each rotation."""
    out = []
    for rot in config.rotations:
        az_l, el_l = global_to_local(az_global, el_global, rot)
        out.append(pattern_pdp_at(pattern, az_l, el_l, config))
    return np.array(out)


def _kl(p, q):
    p = np.clip(p / max(p.sum(), _EPS), 1e-12, None)
    q = np.clip(q / max(q.sum(), _EPS), 1e-12, None)
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def fov_consistency_check(mu, tensors, config, pattern, r_inv=None):
    """True when the measured per-rotation power triple favors mu itself.

    The alternatives are the front-back aliases of mu's azimuth seen by the
    other rotations; the comparison uses Kullback-Leibler distance between
    the normalized measured triple and the expected element-gain triples.
    """
    az, el, _ = mu
    others = _complement_hypotheses(az, config)
    if not others:
        return True
    measured = _per_rotation_power(tensors, mu, config, pattern, r_inv=r_inv)
    if measured.sum() <= 0:
        return True
    d_own = _kl(measured, _expected_triple(az, el, config, pattern))
    for hyp in others:
        d_alt = _kl(measured, _expected_triple(hyp, el, config, pattern))
        if d_alt < d_own - 1e-12:
            return False
    return True


def fisher_relative_variance(mu, amp, config: SounderConfig,
                             pattern: BeampatternGrid, noise_var,
                             r_inv=None, angle_step=1e-5):
    """FIM-based var(|amp|)/|amp|^2 for the 4 parameters (az, el, tau, |amp|).

    Angle derivatives of the model vector use central finite differences
    (the beampattern is gridded); the delay derivative is analytic.
    """
    amp = complex(amp)
    if abs(amp) == 0.0:
        return math.inf
    az, el, tau = mu
    freqs = config.freq_grid()
    t_max = config.duration_t * (1.0 - 1e-12)

    def stacked(m):
        azq = float(wrap_two_pi(m[0]))
        elq = min(max(m[1], 0.0), math.pi)
        tq = min(max(m[2], 0.0), t_max)
        # perturbed points are one-shot; bypass the location memo
        return _stack([
            model_tensor((azq, elq, tq), config, pattern, rot)
            for rot in config.rotations
        ])

    model = _cached_model(mu, config, pattern)
    s0 = _stack(model)
    # forward differences: relative truncation error is O(step * curvature
    # scale) ~ 1e-4 of the derivative, far inside the bound's use here
    el_hi = min(el + angle_step, math.pi)
    el_lo = max(el - angle_step, 0.0)
    dtau_tensors = [
        t * (-2j * np.pi * freqs)[None, None, :] for t in model
    ]
    phase = amp / abs(amp)
    j = np.empty((s0.size, 4), dtype=np.complex128)
    j[:, 0] = stacked((az + angle_step, el, tau)) - s0
    j[:, 0] *= amp / angle_step
    j[:, 1] = (stacked((az, el_hi, tau)) - s0) if el_hi > el else (
        s0 - stacked((az, el_lo, tau)))
    j[:, 1] *= amp / max(el_hi - el, el - el_lo)
    j[:, 2] = amp * _stack(dtau_tensors)
    j[:, 3] = phase * s0
    if r_inv is not None:
        jw = _whiten_stacked(j, r_inv, len(config.rotations))
        fim = 2.0 * np.real(j.conj().T @ jw)
    else:
        fim = (2.0 / noise_var) * np.real(j.conj().T @ j)
    try:
        cov = np.linalg.inv(fim)
    except np.linalg.LinAlgError:
        return math.inf
    if not np.all(np.isfinite(cov)) or cov[3, 3] <= 0:
        return math.inf
    return float(cov[3, 3] / abs(amp) ** 2)


def reject_candidate(candidate, accepted, tensors, config: SounderConfig,
                     est_cfg: EstimatorConfig, pattern: BeampatternGrid,
                     grid: SearchGrid, noise_floor, strongest_power,
                     check_relvar=False, noise_var=1.0, r_inv=None):
    """Apply the four rejection criteria; returns (None on accept, else reason)."""
    mu, amp, value = candidate
    if value <= noise_floor:
        return "power", {"value": value, "floor": noise_floor}
    if strongest_power is not None:
        gate = strongest_power * 10.0 ** (-est_cfg.gamma_det_db / 10.0)
        if value < gate:
            return "power", {"value": value, "gate": gate}
    half = est_cfg.closeness_fraction
    for acc in accepted:
        daz = abs(wrap_pm_pi(mu[0] - acc["mu"][0]))
        de = abs(mu[1] - acc["mu"][1])
        dt = abs(mu[2] - acc["mu"][2])
        if (daz < half * grid.az_res and de < half * grid.el_res
                and dt < half * grid.tau_res):
            return "closeness", {"duplicate_of": acc["mu"]}
    if not fov_consistency_check(mu, tensors, config, pattern, r_inv=r_inv):
        return "fov", {}
    if check_relvar:
        rv = fisher_relative_variance(
            mu, amp, config, pattern, noise_var, r_inv=r_inv
        )
        if rv > est_cfg.relvar_threshold:
            return "relvar", {"relvar": rv}
    return None, {}


# -- stopping ------------------------------------------------------------------

def stopping_check(nmse_traj, n_accepted, consecutive_rejects,
                   est_cfg: EstimatorConfig):
    """Shared stop test; returns a reason string or None to continue."""
    if n_accepted >= est_cfg.max_mpcs:
        return "max_mpcs"
    if consecutive_rejects >= est_cfg.consecutive_rejects_stop:
        return "rejections"
    if len(nmse_traj) >= 2:
        prev, cur = nmse_traj[-2], nmse_traj[-1]
        if cur > prev:
            return "nmse_increase"
        if prev > 0 and (prev - cur) / prev < est_cfg.nmse_tol:
            return "tolerance"
        if cur < 1e-18:
            return "converged"
    return None


# -- shared loop machinery -----------------------------------------------------

# coarse evaluators are immutable once built and expensive for large arrays,
# so repeated runs over the same (config, pattern, grid density) share them
_EVALUATOR_CACHE: dict = {}


def _coarse_evaluator(config, pattern, grid):
    # keyed on geometry/band only: the steering/gain tables do not depend on
    # the noise level, so evaluators survive per-run noise_psd changes
    key = (config.fc, config.bandwidth_w, config.n_freq, config.duration_t,
           config.nx, config.ny, config.spacing_d, config.rotations,
           id(pattern), grid.az_axis.size, grid.el_axis.size)
    ev = _EVALUATOR_CACHE.get(key)
    if ev is None:
        if len(_EVALUATOR_CACHE) > 8:
            _EVALUATOR_CACHE.clear()
        ev = GridEvaluator(config, pattern, grid.az_axis, grid.el_axis)
        _EVALUATOR_CACHE[key] = ev
    return ev


class _Extraction:
    """Mutable state for one extraction run (residual, paths, trajectories)."""

    def __init__(self, measurement: MeasurementSet, pattern, est_cfg, algorithm):
        self.meas = measurement
        self.cfg = measurement.config
        self.pattern = pattern
        self.est_cfg = est_cfg
        self.grid = make_search_grid(
            self.cfg, os_coarse=est_cfg.os_coarse, os_fine=est_cfg.os_fine
        )
        self.evaluator = _coarse_evaluator(self.cfg, pattern, self.grid)
        self._denom_cache = {}
        self._obj_cache = {}
        self._version = 0
        self.y = measurement.stacked()
        self.total_power = measurement.total_power()
        self.paths = []  # dicts: mu, amp, tensors, value, iteration, relvar
        self.result = EstimateSet(algorithm=algorithm)
        self.residual = [t.copy() for t in measurement.tensors]

    def _residual_w(self, r_inv=None):
        """Pre-transform numerator weights of the residual.

        The measurement weights are beamformed once per whitener and shared
        across extractions through the evaluator (the same measurement is
        processed by CLEAN, SAGE, and RiMAX in turn); path contributions are
        rank-one and subtracted analytically, keeping the per-iteration cost
        free of full-tensor beamforms.  Cache entries hold the keyed objects
        themselves so an ``id`` can never be recycled while an entry is live.
        """
        key = id(r_inv)
        anchor = self.meas.tensors[0]
        shared = getattr(self.evaluator, "_meas_w_cache", None)
        if (shared is None or shared[0] is not anchor
                or shared[1] is not r_inv):
            shared = (anchor, r_inv, self.evaluator.accumulate_w(
                self.meas.tensors, r_inv=r_inv))
            self.evaluator._meas_w_cache = shared
        w = shared[2]
        if not self.paths:
            return w
        w = w.copy()
        for p in self.paths:
            pw = p.setdefault("w", {})
            pc = pw.get(key)
            if pc is None or pc[0] is not r_inv:
                if len(pw) > 4:
                    pw.clear()
                pc = (r_inv, self.evaluator.model_w(p["mu"], r_inv=r_inv))
                pw[key] = pc
            w -= p["amp"] * pc[1]
        return w

    def coarse_objective(self, r_inv=None):
        key = id(r_inv)
        cached = self._obj_cache.get(key)
        if cached is not None and cached[0] is r_inv and cached[1] == self._version:
            return cached[2]
        if r_inv is None:
            # delay-independent and shared across runs on the same evaluator
            den = getattr(self.evaluator, "_norm_cache", None)
            if den is None:
                den = self.evaluator.norm_grid(self.grid.tau_axis)
                self.evaluator._norm_cache = den
        else:
            dc = self._denom_cache.get(key)
            if dc is None or dc[0] is not r_inv:
                dc = (r_inv, self.evaluator.norm_grid(
                    self.grid.tau_axis, r_inv=r_inv))
                self._denom_cache[key] = dc
            den = dc[1]
        num = self.evaluator.delay_transform(
            self._residual_w(r_inv=r_inv), self.grid.tau_axis
        )
        if np.all(den > 0):
            obj = np.abs(num)
            np.multiply(obj, obj, out=obj)
            obj /= den
        else:
            with np.errstate(invalid="ignore", divide="ignore"):
                obj = np.where(den > 0, np.abs(num) ** 2 / den, 0.0)
        self._obj_cache = {key: (r_inv, self._version, obj)}
        return obj

    def refresh_amplitudes(self, r_inv=None):
        """Joint LS over all accepted paths, then rebuild the residual."""
        if not self.paths:
            self.residual = [t.copy() for t in self.meas.tensors]
            self._version += 1
            return
        cols = [_path_col(p) for p in self.paths]
        amps = _ls_solve(cols, self.y, [p["mu"] for p in self.paths], r_inv=r_inv)
        for p, a in zip(self.paths, amps):
            p["amp"] = complex(a)
        self.rebuild_residual()

    def rebuild_residual(self):
        self.residual = [t.copy() for t in self.meas.tensors]
        for p in self.paths:
            for i in range(len(self.residual)):
                self.residual[i] -= p["amp"] * p["tensors"][i]
        self._version += 1

    def residual_power(self):
        return float(sum(np.vdot(t, t).real for t in self.residual))

    def record_nmse(self):
        rp = self.residual_power()
        self.result.residual_power_trajectory.append(rp)
        self.result.nmse_trajectory.append(rp / max(self.total_power, _EPS))

    def strongest(self):
        if not self.paths:
            return None
        return max(p["value"] for p in self.paths)

    def finalize(self):
        for p in self.paths:
            amp = p["amp"]
            self.result.mpcs.append(
                EstMpc(
                    az_global=p["mu"][0],
                    el_global=p["mu"][1],
                    delay=p["mu"][2],
                    amp=amp,
                    power_db=20.0 * math.log10(max(abs(amp), _EPS)),
                    iteration_found=p["iteration"],
                    relvar=p.get("relvar"),
                )
            )
        return self.result


def _greedy_loop(state: _Extraction, r_inv=None, check_relvar=False,
                 noise_var=1.0, max_new=None):
    """Detect-and-subtract iterations shared by CLEAN and the RiMAX SMC step."""
    est_cfg = state.est_cfg
    rejects = 0
    added = 0
    while True:
        reason = stopping_check(
            state.result.nmse_trajectory, len(state.paths), rejects, est_cfg
        )
        if reason is not None:
            return reason
        if max_new is not None and added >= max_new:
            return "budget"
        obj = state.coarse_objective(r_inv=r_inv)
        # the floor is a bulk statistic over ~10^6 grid cells; an 8-strided
        # subsample estimates the median to well under a percent at 1/8 cost
        floor = float(np.median(obj.reshape(-1)[::8]))
        regions = find_search_regions(obj, state.grid, est_cfg.gamma_peak_db)
        if not regions:
            idx = np.unravel_index(int(np.argmax(obj)), obj.shape)
            regions = [{
                "az": state.grid.az_axis[idx[0]],
                "el": state.grid.el_axis[idx[1]],
                "tau": state.grid.tau_axis[idx[2]],
                "value": float(obj[idx]),
            }]
        accepted_one = False
        for region in regions[: est_cfg.max_regions_per_iter]:
            cand = single_mpc_update(
                state.residual,
                (region["az"], region["el"], region["tau"]),
                state.cfg, state.pattern, state.grid, r_inv=r_inv,
            )
            reason, info = reject_candidate(
                cand, state.paths, state.residual, state.cfg, est_cfg,
                state.pattern, state.grid, floor, state.strongest(),
                check_relvar=check_relvar, noise_var=noise_var, r_inv=r_inv,
            )
            if reason is not None:
                state.result.rejection_log.append(
                    {"mu": cand[0], "criterion": reason, **info}
                )
                rejects += 1
                if rejects >= est_cfg.consecutive_rejects_stop:
                    return "rejections"
                continue
            mu, amp, value = cand
            entry = {
                "mu": mu,
                "amp": amp,
                "value": value,
                "tensors": _cached_model(mu, state.cfg, state.pattern),
                "iteration": len(state.result.nmse_trajectory),
            }
            if check_relvar:
                entry["relvar"] = fisher_relative_variance(
                    mu, amp, state.cfg, state.pattern, noise_var, r_inv=r_inv
                )
            state.paths.append(entry)
            state.refresh_amplitudes()
            state.record_nmse()
            rejects = 0
            accepted_one = True
            added += 1
            break
        if not accepted_one:
            rejects += 1
            if rejects >= est_cfg.consecutive_rejects_stop:
                return "rejections"


def _sage_sweeps(state: _Extraction, sweeps, r_inv=None):
    """Path-wise expectation/maximization refinement of the accepted set.

    Each path is re-optimized against the measurement minus all other paths,
    within one resolution bin of its current location; moves that do not
    improve the per-path objective are reverted, so the total residual never
    increases.
    """
    if not state.paths:
        return
    for _ in range(sweeps):
        sres = _stack(state.residual)
        for p in state.paths:
            partial = [
                state.residual[i] + p["amp"] * p["tensors"][i]
                for i in range(len(state.residual))
            ]
            col = _path_col(p)
            stacked_partial = sres + p["amp"] * col
            if r_inv is not None:
                colw = _whiten_stacked(col, r_inv, len(state.cfg.rotations))
                f_old = abs(np.vdot(colw, stacked_partial)) ** 2 / max(
                    np.vdot(col, colw).real, _EPS
                )
            else:
                f_old = abs(np.vdot(col, stacked_partial)) ** 2 / max(
                    np.vdot(col, col).real, _EPS
                )
            mu_new, amp_new, f_new = single_mpc_update(
                partial, p["mu"], state.cfg, state.pattern, state.grid,
                r_inv=r_inv, half_width_bins=1.0,
            )
            if f_new > f_old * (1.0 + 1e-12):
                p["mu"] = mu_new
                p["value"] = f_new
                p["tensors"] = _cached_model(mu_new, state.cfg, state.pattern)
                p.pop("col", None)
                p.pop("w", None)
            # matched amplitude against the partial residual (either way)
            newcol = _path_col(p)
            p["amp"] = complex(
                np.vdot(newcol, stacked_partial)
                / max(np.vdot(newcol, newcol).real, _EPS)
            )
            state.residual = [
                partial[i] - p["amp"] * p["tensors"][i]
                for i in range(len(partial))
            ]
            sres = stacked_partial - p["amp"] * _path_col(p)
        state.refresh_amplitudes()
    state.record_nmse()


# -- public algorithms ---------------------------------------------------------

def clean_extract(measurement: MeasurementSet, pattern: BeampatternGrid,
                  est_cfg: EstimatorConfig | None = None) -> EstimateSet:
    """Greedy detect-and-subtract extraction."""
    est_cfg = est_cfg or EstimatorConfig()
    state = _Extraction(measurement, pattern, est_cfg, "clean")
    if state.total_power <= 0:
        return state.finalize()
    state.record_nmse()  # starting NMSE = 1
    _greedy_loop(state)
    return state.finalize()


def sage_refine(measurement: MeasurementSet, estimates: EstimateSet,
                pattern: BeampatternGrid,
                est_cfg: EstimatorConfig | None = None) -> EstimateSet:
    """Path-wise refinement of a CLEAN seed."""
    est_cfg = est_cfg or EstimatorConfig()
    state = _Extraction(measurement, pattern, est_cfg, "sage")
    state.result.nmse_trajectory = list(estimates.nmse_trajectory)
    state.result.residual_power_trajectory = list(
        estimates.residual_power_trajectory
    )
    state.result.rejection_log = list(estimates.rejection_log)
    for m in estimates.mpcs:
        state.paths.append({
            "mu": m.mu,
            "amp": m.amp,
            "value": 0.0,
            "tensors": _cached_model(m.mu, state.cfg, pattern),
            "iteration": m.iteration_found,
        })
    state.rebuild_residual()
    for p in state.paths:
        p["value"] = abs(np.vdot(_path_col(p), state.y)) ** 2 / max(
            sum(np.vdot(t, t).real for t in p["tensors"]), _EPS
        )
    _sage_sweeps(state, est_cfg.sage_inner_iters)
    return state.finalize()


def clean_sage_extract(measurement, pattern, est_cfg=None):
    est_cfg = est_cfg or EstimatorConfig()
    seed = clean_extract(measurement, pattern, est_cfg)
    return sage_refine(measurement, seed, pattern, est_cfg)


def rimax_extract(measurement: MeasurementSet, pattern: BeampatternGrid,
                  est_cfg: EstimatorConfig | None = None) -> EstimateSet:
    """Alternating specular/diffuse maximum-likelihood extraction.

    Seeds the specular set from CLEAN, then alternates a diffuse-covariance
    fit on the residual with a whitened path sweep (including a whitened
    detection pass and the relative-variance gate) until the covariance
    parameters converge.
    """
    est_cfg = est_cfg or EstimatorConfig()
    cfg = measurement.config
    noise_var = cfg.noise_psd * cfg.delta_f
    state = _Extraction(measurement, pattern, est_cfg, "rimax")
    if state.total_power <= 0:
        return state.finalize()
    state.record_nmse()
    _greedy_loop(state, check_relvar=True, noise_var=noise_var)
    dmc = DmcModel(decay_rate=4.0 / cfg.duration_t)
    for _ in range(est_cfg.rimax_outer_iters):
        if est_cfg.fit_dmc:
            new_dmc = fit_dmc(
                state.residual, cfg.delta_f, cfg.duration_t,
                start=None if dmc.is_zero else dmc, noise_var=noise_var,
            )
        else:
            new_dmc = dmc
        old = dmc.as_array()
        rel = np.linalg.norm(new_dmc.as_array() - old) / max(
            np.linalg.norm(old), _EPS
        )
        dmc = new_dmc
        if dmc.is_zero or not est_cfg.fit_dmc:
            r_inv = None
        else:
            r_inv = DelayWhitener(
                dmc, cfg.n_freq, cfg.delta_f, noise_var
            ).r_inv
        _sage_sweeps(state, 1, r_inv=r_inv)
        _greedy_loop(
            state, r_inv=r_inv, check_relvar=True,
            noise_var=noise_var, max_new=2,
        )
        if est_cfg.fit_dmc and rel < est_cfg.dmc_converge_rtol:
            break
        if not est_cfg.fit_dmc:
            break
    # report amplitudes in the unwhitened LS sense for comparable NMSE
    state.refresh_amplitudes()
    for p in state.paths:
        p["relvar"] = fisher_relative_variance(
            p["mu"], p["amp"], cfg, pattern, noise_var, r_inv=None
        )
    state.record_nmse()
    state.result.dmc_params = dmc if est_cfg.fit_dmc else DmcModel()
    return state.finalize()
