"""Scoring of extracted MPC sets: association, error statistics and NMSE."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import MpcParam, wrap_pm_pi

# fallback normalizations when the empirical estimate degenerates
DEFAULT_SIGMAS = (1e-9, 0.1, 3.0)  # (sigma_tau s, sigma_angle rad, sigma_alpha dB)

_BIG = 1e12


@dataclass
class AssociationResult:
    pairs: list = field(default_factory=list)  # (gt_idx, est_idx, costs dict)
    unmatched_gt: list = field(default_factory=list)
    unmatched_est: list = field(default_factory=list)
    sigmas: tuple = DEFAULT_SIGMAS
    c_um: float = 3.0

    @property
    def total_cost(self) -> float:
        return (
            sum(p[2]["total"] for p in self.pairs)
            + self.c_um * (len(self.unmatched_gt) + len(self.unmatched_est))
        )


def _unit_sphere(az, el):
    """Direction vector with elevation measured from the zenith."""
    return np.array(
        [math.cos(az) * math.sin(el), math.sin(az) * math.sin(el), math.cos(el)]
    )


def _gt_gain(mpc) -> float:
    # the extraction chain observes the V-excited / V-received channel
    if isinstance(mpc, MpcParam):
        return abs(mpc.a_vv)
    return abs(mpc.amp)


def _angles(mpc):
    return mpc.az_global, mpc.el_global, mpc.delay


def pairwise_cost(gt, est, sigmas=DEFAULT_SIGMAS):
    """(total, C_angle, C_tau, C_alpha) between one GT and one estimated MPC."""
    s_tau, s_ang, s_alpha = sigmas
    g_gt = _gt_gain(gt)
    g_est = _gt_gain(est)
    if g_gt == 0.0 or g_est == 0.0:
        return math.inf, 0.0, 0.0, math.inf
    az_g, el_g, tau_g = _angles(gt)
    az_e, el_e, tau_e = _angles(est)
    c_alpha = (20.0 * math.log10(g_gt / g_est) / s_alpha) ** 2
    c_tau = ((tau_g - tau_e) / s_tau) ** 2
    dot = float(np.dot(_unit_sphere(az_g, el_g), _unit_sphere(az_e, el_e)))
    c_angle = (math.acos(min(1.0, max(-1.0, dot))) / s_ang) ** 2
    total = c_alpha + c_tau + c_angle
    return total, c_angle, c_tau, c_alpha


def _cost_matrix(gt, est, sigmas):
    c = np.empty((len(gt), len(est)))
    parts = {}
    for i, g in enumerate(gt):
        for j, e in enumerate(est):
            total, ca, ct, cal = pairwise_cost(g, e, sigmas)
            c[i, j] = total if math.isfinite(total) else _BIG
            parts[(i, j)] = {
                "total": total, "angle": ca, "tau": ct, "alpha": cal
            }
    return c, parts


def associate(gt, est, c_um=3.0, sigmas=None) -> AssociationResult:
    """Cost-minimal one-to-one GT/estimate matching with an unmatched penalty.

    A pair enters the matching only when it is cheaper than leaving both
    sides unmatched (cost < 2 c_um); each unmatched element costs c_um.
    """
    if sigmas is None:
        sigmas = empirical_sigmas(gt, est)
    res = AssociationResult(sigmas=sigmas, c_um=c_um)
    np_, k = len(gt), len(est)
    if np_ == 0 or k == 0:
        res.unmatched_gt = list(range(np_))
        res.unmatched_est = list(range(k))
        return res
    c, parts = _cost_matrix(gt, est, sigmas)
    # augmented square system: matching a real pair competes against sending
    # both elements to their c_um dummy, so pairs above 2*c_um drop out
    big = max(_BIG, 10.0 * np.max(c)) * 10.0
    aug = np.full((np_ + k, k + np_), big)
    aug[:np_, :k] = c
    aug[np_:, k:] = 0.0
    for i in range(np_):
        aug[i, k + i] = c_um
    for j in range(k):
        aug[np_ + j, j] = c_um
    rows, cols = linear_sum_assignment(aug)
    matched_est = set()
    for r, cc in zip(rows, cols):
        if r < np_ and cc < k:
            res.pairs.append((int(r), int(cc), parts[(r, cc)]))
            matched_est.add(int(cc))
    matched_gt = {p[0] for p in res.pairs}
    res.unmatched_gt = [i for i in range(np_) if i not in matched_gt]
    res.unmatched_est = [j for j in range(k) if j not in matched_est]
    res.pairs.sort(key=lambda p: p[0])
    return res


def empirical_sigmas(gt, est, defaults=DEFAULT_SIGMAS):
    """Standard deviations of the cost numerators over provisional pairs.

    First pass pairs each estimate with its nearest GT at unit sigmas; the
    spreads of the resulting delay/angle/gain differences normalize the final
    association.  Degenerate spreads fall back to the configured defaults.
    """
    if len(gt) < 1 or len(est) < 1:
        return defaults
    unit = (1.0, 1.0, 1.0)
    d_tau, d_ang, d_alpha = [], [], []
    for e in est:
        best, vals = math.inf, None
        for g in gt:
            total, ca, ct, cal = pairwise_cost(g, e, unit)
            if total < best:
                best = total
                vals = (math.sqrt(ct), math.sqrt(ca), math.sqrt(cal))
        if vals is not None and math.isfinite(best):
            d_tau.append(vals[0])
            d_ang.append(vals[1])
            d_alpha.append(vals[2])
    if len(d_tau) < 2:
        return defaults
    out = []
    for vals, fb in zip((d_tau, d_ang, d_alpha), defaults):
        # RMS spread about zero: the angle numerator is non-negative, so a
        # mean-centered deviation would vanish under consistent small errors
        s = float(np.sqrt(np.mean(np.square(vals))))
        out.append(s if s > 1e-15 else fb)
    return tuple(out)


def nmse(measurement, estimates, pattern) -> float:
    """Stacked reconstruction residual power over total measurement power."""
    from .beamspace import model_tensor

    cfg = measurement.config
    total = measurement.total_power()
    if total <= 0:
        raise ValueError("zero measurement has no defined NMSE")
    residual = [t.copy() for t in measurement.tensors]
    for m in estimates.mpcs:
        for i, rot in enumerate(cfg.rotations):
            residual[i] -= m.amp * model_tensor(m.mu, cfg, pattern, rot)
    rp = float(sum(np.vdot(t, t).real for t in residual))
    return rp / total


def nmse_of_k(gt, k) -> float:
    """Tail power ratio of the power-sorted GT amplitudes."""
    powers = sorted((float(_gt_gain(m)) ** 2 for m in gt), reverse=True)
    total = sum(powers)
    if total == 0:
        return 0.0
    return sum(powers[k:]) / total


def error_report(association: AssociationResult, gt, est,
                 csv_path=None, json_path=None, plot_path=None):
    """Per-pair errors with 50th/90th percentiles; optional CSV/JSON/SVG."""
    rows = []
    for gi, ei, _ in association.pairs:
        g, e = gt[gi], est[ei]
        rows.append({
            "gt_index": gi,
            "est_index": ei,
            "az_err_deg": math.degrees(
                abs(float(wrap_pm_pi(g.az_global - e.az_global)))
            ),
            "el_err_deg": math.degrees(abs(g.el_global - e.el_global)),
            "delay_err_ns": abs(g.delay - e.delay) * 1e9,
            "gain_err_db": abs(
                20.0 * math.log10(max(_gt_gain(g), 1e-30)
                                  / max(_gt_gain(e), 1e-30))
            ),
        })
    metrics = ["az_err_deg", "el_err_deg", "delay_err_ns", "gain_err_db"]
    percentiles = {}
    for m in metrics:
        vals = [r[m] for r in rows]
        if vals:
            percentiles[m] = {
                "p50": float(np.percentile(vals, 50)),
                "p90": float(np.percentile(vals, 90)),
            }
        else:
            percentiles[m] = {"p50": None, "p90": None}
    report = {
        "n_pairs": len(rows),
        "n_unmatched_gt": len(association.unmatched_gt),
        "n_unmatched_est": len(association.unmatched_est),
        "pairs": rows,
        "percentiles": percentiles,
    }
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["gt_index", "est_index"] + metrics)
            w.writeheader()
            for r in rows:
                w.writerow(r)
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump({k: v for k, v in report.items() if k != "pairs"},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
    if plot_path is not None and rows:
        _plot_cdfs(rows, metrics, plot_path)
    return report


def _plot_cdfs(rows, metrics, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3))
    for ax, m in zip(np.atleast_1d(axes), metrics):
        vals = np.sort([r[m] for r in rows])
        cdf = np.arange(1, vals.size + 1) / vals.size
        ax.step(vals, cdf, where="post")
        ax.set_xlabel(m)
        ax.set_ylabel("CDF")
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
