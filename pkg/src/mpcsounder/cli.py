"""Command-line pipeline: synth -> extract -> evaluate / report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3

OUTPUT_DIR_ENV = "MPCSOUNDER_OUTPUT_DIR"


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _set_thread_cap(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        pass


def _load_run_config(path):
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"invalid JSON in {path}: {exc}", EXIT_DATA)


def _sounder_config(doc):
    from .fileio import _config_from_dict
    from .scenarios import preset

    if "preset" in doc:
        cfg = preset(doc["preset"])
    elif "sounder" in doc:
        cfg = _config_from_dict(doc["sounder"])
    else:
        raise CliError("config needs a 'preset' name or a 'sounder' section")
    return cfg


def _estimator_config(doc):
    from .estimators import EstimatorConfig

    fields = {f.name for f in dataclasses.fields(EstimatorConfig)}
    overrides = doc.get("estimator", {})
    unknown = set(overrides) - fields
    if unknown:
        raise CliError(f"unknown estimator settings: {sorted(unknown)}")
    return EstimatorConfig(**overrides)


def _pattern(doc):
    from .beampattern import analytic_pattern, load_grid

    spec = doc.get("pattern", {"kind": "isotropic"})
    if "file" in spec:
        if not os.path.exists(spec["file"]):
            raise CliError(f"pattern file not found: {spec['file']}")
        return load_grid(spec["file"])
    return analytic_pattern(spec.get("kind", "isotropic"), spec.get("params"))


def _gt_mpcs(doc, seed, config):
    from .geometry import load_mpc_csv
    from .scenarios import builtin_mpcs

    scen = doc.get("scenario")
    if scen is None:
        raise CliError("config needs a 'scenario' section")
    if "gt_csv" in scen:
        path = scen["gt_csv"]
        if not os.path.exists(path):
            raise CliError(f"ground-truth file not found: {path}")
        return load_mpc_csv(path)
    if "builtin" in scen:
        return builtin_mpcs(scen["builtin"], config, seed=seed)
    raise CliError("scenario needs 'gt_csv' or 'builtin'")


def _output_dir(args, doc):
    out = os.environ.get(OUTPUT_DIR_ENV) or args.output_dir \
        or doc.get("output_dir") or "."
    os.makedirs(out, exist_ok=True)
    return out


def cmd_synth(args):
    from .geometry import save_mpc_csv
    from .fileio import save_measurement
    from .scenarios import with_noise_for_snr
    from .synthesis import synthesize_multi_fov

    doc = _load_run_config(args.config)
    cfg = _sounder_config(doc)
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    pattern = _pattern(doc)
    mpcs = _gt_mpcs(doc, seed, cfg)
    if "snr_db" in doc:
        cfg = with_noise_for_snr(cfg, mpcs, pattern, doc["snr_db"])
    elif "noise_psd" in doc:
        cfg = dataclasses.replace(cfg, noise_psd=float(doc["noise_psd"]))
    meas = synthesize_multi_fov(mpcs, cfg, pattern, seed=seed)
    out = _output_dir(args, doc)
    meas_path = os.path.join(out, "measurement.bin")
    gt_path = os.path.join(out, "ground_truth.csv")
    save_measurement(meas_path, meas)
    save_mpc_csv(gt_path, mpcs)
    print(f"wrote {meas_path} ({len(meas.tensors)} rotations, "
          f"{cfg.nx}x{cfg.ny}x{cfg.n_freq}) and {gt_path}")
    return EXIT_OK


def cmd_extract(args):
    from .estimators import clean_extract, clean_sage_extract, rimax_extract
    from .fileio import blob_sha1, load_measurement, save_estimates

    doc = _load_run_config(args.config)
    if not os.path.exists(args.measurement):
        raise CliError(f"measurement file not found: {args.measurement}")
    try:
        meas = load_measurement(args.measurement)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA)
    est_cfg = _estimator_config(doc)
    pattern = _pattern(doc)
    runner = {
        "clean": clean_extract,
        "sage": clean_sage_extract,
        "rimax": rimax_extract,
    }[args.algorithm]
    est = runner(meas, pattern, est_cfg)
    out = _output_dir(args, doc)
    est_path = os.path.join(out, f"estimates-{args.algorithm}.json")
    save_estimates(est_path, est, meas.config,
                   measurement_sha1=blob_sha1(args.measurement))
    print(f"wrote {est_path}: {len(est.mpcs)} MPCs, "
          f"NMSE {est.nmse:.3e}")
    return EXIT_OK


def _print_table(report):
    pct = report["percentiles"]
    names = [
        ("az_err_deg", "AZ (deg)"),
        ("el_err_deg", "EL (deg)"),
        ("delay_err_ns", "delay (ns)"),
        ("gain_err_db", "PG (dB)"),
    ]
    print(f"matched pairs: {report['n_pairs']}  "
          f"unmatched GT: {report['n_unmatched_gt']}  "
          f"unmatched est: {report['n_unmatched_est']}")
    header = f"{'metric':<12}{'50%':>10}{'90%':>10}"
    print(header)
    for key, label in names:
        p = pct[key]
        if p["p50"] is None:
            print(f"{label:<12}{'-':>10}{'-':>10}")
        else:
            print(f"{label:<12}{p['p50']:>10.3f}{p['p90']:>10.3f}")


def _evaluate_common(args, want_plot):
    from .estimators import EstimateSet
    from .evaluation import associate, error_report, nmse
    from .fileio import blob_sha1, load_estimates, load_measurement
    from .geometry import load_mpc_csv

    doc = _load_run_config(args.config) if args.config else {}
    try:
        est, est_cfg_echo, meas_sha = load_estimates(args.estimates)
        meas = load_measurement(args.measurement)
    except (ValueError, KeyError) as exc:
        raise CliError(f"corrupt input: {exc}", EXIT_DATA)
    if meas_sha and meas_sha != blob_sha1(args.measurement):
        print("warning: estimates were derived from a different measurement "
              "file (content hash mismatch)", file=sys.stderr)
    pattern = _pattern(doc)
    out = _output_dir(args, doc)
    value = nmse(meas, est, pattern)
    print(f"NMSE: {value:.6e} ({10 * math.log10(max(value, 1e-30)):.2f} dB)")
    if getattr(args, "no_gt", False):
        with open(os.path.join(out, "report.json"), "w") as fh:
            json.dump({"nmse": value}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return EXIT_OK
    if not args.gt:
        raise CliError("ground truth CSV required unless --no-gt is given")
    if not os.path.exists(args.gt):
        raise CliError(f"ground-truth file not found: {args.gt}")
    gt = load_mpc_csv(args.gt)
    c_um = doc.get("c_um", 3.0)
    assoc = associate(gt, est.mpcs, c_um=c_um)
    report = error_report(
        assoc, gt, est.mpcs,
        csv_path=os.path.join(out, "errors.csv"),
        json_path=os.path.join(out, "report.json"),
        plot_path=os.path.join(out, "errors.svg") if want_plot else None,
    )
    report["nmse"] = value
    with open(os.path.join(out, "report.json")) as fh:
        summary = json.load(fh)
    summary["nmse"] = value
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _print_table(report)
    return EXIT_OK


def cmd_evaluate(args):
    return _evaluate_common(args, want_plot=False)


def cmd_report(args):
    return _evaluate_common(args, want_plot=True)


def build_parser():
    p = argparse.ArgumentParser(
        prog="mpcsounder",
        description="Synthesize channel-sounder measurements and extract "
                    "multipath components (CLEAN / SAGE / RiMAX).",
    )
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="synthesize a measurement file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--output-dir", default=None)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("extract", help="run an extraction algorithm")
    sp.add_argument("measurement")
    sp.add_argument("--config", required=True)
    sp.add_argument("--algorithm", required=True,
                    choices=("clean", "sage", "rimax"))
    sp.add_argument("--output-dir", default=None)
    sp.set_defaults(func=cmd_extract)

    for name, fn in (("evaluate", cmd_evaluate), ("report", cmd_report)):
        sp = sub.add_parser(name, help=f"{name} estimates against GT")
        sp.add_argument("estimates")
        sp.add_argument("measurement")
        sp.add_argument("--gt", default=None)
        sp.add_argument("--no-gt", action="store_true")
        sp.add_argument("--config", default=None)
        sp.add_argument("--output-dir", default=None)
        sp.set_defaults(func=fn)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_thread_cap(args.threads)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
