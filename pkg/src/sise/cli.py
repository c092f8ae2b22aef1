"""Command-line entry point.

Subcommands
-----------
simulate    Monte Carlo simulation of a benchmark scenario; writes CSV/JSON.
analyze     Structural and stability diagnostics for a scenario.
asvd-check  Self-test of the smooth-SVD factor rates on random matrix paths.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import analysis, asvd, harness, scenarios
from .errors import ConfigError, NumericsError


def _add_common(p):
    p.add_argument("--scenario", default=None,
                   choices=["helicopter", "reentry"])
    p.add_argument("--filter", dest="filter_kind", default=None,
                   choices=["elise", "alise"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--t-final", type=float, default=None)
    p.add_argument("--dt", dest="h", type=float, default=None)
    p.add_argument("--fd-dt", type=float, default=None)
    p.add_argument("--config", default=None, help="JSON config file")


def _merge_config(args):
    cfg = harness.load_config(args.config) if args.config else dict(harness.DEFAULTS)
    for key, attr in [("scenario", "scenario"), ("filter", "filter_kind"),
                      ("seed", "seed"), ("t_final", "t_final"), ("h", "h"),
                      ("fd_dt", "fd_dt")]:
        v = getattr(args, attr, None)
        if v is not None:
            cfg[key] = v
    if getattr(args, "trials", None) is not None:
        cfg["trials"] = args.trials
    if getattr(args, "out_dir", None) is not None:
        cfg["out_dir"] = args.out_dir
    if getattr(args, "per_trial_csv", False):
        cfg["per_trial_csv"] = True
    return cfg


def cmd_simulate(args):
    cfg = _merge_config(args)
    scen = harness.scenario_from_config(cfg)
    mc = harness.run_monte_carlo(scen, int(cfg["trials"]), seed=int(cfg["seed"]),
                                 keep_trials=bool(cfg["per_trial_csv"]))
    out = cfg.get("out_dir")
    if out:
        report = harness.write_aggregate(out, mc)
        harness.dump_config(cfg, f"{out}/config.json")
        if cfg["per_trial_csv"]:
            for i, res in enumerate(mc.results):
                harness.write_trial_csv(f"{out}/trial_{i:03d}.csv", res)
    else:
        report = {
            "scenario": mc.scenario,
            "trials": mc.trials,
            "rmse_state": [float(v) for v in mc.rmse_state],
            "rmse_input": [float(v) for v in mc.rmse_input],
            "final_tr_Px": float(mc.tr_Px[-1]),
            "elapsed_s": mc.elapsed_s,
        }
    print(json.dumps(report, indent=2))
    return 0


def cmd_analyze(args):
    cfg = _merge_config(args)
    scen = harness.scenario_from_config(cfg)
    sched = scen.sched
    t = scen.t0
    A, G, C, H = sched.A(t), sched.G(t), sched.C(t), sched.H(t)
    so = analysis.strong_observability(A, G, C, H)
    filt, gains = harness.prepare_gains(scen)
    dec, auxp, g = gains.final[0], gains.final[1], gains.final[2]
    A_e, Q_e = analysis.equivalent_system(g, dec, auxp)
    detectable, stabilizable = analysis.pbh_tests(A_e, dec.C2, Q_e)
    err_drift = g.Abar - g.L @ dec.C2
    report = {
        "scenario": scen.name,
        "strongly_observable": bool(so),
        "detectable": bool(detectable),
        "stabilizable": bool(stabilizable),
        "error_dynamics_spectrum": sorted(
            float(np.real(ev)) for ev in np.linalg.eigvals(err_drift)),
        "final_tr_Px": float(np.trace(g.Px)),
    }
    try:
        bb = analysis.bias_bounds(g, dec, np.ones(A.shape[0]))
        report["bias_decay_rate"] = float(bb.gamma)
        report["bias_transient_gain"] = float(bb.beta)
        report["bias_noise_gain"] = float(bb.alpha1)
    except NumericsError as exc:
        report["bias_bounds"] = f"unavailable: {exc}"
    print(json.dumps(report, indent=2))
    return 0


def cmd_asvd_check(args):
    # Factor-rate self test.  The derivative convention fixes U2dot = 0,
    # which matches the singular-vector path computed by a plain SVD only
    # when no column-space rotation is possible (square full-rank H); on
    # tall or rank-deficient H only the singular values themselves follow
    # a convention-free path.  So the finite-difference order test runs
    # U1/V1 on square samples and sigma on all samples, while the
    # skew-symmetry and annihilation residuals are checked everywhere.
    rng = np.random.default_rng(args.seed)
    worst_order, worst_skew, worst_resid = np.inf, 0.0, 0.0
    checked = 0
    while checked < args.samples:
        if checked % 2 == 0:
            rows = cols = int(rng.integers(2, 5))
        else:
            rows = int(rng.integers(2, 6))
            cols = int(rng.integers(1, rows))
        base = rng.normal(size=(rows, cols))
        slope = 0.4 * rng.normal(size=(rows, cols))
        curv = 0.4 * rng.normal(size=(rows, cols))
        f = lambda t: base + slope * t + curv * t * t
        fdot = lambda t: slope + 2.0 * curv * t
        t0 = float(rng.uniform(-1, 1))
        g = asvd.structured_svd(f(t0))
        s = g.sigma
        if (g.rank < cols or s.min() < 1e-2 * s.max()
                or (g.rank > 1
                    and np.abs(np.diff(np.sort(s))).min() < 1e-2 * s.max())):
            continue
        checked += 1
        rates = asvd.asvd_rates(g, fdot(t0))
        worst_skew = max(worst_skew,
                         np.abs(rates.E + rates.E.T).max(),
                         np.abs(rates.F + rates.F.T).max())
        rdot = asvd.second_order_rates(g, rates, 2.0 * curv)
        worst_resid = max(worst_resid, *asvd.corollary_residuals(
            g, rates, rdot, g.U2.T))
        errs = []
        for eps in (1e-3, 5e-4):
            gp = asvd.align_signs(asvd.structured_svd(f(t0 + eps)), g)
            gm = asvd.align_signs(asvd.structured_svd(f(t0 - eps)), g)
            err = np.abs((gp.sigma - gm.sigma) / (2 * eps)
                         - rates.sigma_dot).max()
            if rows == cols:
                err = max(err,
                          np.abs((gp.U1 - gm.U1) / (2 * eps)
                                 - rates.U1dot).max(),
                          np.abs((gp.V1 - gm.V1) / (2 * eps)
                                 - rates.V1dot).max())
            errs.append(err + 1e-300)
        if errs[0] > 1e-11:
            worst_order = min(worst_order,
                              np.log(errs[0] / errs[1]) / np.log(2.0))
    print(json.dumps({"samples": args.samples,
                      "min_convergence_order": float(worst_order),
                      "max_skew_residual": float(worst_skew),
                      "max_annihilation_residual": float(worst_resid)},
                     indent=2))
    if (worst_skew > 1e-10 or worst_resid > 1e-8
            or (np.isfinite(worst_order) and worst_order < 1.8)):
        raise NumericsError("smooth-SVD rate self-test failed")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(
        prog="sise",
        description="Simultaneous state and unknown-input estimation "
                    "for linear time-varying systems.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run Monte Carlo simulations")
    _add_common(p)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--out", dest="out_dir", default=None)
    p.add_argument("--per-trial-csv", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="structural diagnostics")
    _add_common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("asvd-check", help="smooth-SVD self test")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_asvd_check)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
