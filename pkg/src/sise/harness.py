"""Monte Carlo experiment driver, closed-loop runner and file IO.

A trial simulates the plant (Euler-Maruyama), runs one of the filters
against the recorded signals and returns aligned truth/estimate
trajectories.  Gain schedules are data-independent, so they are computed
once per configuration and replayed across trials; per-trial randomness
comes from a seed XOR'd with the trial index.
"""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import alise, control, elise, lincore, scenarios, sysmodel
from .errors import ConfigError, InvalidInput, NeedWarmup


def trial_rng(seed, trial):
    return np.random.default_rng(seed ^ trial)


def make_filter(scenario):
    if scenario.white is not None:
        return elise.EliseFilter(scenario.sched, scenario.white, scenario.aux)
    if scenario.gm is not None:
        return alise.AliseFilter(scenario.sched, scenario.gm, scenario.fd_dt)
    raise ConfigError("scenario carries neither white nor Gauss-Markov noise")


def prepare_gains(scenario, filt=None):
    filt = filt or make_filter(scenario)
    gs = filt.prepare(scenario.t0, scenario.tf, scenario.h, scenario.P0x)
    return filt, gs


@dataclass
class TrialResult:
    ts: np.ndarray
    x_true: np.ndarray
    x_hat: np.ndarray
    d_true: np.ndarray
    d_hat: np.ndarray
    tr_Px: np.ndarray
    tr_Pd: np.ndarray
    u: Optional[np.ndarray] = None


# --------------------------------------------------------------------------
# open-loop trial

def run_trial_open(scenario, filt, gains, rng, noise_scale=1.0):
    s = scenario
    traj = sysmodel.simulate_plant(
        s.sched, s.x0, s.t0, s.tf, s.h, rng,
        d_fn=s.d_fn, ddot_fn=s.ddot_fn, white=s.white, gm=s.gm, aux=s.aux,
        noise_scale=noise_scale,
    )
    signals = elise.zoh_signals(traj, s.sched)
    run = filt.run_with_gains(gains, s.xhat0, signals)
    return TrialResult(
        ts=traj.ts, x_true=traj.x, x_hat=run.xhat,
        d_true=traj.d, d_hat=run.dhat,
        tr_Px=run.tr_Px, tr_Pd=run.tr_Pd, u=traj.u,
    )


# --------------------------------------------------------------------------
# closed-loop trial (controller in the loop)

def run_trial_closed(scenario, filt, gains, rng, noise_scale=1.0):
    """Coupled plant/filter/controller run.

    The plant steps with Euler-Maruyama; the filter replays the
    precomputed gain schedule with the realized input held over each step.
    Requires zero direct feedthrough ``D``; the residual coupling through
    the auxiliary channel is resolved by :func:`control.resolve_feedback`.
    """
    s = scenario
    sched = s.sched
    if np.linalg.norm(sched.D(s.t0)) > 0:
        raise InvalidInput("closed-loop runner assumes D = 0")
    is_elise = isinstance(filt, elise.EliseFilter)
    truth = s.truth
    h = s.h
    N = len(gains.stages)
    ts = gains.t0 + h * np.arange(N + 1)
    n, p, m = sched.n, sched.p, sched.m

    dec0 = gains.stages[0][0][0]
    B0 = sched.B(s.t0)
    rj = control.rejection_gains(B0, dec0.G1, dec0.G2)
    spec = control.ControllerSpec(
        K=s.controller.K if s.controller is not None else np.zeros((m, n)),
        J1=rj.J1 if s.controller is not None and np.linalg.norm(s.controller.J1) + np.linalg.norm(s.controller.J2) > 0 else np.zeros((m, dec0.svd.rank)),
        J2=rj.J2 if s.controller is not None and np.linalg.norm(s.controller.J1) + np.linalg.norm(s.controller.J2) > 0 else np.zeros((m, p - dec0.svd.rank)),
    )

    if truth is not None:
        stepper = sysmodel.PlantStepper(
            sched, truth.x0_truth, s.t0, h, rng, d_fn=s.d_fn,
            white=s.white, gm=s.gm, aux=None, noise_scale=noise_scale,
            dynamics_fn=truth.dynamics_fn, meas_fn=truth.meas_fn,
        )
    else:
        stepper = sysmodel.PlantStepper(
            sched, s.x0, s.t0, h, rng, d_fn=s.d_fn,
            white=s.white, gm=s.gm, aux=s.aux, noise_scale=noise_scale,
        )

    X = np.zeros((N + 1, n))
    Xh = np.zeros((N + 1, n))
    Dt = np.zeros((N + 1, p))
    Dh = np.full((N + 1, p), np.nan)
    trPx = np.zeros(N + 1)
    trPd = np.full(N + 1, np.nan)
    U = np.zeros((N + 1, m))

    xhat = np.asarray(s.xhat0, dtype=float).copy()
    theta = None
    buffer = alise.LagBuffer(s.fd_dt + 2 * h) if not is_elise else None
    lp_state = None
    u_prev = np.zeros(m)
    # When the aux signal is a low-pass-filtered derivative, the input term
    # it contains is filtered through the same kernel, so the feedthrough
    # compensation must use the identically filtered input or the rejection
    # loop picks up a destabilizing phase lag.
    u_filt = np.zeros(m)
    u_hist = []
    lp_tau = truth.lp_tau if (truth is not None and is_elise) else None
    offsets = (0.0, 0.5, 0.5, 1.0)

    for k in range(N + 1):
        t = ts[k]
        stage = gains.stages[k][0] if k < N else gains.final
        if is_elise:
            dec, auxp, g = stage[0], stage[1], stage[2]
        else:
            dec, auxp, g = stage[0], stage[1], stage[2]
        # --- measure and convert to filter coordinates.  The aux channel
        # (an acceleration-type measurement) reflects the input currently
        # applied, i.e. the one chosen at the previous step.
        y_raw, ybar_raw, d_true = stepper.measure(u_prev)
        if truth is not None:
            y = y_raw - truth.yref(t)
            if is_elise:
                if lp_state is None:
                    lp_state = y_raw[2] - truth.lp_tau * truth.ybar_ref(t)[0]
                ybar = np.array([(y_raw[2] - lp_state) / truth.lp_tau]) - truth.ybar_ref(t)
            else:
                ybar = None
        else:
            y = y_raw
            ybar = ybar_raw
        # --- recover xhat from theta for the lag-buffer filter
        if not is_elise:
            z2 = dec.T2 @ y
            GM2 = dec.G2 @ g.M2
            if theta is None:
                theta = xhat - GM2 @ z2
            xhat = GM2 @ z2 + theta
            buffer.push(t, z2)
        z1 = dec.T1 @ y
        # --- resolve the input.  The measurement at time t reflects the
        # input applied over the previous step, so feedthrough compensation
        # uses u_prev; this keeps the loop causal and well posed even when
        # matched rejection makes the instantaneous algebraic loop singular.
        if truth is not None:
            u_base = truth.u_base_dev(t, xhat)
        else:
            u_base = -spec.K @ xhat
        d_est = None
        est = None
        if is_elise:
            z2bar = auxp.T2bar @ ybar if ybar is not None else np.zeros(auxp.T2bar.shape[0])
            u_comp = u_filt if lp_tau is not None else u_prev
            est = elise.estimate_input(g, dec, auxp, xhat, u_comp, np.zeros(m), z1, z2bar)
        else:
            try:
                z2lag = buffer.value_at(t - s.fd_dt)
                zd = (dec.T2 @ y - z2lag) / s.fd_dt
                # The lagged difference carries the input averaged over the
                # window, so compensate with the same average.
                u_comp = (
                    np.mean([uu for tu, uu in u_hist if tu >= t - s.fd_dt], axis=0)
                    if u_hist else u_prev
                )
                est = elise.estimate_input(g, dec, auxp, xhat, u_comp, np.zeros(m), z1, zd)
            except NeedWarmup:
                est = None
        if est is not None:
            u_dev = u_base - spec.J1 @ est.d1 - spec.J2 @ est.d2
            d_est = est.d
        else:
            u_dev = u_base
        # --- record
        X[k] = stepper.x if truth is None else stepper.x - truth.xref(t)
        Xh[k] = xhat
        Dt[k] = d_true
        trPx[k] = np.trace(g.Px)
        if est is not None:
            Dh[k] = d_est
            trPd[k] = np.trace(est.Pd)
        U[k] = u_dev
        if k == N:
            break
        # --- advance plant with the full input
        u_full = u_dev + (truth.uref(t) if truth is not None else 0.0)
        stepper.advance(u_full)
        u_prev = u_dev
        if lp_tau is not None:
            u_filt = u_filt + h * (u_dev - u_filt) / lp_tau
        if not is_elise:
            u_hist.append((t, u_dev))
            while u_hist and u_hist[0][0] < t - s.fd_dt - h:
                u_hist.pop(0)
        if truth is not None and is_elise:
            lp_state = lp_state + h * (y_raw[2] - lp_state) / truth.lp_tau
        # --- advance filter with ZOH signals
        sig = elise.Signals(y=y, ybar=ybar, u=u_dev, udot=np.zeros(m))
        provider = lambda tau, _s=sig: _s
        if is_elise:
            ks = []
            for i, c in enumerate(offsets):
                deci, auxpi, gi = gains.stages[k][i]
                xi = xhat if i == 0 else xhat + h * (0.5 if i < 3 else 1.0) * ks[i - 1]
                si = provider(t + c * h)
                z1i = deci.T1 @ si.y
                z2i = deci.T2 @ si.y
                z2bari = (
                    auxpi.T2bar @ si.ybar
                    if si.ybar is not None
                    else np.zeros(auxpi.T2bar.shape[0])
                )
                esti = elise.estimate_input(gi, deci, auxpi, xi, si.u, si.udot, z1i, z2bari)
                xdot, _ = elise.filter_rhs(gi, deci, xi, si.u, z2i, esti.d1, esti.d2)
                ks.append(xdot)
            xhat = xhat + (h / 6.0) * (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3])
        else:
            ks = []
            for i, c in enumerate(offsets):
                deci, auxpi, gi, derivsi = gains.stages[k][i]
                thi = theta if i == 0 else theta + h * (0.5 if i < 3 else 1.0) * ks[i - 1]
                si = provider(t + c * h)
                z1i = deci.T1 @ si.y
                z2i = deci.T2 @ si.y
                thdot, _ = alise.theta_rhs(gi, deci, derivsi, thi, si.u, z1i, z2i, si.y)
                ks.append(thdot)
            theta = theta + (h / 6.0) * (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3])
    return TrialResult(ts=ts, x_true=X, x_hat=Xh, d_true=Dt, d_hat=Dh,
                       tr_Px=trPx, tr_Pd=trPd, u=U)


# --------------------------------------------------------------------------
# Monte Carlo aggregation

@dataclass
class McResult:
    scenario: str
    trials: int
    ts: np.ndarray
    mean_x_err: np.ndarray
    mean_d_err: np.ndarray
    rmse_state: np.ndarray
    rmse_input: np.ndarray
    rmse_state_t: np.ndarray
    rmse_input_t: np.ndarray
    tr_Px: np.ndarray
    tr_Pd: np.ndarray
    mean_x_true: np.ndarray
    mean_x_hat: np.ndarray
    mean_d_true: np.ndarray
    mean_d_hat: np.ndarray
    elapsed_s: float
    results: list = field(default_factory=list, repr=False)


def run_monte_carlo(scenario, trials, seed=0, noise_scale=1.0,
                    keep_trials=False, closed_loop=None):
    """Run ``trials`` independent trials and aggregate error statistics."""
    t_start = time.time()
    filt, gains = prepare_gains(scenario)
    if closed_loop is None:
        closed_loop = scenario.controller is not None or scenario.truth is not None
    x_err_sum = d_err_sum = None
    x_err_sq = d_err_sq = None
    sums = {}
    kept = []
    for trial in range(trials):
        rng = trial_rng(seed, trial)
        if closed_loop:
            res = run_trial_closed(scenario, filt, gains, rng, noise_scale)
        else:
            res = run_trial_open(scenario, filt, gains, rng, noise_scale)
        xe = res.x_true - res.x_hat
        de = res.d_true - res.d_hat
        if x_err_sum is None:
            x_err_sum = np.zeros_like(xe)
            x_err_sq = np.zeros_like(xe)
            d_err_sum = np.zeros_like(de)
            d_err_sq = np.zeros_like(de)
            for name in ("x_true", "x_hat", "d_true", "d_hat", "tr_Px", "tr_Pd"):
                sums[name] = np.zeros_like(getattr(res, name), dtype=float)
        x_err_sum += xe
        x_err_sq += xe ** 2
        d_err_sum += np.nan_to_num(de)
        d_err_sq += np.nan_to_num(de) ** 2
        for name in ("x_true", "x_hat", "d_true", "d_hat", "tr_Px", "tr_Pd"):
            sums[name] += np.nan_to_num(getattr(res, name))
        if keep_trials:
            kept.append(res)
    Nt = float(trials)
    rmse_state_t = np.sqrt(x_err_sq / Nt)
    rmse_input_t = np.sqrt(d_err_sq / Nt)
    return McResult(
        scenario=scenario.name,
        trials=trials,
        ts=res.ts,
        mean_x_err=x_err_sum / Nt,
        mean_d_err=d_err_sum / Nt,
        rmse_state=np.sqrt(np.mean(x_err_sq / Nt, axis=0)),
        rmse_input=np.sqrt(np.mean(d_err_sq / Nt, axis=0)),
        rmse_state_t=rmse_state_t,
        rmse_input_t=rmse_input_t,
        tr_Px=sums["tr_Px"] / Nt,
        tr_Pd=sums["tr_Pd"] / Nt,
        mean_x_true=sums["x_true"] / Nt,
        mean_x_hat=sums["x_hat"] / Nt,
        mean_d_true=sums["d_true"] / Nt,
        mean_d_hat=sums["d_hat"] / Nt,
        elapsed_s=time.time() - t_start,
        results=kept,
    )


# --------------------------------------------------------------------------
# deterministic joint closed-loop integration (diagnostics)

def simulate_closed_loop_deterministic(sched, white, aux, spec, x0, xhat0,
                                       P0x, t0, t1, h, d_fn=None):
    """Noise-free closed loop integrated jointly with RK4.

    Plant, filter covariance and filter state evolve in one vector field
    with the measurements evaluated continuously, so the estimation-error
    dynamics decouple exactly from the control loop.  Used to verify
    separation and matched disturbance rejection.
    """
    filt = elise.EliseFilter(sched, white, aux)
    n, m, p = sched.n, sched.m, sched.p
    if d_fn is None:
        d_fn = lambda t: np.zeros(p)

    if np.linalg.norm(sched.D(t0)) > 0 or np.linalg.norm(aux.Dbar(t0)) > 0:
        raise InvalidInput("deterministic closed-loop runner assumes D = Dbar = 0")

    def rhs(t, yv):
        x = yv[:n]
        xh = yv[n:2 * n]
        Px = lincore.psd_floor(yv[2 * n:].reshape(n, n))
        dec, auxp, g = filt._stage(t, Px)
        d = np.atleast_1d(d_fn(t))
        y = sched.C(t) @ x + sched.H(t) @ d
        z1 = dec.T1 @ y
        z2 = dec.T2 @ y
        # With D = 0 and the aux signal generated by the same input that is
        # being compensated, the input dependence of the estimates cancels
        # exactly, so the algebraic loop has the closed form below: evaluate
        # the aux signal without its Bu term and skip the compensation.
        Cb = aux.Cbar(t)
        Cdd = aux.Cddash(t)
        A, B, G = sched.A(t), sched.B(t), sched.G(t)
        z2bar0 = auxp.T2bar @ (Cb @ (A @ x + G @ d) + Cdd @ x)
        d1 = g.M1 @ (z1 - dec.C1 @ xh)
        d2 = g.M2 @ (z2bar0 - g.CAfull @ xh - g.C2barG1 @ d1)
        u = -spec.K @ xh - spec.J1 @ d1 - spec.J2 @ d2
        xdot = A @ x + B @ u + G @ d
        xhdot, Pxdot = elise.filter_rhs(g, dec, xh, u, z2, d1, d2)
        return np.concatenate([xdot, xhdot, Pxdot.ravel()])

    y0 = np.concatenate([np.asarray(x0, float), np.asarray(xhat0, float),
                         lincore.symmetrize(np.asarray(P0x, float)).ravel()])
    ts, ys = lincore.integrate_ode(rhs, y0, t0, t1, h)
    return ts, ys[:, :n], ys[:, n:2 * n]


# --------------------------------------------------------------------------
# file IO

def write_trial_csv(path, res):
    n = res.x_true.shape[1]
    p = res.d_true.shape[1]
    header = (
        ["t"]
        + [f"x_true_{i+1}" for i in range(n)]
        + [f"x_hat_{i+1}" for i in range(n)]
        + [f"d_true_{j+1}" for j in range(p)]
        + [f"d_hat_{j+1}" for j in range(p)]
        + ["tr_Px", "tr_Pd"]
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(res.ts.size):
            row = (
                [res.ts[k]]
                + list(res.x_true[k])
                + list(res.x_hat[k])
                + list(res.d_true[k])
                + list(res.d_hat[k])
                + [res.tr_Px[k], res.tr_Pd[k]]
            )
            w.writerow([f"{v:.12g}" for v in row])


def write_aggregate(out_dir, mc):
    os.makedirs(out_dir, exist_ok=True)
    agg = TrialResult(
        ts=mc.ts, x_true=mc.mean_x_true, x_hat=mc.mean_x_hat,
        d_true=mc.mean_d_true, d_hat=mc.mean_d_hat,
        tr_Px=mc.tr_Px, tr_Pd=mc.tr_Pd,
    )
    write_trial_csv(os.path.join(out_dir, "aggregate.csv"), agg)
    report = {
        "scenario": mc.scenario,
        "trials": mc.trials,
        "rmse_state": [float(v) for v in mc.rmse_state],
        "rmse_input": [float(v) for v in mc.rmse_input],
        "final_tr_Px": float(mc.tr_Px[-1]),
        "elapsed_s": mc.elapsed_s,
    }
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    return report


# --------------------------------------------------------------------------
# config round-trip

DEFAULTS = {
    "scenario": "helicopter",
    "filter": "elise",
    "trials": 10,
    "seed": 0,
    "t_final": None,
    "h": None,
    "fd_dt": None,
    "out_dir": None,
    "per_trial_csv": False,
}


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(DEFAULTS)
    merged.update(cfg)
    return merged


def dump_config(cfg, path):
    with open(path, "w") as fh:
        json.dump({k: cfg[k] for k in DEFAULTS}, fh, indent=2)


def scenario_from_config(cfg):
    kw = {}
    if cfg.get("t_final") is not None:
        kw["tf"] = float(cfg["t_final"])
    if cfg.get("h") is not None:
        kw["h"] = float(cfg["h"])
    if cfg.get("fd_dt") is not None:
        kw["fd_dt"] = float(cfg["fd_dt"])
    return scenarios.build(cfg["scenario"], filter_kind=cfg["filter"], **kw)
