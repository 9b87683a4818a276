"""Desk-scale experiments on synthetic instances.

Every ``run_*`` function returns an :class:`ExperimentReport` holding
per-seed rows and aggregates; :func:`write_report` lays the report out as a
run directory of CSV files plus a config echo and a hash manifest. Per-seed
work is farmed out to worker processes when ``jobs > 1``; results are always
assembled in seed order, so the output never depends on the job count.
"""
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import io
from .autograd import LossSpec, input_gradient_profile, loss_value
from .cells import ReadoutParams, init_params, params_class, rollout, rollout_truncated
from .errors import ConfigError, NumericError
from .numerics import Rng, spectral_norm
from .stability import (AscentConfig, LstmStabilityConfig, certificate, clip_inputs,
                        estimate_stability, project_lstm_stable, project_spectral)
from .training import (BoundConstants, TrainConfig, fit_beta, fit_gamma, paired_divergence_run,
                       sgd_run)

log = logging.getLogger(__name__)

DIVERGENCE_FLAG = 1e6


@dataclass
class SyntheticInstance:
    """Input sequence and final-step target, plus how they were generated."""

    inputs: np.ndarray
    target: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def T(self):
        return self.inputs.shape[0]


@dataclass
class ExperimentReport:
    """Result of one experiment.

    ``tables`` maps a CSV file name (relative to the run directory) to a
    ``(columns, rows)`` pair. ``per_seed`` and ``aggregate`` name which of
    those tables hold raw and summary results. ``flagged`` lists aborted
    runs, which are excluded from every aggregate.
    """

    name: str
    config: dict
    seeds: list
    tables: dict = field(default_factory=dict)
    per_seed: list = field(default_factory=list)
    aggregate: list = field(default_factory=list)
    flagged: list = field(default_factory=list)
    paths: list = field(default_factory=list)
    data: dict = field(default_factory=dict)

    def add_table(self, name, columns, rows, kind="aggregate"):
        self.tables[name] = (tuple(columns), [tuple(r) for r in rows])
        (self.per_seed if kind == "per_seed" else self.aggregate).append(name)


# ---------------------------------------------------------------------------
# Instances
# ---------------------------------------------------------------------------

def gen_instance(seed, T=200, d_in=32, d_h=32, lam=0.75, family="rnn", d_out=1,
                 input_scale=1.0):
    """Random Gaussian instance with a stable initialization.

    Draws, in this order from one stream: inputs ``x_t ~ N(0, 4 I)`` (times
    ``input_scale``), the target ``y_T ~ Unif[-2, 2]``, ``W`` with N(0, 0.5)
    entries and singular values clipped at ``lam``, ``U`` with N(0, 0.5)
    entries, and readout ``C``, ``D`` with N(0, 1) entries. For an LSTM the
    gate weights are N(0, 0.5) and projected with the default LSTM caps, and
    the inputs are clipped to the cap's input bound.
    """
    if T < 1 or d_in < 1 or d_h < 1 or d_out < 1:
        raise ConfigError("T and all dimensions must be at least 1")
    if not 0 < lam < 1:
        raise ConfigError("lam must lie in (0, 1)")
    rng = Rng(seed)
    x = rng.normal((T, d_in), scale=2.0) * input_scale
    y = rng.uniform(d_out, -2.0, 2.0)
    if family == "lstm":
        cfg = LstmStabilityConfig()
        x = clip_inputs(x, cfg.B_x)
        params = project_lstm_stable(init_params("lstm", d_in, d_h, rng, scale=math.sqrt(0.5)), cfg)
    else:
        W = project_spectral(rng.normal((d_h, d_h), scale=math.sqrt(0.5)), lam)
        U = rng.normal((d_h, d_in), scale=math.sqrt(0.5))
        params = params_class(family)(W=W, U=U)
    readout = ReadoutParams(C=rng.normal((d_out, d_h)), D=rng.normal((d_out, d_in)))
    meta = {"seed": seed, "lam": lam, "T": T, "d_in": d_in, "d_h": d_h, "d_out": d_out,
            "family": family, "input_scale": input_scale}
    return SyntheticInstance(x, y, meta), params, readout


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _map(fn, jobs_args, jobs):
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, jobs_args))
    return [fn(a) for a in jobs_args]


def geometric_ratio(gaps, values):
    """``exp`` of the least-squares slope of ``log values`` over gaps ``>= 1``.

    Non-positive entries are dropped. NaN if fewer than two points remain.
    """
    g = np.asarray(gaps)
    v = np.asarray(values, dtype=float)
    keep = (g >= 1) & (v > 0)
    if keep.sum() < 2:
        return math.nan
    return float(math.exp(np.polyfit(g[keep], np.log(v[keep]), 1)[0]))


def max_growth(curve, start=20, window=50):
    """Largest ``curve[i + window] / curve[i]`` for ``i >= start``."""
    c = np.asarray(curve, dtype=float)
    best = 0.0
    for i in range(start, c.size - window):
        if c[i] > 0:
            best = max(best, c[i + window] / c[i])
        elif c[i + window] > 0:
            return math.inf
    return best


# ---------------------------------------------------------------------------
# Divergence figure
# ---------------------------------------------------------------------------

def _divergence_job(args):
    seed, family, schedules, c = args
    inst, params, readout = gen_instance(seed, c["T"], c["d"], c["d"], c["lam"], family,
                                         input_scale=c["input_scale"])
    projector = ("spectral", c["lam"])
    consts = BoundConstants(
        gamma=max(fit_gamma(params, readout, inst.inputs, inst.target, c["k"], c["lam"],
                            c["trainable"]), 1e-300),
        beta=max(fit_beta(params, readout, inst.inputs, inst.target, Rng(seed).spawn(1),
                          projector=projector, trainable=c["trainable"]), 1e-300))
    out = []
    for sched in schedules:
        cfg = TrainConfig(family=family, d_in=c["d"], d_h=c["d"], schedule=sched,
                          alpha=c["alpha"], steps=c["steps"], k=c["k"], projector=projector,
                          seed=seed, trainable=c["trainable"])
        try:
            rec = paired_divergence_run(cfg, inst.inputs, inst.target, params, readout,
                                        lam=c["lam"], constants=consts)
            out.append((sched, rec, None))
        except NumericError as e:
            out.append((sched, None, str(e)))
    return seed, family, consts, out


def run_divergence_figure(seeds, schedules=("inverse_t", "inverse_sqrt_t", "constant"),
                          families=("lds", "rnn"), T=200, d=32, lam=0.75, k=35, alpha=0.01,
                          steps=200, input_scale=0.05, trainable="recurrent", jobs=1):
    """Full-versus-truncated weight divergence under several step-size schedules.

    For every seed and family one instance is drawn and both models are
    trained from its initialization under each schedule. The bound column
    uses ``gamma`` and ``beta`` fitted per seed at the initialization
    (:func:`fit_gamma`, :func:`fit_beta`).
    """
    if not seeds:
        raise ConfigError("need at least one seed")
    c = dict(T=T, d=d, lam=lam, k=k, alpha=alpha, steps=steps, input_scale=input_scale,
             trainable=trainable)
    cfg_echo = dict(c, schedules=list(schedules), families=list(families))
    rep = ExperimentReport("divergence", cfg_echo, sorted(seeds))
    args = [(s, f, tuple(schedules), c) for f in families for s in sorted(seeds)]
    results = _map(_divergence_job, args, jobs)

    curves = {}
    for seed, family, consts, out in results:
        for sched, rec, err in out:
            if rec is None:
                rep.flagged.append({"family": family, "schedule": sched, "seed": seed,
                                    "error": err})
                continue
            rep.add_table(f"seeds/{family}_{sched}_seed{seed}.csv", rec.CSV_COLUMNS,
                          rec.rows(), kind="per_seed")
            curves.setdefault((family, sched), []).append((seed, rec, consts))

    summary = []
    for family in families:
        for sched in schedules:
            runs = curves.get((family, sched), [])
            if not runs:
                continue
            div = np.array([r.divergence for _, r, _ in runs])
            bnd = np.array([r.bound for _, r, _ in runs])
            mean, std = div.mean(axis=0), div.std(axis=0)
            rep.add_table(f"{family}_{sched}.csv", ("step", "mean", "std", "n", "bound_mean"),
                          [(i, mean[i], std[i], len(runs), bnd[:, i].mean())
                           for i in range(mean.size)])
            rep.data[(family, sched)] = div
            summary.append((family, sched, len(runs),
                            sum(1 for f in rep.flagged
                                if f["family"] == family and f["schedule"] == sched),
                            mean[-1], std[-1], float(div.max()), max_growth(mean),
                            float(np.mean([cs.gamma for _, _, cs in runs])),
                            float(np.mean([cs.beta for _, _, cs in runs]))))
    rep.add_table("summary.csv", ("family", "schedule", "n_ok", "n_aborted", "final_mean",
                                  "final_std", "max_divergence", "max_growth_50",
                                  "gamma_mean", "beta_mean"), summary)
    return rep


# ---------------------------------------------------------------------------
# Scalar counterexample
# ---------------------------------------------------------------------------

def counterexample_gradient(a, T):
    """Closed-form ``d/da`` of ``0.5 (h_T - 1)^2`` for ``h_t = a h_{t-1} + 1``.

    Near ``a = 1`` the closed form cancels badly, so the equivalent
    polynomial sums are used there.
    """
    if T < 1:
        raise ConfigError("T must be at least 1")
    if abs(1.0 - a) < 1e-2:
        h = math.fsum(a ** j for j in range(T))
        dh = math.fsum(j * a ** (j - 1) for j in range(1, T))
        return (h - 1.0) * dh
    aT = a ** T
    delta = (1.0 - aT) / (1.0 - a) - 1.0
    return delta * ((1.0 - aT) / (1.0 - a) ** 2 - T * a ** (T - 1) / (1.0 - a))


def counterexample_loss(a, T):
    """The same loss by unrolling the recurrence."""
    h = 0.0
    for _ in range(T):
        h = a * h + 1.0
    return 0.5 * (h - 1.0) ** 2


def _counterexample_series(a0, T, N, tol):
    a = float(a0)
    rows, diverged, div_step, conv_step = [], False, None, None
    for i in range(1, N + 1):
        try:
            g = counterexample_gradient(a, T)
        except OverflowError:
            g = math.inf
        if not math.isfinite(g):
            diverged, div_step = True, i
            rows.append((i, a, g, abs(g)))
            break
        rows.append((i, a, g, abs(g)))
        if conv_step is None and abs(g) < tol:
            conv_step = i
        a = a - g / i
        if not math.isfinite(a) or abs(a) > DIVERGENCE_FLAG:
            diverged, div_step = True, i
            rows.append((i + 1, a, math.nan, math.nan))
            break
    return rows, diverged, div_step, conv_step


def run_counterexample(a0_values=(1.5, 0.5, 0.0), T=50, N=500, tol=1e-6):
    """Gradient descent with step ``1/i`` on the unstable scalar system.

    Divergence is flagged once ``|a|`` exceeds 1e6 or the gradient
    overflows. ``converged_step`` is the first step with ``|gradient| < tol``.
    """
    if T < 2:
        raise ConfigError("T must be at least 2")
    rep = ExperimentReport("counterexample", {"a0": list(a0_values), "T": T, "N": N,
                                              "tol": tol}, [])
    summary = []
    for j, a0 in enumerate(a0_values):
        rows, diverged, div_step, conv_step = _counterexample_series(a0, T, N, tol)
        rep.add_table(f"seeds/a0_{j}.csv", ("step", "a", "grad", "abs_grad"), rows,
                      kind="per_seed")
        grads = [r[3] for r in rows if math.isfinite(r[3])]
        summary.append((a0, T, N, int(diverged), div_step or 0, conv_step or 0, rows[-1][1],
                        min(grads) if grads else math.nan))
        rep.data[a0] = {"rows": rows, "diverged": diverged, "diverge_step": div_step,
                        "converged_step": conv_step}
    rep.add_table("summary.csv", ("a0", "T", "N", "diverged", "diverge_step", "converged_step",
                                  "final_a", "min_abs_grad"), summary)
    return rep


# ---------------------------------------------------------------------------
# Truncation sweep
# ---------------------------------------------------------------------------

def truncation_envelope(lam, L_x, B_x, k):
    """``lam**k L_x B_x / (1 - lam)``; infinite when ``lam >= 1``."""
    if lam >= 1:
        return math.inf
    return lam ** k * L_x * B_x / (1.0 - lam)


def _sweep_job(args):
    seed, ks, c = args
    inst, params, readout = gen_instance(seed, c["T"], c["d"], c["d"], c["lam"], c["family"],
                                         input_scale=c["input_scale"])
    projector = ("spectral", c["lam"]) if c["project"] else None
    x, y = inst.inputs, inst.target
    loss = LossSpec(y)
    B_x = float(np.max(np.linalg.norm(x, axis=1)))
    rows = []
    for k in [None] + list(ks):
        cfg = TrainConfig(family=c["family"], d_in=c["d"], d_h=c["d"], alpha=c["alpha"],
                          steps=c["steps"], k=k, projector=projector, seed=seed,
                          schedule=c["schedule"])
        try:
            res = sgd_run(cfg, x, y, params, readout)
        except NumericError as e:
            rows.append((k, None, str(e)))
            continue
        p, r = res.params, res.readout
        lam_t = spectral_norm(p.W)
        h_full = rollout(p, x).final
        h_k = rollout_truncated(p, x, x.shape[0], k if k is not None else x.shape[0])
        gap = float(np.linalg.norm(h_full - h_k))
        kk = x.shape[0] if k is None else k
        rows.append((k, dict(loss_trunc=loss_value(p, r, x, loss, k=k),
                             loss_full=loss_value(p, r, x, loss), gap=gap,
                             envelope=truncation_envelope(lam_t, spectral_norm(p.U), B_x, kk),
                             lam_trained=lam_t), None))
    return seed, rows


def run_truncation_sweep(k_values=(1, 2, 5, 10, 20, 35, 50, 200), seeds=range(10), family="rnn",
                         T=200, d=32, lam=0.75, alpha=0.01, steps=200, schedule="inverse_t",
                         input_scale=1.0, project=True, jobs=1):
    """Train one truncated model per ``k`` from a shared per-seed initialization.

    Each seed also trains the full model (reported as ``k = 0``). The gap
    column is ``||h_T - h^k_T||`` at the trained weights and the envelope
    column its bound with ``lam`` the trained spectral norm, ``L_x = ||U||``
    and ``B_x`` the largest input norm. ``lam_trained`` is reported even
    without projection, where it shows how far unconstrained training
    leaves the stable region.
    """
    if family not in ("lds", "rnn"):
        raise ConfigError("the truncation sweep supports lds and rnn")
    ks = [int(k) for k in k_values]
    if any(k < 1 for k in ks):
        raise ConfigError("k values must be positive")
    seeds = sorted(seeds)
    c = dict(family=family, T=T, d=d, lam=lam, alpha=alpha, steps=steps, schedule=schedule,
             input_scale=input_scale, project=project)
    rep = ExperimentReport("trunc-sweep", dict(c, k_values=ks), seeds)
    cols = ("seed", "k", "loss_trunc", "loss_full", "gap", "envelope", "lam_trained")
    per_k = {}
    per_seed_rows = []
    for seed, rows in _map(_sweep_job, [(s, ks, c) for s in seeds], jobs):
        for k, vals, err in rows:
            kk = 0 if k is None else k
            if vals is None:
                rep.flagged.append({"seed": seed, "k": kk, "error": err})
                continue
            per_seed_rows.append((seed, kk) + tuple(vals[n] for n in cols[2:]))
            per_k.setdefault(kk, []).append(vals)
    rep.add_table("per_seed.csv", cols, per_seed_rows, kind="per_seed")
    agg = []
    for kk in sorted(per_k):
        v = per_k[kk]
        lt = np.array([r["loss_trunc"] for r in v])
        gaps = np.array([r["gap"] for r in v])
        env = np.array([r["envelope"] for r in v])
        agg.append((kk, len(v), lt.mean(), lt.std(), np.mean([r["loss_full"] for r in v]),
                    gaps.mean(), gaps.max(), env.min(), int(np.sum(gaps > env)),
                    np.mean([r["lam_trained"] for r in v])))
    rep.add_table("summary.csv", ("k", "n", "loss_trunc_mean", "loss_trunc_std",
                                  "loss_full_mean", "gap_mean", "gap_max", "envelope_min",
                                  "violations", "lam_trained_mean"), agg)
    rep.data["per_k"] = per_k
    return rep


# ---------------------------------------------------------------------------
# Vanishing-gradient profile
# ---------------------------------------------------------------------------

def _profile_job(args):
    seed, gaps, c = args
    inst, params, readout = gen_instance(seed, c["T"], c["d"], c["d"], c["lam"], c["family"],
                                         input_scale=c["input_scale"])
    if not c["stable"]:
        if c["family"] == "lstm":
            params = init_params("lstm", c["d"], c["d"], Rng(seed).spawn(2),
                                 scale=c["unstable_norm"])
        else:
            W = params.W / spectral_norm(params.W) * c["unstable_norm"]
            params = params.replace(W=W)
    targets = Rng(seed).spawn(3).uniform((c["T"], readout.output_dim), -2.0, 2.0)
    prof = input_gradient_profile(params, readout, inst.inputs, targets, gaps)
    return seed, prof, certificate(params).lam


def run_vanishing_profile(family="rnn", stable=True, gaps=tuple(range(31)), seeds=range(5),
                          T=60, d=32, lam=0.75, input_scale=1.0, unstable_norm=1.5, jobs=1):
    """Mean ``||grad_{x_t} p_{t+i}||`` per gap ``i``, averaged over ``t`` and seeds.

    Unstable models rescale ``W`` to spectral norm ``unstable_norm`` (for an
    LSTM: unprojected Gaussian gates with that standard deviation). The
    fitted ratio is :func:`geometric_ratio` over gaps ``>= 1``.
    """
    gaps = sorted(int(i) for i in gaps)
    if not gaps or gaps[0] < 0 or gaps[-1] >= T:
        raise ConfigError("gaps must lie in [0, T)")
    seeds = sorted(seeds)
    c = dict(family=family, stable=stable, T=T, d=d, lam=lam, input_scale=input_scale,
             unstable_norm=unstable_norm)
    rep = ExperimentReport("vanish-profile", dict(c, gaps=gaps), seeds)
    profs = []
    rows = []
    for seed, prof, lam_c in _map(_profile_job, [(s, gaps, c) for s in seeds], jobs):
        profs.append(prof)
        rows += [(seed, i, v) for i, v in zip(gaps, prof)]
    rep.add_table("per_seed.csv", ("seed", "gap", "grad_norm"), rows, kind="per_seed")
    P = np.array(profs)
    mean, std = P.mean(axis=0), P.std(axis=0)
    rep.add_table("profile.csv", ("gap", "mean", "std"),
                  [(i, mean[j], std[j]) for j, i in enumerate(gaps)])
    ratio = geometric_ratio(gaps, mean)
    rep.add_table("summary.csv", ("family", "stable", "n_seeds", "fitted_ratio"),
                  [(family, int(stable), len(seeds), ratio)])
    rep.data.update(gaps=gaps, mean=mean, ratio=ratio)
    return rep


# ---------------------------------------------------------------------------
# Stability report
# ---------------------------------------------------------------------------

def default_r_grid(r):
    """``1, 2, 4, ...`` below ``r``, then ``r``."""
    r = max(1, int(r))
    grid = [1 << i for i in range(r.bit_length()) if (1 << i) < r]
    return grid + [r]


def run_stability_report(params, inputs, cfg=AscentConfig(), seeds=(0,), r_grid=None,
                         B_x=LstmStabilityConfig.B_x):
    """Data-dependent stability estimate next to the analytic certificate.

    For every seed, ``lambda_hat`` is estimated for each iteration exponent
    in ``r_grid`` (default ``[1]``; for an LSTM the powers of two below
    ``r`` plus ``r`` itself, with ``r`` the certified exponent, or
    ``1, 2, 4, 8`` when uncertified). A ratio of the
    ``r``-fold map is reported both raw and as a per-step ``r``-th root.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    cert = certificate(params, B_x)
    if r_grid is None:
        if params.family == "lstm":
            r_grid = default_r_grid(cert.detail.get("r", 8))
        else:
            r_grid = [1]
    r_grid = [int(r) for r in r_grid]
    seeds = sorted(seeds)
    conf = {"family": params.family, "restarts": cfg.restarts, "steps": cfg.steps,
            "lr": cfg.lr, "init_scale": cfg.init_scale, "r_grid": r_grid}
    rep = ExperimentReport("stability-report", conf, seeds)
    rows = []
    by_r = {}
    for seed in seeds:
        for r in r_grid:
            c = AscentConfig(cfg.restarts, cfg.steps, cfg.lr, cfg.init_scale, iterate=r)
            lam_hat = estimate_stability(params, inputs, c, Rng(seed).spawn(r))
            rows.append((seed, r, lam_hat, lam_hat ** (1.0 / r)))
            by_r.setdefault(r, []).append(lam_hat)
    rep.add_table("per_seed.csv", ("seed", "r", "lambda_hat", "per_step"), rows, kind="per_seed")
    rep.add_table("lambda_by_r.csv", ("r", "mean", "std", "max"),
                  [(r, np.mean(v), np.std(v), np.max(v)) for r, v in sorted(by_r.items())])
    rep.add_table("certificate.csv", ("key", "value"),
                  [("certified", str(cert.certified).lower()), ("lambda", cert.lam),
                   ("margin", cert.margin)] +
                  [(k, v) for k, v in cert.detail.items()])
    rep.data.update(certificate=cert, by_r={r: max(v) for r, v in by_r.items()})
    return rep


# ---------------------------------------------------------------------------
# Config schema and run directories
# ---------------------------------------------------------------------------

# (type, default, help). Lists are comma separated.
SCHEMA = {
    "divergence": {
        "n_seeds": (int, 10, "number of seeds, starting at the master seed"),
        "families": (list, "lds,rnn", "model families"),
        "schedules": (list, "inverse_t,inverse_sqrt_t,constant", "step-size schedules"),
        "T": (int, 200, "sequence length"),
        "d": (int, 32, "input and hidden dimension"),
        "lam": (float, 0.75, "spectral cap of W"),
        "k": (int, 35, "truncation length"),
        "alpha": (float, 0.01, "base step size"),
        "steps": (int, 200, "SGD steps N"),
        "input_scale": (float, 0.05, "multiplier on the N(0, 4I) inputs"),
        "trainable": (str, "recurrent", "all, cell or recurrent"),
    },
    "counterexample": {
        "a0": (list, "1.5,0.5,0.0", "initial values of a"),
        "T": (int, 50, "sequence length"),
        "N": (int, 500, "gradient steps"),
        "tol": (float, 1e-6, "gradient threshold for convergence"),
    },
    "trunc-sweep": {
        "n_seeds": (int, 10, "number of seeds"),
        "family": (str, "rnn", "lds or rnn"),
        "k_values": (list, "1,2,5,10,20,35,50,200", "truncation lengths"),
        "T": (int, 200, "sequence length"),
        "d": (int, 32, "input and hidden dimension"),
        "lam": (float, 0.75, "spectral cap of W"),
        "alpha": (float, 0.01, "base step size"),
        "steps": (int, 200, "SGD steps"),
        "schedule": (str, "inverse_t", "step-size schedule"),
        "input_scale": (float, 1.0, "multiplier on the N(0, 4I) inputs"),
        "project": (bool, "true", "project W after every step"),
    },
    "vanish-profile": {
        "n_seeds": (int, 5, "number of seeds"),
        "family": (str, "rnn", "lds, rnn or lstm"),
        "stable": (bool, "true", "certified-stable or unstable weights"),
        "max_gap": (int, 30, "largest gap i"),
        "T": (int, 60, "sequence length"),
        "d": (int, 32, "input and hidden dimension"),
        "lam": (float, 0.75, "spectral cap of W"),
        "input_scale": (float, 1.0, "multiplier on the N(0, 4I) inputs"),
        "unstable_norm": (float, 1.5, "spectral norm of W when stable = false"),
    },
    "stability-report": {
        "n_seeds": (int, 1, "number of ascent seeds"),
        "weights": (str, "", "weight file; empty draws a synthetic instance"),
        "inputs": (str, "", "CSV of input vectors; empty uses the instance inputs"),
        "family": (str, "lstm", "family of the synthetic instance"),
        "T": (int, 200, "sequence length of the synthetic inputs"),
        "d": (int, 32, "dimension of the synthetic instance"),
        "lam": (float, 0.75, "spectral cap of the synthetic W"),
        "restarts": (int, 20, "ascent restarts"),
        "ascent_steps": (int, 1000, "ascent steps"),
        "lr": (float, 0.9, "ascent step size"),
        "init_scale": (float, 0.1, "variance of the initial states"),
        "r_grid": (list, "", "iteration exponents; empty picks a default"),
    },
}
EXPERIMENTS = tuple(SCHEMA)


def _parse_value(kind, raw, key):
    raw = str(raw).strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is list:
            return [p.strip() for p in raw.split(",") if p.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def resolve_config(name, overrides=None):
    """Defaults for experiment ``name`` updated by string ``overrides``."""
    if name not in SCHEMA:
        raise ConfigError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    schema = SCHEMA[name]
    out = {k: _parse_value(t, d, k) for k, (t, d, _) in schema.items()}
    for k, v in (overrides or {}).items():
        if k not in schema:
            raise ConfigError(f"unknown key {k!r} for experiment {name!r}")
        out[k] = _parse_value(schema[k][0], v, k)
    return out


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _floats(xs):
    return [float(x) for x in xs]


def run_experiment(name, conf, seed=0, jobs=1):
    """Dispatch a resolved config to the matching ``run_*`` function."""
    seeds = list(range(seed, seed + conf.get("n_seeds", 1)))
    if name == "divergence":
        return run_divergence_figure(seeds, conf["schedules"], conf["families"], conf["T"],
                                     conf["d"], conf["lam"], conf["k"], conf["alpha"],
                                     conf["steps"], conf["input_scale"], conf["trainable"], jobs)
    if name == "counterexample":
        return run_counterexample(_floats(conf["a0"]), conf["T"], conf["N"], conf["tol"])
    if name == "trunc-sweep":
        return run_truncation_sweep([int(k) for k in conf["k_values"]], seeds, conf["family"],
                                    conf["T"], conf["d"], conf["lam"], conf["alpha"],
                                    conf["steps"], conf["schedule"], conf["input_scale"],
                                    conf["project"], jobs)
    if name == "vanish-profile":
        return run_vanishing_profile(conf["family"], conf["stable"], range(conf["max_gap"] + 1),
                                     seeds, conf["T"], conf["d"], conf["lam"],
                                     conf["input_scale"], conf["unstable_norm"], jobs)
    if name == "stability-report":
        if conf["weights"]:
            params, _ = io.load_weights(conf["weights"])
            inst = None
        else:
            inst, params, _ = gen_instance(seed, conf["T"], conf["d"], conf["d"], conf["lam"],
                                           conf["family"])
        if conf["inputs"]:
            _, rows = io.read_csv(conf["inputs"])
            inputs = np.array([[float(v) for v in r] for r in rows])
        elif inst is not None:
            inputs = inst.inputs
        else:
            inputs = clip_inputs(Rng(seed).normal((conf["T"], params.input_dim), scale=2.0))
        acfg = AscentConfig(conf["restarts"], conf["ascent_steps"], conf["lr"],
                            conf["init_scale"])
        r_grid = [int(r) for r in conf["r_grid"]] or None
        return run_stability_report(params, inputs, acfg, seeds, r_grid)
    raise ConfigError(f"unknown experiment {name!r}")


def run_dir_name(name, seed, now=None):
    stamp = time.strftime("%Y%m%d-%H%M%S", time.localtime(now))
    return f"{name}-{stamp}-seed{seed}"


def write_report(report, run_dir, echo=None):
    """Write every table, the config echo and a manifest into ``run_dir``.

    ``echo`` is the ``{section: {key: value}}`` config to store as
    ``config.txt``; a flagged-runs table is added when any run aborted.
    """
    os.makedirs(run_dir, exist_ok=True)
    files = []
    tables = dict(report.tables)
    if report.flagged:
        keys = sorted({k for f in report.flagged for k in f})
        tables["flagged.csv"] = (keys, [tuple(str(f.get(k, "")) for k in keys)
                                        for f in report.flagged])
    for rel, (cols, rows) in tables.items():
        path = os.path.join(run_dir, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        io.write_csv(path, cols, rows)
        files.append(rel)
    if echo is not None:
        io.write_config(os.path.join(run_dir, "config.txt"), echo)
        files.append("config.txt")
    io.write_manifest(run_dir, files)
    report.paths = [os.path.join(run_dir, f) for f in sorted(files)] + \
        [os.path.join(run_dir, "MANIFEST.txt")]
    return report.paths
