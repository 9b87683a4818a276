"""Stability certificates, projections and the data-dependent estimator."""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import cells
from .autograd import backward
from .cells import rollout
from .numerics import Rng, inf_induced_norm, spectral_norm, svd
from .errors import ConfigError, NotContractiveError

log = logging.getLogger(__name__)

DEFAULT_SPECTRAL_CAP = 0.999


@dataclass
class StabilityCertificate:
    family: str
    certified: bool
    lam: float
    margin: float
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_text(self):
        lines = [f"family: {self.family}",
                 f"certified: {str(self.certified).lower()}",
                 f"lambda: {self.lam!r}",
                 f"margin: {self.margin!r}"]
        lines += [f"{k}: {v!r}" for k, v in self.detail.items()]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class LstmStabilityConfig:
    """Row-wise caps for the LSTM projector (induced infinity norms)."""

    cap_Wf: float = 0.128
    cap_Uf: float = 0.25
    cap_bf: float = 0.25
    B_x: float = 0.75
    cap_Wi_Wo: float = 0.36
    cap_Wz: float = 0.091

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ConfigError(f"{k} must be positive")


@dataclass(frozen=True)
class AscentConfig:
    """Gradient ascent on the state-difference ratio.

    ``init_scale`` is the variance of the Gaussian initial states;
    ``iterate`` is the number of composed transition steps.
    """

    restarts: int = 20
    steps: int = 1000
    lr: float = 0.9
    init_scale: float = 0.1
    iterate: int = 1

    def __post_init__(self):
        if self.restarts < 1 or self.steps < 0 or self.iterate < 1 or not self.lr > 0 \
                or not self.init_scale > 0:
            raise ConfigError("ascent config needs positive counts and rates")


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------

def project_spectral(W, cap=DEFAULT_SPECTRAL_CAP):
    """Clip the singular values of ``W`` at ``cap``."""
    if not cap > 0:
        raise ConfigError("spectral cap must be positive")
    W = np.asarray(W, dtype=float)
    U, S, V = svd(W)
    if S[0] <= cap:
        return W.copy()
    return (U * np.minimum(S, cap)) @ V.T


def _row_l1(W):
    return np.abs(W).sum(axis=1)


def project_rows_l1(W, cap):
    """Scale every row whose l1 norm exceeds ``cap`` back onto the cap.

    Rows already inside are returned untouched, and a scaled row is nudged
    down by ulps until its float l1 norm is at most ``cap``, so the result
    is a fixed point of the projection.
    """
    if not cap > 0:
        raise ConfigError("row cap must be positive")
    out = np.array(W, dtype=float)
    sums = _row_l1(out)
    for i in np.flatnonzero(sums > cap):
        row = out[i].copy()
        scale = cap / sums[i]
        new = row * scale
        while np.abs(new).sum() > cap:
            scale = np.nextafter(scale, 0.0)
            new = row * scale
        out[i] = new
    while True:
        over = np.flatnonzero(_row_l1(out) > cap)
        if over.size == 0:
            return out
        out[over] = np.nextafter(out[over], 0.0)


def project_lstm_stable(p, cfg=LstmStabilityConfig()):
    """Row-normalize the recurrent and forget-gate weights and clamp ``b_f``.

    Inputs must be clipped to ``[-cfg.B_x, cfg.B_x]`` separately
    (:func:`clip_inputs`).
    """
    return p.replace(
        W_f=project_rows_l1(p.W_f, cfg.cap_Wf),
        U_f=project_rows_l1(p.U_f, cfg.cap_Uf),
        W_i=project_rows_l1(p.W_i, cfg.cap_Wi_Wo),
        W_o=project_rows_l1(p.W_o, cfg.cap_Wi_Wo),
        W_z=project_rows_l1(p.W_z, cfg.cap_Wz),
        b_f=np.clip(p.b_f, -cfg.cap_bf, cfg.cap_bf),
    )


def clip_inputs(x, B_x=LstmStabilityConfig.B_x):
    return np.clip(x, -B_x, B_x)


def project_params(params, projector):
    """Apply a projector to the recurrent weights of ``params``.

    ``projector`` is ``None``, ``("spectral", cap)`` or ``("lstm", cfg)``.
    """
    if projector is None:
        return params
    kind, arg = projector
    if kind == "spectral":
        if params.family == "lstm":
            return params.replace(**{k: project_spectral(getattr(params, k), arg)
                                     for k in params.recurrent_names})
        return params.replace(W=project_spectral(params.W, arg))
    if kind == "lstm":
        if params.family != "lstm":
            raise ConfigError("the lstm projector only applies to lstm parameters")
        return project_lstm_stable(params, arg)
    raise ConfigError(f"unknown projector {kind!r}")


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

def check_rnn_certificate(p, L_rho=1.0):
    """Certify ``||W|| * L_rho < 1`` for an LDS (``L_rho = 1``) or tanh RNN."""
    if not L_rho > 0:
        raise ConfigError("L_rho must be positive")
    norm = spectral_norm(p.W)
    lam = norm * L_rho
    return StabilityCertificate(p.family, lam < 1.0, lam, 1.0 - lam,
                                {"spectral_norm_W": norm, "L_rho": L_rho})


def forget_gate_ceiling(p, B_x):
    z = inf_induced_norm(p.W_f) + inf_induced_norm(p.U_f) * B_x + float(np.max(np.abs(p.b_f)))
    return float(cells.sigmoid(z))


def iterated_contraction_exponent(lam, dim):
    """Smallest ``r >= 0`` with ``lam**r * sqrt(dim) <= 1``."""
    if not 0 < lam < 1:
        raise NotContractiveError(f"lambda={lam} is not in (0, 1)")
    target = 0.5 * math.log(dim)
    r = max(0, math.ceil(target / -math.log(lam) - 1e-9))
    while r > 0 and (r - 1) * -math.log(lam) >= target:
        r -= 1
    while r * -math.log(lam) < target:
        r += 1
    return r


def check_lstm_certificate(p, B_x=LstmStabilityConfig.B_x):
    """Sufficient condition for the LSTM to contract in the l-infinity norm.

    With ``||h||_inf <= 1`` and ``||x||_inf <= B_x`` the forget gate is at most
    ``f_inf = sigmoid(||W_f|| + ||U_f|| B_x + ||b_f||)``, the cell state at
    most ``1 / (1 - f_inf)``, and one step maps ``(c, h)`` differences by at
    most ``lhs + f_inf`` where ``lhs = (||W_i|| + ||c|| ||W_f|| + ||W_o||)/4 +
    ||W_z||``. Certified when ``lhs < 1 - f_inf``. The detail records the
    number of iterations ``r`` after which the composed map contracts in l2.
    """
    if not B_x > 0:
        raise ConfigError("B_x must be positive")
    norms = {k: inf_induced_norm(getattr(p, k)) for k in ("W_f", "W_i", "W_o", "W_z", "U_f")}
    f_inf = forget_gate_ceiling(p, B_x)
    assert f_inf < 1.0
    c_bound = 1.0 / (1.0 - f_inf)
    lhs = (norms["W_i"] + c_bound * norms["W_f"] + norms["W_o"]) / 4.0 + norms["W_z"]
    rhs = 1.0 - f_inf
    lam = lhs + f_inf
    certified = lhs < rhs
    detail = {f"inf_norm_{k}": v for k, v in norms.items()}
    detail.update(b_f_max=float(np.max(np.abs(p.b_f))), B_x=B_x, f_inf=f_inf,
                  c_bound=c_bound, lhs=lhs, rhs=rhs)
    if certified:
        detail["r"] = iterated_contraction_exponent(lam, p.state_dim) if lam > 0 else 0
    return StabilityCertificate("lstm", certified, lam, rhs - lhs, detail)


def certificate(params, B_x=LstmStabilityConfig.B_x):
    if params.family == "lstm":
        return check_lstm_certificate(params, B_x)
    return check_rnn_certificate(params)


def iterated_contraction_ratios(p, r, n_pairs, rng, B_x=LstmStabilityConfig.B_x):
    """``||phi^r(s) - phi^r(s')||_2 / ||s - s'||_2`` on random reachable pairs.

    Cell states are drawn uniformly within the certified cell bound, hidden
    states within [-1, 1], and each pair shares one input sequence drawn
    uniformly from ``[-B_x, B_x]``.
    """
    d = p.hidden_dim
    c_bound = 1.0 / (1.0 - forget_gate_ceiling(p, B_x))
    def draw():
        return np.concatenate([rng.uniform((n_pairs, d), -c_bound, c_bound),
                               rng.uniform((n_pairs, d), -1.0, 1.0)], axis=1)
    s, s2 = draw(), draw()
    xs = rng.uniform((r, n_pairs, p.input_dim), -B_x, B_x)
    a = rollout(p, xs, s).final
    b = rollout(p, xs, s2).final
    return np.linalg.norm(a - b, axis=1) / np.linalg.norm(s - s2, axis=1)


# ---------------------------------------------------------------------------
# Data-dependent estimate
# ---------------------------------------------------------------------------

def _ratio_and_grads(params, xs, h, h2):
    ta = rollout(params, xs, h)
    tb = rollout(params, xs, h2)
    diff = ta.final - tb.final
    delta = h - h2
    num = np.linalg.norm(diff, axis=-1)
    den = np.linalg.norm(delta, axis=-1)
    S = num / den
    safe = np.where(num > 0, num, 1.0)
    g_out = np.where((num > 0)[:, None], diff / (safe * den)[:, None], 0.0)
    ga = backward(params, ta, g_out)[2]
    gb = backward(params, tb, -g_out)[2]
    corr = (S / den ** 2)[:, None] * delta
    return S, ga - corr, gb + corr


def estimate_stability_restarts(params, sample_inputs, cfg=AscentConfig(), rng=None):
    """Per-restart maximum of ``S(h, h', x)`` found by gradient ascent.

    All restarts run together as one batch. Each restart draws its own
    ``cfg.iterate`` inputs from ``sample_inputs`` and Gaussian initial states
    with variance ``cfg.init_scale``; the ratio is measured in l2 on the
    full state (``[c, h]`` for an LSTM) after ``cfg.iterate`` steps.
    """
    xs_all = np.atleast_2d(np.asarray(sample_inputs, dtype=float))
    if xs_all.shape[0] == 0:
        raise ConfigError("need at least one sample input")
    rng = rng if rng is not None else Rng(0)
    R, n = cfg.restarts, params.state_dim
    idx = rng.integers(0, xs_all.shape[0], size=(cfg.iterate, R))
    xs = xs_all[idx]
    std = math.sqrt(cfg.init_scale)
    h = rng.normal((R, n), scale=std)
    h2 = rng.normal((R, n), scale=std)
    best = np.full(R, -np.inf)
    for it in range(cfg.steps + 1):
        close = np.linalg.norm(h - h2, axis=1) < 1e-12
        if close.any():
            log.info("re-jittering %d coincident state pairs at step %d", close.sum(), it)
            h[close] = rng.normal((close.sum(), n), scale=std)
            h2[close] = rng.normal((close.sum(), n), scale=std)
        S, gh, gh2 = _ratio_and_grads(params, xs, h, h2)
        best = np.maximum(best, S)
        if it < cfg.steps:
            h = h + cfg.lr * gh
            h2 = h2 + cfg.lr * gh2
    return best


def estimate_stability(params, sample_inputs, cfg=AscentConfig(), rng=None):
    """Largest state-difference ratio seen over all restarts and steps."""
    return float(np.max(estimate_stability_restarts(params, sample_inputs, cfg, rng)))
