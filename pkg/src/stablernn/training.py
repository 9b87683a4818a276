"""Projected SGD, paired full/truncated runs and the bound calculators."""
import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import LossSpec, bptt
from .errors import ConfigError, NotContractiveError, NumericError
from .stability import project_params

SCHEDULES = ("inverse_t", "inverse_sqrt_t", "constant")
# "all": cell and readout; "cell": cell weights; "recurrent": hidden-to-hidden only
TRAINABLE = ("all", "cell", "recurrent")


def lr(schedule, alpha, t):
    """Step size at optimization step ``t >= 1``."""
    if t < 1:
        raise ConfigError("step index starts at 1")
    if schedule == "inverse_t":
        return alpha / t
    if schedule == "inverse_sqrt_t":
        return alpha / math.sqrt(t)
    if schedule == "constant":
        return alpha
    raise ConfigError(f"unknown schedule {schedule!r}")


@dataclass
class TrainConfig:
    """Settings for one SGD run.

    ``projector`` is ``None``, ``("spectral", cap)`` or ``("lstm", cfg)`` and
    is applied to the cell weights after every step. ``k`` switches the
    gradient to the k-truncated loss. ``snapshot_stride`` of ``None`` keeps
    every step when ``steps <= 500`` and 500 evenly strided snapshots
    otherwise.
    """

    family: str = "rnn"
    d_in: int = 32
    d_h: int = 32
    d_out: int = 1
    schedule: str = "inverse_t"
    alpha: float = 0.01
    steps: int = 200
    k: int = None
    projector: tuple = None
    seed: int = 0
    trainable: str = "all"
    snapshot_stride: int = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if self.k is not None and self.k < 1:
            raise ConfigError("truncation k must be at least 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.trainable not in TRAINABLE:
            raise ConfigError(f"trainable must be one of {TRAINABLE}")

    @property
    def train_readout(self):
        return self.trainable == "all"

    @property
    def stride(self):
        if self.snapshot_stride:
            return self.snapshot_stride
        return 1 if self.steps <= 500 else max(1, self.steps // 500)


@dataclass
class TrainResult:
    params: object
    readout: object
    losses: np.ndarray
    lrs: np.ndarray
    snapshots: list = field(default_factory=list)


def _grad(params, readout, inputs, loss, k, t):
    try:
        return bptt(params, readout, inputs, loss, k=k)
    except NumericError as e:
        raise NumericError(f"optimization diverged: {e}", step=t) from None


def _sgd_update(params, readout, grads, step_size, cfg):
    if cfg.trainable == "recurrent":
        params = params.replace(**{k: getattr(params, k) - step_size * getattr(grads.cell, k)
                                   for k in params.recurrent_names})
    else:
        params = params.zip_map(grads.cell, lambda w, g: w - step_size * g)
    if cfg.train_readout:
        readout = readout.zip_map(grads.readout, lambda w, g: w - step_size * g)
    return project_params(params, cfg.projector), readout


def sgd_run(cfg, inputs, target, params, readout, k=None):
    """Plain projected SGD on the final-step loss.

    ``k`` overrides ``cfg.k``. Returns the final weights, the loss and step
    size at every step, and ``(step, params, readout)`` snapshots taken
    every ``cfg.stride`` steps (step 0 is always included).
    """
    k = cfg.k if k is None else k
    loss = LossSpec(target)
    # a NumericError carries the optimization step whose gradient failed
    losses, lrs = np.empty(cfg.steps), np.empty(cfg.steps)
    snaps = [(0, params, readout)]
    for t in range(1, cfg.steps + 1):
        g = _grad(params, readout, inputs, loss, k, t)
        losses[t - 1] = g.loss
        lrs[t - 1] = lr(cfg.schedule, cfg.alpha, t)
        params, readout = _sgd_update(params, readout, g, lrs[t - 1], cfg)
        if not np.all(np.isfinite(params.flatten())):
            raise NumericError("parameters became non-finite", step=t)
        if t % cfg.stride == 0 or t == cfg.steps:
            snaps.append((t, params, readout))
    return TrainResult(params, readout, losses, lrs, snaps)


# ---------------------------------------------------------------------------
# Bounds
# ---------------------------------------------------------------------------

@dataclass
class BoundConstants:
    """Constants hidden in the O(.) of the truncation and smoothness bounds."""

    gamma: float = 1.0
    beta: float = 1.0
    L_x: float = 1.0
    B_x: float = 1.0
    L_w: float = 1.0
    L_f: float = 1.0
    L_p: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if not v > 0:
                raise ConfigError(f"bound constant {k} must be positive")


def _check_lambda(lam):
    if not 0 < lam < 1:
        raise NotContractiveError(f"lambda={lam} must lie in (0, 1)")


def prop4_bound(constants, alpha, k, lam, N):
    """``alpha * gamma * k * lam**k * N**(alpha*beta + 1)``."""
    _check_lambda(lam)
    with np.errstate(over="ignore"):
        return alpha * constants.gamma * k * lam ** k * N ** (alpha * constants.beta + 1.0)


def _smallest_k(violates, k_peak, k_max=10 ** 7):
    """Smallest k such that ``violates(j)`` is false for every ``j >= k``.

    ``violates`` must be monotone decreasing for ``j >= k_peak``.
    """
    k = k_peak
    while violates(k):
        k += 1
        if k > k_max:
            raise NotContractiveError("no finite context length found")
    last = -1
    for j in range(k):
        if violates(j):
            last = j
    return last + 1


def context_length(lam, L_x, B_x, eps, L_f=1.0):
    """Truncation length making ``||y_t - y^k_t|| <= eps`` at inference."""
    _check_lambda(lam)
    if not eps > 0:
        raise ConfigError("eps must be positive")
    q = L_f * L_x * B_x / ((1.0 - lam) * eps)
    return _smallest_k(lambda k: lam ** k * q > 1.0, 0)


def thm1_context(constants, N, eps, lam, alpha=1.0):
    """Truncation length keeping the trained prediction gap below ``eps``.

    Splits ``eps`` evenly between the weight-divergence term
    ``L_f L_w * prop4_bound / (1 - lam)`` and the inference term
    ``lam**k L_f L_x B_x / (1 - lam)``.
    """
    _check_lambda(lam)
    c = constants
    growth = alpha * c.gamma * c.L_f * c.L_w * N ** (alpha * c.beta + 1.0) / (1.0 - lam)
    infer = c.L_f * c.L_x * c.B_x / (1.0 - lam)

    def violates(k):
        return k * lam ** k * growth > eps / 2 or lam ** k * infer > eps / 2

    return _smallest_k(violates, math.ceil(1.0 / -math.log(lam)))


def _select(cell, readout, trainable):
    """Flat vector of the parts of a (cell, readout) pair that ``trainable`` trains."""
    if trainable == "recurrent":
        return _recurrent(cell)
    if trainable == "all":
        return np.concatenate([cell.flatten(), readout.flatten()])
    return cell.flatten()


def fit_gamma(params, readout, inputs, target, k, lam, trainable="all"):
    """Empirical gamma: measured truncation gradient gap over ``k lam^k``."""
    loss = LossSpec(target)
    full = bptt(params, readout, inputs, loss)
    trunc = bptt(params, readout, inputs, loss, k=k)
    gap = (_select(full.cell, full.readout, trainable)
           - _select(trunc.cell, trunc.readout, trainable))
    return float(np.linalg.norm(gap) / (k * lam ** k))


def fit_beta(params, readout, inputs, target, rng, pairs=8, radius=1e-2, projector=None,
             trainable="all"):
    """Empirical gradient-Lipschitz constant around ``params``.

    Largest ``||grad p(w) - grad p(w')|| / ||w - w'||`` over random nearby
    pairs, perturbing and differentiating only the ``trainable`` subset
    (both points projected when ``projector`` is given). A local estimate,
    not a global constant.
    """
    if trainable not in TRAINABLE:
        raise ConfigError(f"trainable must be one of {TRAINABLE}")
    loss = LossSpec(target)
    names = params.recurrent_names if trainable == "recurrent" else tuple(params.arrays())

    def perturb(w):
        return w + radius * rng.normal(w.shape)

    best = 0.0
    for _ in range(pairs):
        pts = []
        for _ in range(2):
            p = params.replace(**{n: perturb(getattr(params, n)) for n in names})
            p = project_params(p, projector)
            r = readout.map(perturb) if trainable == "all" else readout
            g = bptt(p, r, inputs, loss)
            pts.append((_select(p, r, trainable), _select(g.cell, g.readout, trainable)))
        dw = np.linalg.norm(pts[0][0] - pts[1][0])
        dg = np.linalg.norm(pts[0][1] - pts[1][1])
        if dw > 0:
            best = max(best, dg / dw)
    return best


# ---------------------------------------------------------------------------
# Paired runs
# ---------------------------------------------------------------------------

@dataclass
class DivergenceRecord:
    """Per-step comparison of a full and a truncated run from one init.

    Row ``i`` describes the weights after ``i`` steps (row 0 is the shared
    initialization). ``divergence`` is the Frobenius distance over all
    trained parameters, ``recurrent_divergence`` over the recurrent matrices
    only. ``loss_*[i]`` is the loss evaluated at the row-``i`` weights.
    """

    steps: np.ndarray
    lrs: np.ndarray
    divergence: np.ndarray
    recurrent_divergence: np.ndarray
    bound: np.ndarray
    loss_full: np.ndarray
    loss_trunc: np.ndarray
    meta: dict = field(default_factory=dict)

    CSV_COLUMNS = ("step", "lr", "loss_full", "loss_trunc", "divergence", "bound")

    def rows(self):
        for i in range(self.steps.size):
            yield (int(self.steps[i]), self.lrs[i], self.loss_full[i], self.loss_trunc[i],
                   self.divergence[i], self.bound[i])


def _recurrent(params):
    return np.concatenate([getattr(params, k).ravel() for k in params.recurrent_names])


def paired_divergence_run(cfg, inputs, target, params, readout, lam=None, constants=None):
    """Train full and truncated models in lockstep and track their distance.

    Both runs share the initialization, data and schedule; the truncated
    run uses ``cfg.k``. The bound column is ``prop4_bound`` evaluated at
    each step with the given constants (defaults all 1) and ``lam`` (NaN
    when no ``lam`` is given).
    """
    if cfg.k is None:
        raise ConfigError("paired runs need a truncation length k")
    constants = constants or BoundConstants()
    loss = LossSpec(target)
    N = cfg.steps
    div, rdiv, bound = np.zeros(N + 1), np.zeros(N + 1), np.full(N + 1, np.nan)
    lf, lt, lrs = np.empty(N + 1), np.empty(N + 1), np.zeros(N + 1)
    pf, rf = params, readout
    pt, rt = params, readout
    if lam is not None:
        bound[0] = 0.0
    for t in range(1, N + 2):
        gf = _grad(pf, rf, inputs, loss, None, t - 1)
        gt = _grad(pt, rt, inputs, loss, cfg.k, t - 1)
        lf[t - 1], lt[t - 1] = gf.loss, gt.loss
        if t == N + 1:
            break
        lrs[t] = lr(cfg.schedule, cfg.alpha, t)
        pf, rf = _sgd_update(pf, rf, gf, lrs[t], cfg)
        pt, rt = _sgd_update(pt, rt, gt, lrs[t], cfg)
        a = _select(pf, rf, cfg.trainable)
        b = _select(pt, rt, cfg.trainable)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise NumericError("parameters became non-finite", step=t)
        div[t] = np.linalg.norm(a - b)
        rdiv[t] = np.linalg.norm(_recurrent(pf) - _recurrent(pt))
        if lam is not None:
            bound[t] = prop4_bound(constants, cfg.alpha, cfg.k, lam, t)
    meta = {"family": cfg.family, "schedule": cfg.schedule, "alpha": cfg.alpha,
            "k": cfg.k, "steps": N, "seed": cfg.seed, "lambda": lam}
    return DivergenceRecord(np.arange(N + 1), lrs, div, rdiv, bound, lf, lt, meta)
