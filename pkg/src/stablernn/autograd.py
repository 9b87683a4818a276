"""Backpropagation through time and a finite-difference oracle.

The loss is the squared error of the prediction at the last step only,
``p_T = 0.5 * ||C h_T + D x_T - y_T||^2``. Gradients come back in the same
parameter containers as the model so they can be added, scaled and
projected like the weights themselves.
"""
from dataclasses import dataclass

import numpy as np

from . import cells
from .cells import LSTM_GATES, Trajectory, output_state, rollout, truncation_window, zero_state
from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class LossSpec:
    target: np.ndarray
    kind: str = "squared"

    def __post_init__(self):
        if self.kind != "squared":
            raise ConfigError(f"unsupported loss kind {self.kind!r}")
        object.__setattr__(self, "target", np.atleast_1d(np.asarray(self.target, dtype=float)))

    def value(self, y):
        r = y - self.target
        return 0.5 * np.sum(r * r, axis=-1)


@dataclass
class GradientBundle:
    """Gradients of one scalar loss.

    ``cell`` and ``readout`` mirror the parameter containers. ``inputs`` is
    ``None`` unless requested, else an array shaped like the input sequence.
    """

    cell: object
    readout: object
    inputs: np.ndarray = None
    loss: float = float("nan")

    def flatten(self):
        parts = [self.cell.flatten()]
        if self.readout is not None:
            parts.append(self.readout.flatten())
        return np.concatenate(parts)


def _slice(traj, stop):
    """Prefix of a trajectory ending at state ``stop``."""
    return Trajectory(traj.family, traj.states[:stop + 1], traj.inputs[:stop],
                      {k: v[:stop] for k, v in traj.cache.items()})


def _outer_sum(a, b):
    # sum over time and any batch axes of a_i b_j
    lead = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    a = np.broadcast_to(a, lead + a.shape[-1:]).reshape(-1, a.shape[-1])
    b = np.broadcast_to(b, lead + b.shape[-1:]).reshape(-1, b.shape[-1])
    return a.T @ b


def _backward_rnn(params, traj, g):
    T = traj.length
    ga_all = np.empty((T,) + g.shape)
    for t in range(T - 1, -1, -1):
        if params.family == "rnn":
            h = traj.states[t + 1]
            ga = g * (1.0 - h * h)
        else:
            ga = g
        ga_all[t] = ga
        g = np.einsum("ji,...j->...i", params.W, ga)
    grads = params.replace(W=_outer_sum(ga_all, traj.states[:-1]),
                           U=_outer_sum(ga_all, traj.inputs))
    g_in = np.einsum("ji,...j->...i", params.U, ga_all)
    return grads, g_in, g


def _backward_lstm(params, traj, g):
    d = params.hidden_dim
    T = traj.length
    gc, gh = g[..., :d], g[..., d:]
    ga = {k: np.empty((T,) + gh.shape) for k in LSTM_GATES}
    for t in range(T - 1, -1, -1):
        f, i, o, z, tc = (traj.cache[k][t] for k in ("f", "i", "o", "z", "tc"))
        c_prev = traj.states[t][..., :d]
        g_ct = gc + gh * o * (1.0 - tc * tc)
        ga["o"][t] = gh * tc * o * (1.0 - o)
        ga["i"][t] = g_ct * z * i * (1.0 - i)
        ga["f"][t] = g_ct * c_prev * f * (1.0 - f)
        ga["z"][t] = g_ct * i * (1.0 - z * z)
        gc = g_ct * f
        gh = sum(np.einsum("ji,...j->...i", getattr(params, "W_" + k), ga[k][t])
                 for k in LSTM_GATES)
    h_prev = traj.states[:-1][..., d:]
    kw = {}
    for k in LSTM_GATES:
        kw["W_" + k] = _outer_sum(ga[k], h_prev)
        kw["U_" + k] = _outer_sum(ga[k], traj.inputs)
        kw["b_" + k] = ga[k].reshape(-1, d).sum(axis=0)
    g_in = sum(np.einsum("ji,...j->...i", getattr(params, "U_" + k), ga[k]) for k in LSTM_GATES)
    return params.replace(**kw), g_in, np.concatenate([gc, gh], axis=-1)


def backward(params, traj, g_final):
    """Vector-Jacobian product through a whole trajectory.

    Parameters
    ----------
    params : cell parameters used to produce ``traj``
    traj : Trajectory
    g_final : ndarray
        Gradient of some scalar with respect to the final state.

    Returns
    -------
    grads : cell parameter container of weight gradients
    g_inputs : ndarray shaped like ``traj.inputs``
    g_init : ndarray, gradient with respect to the initial state
    """
    g_final = np.asarray(g_final, dtype=float)
    if params.family == "lstm":
        grads, g_in, g0 = _backward_lstm(params, traj, g_final)
    else:
        grads, g_in, g0 = _backward_rnn(params, traj, g_final)
    if not np.all(np.isfinite(g_in)):
        bad = np.flatnonzero(~np.isfinite(g_in.reshape(g_in.shape[0], -1)).all(axis=1))
        raise NumericError("non-finite value in backward pass", step=int(bad.max()) + 1)
    return grads, g_in, g0


def state_vjp(params, traj, g_final):
    """Gradient with respect to the initial state only."""
    return backward(params, traj, g_final)[2]


def state_jacobian(params, state, x):
    """Dense Jacobian of one transition step with respect to the state."""
    n = params.state_dim
    traj = rollout(params, np.asarray(x, dtype=float)[None], np.asarray(state, dtype=float))
    # one VJP per output coordinate, batched on a leading axis
    eye = np.eye(n)
    states = np.broadcast_to(traj.states[:, None, :], (2, n, n))
    batched = Trajectory(traj.family, states,
                         np.broadcast_to(traj.inputs[:, None, :], (1, n, traj.inputs.shape[-1])),
                         {k: np.broadcast_to(v[:, None, :], (1, n, v.shape[-1]))
                          for k, v in traj.cache.items()})
    return backward(params, batched, eye)[2]


def _loss_window(inputs, k):
    T = inputs.shape[0]
    if k is None:
        return 0, T
    return truncation_window(T, k)


def bptt(params, readout, inputs, loss, k=None, init=None, input_grads=False):
    """Exact gradient of the final-step squared loss.

    Parameters
    ----------
    params : cell parameters
    readout : ReadoutParams
    inputs : ndarray, shape (T, d_in)
    loss : LossSpec
        Target for the prediction after the last input.
    k : int, optional
        Truncation length. The truncated model starts from the zero state
        after step ``T - k``; ``k >= T`` gives the full model.
    init : ndarray, optional
        Initial state of the full model (zero by default; ignored when the
        truncation window starts after step 0).
    input_grads : bool
        Also return the gradient with respect to every input vector.
    """
    inputs = np.asarray(inputs, dtype=float)
    T = inputs.shape[0]
    if T == 0:
        raise ConfigError("bptt needs at least one input")
    start, _ = _loss_window(inputs, k)
    if start > 0 or init is None:
        init = zero_state(params)
    traj = rollout(params, inputs[start:], init)
    h_T = output_state(params, traj.final)
    x_T = inputs[-1]
    y = cells.predict(readout, h_T, x_T)
    with np.errstate(over="ignore", invalid="ignore"):
        delta = y - loss.target
        value = float(0.5 * delta @ delta)
    if not np.isfinite(value):
        raise NumericError("non-finite loss", step=T)

    g_h = readout.C.T @ delta
    g_final = np.zeros(params.state_dim)
    g_final[params.state_dim - params.hidden_dim:] = g_h
    grads, g_in, _ = backward(params, traj, g_final)

    r_grads = readout.replace(C=np.outer(delta, h_T),
                              D=None if readout.D is None else np.outer(delta, x_T))
    g_inputs = None
    if input_grads:
        g_inputs = np.zeros_like(inputs)
        g_inputs[start:] = g_in
        if readout.D is not None:
            g_inputs[-1] += readout.D.T @ delta
    return GradientBundle(grads, r_grads, g_inputs, value)


def loss_value(params, readout, inputs, loss, k=None, init=None):
    inputs = np.asarray(inputs, dtype=float)
    start, _ = _loss_window(inputs, k)
    if start > 0 or init is None:
        init = zero_state(params)
    final = rollout(params, inputs[start:], init).final
    y = cells.predict(readout, output_state(params, final), inputs[-1])
    return float(loss.value(y))


def _unflatten_batch(template, mat):
    out, pos = {}, 0
    for name, v in template.arrays().items():
        out[name] = mat[:, pos:pos + v.size].reshape((mat.shape[0],) + v.shape)
        pos += v.size
    return template.replace(**out)


def finite_diff_grad(params, readout, inputs, loss, k=None, h=1e-6, init=None, chunk=2048):
    """Central-difference gradient, one scalar parameter at a time.

    All perturbed models are evaluated together as one batched rollout.
    """
    if not 1e-8 <= h <= 1e-3:
        raise ConfigError("finite-difference step must lie in [1e-8, 1e-3]")
    inputs = np.asarray(inputs, dtype=float)
    start, _ = _loss_window(inputs, k)
    n_cell = params.size
    base = np.concatenate([params.flatten(), readout.flatten()])
    P = base.size
    grad = np.empty(P)
    for lo in range(0, P, chunk):
        idx = np.arange(lo, min(P, lo + chunk))
        m = idx.size
        batch = np.repeat(base[None, :], 2 * m, axis=0)
        batch[np.arange(m), idx] += h
        batch[m + np.arange(m), idx] -= h
        cp = _unflatten_batch(params, batch[:, :n_cell])
        rp = _unflatten_batch(readout, batch[:, n_cell:])
        s0 = np.zeros((2 * m, params.state_dim))
        if start == 0 and init is not None:
            s0[:] = init
        final = rollout(cp, inputs[start:], s0).final
        y = cells.predict(rp, output_state(params, final), inputs[-1])
        vals = loss.value(y)
        grad[idx] = (vals[:m] - vals[m:]) / (2.0 * h)
    cell_g = params.unflatten(grad[:n_cell])
    read_g = readout.unflatten(grad[n_cell:])
    return GradientBundle(cell_g, read_g, None, loss_value(params, readout, inputs, loss, k, init))


def input_gradient_profile(params, readout, inputs, targets, gaps, positions=None):
    """Mean ``||grad_{x_t} p_{t+i}||_2`` for each gap ``i``.

    Steps are 1-based: ``x_t`` is ``inputs[t - 1]`` and ``p_s`` is the loss of
    the prediction after ``s`` inputs against ``targets[s - 1]`` (a single
    target vector is reused for every step). ``positions`` defaults to every
    ``t`` with ``t + max(gaps) <= T``.
    """
    inputs = np.asarray(inputs, dtype=float)
    T = inputs.shape[0]
    gaps = [int(i) for i in gaps]
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = np.broadcast_to(targets, (T, targets.size))
    if positions is None:
        positions = range(1, T - max(gaps) + 1)
    positions = list(positions)
    if not positions or max(positions) + max(gaps) > T:
        raise ConfigError("positions + gaps exceed the sequence length")
    traj = rollout(params, inputs)
    d = params.hidden_dim
    needed = sorted({t + i for t in positions for i in gaps})
    per_step = {}
    for s in needed:
        sub = _slice(traj, s)
        h_s = output_state(params, sub.final)
        delta = cells.predict(readout, h_s, inputs[s - 1]) - targets[s - 1]
        g_final = np.zeros(params.state_dim)
        g_final[params.state_dim - d:] = readout.C.T @ delta
        _, g_in, _ = backward(params, sub, g_final)
        if readout.D is not None:
            g_in[s - 1] += readout.D.T @ delta
        per_step[s] = np.linalg.norm(g_in, axis=-1)
    return np.array([np.mean([per_step[t + i][t - 1] for t in positions]) for i in gaps])


@dataclass(frozen=True)
class GradCheckResult:
    seed: int
    family: str
    d_in: int
    d_h: int
    T: int
    k: int
    rel_error: float


def random_grad_check_instance(rng, family, max_dim=8, max_T=20, truncation=None):
    """Random small model, readout, inputs and target for a gradient check.

    ``truncation`` is ``None`` (full loss), an int ``k``, or ``"T"`` for
    ``k`` equal to the drawn sequence length.
    """
    from .cells import ReadoutParams, init_params
    d_in = int(rng.integers(1, max_dim + 1))
    d_h = int(rng.integers(1, max_dim + 1))
    d_out = int(rng.integers(1, 4))
    T = int(rng.integers(1, max_T + 1))
    k = T if truncation == "T" else truncation
    params = init_params(family, d_in, d_h, rng, scale=0.8 / np.sqrt(max(d_in, d_h)))
    readout = ReadoutParams(C=rng.normal((d_out, d_h)), D=rng.normal((d_out, d_in)))
    inputs = rng.normal((T, d_in))
    target = rng.uniform(d_out, -2.0, 2.0)
    return params, readout, inputs, LossSpec(target), k


TRUNCATIONS = (None, 1, 3, "T")


def relative_error(analytic, numeric):
    """Largest ``|a_i - n_i| / max(1, |a_i|)`` over all entries."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a))))


def gradient_check(families=("lds", "rnn", "lstm"), trials=20, seed=0, max_dim=8, max_T=20,
                   corrupt=False):
    """Compare :func:`bptt` with :func:`finite_diff_grad` on random instances.

    Each family gets ``trials`` instances cycling through the full loss and
    truncations ``k = 1``, ``k = 3`` and ``k = T``. Instance ``j`` of a
    family is drawn from ``Rng(seed).spawn(j)`` after a per-family offset,
    so a failing instance can be rebuilt from its
    reported seed. ``corrupt`` perturbs the analytic gradient (a negative
    control for the harness itself).
    """
    from .numerics import Rng
    out = []
    for fi, family in enumerate(families):
        for j in range(trials):
            key = fi * 1_000_000 + j
            rng = Rng(seed).spawn(key)
            params, readout, inputs, loss, k = random_grad_check_instance(
                rng, family, max_dim, max_T, truncation=TRUNCATIONS[j % len(TRUNCATIONS)])
            ga = bptt(params, readout, inputs, loss, k=k).flatten()
            if corrupt:
                ga = ga.copy()
                ga[0] += 1e-3 * (1.0 + abs(ga[0]))
            gn = finite_diff_grad(params, readout, inputs, loss, k=k).flatten()
            out.append(GradCheckResult(key, family, params.input_dim, params.hidden_dim,
                                       inputs.shape[0], 0 if k is None else k,
                                       relative_error(ga, gn)))
    return out
