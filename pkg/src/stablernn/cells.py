"""State-transition maps, rollouts and the linear readout.

Three families share one interface:

* ``lds``:  h_t = W h_{t-1} + U x_t
* ``rnn``:  h_t = tanh(W h_{t-1} + U x_t)
* ``lstm``: the standard four-gate cell with biases on every gate.

Hidden states are float64 vectors. The LSTM state is stored as the
concatenation ``[c, h]`` of length ``2 * d_h``; :class:`LstmState` splits it.
All transition code broadcasts over leading batch axes, so a stack of
states (``(B, n)``) or even a stack of parameter sets (``(B, n, n)``) can be
rolled out in one pass.
"""
import dataclasses
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from .errors import ConfigError


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _mv(m, v):
    return np.einsum("...ij,...j->...i", m, v)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

class ParamsMixin:
    """Pytree-ish helpers shared by every parameter dataclass."""

    def arrays(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if getattr(self, f.name) is not None}

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def map(self, fn):
        return self.replace(**{k: fn(v) for k, v in self.arrays().items()})

    def zip_map(self, other, fn):
        b = other.arrays()
        return self.replace(**{k: fn(v, b[k]) for k, v in self.arrays().items()})

    def flatten(self):
        return np.concatenate([np.ravel(v) for v in self.arrays().values()])

    def unflatten(self, vec):
        vec = np.asarray(vec, dtype=float)
        out, pos = {}, 0
        for k, v in self.arrays().items():
            out[k] = vec[pos:pos + v.size].reshape(v.shape)
            pos += v.size
        if pos != vec.size:
            raise ConfigError(f"flat vector has {vec.size} entries, expected {pos}")
        return self.replace(**out)

    @property
    def size(self):
        return sum(v.size for v in self.arrays().values())

    def copy(self):
        return self.map(np.array)

    def zeros_like(self):
        return self.map(np.zeros_like)


@dataclass
class LdsParams(ParamsMixin):
    W: np.ndarray
    U: np.ndarray
    family: ClassVar[str] = "lds"
    recurrent_names: ClassVar[tuple] = ("W",)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.U = np.asarray(self.U, dtype=float)
        n = self.W.shape[-1]
        if self.W.shape[-2:] != (n, n) or self.U.shape[-2] != n:
            raise ConfigError(f"W {self.W.shape} and U {self.U.shape} are inconsistent")

    @property
    def hidden_dim(self):
        return self.W.shape[-1]

    @property
    def state_dim(self):
        return self.hidden_dim

    @property
    def input_dim(self):
        return self.U.shape[-1]


@dataclass
class RnnParams(LdsParams):
    family: ClassVar[str] = "rnn"


LSTM_GATES = ("f", "i", "o", "z")


@dataclass
class LstmParams(ParamsMixin):
    W_f: np.ndarray
    W_i: np.ndarray
    W_o: np.ndarray
    W_z: np.ndarray
    U_f: np.ndarray
    U_i: np.ndarray
    U_o: np.ndarray
    U_z: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_o: np.ndarray
    b_z: np.ndarray
    family: ClassVar[str] = "lstm"
    recurrent_names: ClassVar[tuple] = ("W_f", "W_i", "W_o", "W_z")

    def __post_init__(self):
        for f in dataclasses.fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=float))
        d = self.W_f.shape[-1]
        d_in = self.U_f.shape[-1]
        for g in LSTM_GATES:
            if (getattr(self, "W_" + g).shape[-2:] != (d, d)
                    or getattr(self, "U_" + g).shape[-2:] != (d, d_in)
                    or getattr(self, "b_" + g).shape[-1:] != (d,)):
                raise ConfigError(f"LSTM gate {g!r} has inconsistent shapes")

    @property
    def hidden_dim(self):
        return self.W_f.shape[-1]

    @property
    def state_dim(self):
        return 2 * self.hidden_dim

    @property
    def input_dim(self):
        return self.U_f.shape[-1]


@dataclass
class ReadoutParams(ParamsMixin):
    """Linear prediction ``y = C h + D x``; ``D`` may be omitted."""

    C: np.ndarray
    D: np.ndarray = None

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=float)
        if self.D is not None:
            self.D = np.asarray(self.D, dtype=float)
            if self.D.shape[-2] != self.C.shape[-2]:
                raise ConfigError("C and D must have the same number of rows")

    @property
    def output_dim(self):
        return self.C.shape[-2]


@dataclass
class LstmState:
    c: np.ndarray
    h: np.ndarray

    @classmethod
    def from_vector(cls, s):
        d = s.shape[-1] // 2
        return cls(c=s[..., :d], h=s[..., d:])

    def vector(self):
        return np.concatenate([self.c, self.h], axis=-1)


FAMILIES = {"lds": LdsParams, "rnn": RnnParams, "lstm": LstmParams}


def params_class(family):
    try:
        return FAMILIES[family]
    except KeyError:
        raise ConfigError(f"unknown model family {family!r}") from None


def init_params(family, d_in, d_h, rng, scale=1.0):
    """Gaussian initial parameters with standard deviation ``scale``."""
    cls = params_class(family)
    if family == "lstm":
        kw = {}
        for g in LSTM_GATES:
            kw["W_" + g] = rng.normal((d_h, d_h), scale=scale)
            kw["U_" + g] = rng.normal((d_h, d_in), scale=scale)
            kw["b_" + g] = rng.normal(d_h, scale=scale)
        return cls(**kw)
    return cls(W=rng.normal((d_h, d_h), scale=scale), U=rng.normal((d_h, d_in), scale=scale))


def zero_params(family, d_in, d_h):
    cls = params_class(family)
    if family == "lstm":
        kw = {}
        for g in LSTM_GATES:
            kw["W_" + g] = np.zeros((d_h, d_h))
            kw["U_" + g] = np.zeros((d_h, d_in))
            kw["b_" + g] = np.zeros(d_h)
        return cls(**kw)
    return cls(W=np.zeros((d_h, d_h)), U=np.zeros((d_h, d_in)))


def zero_state(params, batch=()):
    return np.zeros(tuple(batch) + (params.state_dim,))


def output_state(params, s):
    """The part of the state seen by the readout (``h`` for an LSTM)."""
    if params.family == "lstm":
        return s[..., params.hidden_dim:]
    return s


# ---------------------------------------------------------------------------
# Transition maps
# ---------------------------------------------------------------------------

def _check_dims(params, state, x):
    if state.shape[-1] != params.state_dim:
        raise ConfigError(f"state has dim {state.shape[-1]}, expected {params.state_dim}")
    if x.shape[-1] != params.input_dim:
        raise ConfigError(f"input has dim {x.shape[-1]}, expected {params.input_dim}")


def _rnn_step(p, h, x):
    a = _mv(p.W, h) + _mv(p.U, x)
    return (np.tanh(a) if p.family == "rnn" else a), {"a": a}


def _lstm_step(p, s, x):
    d = p.hidden_dim
    c_prev, h_prev = s[..., :d], s[..., d:]
    pre = {g: _mv(getattr(p, "W_" + g), h_prev) + _mv(getattr(p, "U_" + g), x)
           + getattr(p, "b_" + g) for g in LSTM_GATES}
    f = sigmoid(pre["f"])
    i = sigmoid(pre["i"])
    o = sigmoid(pre["o"])
    z = np.tanh(pre["z"])
    c = i * z + f * c_prev
    tc = np.tanh(c)
    h = o * tc
    return np.concatenate([c, h], axis=-1), {"f": f, "i": i, "o": o, "z": z, "tc": tc}


def _step_cached(params, state, x):
    if params.family == "lstm":
        return _lstm_step(params, state, x)
    return _rnn_step(params, state, x)


def step(params, state, x):
    """One application of the transition map."""
    if isinstance(state, LstmState):
        state = state.vector()
    state = np.asarray(state, dtype=float)
    x = np.asarray(x, dtype=float)
    _check_dims(params, state, x)
    return _step_cached(params, state, x)[0]


@dataclass(frozen=True)
class Trajectory:
    """Forward pass record.

    ``states[0]`` is the initial state, ``states[t]`` the state after input
    ``inputs[t - 1]``. ``cache[name][t - 1]`` holds the per-step values the
    backward pass needs (pre-activations for lds/rnn, gate activations and
    ``tanh(c_t)`` for lstm).
    """

    family: str
    states: np.ndarray
    inputs: np.ndarray
    cache: dict = field(default_factory=dict)

    @property
    def length(self):
        return self.inputs.shape[0]

    @property
    def final(self):
        return self.states[-1]


def rollout(params, inputs, init=None):
    """Run the full recurrence over ``inputs`` (shape ``(T, ..., d_in)``)."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = (inputs.reshape(-1, params.input_dim) if inputs.size
                  else np.zeros((0, params.input_dim)))
    if init is None:
        init = zero_state(params, inputs.shape[1:-1])
    elif isinstance(init, LstmState):
        init = init.vector()
    state = np.asarray(init, dtype=float)
    if inputs.shape[0]:
        _check_dims(params, state, inputs[0])
    states = [state]
    caches = []
    for x in inputs:
        state, cache = _step_cached(params, state, x)
        states.append(state)
        caches.append(cache)
    cache = {k: np.stack([c[k] for c in caches]) for k in caches[0]} if caches else {}
    return Trajectory(params.family, np.stack(states), inputs, cache)


def truncation_window(t, k):
    """Index range ``[start, t)`` of inputs seen by the k-truncated model at t."""
    if k < 0:
        raise ConfigError("truncation length must be nonnegative")
    return max(0, t - k), t


def rollout_truncated(params, inputs, t, k):
    """State of the k-truncated model at step ``t``.

    The model restarts from the zero state after step ``t - k`` and only
    sees ``x_{t-k+1}, ..., x_t``. Windows reaching before the start of the
    sequence are clipped, which gives the full-model state.
    """
    inputs = np.asarray(inputs, dtype=float)
    if t > inputs.shape[0]:
        raise ConfigError(f"t={t} exceeds sequence length {inputs.shape[0]}")
    start, stop = truncation_window(t, k)
    return rollout(params, inputs[start:stop],
                   zero_state(params, inputs.shape[1:-1])).final


def predict(readout, h, x=None):
    y = _mv(readout.C, np.asarray(h, dtype=float))
    if readout.D is not None and x is not None:
        y = y + _mv(readout.D, np.asarray(x, dtype=float))
    return y
