import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stablernn.autograd import LossSpec, bptt
from stablernn.cells import LdsParams, ReadoutParams, init_params, predict, rollout
from stablernn.errors import ConfigError, NotContractiveError, NumericError
from stablernn.experiments import gen_instance
from stablernn.numerics import Rng, spectral_norm
from stablernn.stability import LstmStabilityConfig, certificate
from stablernn.training import (BoundConstants, DivergenceRecord, TrainConfig, context_length,
                                fit_beta, fit_gamma, lr, paired_divergence_run, prop4_bound,
                                sgd_run, thm1_context)


def small_instance(seed=0, family="rnn", T=20, d=4):
    inst, p, r = gen_instance(seed, T=T, d_in=d, d_h=d, family=family, input_scale=0.3)
    return inst.inputs, inst.target, p, r


def test_lr_examples():
    assert lr("inverse_t", 0.01, 1) == 0.01
    assert lr("inverse_t", 0.01, 4) == 0.0025
    assert lr("inverse_sqrt_t", 1.0, 4) == 0.5
    assert lr("constant", 0.3, 99) == 0.3
    with pytest.raises(ConfigError):
        lr("inverse_t", 1.0, 0)
    with pytest.raises(ConfigError):
        lr("cosine", 1.0, 1)


def test_train_config_validation():
    for bad in (dict(alpha=0), dict(steps=-1), dict(k=0), dict(schedule="x"),
                dict(trainable="readout")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    assert TrainConfig(steps=400).stride == 1
    assert TrainConfig(steps=5000).stride == 10


def test_sgd_zero_steps_returns_init():
    xs, y, p, r = small_instance()
    res = sgd_run(TrainConfig(family="rnn", d_in=4, d_h=4, steps=0), xs, y, p, r)
    np.testing.assert_array_equal(res.params.flatten(), p.flatten())
    assert res.losses.size == 0 and len(res.snapshots) == 1


def test_sgd_zero_gradient_keeps_params():
    xs, _, p, r = small_instance(family="lstm")
    y = predict(r, rollout(p, xs).final[4:], xs[-1])
    res = sgd_run(TrainConfig(family="lstm", d_in=4, d_h=4, steps=10, alpha=1.0), xs, y, p, r)
    np.testing.assert_array_equal(res.params.flatten(), p.flatten())
    np.testing.assert_array_equal(res.readout.flatten(), r.flatten())


def test_sgd_counterexample_diverges():
    p = LdsParams(W=[[1.5]], U=[[1.0]])
    r = ReadoutParams(C=[[1.0]])
    cfg = TrainConfig(family="lds", d_in=1, d_h=1, schedule="inverse_t", alpha=1.0, steps=50,
                      trainable="recurrent")
    with pytest.raises(NumericError) as e:
        sgd_run(cfg, np.ones((6, 1)), np.ones(1), p, r)
    assert e.value.step is not None
    # the same run, stopped before overflow, has |a| strictly increasing
    res = sgd_run(TrainConfig(family="lds", d_in=1, d_h=1, alpha=1.0, steps=e.value.step - 1,
                              trainable="recurrent"), np.ones((6, 1)), np.ones(1), p, r)
    a = np.abs([s[1].W[0, 0] for s in res.snapshots])
    assert np.all(np.diff(a) > 0)


def test_sgd_deterministic_and_projected():
    xs, y, p, r = small_instance(1)
    cfg = TrainConfig(family="rnn", d_in=4, d_h=4, steps=30, alpha=0.02, schedule="constant",
                      projector=("spectral", 0.6))
    a, b = sgd_run(cfg, xs, y, p, r), sgd_run(cfg, xs, y, p, r)
    np.testing.assert_array_equal(a.losses, b.losses)
    for (_, pa, ra), (_, pb, rb) in zip(a.snapshots, b.snapshots):
        np.testing.assert_array_equal(pa.flatten(), pb.flatten())
        np.testing.assert_array_equal(ra.flatten(), rb.flatten())
    for _, ps, _ in a.snapshots[1:]:
        assert spectral_norm(ps.W) <= 0.6 + 1e-12 and certificate(ps).certified
    assert a.losses[-1] < a.losses[0]


def test_sgd_lstm_projector_keeps_certificate():
    xs, y, p, r = small_instance(2, family="lstm")
    cfg = TrainConfig(family="lstm", d_in=4, d_h=4, steps=15, alpha=0.5, schedule="constant",
                      projector=("lstm", LstmStabilityConfig()))
    for _, ps, _ in sgd_run(cfg, xs, y, p, r).snapshots:
        assert certificate(ps).certified


def test_sgd_trainable_subsets():
    xs, y, p, r = small_instance(3)
    base = dict(family="rnn", d_in=4, d_h=4, steps=3, alpha=0.1)
    rec = sgd_run(TrainConfig(trainable="recurrent", **base), xs, y, p, r)
    np.testing.assert_array_equal(rec.params.U, p.U)
    np.testing.assert_array_equal(rec.readout.flatten(), r.flatten())
    assert not np.array_equal(rec.params.W, p.W)
    cell = sgd_run(TrainConfig(trainable="cell", **base), xs, y, p, r)
    assert not np.array_equal(cell.params.U, p.U)
    np.testing.assert_array_equal(cell.readout.flatten(), r.flatten())


def test_sgd_snapshot_stride():
    xs, y, p, r = small_instance(4)
    res = sgd_run(TrainConfig(family="rnn", d_in=4, d_h=4, steps=10, snapshot_stride=4),
                  xs, y, p, r)
    assert [s[0] for s in res.snapshots] == [0, 4, 8, 10]


def test_paired_run_basics():
    xs, y, p, r = small_instance(5)
    cfg = TrainConfig(family="rnn", d_in=4, d_h=4, steps=20, alpha=0.05, k=5,
                      projector=("spectral", 0.75))
    rec = paired_divergence_run(cfg, xs, y, p, r, lam=0.75)
    assert rec.divergence[0] == 0.0 and rec.bound[0] == 0.0
    assert np.all(np.isfinite(rec.divergence)) and rec.divergence[-1] > 0
    assert rec.steps.tolist() == list(range(21))
    assert rec.bound[7] == prop4_bound(BoundConstants(), 0.05, 5, 0.75, 7)
    rows = list(rec.rows())
    assert len(rows) == 21 and len(rows[0]) == len(DivergenceRecord.CSV_COLUMNS)
    # loss_full[0] is the shared-init loss
    assert rec.loss_full[0] == bptt(p, r, xs, LossSpec(y)).loss


def test_paired_run_vacuous_truncation():
    xs, y, p, r = small_instance(6)
    cfg = TrainConfig(family="rnn", d_in=4, d_h=4, steps=15, alpha=0.1, k=20)
    rec = paired_divergence_run(cfg, xs, y, p, r)
    np.testing.assert_array_equal(rec.divergence, 0.0)
    assert np.all(np.isnan(rec.bound))


def test_paired_run_requires_k():
    xs, y, p, r = small_instance()
    with pytest.raises(ConfigError):
        paired_divergence_run(TrainConfig(steps=1), xs, y, p, r)


def test_prop4_bound_examples():
    c = BoundConstants()
    assert prop4_bound(c, 0.01, 0, 0.75, 200) == 0.0
    v = prop4_bound(c, 0.01, 35, 0.75, 200)
    assert v == pytest.approx(0.01 * 35 * 0.75 ** 35 * 200 ** 1.01, rel=1e-14)
    assert v == pytest.approx(3.1e-3, abs=0.05e-3)
    assert prop4_bound(BoundConstants(beta=7.3), 1.0, 1, 0.5, 1) == 0.5
    with pytest.raises(NotContractiveError):
        prop4_bound(c, 0.01, 1, 1.0, 1)
    with pytest.raises(ConfigError):
        BoundConstants(gamma=0)


def test_context_length_examples():
    assert context_length(0.5, 1, 1, 1 / 512) == 10
    assert context_length(0.5, 1, 1, 2.0) == 0
    assert context_length(0.5, 1, 1, 5.0) == 0
    assert context_length(0.75, 1, 1, 0.01, L_f=1) == 21
    assert 21 == math.ceil(math.log(400) / math.log(4 / 3))
    with pytest.raises(NotContractiveError):
        context_length(1.2, 1, 1, 0.1)
    with pytest.raises(ConfigError):
        context_length(0.5, 1, 1, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 0.99), st.floats(1e-6, 10), st.floats(1.0, 100.0))
def test_context_length_is_smallest(lam, eps, scale):
    k = context_length(lam, scale, 1.0, eps)
    bound = lambda j: lam ** j * scale / (1 - lam)
    assert bound(k) <= eps * (1 + 1e-12)
    if k > 0:
        assert bound(k - 1) > eps


def test_thm1_context_examples():
    c = BoundConstants()
    assert thm1_context(c, 200, 1e9, 0.75) == 0
    k = thm1_context(c, 200, 0.01, 0.75)
    growth = 200 ** 2 / 0.25
    assert k * 0.75 ** k * growth <= 0.005
    assert 0.75 ** k / 0.25 <= 0.005
    assert (k - 1) * 0.75 ** (k - 1) * growth > 0.005 or 0.75 ** (k - 1) / 0.25 > 0.005


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0), st.integers(1, 500))
def test_thm1_context_monotone_in_eps(e1, e2, N):
    lo, hi = sorted((e1, e2))
    c = BoundConstants(gamma=2.0, beta=0.5)
    assert thm1_context(c, N, lo, 0.8, alpha=0.1) >= thm1_context(c, N, hi, 0.8, alpha=0.1)


def test_fit_constants_positive():
    xs, y, p, r = small_instance(7, T=40)
    g_all = fit_gamma(p, r, xs, y, 5, 0.75)
    g_rec = fit_gamma(p, r, xs, y, 5, 0.75, trainable="recurrent")
    assert g_all >= g_rec > 0
    b = fit_beta(p, r, xs, y, Rng(0), pairs=3, trainable="recurrent")
    assert b > 0 and math.isfinite(b)
    assert fit_beta(p, r, xs, y, Rng(0), pairs=2, projector=("spectral", 0.75)) > 0
    with pytest.raises(ConfigError):
        fit_beta(p, r, xs, y, Rng(0), trainable="nope")
