import filecmp
import math
import os

import numpy as np
import pytest

from stablernn import io
from stablernn.autograd import LossSpec, finite_diff_grad
from stablernn.cells import LdsParams, ReadoutParams, RnnParams
from stablernn.errors import ConfigError
from stablernn.experiments import (counterexample_gradient, counterexample_loss, default_r_grid,
                                   gen_instance,
                                   geometric_ratio, max_growth, resolve_config, run_counterexample,
                                   run_divergence_figure, run_experiment, run_stability_report,
                                   run_truncation_sweep, run_vanishing_profile, write_report)
from stablernn.numerics import Rng, spectral_norm
from stablernn.stability import AscentConfig, check_lstm_certificate


def test_gen_instance_deterministic():
    a, pa, ra = gen_instance(3)
    b, pb, rb = gen_instance(3)
    for x, y in ((a.inputs, b.inputs), (a.target, b.target), (pa.flatten(), pb.flatten()),
                 (ra.flatten(), rb.flatten())):
        assert x.tobytes() == y.tobytes()
    assert not np.array_equal(gen_instance(4)[0].inputs, a.inputs)


def test_gen_instance_distribution():
    inst, p, r = gen_instance(0)
    assert inst.T == 200 and inst.inputs.shape == (200, 32) and inst.target.shape == (1,)
    assert spectral_norm(p.W) <= 0.75 + 1e-9
    assert np.all(np.abs(inst.target) <= 2)
    assert r.C.shape == (1, 32) and r.D.shape == (1, 32)
    big = gen_instance(1, T=10_000, d_in=2, d_h=2)[0].inputs
    assert np.all(np.abs(big.var(axis=0) - 4.0) <= 0.15)
    assert abs(gen_instance(2, T=20_000, d_in=1, d_h=8)[2].C.std() - 1) < 0.5


def test_gen_instance_lstm_and_validation():
    inst, p, _ = gen_instance(0, T=10, d_in=3, d_h=4, family="lstm")
    assert check_lstm_certificate(p).certified and np.max(np.abs(inst.inputs)) <= 0.75
    with pytest.raises(ConfigError):
        gen_instance(0, lam=1.0)
    with pytest.raises(ConfigError):
        gen_instance(0, T=0)


def test_counterexample_closed_form_examples():
    assert counterexample_gradient(0.5, 2) == 0.5
    assert counterexample_gradient(0.0, 50) == 0.0
    g = Rng(0)
    for _ in range(20):
        a, T = g.uniform(low=-1.5, high=1.5), int(g.integers(2, 11))
        fd = (counterexample_loss(a + 1e-6, T) - counterexample_loss(a - 1e-6, T)) / 2e-6
        assert abs(counterexample_gradient(a, T) - fd) <= 1e-7 * max(1.0, abs(fd))
    # at a = 1 the series branch gives (T - 1) * T (T - 1) / 2
    assert counterexample_gradient(1.0, 5) == pytest.approx(4.0 * 10.0)


def test_counterexample_matches_bptt():
    for a, T in ((0.5, 2), (1.2, 7), (-0.4, 9)):
        p = LdsParams(W=[[a]], U=[[1.0]])
        fd = finite_diff_grad(p, ReadoutParams(C=[[1.0]]), np.ones((T, 1)), LossSpec([1.0]))
        assert counterexample_gradient(a, T) == pytest.approx(fd.cell.W[0, 0], rel=1e-7, abs=1e-7)


def test_run_counterexample():
    rep = run_counterexample([1.5, 0.0], T=50, N=500)
    d = rep.data[1.5]
    assert d["diverged"] and d["diverge_step"] <= 500
    assert abs(d["rows"][-1][1]) > 1e6 or not math.isfinite(d["rows"][-1][1])
    z = rep.data[0.0]
    assert not z["diverged"] and all(r[1] == 0.0 and r[2] == 0.0 for r in z["rows"])
    assert len(z["rows"]) == 500
    conv = run_counterexample([0.5], T=2, N=10_000).data[0.5]
    assert conv["converged_step"] is not None and conv["converged_step"] <= 10_000
    with pytest.raises(ConfigError):
        run_counterexample([0.5], T=1)


def test_divergence_figure_small(tmp_path):
    rep = run_divergence_figure([0, 1], schedules=("inverse_t", "constant"), families=("rnn",),
                                T=30, d=4, k=5, steps=20)
    assert not rep.flagged
    for name in rep.per_seed:
        cols, rows = rep.tables[name]
        assert cols == ("step", "lr", "loss_full", "loss_trunc", "divergence", "bound")
        assert rows[0][4] == 0.0
    # aggregates recompute from per-seed rows
    cols, agg = rep.tables["rnn_inverse_t.csv"]
    per = [rep.tables[f"seeds/rnn_inverse_t_seed{s}.csv"][1] for s in (0, 1)]
    for i, row in enumerate(agg):
        vals = [p[i][4] for p in per]
        assert abs(row[1] - np.mean(vals)) <= 1e-12 and abs(row[2] - np.std(vals)) <= 1e-12
        assert row[4] >= row[1]
    paths = write_report(rep, tmp_path / "run", {"run": {"seed": "0"}})
    assert all(os.path.exists(p) for p in paths)


def test_divergence_vacuous_truncation():
    rep = run_divergence_figure([0], schedules=("inverse_t",), families=("lds",), T=10, d=3,
                                k=10, steps=5)
    assert all(row[4] == 0.0 for row in rep.tables["seeds/lds_inverse_t_seed0.csv"][1])


def test_divergence_flags_aborted_runs():
    rep = run_divergence_figure([0], schedules=("constant",), families=("lds",), T=30, d=4, k=3,
                                steps=40, alpha=50.0, input_scale=1.0, trainable="all")
    assert rep.flagged and rep.flagged[0]["schedule"] == "constant"
    assert "lds_constant.csv" not in rep.tables


def test_truncation_sweep_small():
    rep = run_truncation_sweep([1, 3, 10, 30], seeds=[0, 1], family="rnn", T=30, d=4, steps=10,
                               alpha=0.05)
    per_k = rep.data["per_k"]
    for full, long in zip(per_k[0], per_k[30]):
        assert full["loss_trunc"] == long["loss_trunc"] == long["loss_full"]
    for vals in per_k.values():
        for v in vals:
            assert v["gap"] <= v["envelope"] and v["lam_trained"] <= 0.75 + 1e-9
    with pytest.raises(ConfigError):
        run_truncation_sweep([0], seeds=[0])
    with pytest.raises(ConfigError):
        run_truncation_sweep([1], seeds=[0], family="lstm")


def test_vanishing_profile_stable_and_zero():
    rep = run_vanishing_profile("rnn", True, range(11), seeds=[0, 1], T=25, d=8)
    assert rep.data["mean"][0] > 0
    assert rep.data["ratio"] <= 0.77
    unstable = run_vanishing_profile("lds", False, range(11), seeds=[0], T=25, d=8)
    assert unstable.data["ratio"] > 1.0
    with pytest.raises(ConfigError):
        run_vanishing_profile("rnn", True, [30], T=25)


def test_geometric_ratio_and_growth():
    gaps = np.arange(10)
    assert geometric_ratio(gaps, 3.0 * 0.6 ** gaps) == pytest.approx(0.6, rel=1e-12)
    assert math.isnan(geometric_ratio([0, 1], [1.0, 0.0]))
    assert max_growth(np.ones(100)) == 1.0
    assert max_growth(np.arange(100.0), start=20, window=50) == pytest.approx(70 / 20)


def test_stability_report_lds_diag():
    p = LdsParams(W=np.diag([0.9, 0.3]), U=np.ones((2, 1)))
    rep = run_stability_report(p, np.ones((3, 1)), AscentConfig(restarts=4, steps=300))
    lam_hat = rep.data["by_r"][1]
    assert rep.data["certificate"].lam == pytest.approx(0.9, abs=1e-12)
    assert abs(lam_hat - 0.9) <= 0.009


def test_stability_report_lstm_r_grid():
    inst, p, _ = gen_instance(0, T=30, d_in=3, d_h=4, family="lstm")
    r = check_lstm_certificate(p).detail["r"]
    assert default_r_grid(r) == [1, 2, 4, 8, 16, 32, 64, 128, 256, r]
    assert default_r_grid(1) == [1] and default_r_grid(4) == [1, 2, 4]
    rep = run_stability_report(p, inst.inputs, AscentConfig(restarts=3, steps=20),
                               r_grid=[1, 4, r])
    by_r = rep.data["by_r"]
    assert sorted(by_r) == [1, 4, r]
    assert by_r[r] < 1.0
    assert by_r[r] <= by_r[1]


def test_resolve_config():
    conf = resolve_config("divergence")
    assert (conf["T"], conf["d"], conf["lam"], conf["k"], conf["alpha"], conf["steps"]) == \
        (200, 32, 0.75, 35, 0.01, 200)
    assert resolve_config("counterexample", {"a0": "1.5"})["a0"] == ["1.5"]
    assert resolve_config("trunc-sweep", {"project": "false"})["project"] is False
    with pytest.raises(ConfigError):
        resolve_config("divergence", {"bogus": "1"})
    with pytest.raises(ConfigError):
        resolve_config("divergence", {"k": "ten"})
    with pytest.raises(ConfigError):
        resolve_config("nope")


def test_run_experiment_job_count_invariant(tmp_path):
    conf = resolve_config("vanish-profile", {"n_seeds": "3", "T": "15", "d": "4", "max_gap": "5"})
    a = run_experiment("vanish-profile", conf, seed=2, jobs=1)
    b = run_experiment("vanish-profile", conf, seed=2, jobs=2)
    write_report(a, tmp_path / "a")
    write_report(b, tmp_path / "b")
    for name in a.tables:
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)
    manifests = [(tmp_path / run / "MANIFEST.txt").read_text() for run in ("a", "b")]
    assert manifests[0] == manifests[1]


def test_run_experiment_stability_from_files(tmp_path):
    w = tmp_path / "w.json"
    io.save_weights(w, RnnParams(W=np.diag([0.5, 0.2]), U=np.ones((2, 1))))
    inputs = tmp_path / "x.csv"
    io.write_csv(inputs, ("x0",), [(0.3,), (-0.2,)])
    conf = resolve_config("stability-report", {"weights": str(w), "inputs": str(inputs),
                                               "restarts": "2", "ascent_steps": "20"})
    rep = run_experiment("stability-report", conf)
    assert rep.data["by_r"][1] <= 0.5 + 1e-6
