import os

import numpy as np
import pytest

from stablernn import io
from stablernn.cells import LdsParams, RnnParams, init_params
from stablernn.cli import main
from stablernn.numerics import Rng, spectral_norm
from stablernn.stability import check_lstm_certificate


def _only_run_dir(root):
    dirs = [d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))]
    assert len(dirs) == 1
    return os.path.join(root, dirs[0])


def test_grad_check_default_passes(capsys):
    assert main(["grad-check", "--trials", "5"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_grad_check_zero_trials(capsys):
    assert main(["grad-check", "--trials", "0"]) == 0
    assert "no trials" in capsys.readouterr().out


def test_grad_check_corrupted_gradient_fails(capsys):
    assert main(["grad-check", "--trials", "2", "--families", "rnn", "--corrupt"]) == 5
    out = capsys.readouterr().out
    assert "FAIL seed=0" in out and "family=rnn" in out


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        main(["run", "no-such-experiment"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["grad-check", "--bogus"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["run", "counterexample", "--jobs", "0"])
    assert e.value.code == 2


def test_run_counterexample_flags_divergence(tmp_path, capsys):
    code = main(["run", "counterexample", "--a0=1.5", "--N", "100", "--out", str(tmp_path)])
    assert code == 0
    run = _only_run_dir(tmp_path)
    assert os.path.basename(run).startswith("counterexample-") and run.endswith("-seed0")
    header, rows = io.read_csv(os.path.join(run, "summary.csv"))
    assert rows[0][header.index("diverged")] == "1"
    out = capsys.readouterr().out
    assert "[counterexample]" in out and "a0 = 1.5" in out
    manifest = open(os.path.join(run, "MANIFEST.txt")).read()
    assert "summary.csv" in manifest and "config.txt" in manifest


def test_run_unknown_key_is_config_error(tmp_path, capsys):
    assert main(["run", "counterexample", "--bogus=1", "--out", str(tmp_path)]) == 3
    assert "bogus" in capsys.readouterr().err
    assert main(["run", "counterexample", "--N=many", "--out", str(tmp_path)]) == 3


def test_run_config_file_errors(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("[counterexample]\nN = 10\nnot a pair\n")
    assert main(["run", "counterexample", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    cfg.write_text("[nonsense]\nN = 10\n")
    assert main(["run", "counterexample", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    cfg.write_text("[run]\nexperiment = divergence\n")
    assert main(["run", "counterexample", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    assert main(["run", "counterexample", "--config", str(tmp_path / "missing.txt"),
                 "--out", str(tmp_path)]) == 3


def test_config_echo_reproduces_run(tmp_path):
    first = tmp_path / "first"
    args = ["run", "vanish-profile", "--seed", "7", "--n_seeds=2", "--T=12", "--d=4",
            "--max_gap=4"]
    assert main(args + ["--out", str(first)]) == 0
    run1 = _only_run_dir(first)
    second = tmp_path / "second"
    assert main(["run", "vanish-profile", "--config", os.path.join(run1, "config.txt"),
                 "--out", str(second), "--jobs", "2"]) == 0
    run2 = _only_run_dir(second)
    assert run2.endswith("-seed7")
    assert open(os.path.join(run1, "MANIFEST.txt")).read() == \
        open(os.path.join(run2, "MANIFEST.txt")).read()


def test_out_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("STABLERNN_OUT", str(tmp_path))
    assert main(["run", "counterexample", "--a0=0.0", "--N=5"]) == 0
    assert _only_run_dir(tmp_path).endswith("-seed0")


def test_project_stable_weights_unchanged(tmp_path, capsys):
    w = tmp_path / "w.json"
    p = LdsParams(W=np.diag([0.5, -0.25]), U=np.ones((2, 1)))
    io.save_weights(w, p)
    out = tmp_path / "p.json"
    assert main(["project", str(w), "--out", str(out)]) == 0
    q, _ = io.load_weights(out)
    assert q.W.tobytes() == p.W.tobytes()
    text = capsys.readouterr().out
    assert "certified: true" in text and "lambda: 0.5" in text


def test_project_spectral_cap(tmp_path, capsys):
    rng = Rng(3)
    W = rng.normal((5, 5))
    W *= 2.0 / spectral_norm(W)
    w = tmp_path / "w.json"
    io.save_weights(w, RnnParams(W=W, U=rng.normal((5, 2))))
    out = tmp_path / "p.json"
    assert main(["project", str(w), "--cap", "0.99", "--out", str(out)]) == 0
    q, _ = io.load_weights(out)
    assert spectral_norm(q.W) <= 0.99 + 1e-12
    assert "certified: true" in capsys.readouterr().out


def test_project_lstm_scheme(tmp_path, capsys):
    p = init_params("lstm", 3, 4, Rng(0), scale=1.0)
    assert not check_lstm_certificate(p).certified
    w = tmp_path / "w.json"
    io.save_weights(w, p)
    out = tmp_path / "p.json"
    assert main(["project", str(w), "--scheme", "lstm", "--out", str(out)]) == 0
    q, _ = io.load_weights(out)
    assert check_lstm_certificate(q).certified
    text = capsys.readouterr().out
    assert "family: lstm" in text and "certified: true" in text and "r: " in text


def test_project_errors(tmp_path, capsys):
    w = tmp_path / "w.json"
    io.save_weights(w, RnnParams(W=np.eye(2), U=np.ones((2, 1))))
    assert main(["project", str(w), "--scheme", "lstm", "--out", str(tmp_path / "o")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{\n\"format\": \n")
    assert main(["project", str(bad), "--out", str(tmp_path / "o")]) == 3
    assert "line" in capsys.readouterr().err
