import subprocess
import sys

import numpy as np
import pytest

import sodgp.cli as cli
from sodgp.dataio import read_history
from sodgp.errors import NumericalDivergence


@pytest.fixture
def toy_csv(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, (60, 2))
    y = np.sin(x[:, 0]) + 0.5 * x[:, 1] + 0.05 * rng.standard_normal(60)
    path = tmp_path / "toy.csv"
    lines = ["a,b,target"] + [f"{a!r},{b!r},{t!r}" for (a, b), t in zip(x.tolist(), y.tolist())]
    path.write_text("\n".join(lines) + "\n")
    return path


FAST = ["--iters", "20", "--batch", "16", "--samples-train", "2", "--samples-predict", "5",
        "--subset-size", "8", "--log-every", "5", "--quiet"]


def test_train_writes_model_and_history(toy_csv, tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["train", "--data", str(toy_csv), "--layers", "1", "--iters", "100",
                     "--log-every", "10", "--batch", "16", "--samples-train", "2",
                     "--subset-size", "8", "--out", str(out), "--quiet"])
    assert code == 0
    assert (out / "model_seed0.json").is_file()
    assert len(read_history(out / "history_seed0.csv")) == 100 // 10
    assert "final elbo" in capsys.readouterr().out


def test_missing_file_exit_code(tmp_path, capsys):
    code = cli.main(["train", "--data", str(tmp_path / "absent.csv")])
    assert code == 2
    assert "absent.csv" in capsys.readouterr().err


def test_usage_errors(toy_csv, tmp_path):
    assert cli.main([]) == 2
    assert cli.main(["train", "--data", str(toy_csv), "--subset-method", "leverage"]) == 2
    assert cli.main(["train", "--data", str(toy_csv), "--repeats", "0"]) == 2
    assert cli.main(["train", "--data", str(toy_csv), "--target", "nope",
                     "--out", str(tmp_path)] + FAST) == 2


def test_repeats_and_eval(toy_csv, tmp_path, capsys):
    out = tmp_path / "rep"
    assert cli.main(["train", "--data", str(toy_csv), "--repeats", "3", "--out", str(out)] + FAST) == 0
    assert sorted(p.name for p in out.glob("model_seed*.json")) == \
        ["model_seed0.json", "model_seed1.json", "model_seed2.json"]
    capsys.readouterr()
    assert cli.main(["eval", "--model", str(out), "--samples-predict", "5"]) == 0
    text = capsys.readouterr().out
    import re
    assert re.search(r"NLPP -?\d+\.\d{3}\(\d+\.\d{3}\)", text)
    assert (out / "results.csv").is_file()
    assert cli.main(["eval", "--model", str(out / "model_seed1.json")]) == 0


def test_eval_dimension_mismatch(toy_csv, tmp_path, capsys):
    out = tmp_path / "m"
    cli.main(["train", "--data", str(toy_csv), "--out", str(out)] + FAST)
    wide = tmp_path / "wide.csv"
    wide.write_text("a,b,c,y\n1,2,3,4\n5,6,7,8\n")
    capsys.readouterr()
    assert cli.main(["eval", "--model", str(out / "model_seed0.json"), "--data", str(wide)]) == 2
    assert "features" in capsys.readouterr().err


def test_predict_writes_csv(toy_csv, tmp_path):
    out = tmp_path / "p"
    cli.main(["train", "--data", str(toy_csv), "--out", str(out)] + FAST)
    dest = tmp_path / "pred.csv"
    assert cli.main(["predict", "--model", str(out / "model_seed0.json"), "--data", str(toy_csv),
                     "--target", "target", "--out", str(dest), "--samples-predict", "4"]) == 0
    lines = dest.read_text().splitlines()
    assert lines[0] == "mean,variance" and len(lines) == 61
    assert all(float(line.split(",")[1]) > 0 for line in lines[1:])


def test_config_file_and_override(toy_csv, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# toy run\ndata = {toy_csv}\niters = 10\nsubset-size = 6\nbatch = 16\n"
                   f"samples_train = 2\nlog_every = 5\nquiet = true\nout = {tmp_path / 'c'}\n")
    assert cli.main(["train", "--config", str(cfg)]) == 0
    assert len(read_history(tmp_path / "c" / "history_seed0.csv")) == 2
    assert cli.main(["train", "--config", str(cfg), "--iters", "15"]) == 0
    assert len(read_history(tmp_path / "c" / "history_seed0.csv")) == 3
    bad = tmp_path / "bad.cfg"
    bad.write_text("iterations = 5\n")
    assert cli.main(["train", "--config", str(bad)]) == 2


def test_numeric_failure_exit_code(toy_csv, tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise NumericalDivergence(3)

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--data", str(toy_csv), "--out", str(tmp_path)] + FAST) == 1


def test_benchmark_suite_and_resume(toy_csv, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SODGP_THREADS", "1")
    out = tmp_path / "bench"
    args = ["benchmark", "--data", str(toy_csv), "--depths", "2,3", "--repeats", "2",
            "--out", str(out)] + FAST
    assert cli.main(args) == 0
    rows = (out / "results.csv").read_text().splitlines()
    assert len(rows) == 1 + 4
    table = (out / "results.md").read_text()
    assert "SoD-DGP2" in table and "SoD-DGP3" in table and "2/2" in table
    capsys.readouterr()
    assert cli.main(args) == 0
    assert capsys.readouterr().out.count("reused") == 4


def test_benchmark_records_failures(toy_csv, tmp_path, monkeypatch):
    monkeypatch.setenv("SODGP_THREADS", "1")
    real = cli.run_one

    def flaky(cfg, seed, out_dir, progress=None):
        if seed == 1:
            raise NumericalDivergence(0)
        return real(cfg, seed, out_dir, progress)

    monkeypatch.setattr(cli, "run_one", flaky)
    out = tmp_path / "bench"
    code = cli.main(["benchmark", "--data", str(toy_csv), "--repeats", "2", "--out", str(out)] + FAST)
    assert code == 1
    text = (out / "results.csv").read_text()
    assert "numeric" in text and ",ok" in text
    assert "1/2" in (out / "results.md").read_text()


def test_bad_thread_setting(toy_csv, tmp_path, monkeypatch):
    monkeypatch.setenv("SODGP_THREADS", "many")
    assert cli.main(["benchmark", "--data", str(toy_csv), "--out", str(tmp_path)] + FAST) == 2


def test_mean_std_format():
    assert cli.mean_std([2.3, 2.5]) == "2.400(0.141)"
    assert cli.mean_std([1.0]) == "1.000(0.000)"


def test_module_entry_point(toy_csv, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sodgp", "train", "--data", str(toy_csv),
                           "--out", str(tmp_path)] + FAST, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "final elbo" in proc.stdout
