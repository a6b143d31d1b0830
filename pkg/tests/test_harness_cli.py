import json
import subprocess
import sys

import numpy as np
import pytest

from surrogate_hmc.cli import main
from surrogate_hmc.harness import (
    ConfigError, DataMissing, RunConfig, build_model, execute, experiment_betabin,
    probit_configs, reference_truth, summarize,
)


def _write(path, record):
    path.write_text(json.dumps(record))
    return path


def test_config_round_trip_and_unknown_fields():
    cfg = RunConfig(model="probit", sampler="vhmc", s=50)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({"model": "gaussian", "colour": 1})
    assert info.value.field == "colour"


@pytest.mark.parametrize("record, field", [
    ({"sampler": "nuts"}, "sampler"),
    ({"T": 0}, "T"),
    ({"L": 2.5}, "L"),
    ({"epsilon": -1}, "epsilon"),
    ({"target_accept": 1.0}, "target_accept"),
    ({"scale": 1.5}, "scale"),
    ({"model": "svm"}, "model"),
    ({"model": "probit", "model_params": {"M": 3}}, "model_params.M"),
    ({"schedule": {"kind": "cosine"}}, "schedule"),
    ({"init": "somewhere"}, "init"),
])
def test_config_field_errors(record, field):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict(record)
    assert info.value.field == field


def test_cli_invalid_config_exit_2(tmp_path, capsys):
    path = _write(tmp_path / "c.json", {"model": "gaussian", "L": 0})
    assert main(["sample", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "L:" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["sample", "--config", str(tmp_path / "bad.json")]) == 2
    assert main(["sample", "--config", str(tmp_path / "absent.json")]) == 2


def test_cli_missing_data_exit_3(tmp_path, capsys):
    path = _write(tmp_path / "c.json", {"model": "logistic", "model_params":
                                        {"data": str(tmp_path / "a9a.txt")}})
    assert main(["sample", "--config", str(path), "--out", str(tmp_path / "o")]) == 3
    assert "a9a.txt" in capsys.readouterr().err
    assert main(["experiment", "logistic", "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "e")]) == 3
    assert main(["experiment", "ica", "--out", str(tmp_path / "e")]) == 3


def test_cli_gaussian_hmc_trace(tmp_path):
    path = _write(tmp_path / "c.json", {"model": "gaussian", "sampler": "hmc", "T": 1000,
                                        "epsilon": 0.3, "L": 5, "seed": 3})
    assert main(["sample", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
    lines = (tmp_path / "a" / "trace.csv").read_text().splitlines()
    assert len(lines) == 1001
    assert lines[0] == "step,theta_0,theta_1,accepted,delta_H,grad_evals_cum,wall_ms"
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 3 and manifest["config"]["T"] == 1000
    assert manifest["outputs"]["trace"]["rows"] == 1000


def test_cli_vhmc_betabin_manifest_and_determinism(tmp_path):
    record = {"model": "betabin", "sampler": "vhmc", "T": 400, "epsilon": 0.25, "L": 8,
              "s": 10, "lam": 1.0, "n_s": 200, "warmup": 100, "target_accept": 0.85}
    path = _write(tmp_path / "c.json", record)
    for name in ("a", "b"):
        assert main(["sample", "--config", str(path), "--out", str(tmp_path / name)]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
    assert (a / "surrogate.json").read_bytes() == (b / "surrogate.json").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["run"]["schedule"] == "mu_t = 1 - exp(-t/200)"
    assert manifest["config"]["n_s"] == 200
    assert manifest["run"]["seeds"]["master"] == 0
    # a different seed gives a different chain
    assert main(["sample", "--config", str(path), "--seed", "1", "--out",
                 str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "trace.csv").read_bytes() != (a / "trace.csv").read_bytes()


def test_module_entry_point(tmp_path):
    path = _write(tmp_path / "c.json", {"T": 0})
    proc = subprocess.run([sys.executable, "-m", "surrogate_hmc", "sample", "--config",
                           str(path)], capture_output=True, text=True)
    assert proc.returncode == 2 and "T:" in proc.stderr


def test_scale_only_subsamples():
    full = probit_configs(0, 1.0)["vhmc"]
    small = probit_configs(0, 0.1)["vhmc"]
    a, b = full.to_dict(), small.to_dict()
    assert {k for k in a if a[k] != b[k]} == {"scale"}
    model, info = build_model(small)
    assert info["N"] == 1000 and model.dim == 5


def test_probit_experiment_data():
    model, info = build_model(probit_configs(0)["vhmc"])
    assert model.n_data == 10000 and model.dim == 5
    assert info["params"]["prior_var"] == 100.0


def test_logistic_synthetic_model():
    cfg = RunConfig(model="logistic", model_params={"synthetic": True, "N": 300})
    model, info = build_model(cfg)
    assert model.dim == 51 and model.n_data == 300
    with pytest.raises(DataMissing):
        build_model(RunConfig(model="logistic"))


def test_logistic_libsvm_file(tmp_path):
    from surrogate_hmc.datasets import save_libsvm, synth_adult_like

    X, y = synth_adult_like(200, 0)
    save_libsvm(tmp_path / "a9a", X, y)
    cfg = RunConfig(model="logistic", model_params={"data": str(tmp_path / "a9a")}, scale=0.5)
    model, info = build_model(cfg)
    assert model.n_data == 100 and model.dim == 51


def test_ica_matrix_file(tmp_path):
    from surrogate_hmc.datasets import synth_meg_like

    X, _ = synth_meg_like(300, 8, 0)
    np.savetxt(tmp_path / "meg.txt", X + 5)
    cfg = RunConfig(model="ica", model_params={"data": str(tmp_path / "meg.txt")})
    model, info = build_model(cfg)
    assert model.dim == 25 and model.n_data == 300


def test_sgld_run_from_config():
    cfg = RunConfig(model="logistic", model_params={"synthetic": True, "N": 1000},
                    sampler="sgld", T=200, batch_size=100,
                    schedule={"kind": "polynomial", "a": 5e-3, "b": 1e4, "delta": 0.5})
    trace, sur, details = execute(cfg)
    assert len(trace) == 200 and sur is None
    assert trace.grad_evals[-1] == pytest.approx(200 * 0.1)


def test_reference_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("SURROGATE_HMC_CACHE", str(tmp_path / "cache"))
    cfg = RunConfig(model="gaussian", T=2000, epsilon=0.3, L=5, warmup=200)
    t1 = reference_truth(cfg)
    files = list((tmp_path / "cache").glob("truth-*.npz"))
    assert len(files) == 1
    t2 = reference_truth(cfg)
    np.testing.assert_array_equal(t1.mean, t2.mean)
    assert t2.provenance["samples"] == 1800
    reference_truth(RunConfig(**{**cfg.to_dict(), "seed": 1}))
    assert len(list((tmp_path / "cache").glob("truth-*.npz"))) == 2


def test_betabin_experiment_rows(tmp_path):
    rows = experiment_betabin(out=tmp_path, s_values=(3, 5), n_seeds=1, T=300)
    kl = summarize(rows, "kl")
    sm = summarize(rows, "sm")
    assert set(kl) == set(sm) == {3, 5}
    assert all(np.isfinite(v) and v >= 0 for v in kl.values())
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("metric,t_or_s,value,seed")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["experiment"] == "betabin" and manifest["settings"]["lam"] == 1.0
