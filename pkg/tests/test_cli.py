import json

import pytest

from malsde.cli import ConfigError, load_config, main


def _run(args):
    return main([str(a) for a in args])


def test_load_config_defaults_and_overrides(tmp_path):
    cfg = load_config(None, ["paths=500", "model.params.kappa=2.0"],
                      seed=7, workers=2)
    assert cfg["paths"] == 500
    assert cfg["model"]["params"]["kappa"] == 2.0
    assert cfg["seed"] == 7 and cfg["workers"] == 2


def test_load_config_rejects_unknown_key(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigError, match="bogus"):
        load_config(str(p), [])
    with pytest.raises(ConfigError, match="valid JSON"):
        q = tmp_path / "trunc.json"
        q.write_text("{")
        load_config(str(q), [])
    with pytest.raises(ConfigError):
        load_config(None, ["paths=not-an-int"])


def test_simulate_writes_outputs_and_manifest(tmp_path):
    code = _run(["simulate", "--out", tmp_path, "--set", "paths=2000",
                 "--set", "grid.steps=16"])
    assert code == 0
    moments = (tmp_path / "moments.csv").read_text().splitlines()
    assert moments[0] == "model,n,N,M,seed,p,sup_moment,se"
    assert len(moments) == 3  # p = 2 and p = 4
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["subcommand"] == "simulate"
    assert manifest["config"]["paths"] == 2000
    assert manifest["outputs"] == ["moments.csv"]
    assert {"package", "python", "numpy", "scipy"} <= manifest["versions"].keys()


def test_simulate_deterministic_constant_model(tmp_path):
    code = _run(["simulate", "--out", tmp_path,
                 "--set", "model.id=bm",
                 "--set", 'model.params={"dim":1,"x0":[2.0],"horizon":1.0,"sigma0":0.0}',
                 "--set", "paths=200", "--set", "grid.steps=8"])
    assert code == 0
    rows = (tmp_path / "moments.csv").read_text().splitlines()[1:]
    p2 = rows[0].split(",")
    assert float(p2[6]) == 4.0 and float(p2[7]) == 0.0  # [TRIVIAL] |x0|^p


def test_rerun_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    for out in (a, b):
        assert _run(["simulate", "--out", out, "--set", "paths=3000",
                     "--set", "grid.steps=16"]) == 0
    assert (a / "moments.csv").read_bytes() == (b / "moments.csv").read_bytes()


def test_density_worker_count_invariance(tmp_path):
    a, b = tmp_path / "w1", tmp_path / "w2"
    a.mkdir(), b.mkdir()
    common = ["density", "--set", "paths=4000", "--set", "grid.steps=16",
              "--set", 'density.y_grid=[-1.0,0.0,1.0]',
              "--set", 'density.alphas=[[]]']
    assert _run(common + ["--out", a, "--workers", "1"]) == 0
    assert _run(common + ["--out", b, "--workers", "2"]) == 0
    a_csv = (a / "density.csv").read_bytes()
    assert a_csv == (b / "density.csv").read_bytes()
    assert b"pass" in a_csv.splitlines()[0]


def test_exit_code_config_error(tmp_path):
    assert _run(["simulate", "--out", tmp_path, "--set", "bogus=1"]) == 2
    assert _run(["simulate", "--out", tmp_path,
                 "--set", "model.id=unknown-model"]) == 2


def test_exit_code_numerical_failure(tmp_path):
    # degenerate diffusion: every covariance matrix underflows the det floor
    code = _run(["density", "--out", tmp_path,
                 "--set", 'model.params={"dim":1,"x0":[0.5],"horizon":1.0,'
                          '"kappa":1.0,"mu":[0.0],"sigma0":0.0}',
                 "--set", "paths=500", "--set", "grid.steps=8",
                 "--set", 'density.y_grid=[0.0]',
                 "--set", 'density.alphas=[[]]'])
    assert code == 3


def test_oracle_subcommand_passes(tmp_path):
    code = _run(["oracle", "--out", tmp_path,
                 "--set", "model.id=bm",
                 "--set", 'model.params={"dim":1,"x0":[0.0],"horizon":1.0,"sigma0":1.0}',
                 "--set", "oracle.nodes=64"])
    assert code == 0
    lines = (tmp_path / "oracle.csv").read_text().splitlines()
    assert lines[0].startswith("model,alpha,N,lhs,rhs,gap")
    for row in lines[1:]:
        assert float(row.split(",")[-1]) <= 1e-6


def test_out_env_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("MALSDE_OUT", str(tmp_path))
    assert _run(["simulate", "--set", "paths=200", "--set", "grid.steps=8"]) == 0
    assert (tmp_path / "moments.csv").exists()


def test_config_file_plus_override(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"paths": 300, "grid": {"horizon": 1.0, "steps": 8}}))
    out = tmp_path / "out"
    out.mkdir()
    assert _run(["simulate", "--config", p, "--out", out,
                 "--set", "paths=400"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["paths"] == 400  # --set wins over the file
    assert manifest["config"]["grid"]["steps"] == 8
