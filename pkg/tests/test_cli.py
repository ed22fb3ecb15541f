import csv
import json

import pytest

from qpeer.cli import main, parse_levels
from qpeer.simulate import preset


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--dgp", "A", "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def small_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    cfg = root / "dgp.json"
    cfg.write_text(json.dumps(preset("C", S=10, n_s=20).to_dict()))
    assert main(["simulate", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root / "data"


def data_args(d):
    return ["--edges", str(d / "network.csv"), "--nodes", str(d / "nodes.csv")]


def test_parse_levels():
    assert parse_levels("0,1/3,2/3,1").tolist() == [0, 1 / 3, 2 / 3, 1]
    with pytest.raises(ValueError):
        parse_levels("0,x")


def test_simulate_outputs(sim_dir):
    assert {p.name for p in sim_dir.iterdir()} == {"network.csv", "nodes.csv", "dgp.json", "manifest.json"}
    m = manifest(sim_dir)
    assert m["exit_code"] == 0 and m["seed"] == 3
    assert m["versions"]["bit_generator"] == "Philox"
    assert set(m["versions"]) >= {"qpeer", "python", "numpy", "scipy", "scikit-learn"}


def test_rerun_from_manifest_is_identical(sim_dir, tmp_path):
    argv = manifest(sim_dir)["argv"]
    argv[argv.index("--out") + 1] = str(tmp_path)
    assert main(argv) == 0
    for name in ("network.csv", "nodes.csv"):
        assert (tmp_path / name).read_bytes() == (sim_dir / name).read_bytes()


def test_estimate_recovers_truth(sim_dir, tmp_path):
    argv = ["estimate", *data_args(sim_dir), "--levels", "0,0.333,0.667,1", "--instruments", "type1", "--out", str(tmp_path)]
    assert main(argv) == 0
    res = json.loads((tmp_path / "result.json").read_text())
    lam = [res["structural"][f"lambda[{t}]"] for t in ("0", "0.333", "0.667", "1")]
    assert lam == pytest.approx([0, 0.05, 0.2, 0.3], abs=0.1)
    assert res["structural"]["lambda2"] == pytest.approx(0.2, abs=0.1)
    assert set(res["diagnostics"]) >= {"weak_instrument", "sargan_overid"}
    assert manifest(tmp_path)["outputs"] == [str(tmp_path / "result.json")]


def test_estimate_lim(small_dir, tmp_path):
    assert main(["estimate", *data_args(small_dir), "--model", "lim", "--cov-type", "robust", "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "result.json").read_text())
    assert res["model"] == "lim" and "lambda" in res["structural"]


def test_tests_command(small_dir, tmp_path):
    assert main(["test", *data_args(small_dir), "--compare", "0,0.5,1", "--max-distance", "2", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "tests.csv").open()))
    assert [r["test"] for r in rows] == [
        "encompassing_base_vs_compare", "encompassing_compare_vs_base", "sargan_type2", "wald_type2",
        "weak_instrument_type1", "weak_instrument_combined", "sargan_overid",
    ]
    assert set(json.loads((tmp_path / "tests.json").read_text())) == {r["test"] for r in rows}


def test_keyplayer_command(small_dir, tmp_path):
    argv = ["keyplayer", *data_args(small_dir), "--model", "quantile", "--compare", "lim", "--max-school-size", "50", "--out", str(tmp_path)]
    assert main(argv) == 0
    rows = list(csv.DictReader((tmp_path / "ranks.csv").open()))
    assert list(rows[0]) == ["subnet", "agent", "influence", "rank_quantile", "rank_lim"]
    assert len(rows) == 200
    assert -1 <= manifest(tmp_path)["rank_correlation"] <= 1


def test_keyplayer_size_filter_empty(small_dir, tmp_path):
    assert main(["keyplayer", *data_args(small_dir), "--max-school-size", "5", "--out", str(tmp_path)]) == 1
    assert "size filter" in manifest(tmp_path)["error"]


def test_montecarlo_command(tmp_path):
    cfg = tmp_path / "mc.json"
    cfg.write_text(json.dumps({"dgp": preset("A", S=6).to_dict(), "replications": 2, "tests": ["type2"]}))
    out = tmp_path / "out"
    assert main(["montecarlo", "--config", str(cfg), "--seed", "9", "--out", str(out)]) == 0
    m = manifest(out)
    assert m["completed"] == 2 and m["failures"] == 0 and m["seed"] == 9
    assert (out / "tests.csv").read_text().splitlines()[1].startswith("sargan_type2,")


def test_threads_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("QPEER_THREADS", "3")
    cfg = tmp_path / "mc.json"
    cfg.write_text(json.dumps({"dgp": preset("A", S=4).to_dict(), "replications": 1, "tests": [], "lim": False}))
    assert main(["montecarlo", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert manifest(tmp_path)["montecarlo"]["workers"] == 3


def test_unknown_flag(tmp_path, capsys):
    assert main(["simulate", "--bogus", "--out", str(tmp_path)]) == 1
    assert "usage" in capsys.readouterr().err
    m = manifest(tmp_path)
    assert m["exit_code"] == 1 and "bogus" in m["error"]


def test_missing_file(tmp_path):
    argv = ["estimate", "--edges", str(tmp_path / "nope.csv"), "--nodes", str(tmp_path / "nope2.csv"), "--out", str(tmp_path)]
    assert main(argv) == 1
    assert manifest(tmp_path)["exit_code"] == 1


def test_bad_levels(small_dir, tmp_path):
    assert main(["estimate", *data_args(small_dir), "--levels", "0,2", "--out", str(tmp_path)]) == 1


def test_numerical_failure_exit_code(small_dir, tmp_path):
    argv = ["estimate", *data_args(small_dir), "--levels", "0,0.5,0.500000001,1", "--out", str(tmp_path)]
    assert main(argv) == 2
    assert "singular" in manifest(tmp_path)["error"]
