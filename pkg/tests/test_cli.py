import json
import subprocess
import sys

import pytest

from dbnmon.cli import EXIT_INFERENCE, EXIT_INVALID, EXIT_IO, EXIT_OK, main
from dbnmon.io import load_model, save_model
from test_model import chain_model


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture
def model_path(tmp_path):
    path = tmp_path / "model.json"
    assert run("gen", "--topology", "two-cluster", "--nodes", 2, "--cross", 1, "--seed", 4, "--out", path) == EXIT_OK
    return path


@pytest.fixture
def obs_path(tmp_path, model_path):
    path = tmp_path / "traj.csv"
    assert run("simulate", "--model", model_path, "--steps", 6, "--seed", 5, "--out", path) == EXIT_OK
    return path


class TestCommands:
    def test_gen_both_topologies(self, tmp_path):
        a = tmp_path / "a.json"
        assert run("gen", "--topology", "random-parents", "--nodes", 8, "--parents", 2, "--skew", 0.1,
                   "--seed", 1, "--out", a) == EXIT_OK
        m = load_model(a)
        assert len(m.state_names) == 8
        assert all(len([p for p in m.transition[n].parents]) == 2 for n in m.state_names)

    def test_simulate(self, tmp_path, model_path, obs_path):
        lines = obs_path.read_text().splitlines()
        assert lines[0] == "t,X0,X1,X2,X3,Y0,Y1,Y2,Y3"
        assert len(lines) == 8
        only = tmp_path / "obs.csv"
        run("simulate", "--model", model_path, "--steps", 6, "--seed", 5, "--out", only, "--observations-only")
        assert only.read_text().splitlines()[0] == "t,Y0,Y1,Y2,Y3"

    @pytest.mark.parametrize("extra", [
        ["--algorithm", "exact"],
        ["--algorithm", "pf", "--particles", 200, "--resample", "systematic"],
        ["--algorithm", "bk", "--clusters", "X0,X1;X2,X3"],
        ["--algorithm", "fp1", "--particles", 30, "--clusters", "X0,X1;X2,X3"],
        ["--algorithm", "fp2", "--particles", 100, "--clusters", "X0,X1,X2;X2,X3"],
        ["--algorithm", "fp3", "--particles", 100, "--clusters", "X0,X1,X2;X2,X3"],
    ])
    def test_filter(self, tmp_path, model_path, obs_path, extra):
        out = tmp_path / "beliefs.csv"
        assert run("filter", "--model", model_path, "--obs", obs_path, "--seed", 2, "--out", out, *extra) == EXIT_OK
        lines = out.read_text().splitlines()
        assert lines[0].startswith("t,log_lik_increment,X0=0,X0=1")
        assert len(lines) == 8
        for line in lines[1:]:
            values = [float(x) for x in line.split(",")[2:]]
            for k in range(0, len(values), 2):
                assert values[k] + values[k + 1] == pytest.approx(1.0)

    def test_clusters_file(self, tmp_path, model_path, obs_path):
        cf = tmp_path / "model.clusters"
        cf.write_text("X0,X1\nX2,X3\n")
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run("filter", "--model", model_path, "--obs", obs_path, "--algorithm", "bk", "--clusters-file", cf,
            "--seed", 0, "--out", a)
        run("filter", "--model", model_path, "--obs", obs_path, "--algorithm", "bk", "--clusters", "X0,X1;X2,X3",
            "--seed", 0, "--out", b)
        assert a.read_bytes() == b.read_bytes()

    def test_verbose_fp3_prints_clique_tree(self, tmp_path, model_path, obs_path, capsys):
        run("-vv", "filter", "--model", model_path, "--obs", obs_path, "--algorithm", "fp3", "--particles", 20,
            "--clusters", "X0,X1;X2,X3", "--seed", 0, "--out", tmp_path / "b.csv")
        err = capsys.readouterr().err
        assert "cliques" in err and "rows=" in err

    def test_join_order_and_table_dump(self, tmp_path, model_path, obs_path):
        common = ["filter", "--model", model_path, "--obs", obs_path, "--algorithm", "fp2", "--particles", 60,
                  "--clusters", "X0,X1,X2;X2,X3", "--seed", 1]
        dump = tmp_path / "tables"
        assert run(*common, "--out", tmp_path / "a.csv", "--join-order", "1,0", "--dump-tables", dump) == EXIT_OK
        files = sorted(p.name for p in dump.iterdir())
        assert files[:2] == ["t0000_c0.csv", "t0000_c1.csv"] and len(files) == 14
        assert (dump / "t0003_c1.csv").read_text().startswith("X2,X3,weight\n")
        assert run(*common, "--out", tmp_path / "b.csv", "--join-order", "0,0") == EXIT_INVALID
        assert run(*common, "--out", tmp_path / "b.csv", "--join-order", "x") == EXIT_INVALID

    def test_bench(self, tmp_path, model_path, capsys):
        cfg = {"model": {"path": model_path.name}, "steps": 4, "trials": 2, "seed": 1,
               "algorithms": [{"algorithm": "exact"}, {"name": "pf", "algorithm": "pf", "particles": 50}]}
        (tmp_path / "exp.json").write_text(json.dumps(cfg))
        out, summary = tmp_path / "r.csv", tmp_path / "s.json"
        assert run("bench", "--config", tmp_path / "exp.json", "--out", out, "--summary", summary) == EXIT_OK
        assert out.read_text().startswith("trial,t,algorithm,metric,value\n")
        assert json.loads(summary.read_text())["config"]["trials"] == 2
        assert "-log lik." in capsys.readouterr().out

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "dbnmon", "--version"], capture_output=True, text=True)
        assert proc.returncode == 0 and proc.stdout.startswith("dbnmon ")


class TestExitCodes:
    def test_invalid_model(self, tmp_path, obs_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{ nope")
        assert run("simulate", "--model", bad, "--steps", 2, "--seed", 0, "--out", tmp_path / "x.csv") == EXIT_INVALID

    def test_invalid_clustering(self, tmp_path, model_path, obs_path):
        assert run("filter", "--model", model_path, "--obs", obs_path, "--algorithm", "bk", "--clusters", "X0",
                   "--seed", 0, "--out", tmp_path / "x.csv") == EXIT_INVALID

    def test_missing_file(self, tmp_path):
        assert run("simulate", "--model", tmp_path / "none.json", "--steps", 2, "--seed", 0,
                   "--out", tmp_path / "x.csv") == EXIT_IO

    def test_inference_failure(self, tmp_path):
        model = tmp_path / "chain.json"
        save_model(chain_model(p_stay=1.0, accuracy=1.0), model)
        obs = tmp_path / "obs.csv"
        obs.write_text("t,Y\n0,0\n1,1\n")
        assert run("filter", "--model", model, "--obs", obs, "--algorithm", "pf", "--particles", 10,
                   "--seed", 0, "--out", tmp_path / "b.csv") == EXIT_INFERENCE

    def test_usage_error(self):
        with pytest.raises(SystemExit) as info:
            run("filter")
        assert info.value.code == EXIT_INVALID


class TestDeterminism:
    def test_every_command_repeats_byte_for_byte(self, tmp_path):
        outputs = []
        for rep in ("a", "b"):
            d = tmp_path / rep
            d.mkdir()
            run("gen", "--topology", "two-cluster", "--nodes", 2, "--seed", 9, "--out", d / "m.json")
            run("simulate", "--model", d / "m.json", "--steps", 5, "--seed", 3, "--out", d / "t.csv")
            run("filter", "--model", d / "m.json", "--obs", d / "t.csv", "--algorithm", "fp2", "--particles", 50,
                "--clusters", "X0,X1;X2,X3", "--seed", 7, "--out", d / "b.csv")
            (d / "e.json").write_text(json.dumps({"model": {"path": "m.json"}, "steps": 3, "trials": 2,
                                                  "algorithms": [{"algorithm": "pf", "particles": 40}]}))
            run("bench", "--config", d / "e.json", "--out", d / "r.csv", "--summary", d / "s.json")
            rows = [ln for ln in (d / "r.csv").read_text().splitlines() if ",wall_ms," not in ln]
            summary = json.loads((d / "s.json").read_text())
            summary.pop("timing")
            outputs.append([(d / "m.json").read_bytes(), (d / "t.csv").read_bytes(), (d / "b.csv").read_bytes(),
                            rows, summary])
        assert outputs[0] == outputs[1]
