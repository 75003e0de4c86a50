import subprocess
import sys

import pytest

from crowdagg.cli import DEFAULT_SEED, main


def _config(tmp_path, **over):
    values = {"n_workers": 20, "n_tasks": 15, "probe_count": 3, "seed": 4, **over}
    path = tmp_path / "crowd.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    assert main(["generate", str(_config(tmp_path)), "--out", str(out)]) == 0
    return out


def test_generate_writes_four_files(tmp_path, capsys):
    out = tmp_path / "gen"
    cfg = tmp_path / "t1.cfg"
    cfg.write_text("seed = 2015\n")  # all other keys at the table-1 defaults
    assert main(["generate", str(cfg), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["answers.csv", "params.csv", "probes.csv",
                                                     "truth.csv"]
    assert len((out / "answers.csv").read_text().splitlines()) == 1 + 100 * 100
    assert len((out / "probes.csv").read_text().splitlines()) == 1 + 10
    echoed = capsys.readouterr().out
    assert "seed = 2015" in echoed and "diff_var = 250.0" in echoed


def test_generate_task_params_flag(tmp_path):
    out = tmp_path / "gen"
    assert main(["generate", str(_config(tmp_path)), "--out", str(out), "--task-params"]) == 0
    assert (out / "task_params.csv").read_text().startswith("task_id,dtilde,z\n")


def test_generate_without_probes(tmp_path):
    out = tmp_path / "gen"
    assert main(["generate", str(_config(tmp_path, probe_count=0)), "--out", str(out)]) == 0
    assert (out / "probes.csv").read_text() == "task_id,answer\n"


def test_generate_seed_override(tmp_path):
    cfg = _config(tmp_path)
    main(["generate", str(cfg), "--out", str(tmp_path / "a")])
    main(["generate", str(cfg), "--out", str(tmp_path / "b"), "--seed", "99"])
    assert (tmp_path / "a/answers.csv").read_bytes() != (tmp_path / "b/answers.csv").read_bytes()


def test_generate_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("n_workers = lots\n")
    assert main(["generate", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "invalid config" in capsys.readouterr().err


def test_generate_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["generate", str(_config(tmp_path)), "--out", str(blocker / "sub")]) == 2


def test_aggregate_us_neg(dataset, tmp_path):
    out = tmp_path / "neg"
    assert main(["aggregate", "us-neg", str(dataset / "answers.csv"), "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"decisions.csv", "weights.csv", "objective_trace.csv"}
    assert (out / "weights.csv").read_text().startswith("worker_id,weight,intention\n")
    assert len((out / "decisions.csv").read_text().splitlines()) == 1 + 15


def test_aggregate_ss_gem(dataset, tmp_path):
    out = tmp_path / "gem"
    argv = ["aggregate", "ss-gem", str(dataset / "answers.csv"), "--probes",
            str(dataset / "probes.csv"), "--out", str(out)]
    assert main(argv) == 0
    names = {p.name for p in out.iterdir()}
    assert {"decisions.csv", "params.csv", "ll_trace.csv", "posteriors.csv"} <= names
    assert (out / "ll_trace.csv").read_text().startswith("iter,loglik\n0,")


def test_aggregate_ss_without_probes(dataset, tmp_path, capsys):
    argv = ["aggregate", "ss-sw", str(dataset / "answers.csv"), "--out", str(tmp_path / "o")]
    assert main(argv) == 2
    assert "probe" in capsys.readouterr().err


def test_aggregate_unknown_method(dataset, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["aggregate", "median", str(dataset / "answers.csv"), "--out", str(tmp_path / "o")])
    assert exc.value.code == 2


def test_aggregate_missing_file(tmp_path):
    assert main(["aggregate", "plu", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == 2


def test_aggregate_default_seed_is_echoed(dataset, tmp_path, capsys):
    main(["aggregate", "plu", str(dataset / "answers.csv"), "--out", str(tmp_path / "o")])
    assert f"seed = {DEFAULT_SEED}" in capsys.readouterr().out


def test_aggregate_with_graph(dataset, tmp_path):
    graph = tmp_path / "g.csv"
    graph.write_text("task_id,worker_id\n" + "".join(f"t{i},w{i}\nt{i},w{i + 1}\n" for i in range(1, 16)))
    out = tmp_path / "o"
    argv = ["aggregate", "us-sw", str(dataset / "answers.csv"), "--graph", str(graph), "--out", str(out)]
    assert main(argv) == 0
    assert len((out / "weights.csv").read_text().splitlines()) == 1 + 16


def test_score(dataset, tmp_path, capsys):
    out = tmp_path / "s"
    truth = dataset / "truth.csv"
    argv = ["score", str(truth), str(truth), "--probes", str(dataset / "probes.csv"), "--out", str(out)]
    assert main(argv) == 0
    assert "errors = 0\nscored_tasks = 12" in capsys.readouterr().out
    assert (out / "score.csv").read_text() == "errors,scored_tasks\n0,12\n"


def test_score_missing_decision(dataset, tmp_path):
    partial = tmp_path / "d.csv"
    partial.write_text("task_id,answer\nt1,1\n")
    assert main(["score", str(partial), str(dataset / "truth.csv")]) == 2


def test_experiment_table1_shape(tmp_path):
    out = tmp_path / "t1"
    assert main(["experiment", "table1", "--out", str(out), "--trials", "1"]) == 0
    rows = (out / "results.csv").read_text().splitlines()[1:]
    assert len(rows) == 5 * 6
    assert {r.split(",")[0] for r in rows} == {"4000", "2000", "1000", "500", "250"}
    assert all(r.split(",")[3] == "0.0000" for r in rows)
    assert {"recovery.csv", "accuracy_hist.csv"} <= {p.name for p in out.iterdir()}


def test_experiment_table5_grid(tmp_path):
    out = tmp_path / "t5"
    assert main(["experiment", "table5", "--out", str(out), "--trials", "1"]) == 0
    grid = [ln for ln in (out / "results.md").read_text().splitlines() if ln.startswith("|")]
    assert len(grid) == 2 + 5 and grid[0].count("|") == 8


def test_experiment_bad_trials(tmp_path):
    assert main(["experiment", "table1", "--out", str(tmp_path), "--trials", "0"]) == 2


def test_experiment_unknown_spec(tmp_path):
    assert main(["experiment", "table9", "--out", str(tmp_path)]) == 2


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as exc:
        main(["score", "a", "b", "--bogus"])
    assert exc.value.code == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "crowdagg", "generate", str(_config(tmp_path)),
                           "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[-1] == "---"
