import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crowdagg.data import AnswerMatrix, ProbeSet
from crowdagg.experiment import (ExperimentError, ExperimentSpec, METHODS, accuracy_histogram,
                                 canonical_method, load_spec, recovery_stats, render_markdown,
                                 run_experiment, run_method, score, worker_accuracies,
                                 write_results)
from crowdagg.models import ModelParams


def _params(d, dt):
    return ModelParams(np.ones(len(d)), d, np.ones(len(d)), dt)


# ---------------------------------------------------------------------------
# scoring


def test_score_perfect():
    truth = np.arange(20) % 5
    assert score(truth, truth, ProbeSet({0: 0})) == 0


def test_score_all_wrong_outside_probes():
    truth = np.zeros(100, int)
    probes = ProbeSet({i: 0 for i in range(10)})
    dec = np.ones(100, int)
    assert score(dec, truth, probes) == 90


@given(seed=st.integers(0, 2**31))
def test_score_matches_direct_count(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 4, 40)
    dec = truth.copy()
    flip = rng.choice(40, 20, replace=False)
    dec[flip] = (dec[flip] + 1) % 4
    probe_ids = rng.choice(40, 5, replace=False)
    probes = ProbeSet({int(t): int(truth[t]) for t in probe_ids})
    assert score(dec, truth, probes) == len(set(flip) - set(probe_ids))


def test_score_by_task_id():
    truth = {"t1": 1, "t2": 2, "t3": 3}
    assert score({"t1": 1, "t2": 1, "t3": 1}, truth, {"t3"}) == 1
    with pytest.raises(ExperimentError, match="t3"):
        score({"t1": 1, "t2": 2}, truth)


# ---------------------------------------------------------------------------
# recovery statistics


def test_recovery_identity_and_negation():
    rng = np.random.default_rng(0)
    d, dt = rng.normal(size=30), rng.normal(size=40)
    assert recovery_stats(_params(d, dt), _params(d, dt)) == pytest.approx((1.0, 1.0))
    assert recovery_stats(_params(d, dt), _params(-d, -dt)) == pytest.approx((-1.0, -1.0))


@pytest.mark.parametrize("snr", [0.5, 1.0, 4.0])
def test_recovery_attenuation(snr):
    rng = np.random.default_rng(7)
    n = 20000
    d = rng.normal(0, 1, n)
    noisy = d + rng.normal(0, 1 / math.sqrt(snr), n)
    corr, _ = recovery_stats(_params(d, [0.0, 1.0]), _params(noisy, [0.0, 2.0]))
    assert corr == pytest.approx(1 / math.sqrt(1 + 1 / snr), abs=0.05)


def test_recovery_zero_variance_is_nan():
    corr, corr_t = recovery_stats(_params([1.0, 1.0], [0.0, 1.0]), _params([0.3, 0.5], [2.0, 3.0]))
    assert math.isnan(corr) and corr_t == pytest.approx(1.0)


def test_worker_accuracy_histogram():
    m = AnswerMatrix.from_dense([[0, 1, 0], [1, 1, -1]], 2)
    acc = worker_accuracies(m, np.array([0, 1]))
    assert acc.tolist() == [1.0, 0.5, 1.0]
    counts, edges = accuracy_histogram(acc)
    assert counts.sum() == 3 and counts[-1] == 2 and len(edges) == 11


# ---------------------------------------------------------------------------
# method dispatch


@pytest.mark.parametrize("method", METHODS)
def test_every_method_runs(method):
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 3, 12)
    dense = np.repeat(truth[:, None], 5, axis=1)
    m = AnswerMatrix.from_dense(dense, 3)
    res = run_method(method.lower(), m, ProbeSet({0: int(truth[0])}), seed=1)
    assert np.array_equal(res.decisions, truth)


def test_unknown_method():
    with pytest.raises(ExperimentError):
        canonical_method("MAJORITY")
    m = AnswerMatrix.from_dense([[0]], 2)
    with pytest.raises(ExperimentError, match="probe"):
        run_method("SS-NEG", m, ProbeSet(), seed=0)


# ---------------------------------------------------------------------------
# specs


def test_spec_round_trip():
    spec = load_spec("table5")
    again = ExperimentSpec.from_dict({k: str(v) for k, v in spec.to_dict().items()})
    assert again == spec
    assert len(spec.points()) == 30


@pytest.mark.parametrize("raw,match", [
    ({"protocol": "fancy"}, "protocol"),
    ({"methods": "PLU, XX"}, "XX"),
    ({"values": ""}, "empty"),
    ({"n_trials": "0"}, "n_trials"),
    ({"sweep": "bogus"}, "bogus"),
    ({"colour": "red"}, "colour"),
    ({"methods": "PLU", "hyb_wins": "true"}, "US-HYB"),
    ({"protocol": "sha", "sweep": "spammer_fraction", "values": "0.8",
      "adversary_fraction": "0.5"}, "sum to at most 1"),
])
def test_spec_validation(raw, match):
    with pytest.raises((ExperimentError, ValueError), match=match):
        ExperimentSpec.from_dict(raw)


def test_missing_spec_file():
    with pytest.raises(ExperimentError):
        load_spec("no/such/file.spec")


# ---------------------------------------------------------------------------
# runs


def _small_spec(**kw):
    base = dict(name="small", protocol="stochastic", methods=("PLU", "SS-NEG", "US-SW", "SS-GEM"),
                sweep="diff_var", values=(250.0, 1000.0), n_trials=3, probe_count=4, seed=5,
                generator={"n_workers": 12, "n_tasks": 20}, recovery=True, histogram=True)
    base.update(kw)
    return ExperimentSpec(**base)


def test_output_files_are_reproducible(tmp_path):
    spec = _small_spec()
    a = write_results(run_experiment(spec), tmp_path / "a")
    write_results(run_experiment(spec, jobs=2), tmp_path / "b")
    assert a == ["results.csv", "results.md", "recovery.csv", "accuracy_hist.csv"]
    for name in a:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = (tmp_path / "a" / "results.csv").read_text().splitlines()
    assert rows[0] == "sweep_value,method,mean_errors,std_errors,mean_runtime_ms"
    assert len(rows) == 1 + 2 * 4
    assert all(r.endswith(",NA") for r in rows[1:])


def test_means_are_plain_averages():
    spec = _small_spec()
    res = run_experiment(spec)
    for p in range(2):
        for m in spec.methods:
            errs = [r.errors[m] for r in res.reports[p]]
            assert all(isinstance(e, int) and 0 <= e <= 16 for e in errs)
            mean, std, _ = res.cell(p, m)
            assert mean == np.mean(errs) and std == pytest.approx(np.std(errs))


def test_probe_methods_skipped_without_probes(tmp_path):
    spec = _small_spec(probe_count=0, recovery=False, histogram=False)
    res = run_experiment(spec)
    assert res.cell(0, "SS-NEG") is None and res.cell(0, "PLU") is not None
    write_results(res, tmp_path)
    text = (tmp_path / "results.csv").read_text()
    assert "SS-NEG,NA,NA,NA" in text
    assert "skipped" in (tmp_path / "results.md").read_text()


def test_single_trial_has_zero_std():
    res = run_experiment(_small_spec(n_trials=1))
    assert all(res.cell(p, m)[1] == 0.0 for p in range(2) for m in res.spec.methods)


def test_timing_column():
    res = run_experiment(_small_spec(n_trials=1, timing=True, methods=("PLU",)))
    assert res.cell(0, "PLU")[2] >= 0.0


def test_all_hammer_crowd_has_no_errors():
    spec = ExperimentSpec(protocol="sha", methods=METHODS, sweep="spammer_fraction", values=(0.0,),
                          n_trials=2, probe_count=5, generator={"n_workers": 8, "n_tasks": 20})
    res = run_experiment(spec)
    for m in METHODS:
        assert res.cell(0, m)[0] == 0.0


def test_table2_errors_fall_with_degree():
    spec = load_spec("table2")
    res = run_experiment(spec)
    for m in spec.methods:
        means = [res.cell(p, m)[0] for p in range(len(spec.values))]
        assert all(b < a for a, b in zip(means, means[1:])), (m, means)


def test_low_spam_cell_neg_beats_plurality():
    # two workers per task puts plain plurality in the several-errors regime
    spec = load_spec("table5")
    spec.values, spec.column_values = (0.0,), (0.1,)
    spec.generator["degree"] = 2
    res = run_experiment(spec)
    plu_mean, neg_mean = res.cell(0, "PLU")[0], res.cell(0, "US-NEG")[0]
    assert 4.0 < plu_mean < 10.0
    assert neg_mean < plu_mean


def test_markdown_grid_shape():
    spec = load_spec("table5")
    spec.n_trials = 1
    res = run_experiment(spec)
    lines = [ln for ln in render_markdown(res).splitlines() if ln.startswith("|")]
    assert len(lines) == 2 + 5
    assert all(ln.count("|") == 8 for ln in lines)
    assert lines[2].split("|")[2].strip().count("/") == 3


def test_hyb_win_table(tmp_path):
    spec = load_spec("table7")
    spec.values, spec.column_values, spec.n_trials = (0.15,), (0.5,), 5
    res = run_experiment(spec)
    write_results(res, tmp_path)
    rows = (tmp_path / "hyb_wins.csv").read_text().splitlines()
    assert rows[0] == "sweep_value,trials,n_trials"
    assert rows[1].startswith("0.15/0.5,") and rows[1].endswith(",5")
