import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crowdagg.data import AnswerMatrix
from crowdagg.models import (CrowdGenConfig, ModelParams, WorkerParams, _draw_answers, answer_pmf,
                             beta, beta_complex_adversary, beta_honest, beta_simple_adversary,
                             entry_pmf, generate_dataset, generate_mixed_skill_dataset,
                             generate_sha_dataset, load_crowd_config, save_params, sigmoid,
                             write_kv_file)

reals = st.floats(-60, 60, allow_nan=False)
ks = st.integers(2, 9)


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_honest_at_zero_delta():
    assert beta_honest(0.0, 5, True) == pytest.approx(0.6, abs=1e-15)
    assert beta_honest(0.0, 5, False) == pytest.approx(0.1, abs=1e-15)


def test_honest_limits():
    assert beta_honest(800.0, 5, True) == 1.0
    assert beta_honest(800.0, 5, False) == 0.0


def test_honest_scalar_value():
    s = _sig(0.3 * (1 - 8))
    assert beta_honest(0.3 * (1 - 8), 5, True) == pytest.approx(s + 0.2 * (1 - s), rel=1e-14)


def test_simple_adversary_examples():
    assert beta_simple_adversary(0.0, 5, True) == 0.5 / 5
    assert beta_simple_adversary(0.0, 5, False) == 0.5 / 5 + 0.5 / 4
    total = beta_simple_adversary(0.0, 5, True) + 4 * beta_simple_adversary(0.0, 5, False)
    assert total == pytest.approx(1.0, abs=1e-15)
    assert beta_simple_adversary(-800.0, 5, True) == 0.2
    assert beta_simple_adversary(-800.0, 5, False) == 0.2
    assert beta_simple_adversary(800.0, 5, True) == 0.0
    assert beta_simple_adversary(800.0, 5, False) == 0.25


def test_spammer_limit_makes_pmfs_coincide():
    for k in (2, 3, 7):
        for correct in (True, False):
            assert beta_honest(-900.0, k, correct) == beta_simple_adversary(-900.0, k, correct) == 1 / k


def _complex(d=5.0, a=1.0, theta=0.0, b=1.0):
    return WorkerParams(v=0, d=d, a=a, kind="complex", theta=theta, b=b)


def test_complex_adversary_regimes():
    w = _complex(d=10.0, a=5.0, theta=0.0, b=5.0)
    # easy task: answered correctly
    assert beta_complex_adversary(w, -20.0, 5, True) == pytest.approx(1.0, abs=1e-12)
    # task beyond the skill: uniform
    assert beta_complex_adversary(w, 40.0, 5, True) == pytest.approx(0.2, abs=1e-12)
    assert beta_complex_adversary(w, 40.0, 5, False) == pytest.approx(0.2, abs=1e-12)
    # between threshold and skill: behaves like a simple adversary
    assert beta_complex_adversary(w, 5.0, 5, True) == pytest.approx(0.0, abs=1e-9)
    assert beta_complex_adversary(w, 5.0, 5, False) == pytest.approx(0.25, abs=1e-9)


def test_complex_adversary_scalar_value():
    w = _complex(d=3.0, a=0.7, theta=1.0, b=1.3)
    sa, sb = _sig(0.7 * (3 - 2.0)), _sig(1.3 * (1 - 2.0))
    assert beta_complex_adversary(w, 2.0, 4, True) == pytest.approx((1 - sa) / 4 + sb * sa, rel=1e-13)
    assert beta_complex_adversary(w, 2.0, 4, False) == pytest.approx(
        (1 - sa) / 4 + (1 - sb) * sa / 3, rel=1e-13)


def test_complex_requires_threshold_below_skill():
    with pytest.raises(ValueError):
        _complex(d=1.0, theta=2.0)


def test_beta_dispatch():
    assert beta(WorkerParams(1, 2.0, 1.0), 1.0, 4, 2, 2) == beta_honest(1.0, 4, True)
    assert beta(WorkerParams(0, 2.0, 1.0), 1.0, 4, 2, 1) == beta_simple_adversary(1.0, 4, False)
    w = _complex()
    assert beta(w, 1.0, 4, 0, 0) == beta_complex_adversary(w, 1.0, 4, True)


@settings(max_examples=300, deadline=None)
@given(v=st.integers(0, 1), cplx=st.booleans(), d=reals, a=st.floats(-10, 10), gap=st.floats(0.01, 30),
       b=st.floats(-10, 10), dt=reals, k=ks, z=st.integers(0, 8))
def test_pmf_is_a_distribution(v, cplx, d, a, gap, b, dt, k, z):
    kind = "complex" if cplx else "simple"
    w = WorkerParams(v, d, a, kind, d - gap, b)
    pmf = answer_pmf(w, dt, k, z % k)
    assert np.all(pmf >= 0)
    assert abs(pmf.sum() - 1.0) < 1e-12


@given(x=reals, y=reals, k=ks)
def test_monotone_in_delta(x, y, k):
    lo, hi = min(x, y), max(x, y)
    assert beta_honest(lo, k, True) <= beta_honest(hi, k, True)
    assert beta_simple_adversary(lo, k, True) >= beta_simple_adversary(hi, k, True)


def test_sigmoid_is_stable():
    assert sigmoid(1000.0) == 1.0
    assert sigmoid(-1000.0) == 0.0
    assert np.isfinite(sigmoid(np.array([-1e308, 1e308]))).all()


def test_entry_pmf_matches_scalar_pmfs():
    params = ModelParams([1, 0, 0], [2.0, 3.0, 6.0], [0.5, 1.2, 0.8], [1.0, 4.0],
                         np.array(["simple", "simple", "complex"], dtype=object),
                         [np.nan, np.nan, 2.0], [np.nan, np.nan, 0.9])
    m = AnswerMatrix.from_dense(np.array([[0, 1, 2], [2, 2, 0]]), 3)
    p_c, p_w = entry_pmf(params, m)
    for e, (t, j) in enumerate(zip(m.tasks, m.workers)):
        pmf = answer_pmf(params.worker(j), params.dtilde[t], 3, 0)
        assert p_c[e] == pytest.approx(pmf[0], rel=1e-14)
        assert p_w[e] == pytest.approx(pmf[1], rel=1e-14)


@pytest.mark.parametrize("p_c,k", [(0.6, 5), (0.1, 5), (0.35, 3)])
def test_answer_sampler_matches_pmf(p_c, k):
    n = 100_000
    rng = np.random.default_rng(11)
    truth = np.full(n, 1)
    draws = _draw_answers(rng, np.full(n, p_c), truth, k)
    freq = np.bincount(draws, minlength=k) / n
    expect = np.full(k, (1 - p_c) / (k - 1))
    expect[1] = p_c
    se = np.sqrt(expect * (1 - expect) / n)
    assert np.all(np.abs(freq - expect) < 3 * se)


def test_table1_protocol_shapes():
    cfg = CrowdGenConfig(seed=4)
    m, probes, params, truth = generate_dataset(cfg)
    assert (m.n_workers, m.n_tasks, m.n_entries) == (100, 100, 100 * 100)
    assert len(probes) == 10
    assert np.sum(params.v == 0) == 10
    assert truth.min() >= 0 and truth.max() < 5
    assert np.all(params.a >= 0)  # slopes folded to |a| by default


def test_signed_slopes_option():
    _, _, params, _ = generate_dataset(CrowdGenConfig(slope_sign="keep", seed=1))
    assert np.any(params.a < 0)


def test_no_adversaries():
    _, _, params, _ = generate_dataset(CrowdGenConfig(adv_fraction=0.0, seed=2))
    assert np.all(params.v == 1)


def test_generation_is_deterministic():
    a = generate_dataset(CrowdGenConfig(seed=9))
    b = generate_dataset(CrowdGenConfig(seed=9))
    assert np.array_equal(a[0].answers, b[0].answers)
    assert a[1].labels == b[1].labels
    assert np.array_equal(a[2].d, b[2].d)


def test_complex_generation_respects_threshold():
    _, _, params, _ = generate_dataset(CrowdGenConfig(adv_kind="complex", seed=3, theta_gap=2.0))
    adv = params.v == 0
    assert np.all(params.kind[adv] == "complex")
    assert np.allclose(params.d[adv] - params.theta[adv], 2.0)


def test_assignment_degree_option():
    m, _, _, _ = generate_dataset(CrowdGenConfig(degree=20, seed=5))
    assert np.all(np.bincount(m.tasks) == 20)


def test_sha_all_hammers():
    m, truth, roles = generate_sha_dataset(10, 30, 4, 0.0, 0.0, seed=1)
    assert np.all(roles == "hammer")
    assert np.array_equal(m.answers, truth[m.tasks])


def test_sha_spammers_uniform_and_adversaries_never_right():
    m, truth, roles = generate_sha_dataset(20, 2000, 5, 0.5, 0.5, seed=2)
    spam = roles[m.workers] == "spammer"
    adv = roles[m.workers] == "adversary"
    freq = np.bincount(m.answers[spam], minlength=5) / spam.sum()
    assert np.all(np.abs(freq - 0.2) < 4 * np.sqrt(0.16 / spam.sum()))
    assert not np.any(m.answers[adv] == truth[m.tasks[adv]])


def test_sha_rejects_bad_fractions():
    with pytest.raises(ValueError):
        generate_sha_dataset(10, 10, 3, 0.7, 0.4, seed=0)


def test_mixed_skill_crowd():
    m, params, truth = generate_mixed_skill_dataset(50, 40, 5, 0.3, 0.2, seed=0)
    assert np.sum(params.v == 0) == 10
    assert np.sum(params.d <= 2.0) >= 15
    assert np.all((params.dtilde >= 0) & (params.dtilde <= 8))


def test_config_file_round_trip(tmp_path):
    cfg = CrowdGenConfig(n_workers=7, diff_var=1000.0, adv_kind="complex", seed=3)
    path = tmp_path / "crowd.cfg"
    write_kv_file(cfg.to_dict(), path)
    assert load_crowd_config(path) == cfg


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "crowd.cfg"
    path.write_text("n_workers = 5\nsize = 3\n")
    with pytest.raises(ValueError, match="size"):
        load_crowd_config(path)


def test_config_validation():
    with pytest.raises(ValueError):
        CrowdGenConfig(adv_fraction=1.5)
    with pytest.raises(ValueError):
        CrowdGenConfig(skill_var=-1.0)


def test_params_export(tmp_path):
    m, _, params, truth = generate_dataset(CrowdGenConfig(n_workers=4, n_tasks=3, probe_count=1, seed=0))
    save_params(params, m, tmp_path / "w.csv", tmp_path / "t.csv", truth)
    rows = (tmp_path / "w.csv").read_text().splitlines()
    assert rows[0] == "worker_id,v,d,a"
    assert float(rows[1].split(",")[2]) == params.d[0]
    trows = (tmp_path / "t.csv").read_text().splitlines()
    assert trows[0] == "task_id,dtilde,z"
    assert int(trows[1].split(",")[2]) == truth[0] + 1
