import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from poisonbrew import analysis as an
from poisonbrew import brewer as bw
from poisonbrew import datapipe as data, nn
from poisonbrew import trainer as tr

from conftest import blob_mlp, blobs


def _run(case, victim, success, acc=0.5):
    return an.VictimRun(case, victim, 0, success, acc)


def test_success_and_std_error_over_cases():
    runs = [_run(0, 0, 1.0), _run(0, 1, 0.0), _run(1, 0, 1.0), _run(1, 1, 1.0),
            _run(2, 0, 0.0), _run(2, 1, 0.0)]
    rep = an.EvalReport(runs, 3, 2)
    assert rep.case_success() == [0.5, 1.0, 0.0]
    assert rep.avg_success == pytest.approx(0.5)
    assert rep.std_error == pytest.approx(0.5 / math.sqrt(3))


def test_diverged_runs_are_excluded():
    runs = [_run(0, 0, 1.0), an.VictimRun(0, 1, 0, float("nan"), float("nan"), "diverged")]
    rep = an.EvalReport(runs, 1, 2)
    assert rep.avg_success == 1.0 and rep.std_error == 0.0
    assert rep.summary()["diverged"] == 1


def test_report_csv_uses_round_trip_floats(tmp_path):
    rep = an.EvalReport([_run(0, 0, 1 / 3, 0.1 + 0.2)], 1, 1)
    rep.write_csv(tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text()
    assert repr(0.1 + 0.2) in text and repr(1 / 3) in text


def test_cosine_examples():
    assert an.cosine(np.array([1.0, 0.0]), np.array([2.0, 0.0])) == 1.0
    assert an.cosine(np.array([1.0, 1.0]), np.array([-3.0, -3.0])) == -1.0
    with pytest.raises(ZeroDivisionError):
        an.cosine(np.zeros(2), np.ones(2))


def test_monitor_sees_plus_and_minus_one():
    spec = blob_mlp()
    flat = nn.build(spec, 0).flat
    target = blobs(1).images[:1]
    mon = an.AlignmentMonitor(spec, target, [1], [0])
    g_adv = an._flat_grad(spec, flat, target, np.array([1]))
    mon.on_batch(0, flat, g_adv, 0.1)
    mon.on_batch(0, flat, -g_adv, 0.1)
    assert mon._adv == pytest.approx([1.0, -1.0])
    mon.on_batch(0, flat, np.zeros_like(flat), 0.1)
    assert mon.skipped == 1
    mon.on_epoch_end(0)
    assert mon.export()["align_adv"] == pytest.approx([0.0])
    assert mon.bound.values[0] == pytest.approx(0.9)
    assert mon.bound.satisfied == [False, False]


def test_victim_seed_depends_only_on_indices():
    assert an.victim_seed(0, 1, 2) == an.victim_seed(0, 1, 2)
    assert len({an.victim_seed(0, c, v) for c in range(5) for v in range(4)}) == 20


# ------------------------------------------------------ adversarial descent

def test_descent_run_aligned_case_decreases():
    eye = np.eye(3)
    v = an.descent_run(eye, np.zeros(3), eye, np.zeros(3), np.ones(3), np.random.default_rng(0), steps=20)
    assert v[0] == 0 and v[1] == 20 and v[2] == 0


def test_descent_run_opposed_case_is_vacuous():
    eye = np.eye(2)
    v = an.descent_run(eye, np.array([2.0, 0.0]), eye, np.array([-2.0, 0.0]), np.zeros(2),
                       np.random.default_rng(0), steps=5)
    assert v[1] == 0 and v[2] == 1


def test_prop1_grid_has_no_violations_and_is_fast():
    import time
    t = time.perf_counter()
    rep = an.prop1_toy_verifier(10, 100, seed=0)
    assert time.perf_counter() - t < 10
    assert rep.violations == 0
    assert not rep.premise_never_satisfied


def test_step_beyond_bound_can_fail():
    # the bound is what makes descent certain: stepping at 2/Lip * ratio overshoots
    A = np.diag([1.0, 1.0])
    B = np.diag([10.0, 0.1])
    worse = 0
    gen = np.random.default_rng(1)
    for _ in range(200):
        theta = gen.normal(size=2) * 3
        a, b = gen.normal(size=2), gen.normal(size=2)
        g = A @ (theta - b)
        g_adv = B @ (theta - a)
        if g @ g_adv <= 0:
            continue
        big = 3.0 * (g @ g_adv) / (g @ g) / 10.0
        f = lambda t: 0.5 * (t - a) @ B @ (t - a)  # noqa: E731
        worse += f(theta - big * g) >= f(theta)
    assert worse > 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_prop1_holds_on_random_seeds(seed):
    assert an.prop1_toy_verifier(4, 5, seed=seed, steps=20).violations == 0


# ---------------------------------------------------------------- filtering

def test_filter_removes_far_points_per_class():
    images = np.zeros((10, 1, 1, 1))
    labels = np.array([0] * 5 + [1] * 5)
    ds = data.Dataset(images, labels, np.arange(10), 2)
    feats = np.array([[0.0], [0.1], [-0.1], [0.05], [9.0], [1.0], [1.1], [0.9], [1.0], [1.05]])
    rep = an.feature_filter_defense(ds, None, [4, 3], 0.2, features=feats)
    assert rep.poisons == 2 and rep.clean == 3
    assert rep.poisons_removed == 1 and rep.clean_removed == 0
    assert rep.random_poisons_removed == pytest.approx(0.4)
    assert rep.poison_removal_rate == 0.5


def test_filter_on_indistinguishable_poisons_matches_random_rate():
    # poisons drawn from the class distribution: removal is binomial around the random rate
    gen = np.random.default_rng(3)
    n, p, frac = 2000, 400, 0.2
    ds = data.Dataset(np.zeros((n, 1, 1, 1)), np.zeros(n, dtype=int), np.arange(n), 2)
    feats = gen.normal(size=(n, 4))
    rep = an.feature_filter_defense(ds, None, np.arange(p), frac, features=feats)
    # hypergeometric: 400 draws of which poisons is ~ H(n, p, k)
    pval = stats.hypergeom(n, p, int(frac * n)).cdf(rep.poisons_removed)
    assert 1e-3 < pval < 1 - 1e-3


def test_filter_with_model_features():
    train = blobs(20)
    params = nn.build(blob_mlp(), 0)
    rep = an.feature_filter_defense(train, params, train.ids[train.labels == 1][:3], 0.1)
    assert rep.poisons == 3 and rep.clean == 17


# ------------------------------------------------------------ case suite + DP

def _package(train, val, seed=0, eps=16):
    case = data.sample_case(train, val, 2 / len(train), 1, seed)
    threat, cfg = bw.ThreatModel(eps), bw.BrewConfig(restarts=1, steps=3, augment=False)
    spec = blob_mlp()
    res = bw.brew([nn.build(spec, 0)], train, val, case, threat, cfg)
    return bw.PoisonPackage.from_result(case, threat, cfg, res)


def _suite_setup():
    train, val = blobs(20), blobs(10, 1, "validation")
    cfg = tr.TrainConfig(epochs=2, drop_epochs=(), epoch_scale=1.0, lr=0.05, augment=False, seed=4)
    return train, val, cfg, [_package(train, val, 0), _package(train, val, 1)]


def test_evaluate_suite_shapes_and_determinism():
    train, val, cfg, pkgs = _suite_setup()
    a = an.evaluate_case_suite(pkgs, train, val, blob_mlp(), cfg, victims=2, monitor=True)
    b = an.evaluate_case_suite(pkgs, train, val, blob_mlp(), cfg, victims=2, monitor=True)
    assert [(r.case, r.victim) for r in a.runs] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert a.summary() == b.summary()
    assert all(len(r.align_adv) == 2 for r in a.runs)


def test_null_attack_equals_clean_training():
    train, val, cfg, pkgs = _suite_setup()
    null = an.evaluate_case_suite(pkgs, train, val, blob_mlp(), cfg, victims=1, null_attack=True)
    zero = [bw.PoisonPackage(p.case, p.threat, p.config, np.zeros_like(p.delta), [0.0], [0.0], 0) for p in pkgs]
    ref = an.evaluate_case_suite(zero, train, val, blob_mlp(), cfg, victims=1)
    assert null.summary() == ref.summary()


def test_threads_do_not_change_results():
    train, val, cfg, pkgs = _suite_setup()
    one = an.evaluate_case_suite(pkgs, train, val, blob_mlp(), cfg, victims=2, threads=1)
    two = an.evaluate_case_suite(pkgs, train, val, blob_mlp(), cfg, victims=2, threads=2)
    assert one.runs == two.runs


def test_dp_sigma_zero_is_undefended(tmp_path):
    train, val, cfg, pkgs = _suite_setup()
    points = an.dp_defense_sweep(pkgs, train, val, blob_mlp(), cfg, [0.0, 0.5], victims=1)
    plain = an.evaluate_case_suite(pkgs, train, val, blob_mlp(), cfg, victims=1)
    assert points[0].avg_success == plain.avg_success and points[0].val_acc == plain.mean_val_acc
    assert [p.sigma for p in points] == [0.0, 0.5]
    an.write_dp_curve(tmp_path / "dp.csv", points)
    assert (tmp_path / "dp.csv").read_text().startswith("sigma,counter,")
