import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iconops.evalbench import (
    BenchReport,
    BenchRow,
    EvalError,
    EvalReport,
    EvalRow,
    _relative_error_flagged,
    bench_scaling,
    error_vs_demos,
    global_pattern_metrics,
    heat_ood_study,
    relative_error,
)
from iconops.families import generate_corpus
from iconops.gridfn import Grid1D
from iconops.model import ModelConfig, init_params
from iconops.randproc import RngStream
from iconops.solvers import heat_step_implicit

TINY = ModelConfig(layers=1, heads=2, model_dim=8, widening=2)


@pytest.fixture(scope="module")
def tiny_params():
    return init_params(TINY, RngStream(100))


@pytest.fixture(scope="module")
def ode1_corpus():
    return generate_corpus("ode1_fwd", n_operators=3, records_per_operator=6,
                           base_seed=21)


# ----------------------------------------------------------- relative error


def test_relative_error_trivial_cases():
    t = np.array([1.0, -2.0, 3.0])
    assert relative_error(t, t) == 0.0
    assert relative_error(2.0 * t, t) == 1.0


def test_relative_error_single_coordinate_bump():
    rng = RngStream(1)
    t = rng.normals(40)
    scale = np.linalg.norm(t)
    p = t.copy()
    p[0] += scale
    # recompute both norms from scratch
    expect = np.sqrt(np.sum((p - t) ** 2)) / np.sqrt(np.sum(t * t))
    assert abs(relative_error(p, t) - expect) <= 1e-15
    assert abs(relative_error(p, t) - 1.0) <= 1e-12


@given(st.sampled_from([0.0, 0.5, 1.0, 2.0]), st.integers(0, 2 ** 32))
@settings(max_examples=40, deadline=None)
def test_relative_error_power_of_two_scaling_is_exact(alpha, seed):
    # alpha*t - t is exact for these factors, so the ratio comes out exact too
    t = RngStream(seed).normals(17)
    assert relative_error(alpha * t, t) == abs(alpha - 1.0)


@given(st.floats(0.0, 8.0), st.integers(0, 2 ** 32))
@settings(max_examples=40, deadline=None)
def test_relative_error_scaling_general(alpha, seed):
    t = RngStream(seed).normals(17)
    assert abs(relative_error(alpha * t, t) - abs(alpha - 1.0)) <= 1e-12


def test_relative_error_zero_norm_fallback():
    z = np.zeros(5)
    p = np.array([3.0, 0.0, 4.0, 0.0, 0.0])
    err, flagged = _relative_error_flagged(p, z)
    assert (err, flagged) == (5.0, True)
    assert relative_error(p, z) == 5.0
    assert _relative_error_flagged(p, np.ones(5))[1] is False


def test_relative_error_shape_mismatch():
    with pytest.raises(EvalError):
        relative_error(np.zeros(3), np.zeros(4))


# ---------------------------------------------------- global pattern metric


def test_global_pattern_metrics_zero_when_equal():
    m = RngStream(3).normals(20).reshape(4, 5)
    out = global_pattern_metrics(m, m)
    assert out == {"token_error": 0.0, "average_error": 0.0}


def test_global_pattern_metrics_row_shuffle_keeps_average():
    rng = RngStream(4)
    truths = rng.normals(40).reshape(8, 5)
    perm = rng.shuffle_indices(8)
    preds = truths[perm]
    out = global_pattern_metrics(preds, truths)
    assert out["average_error"] <= 1e-28  # column means identical
    assert out["token_error"] > 0.0


def test_global_pattern_metrics_against_direct_recompute():
    rng = RngStream(5)
    preds = rng.normals(24).reshape(4, 6)
    truths = rng.normals(24).reshape(4, 6)
    out = global_pattern_metrics(preds, truths)
    token = 0.0
    for i in range(4):
        for j in range(6):
            token += (preds[i, j] - truths[i, j]) ** 2
    token /= 24
    average = 0.0
    for j in range(6):
        average += (sum(preds[i, j] for i in range(4)) / 4
                    - sum(truths[i, j] for i in range(4)) / 4) ** 2
    average /= 6
    assert abs(out["token_error"] - token) <= 1e-12
    assert abs(out["average_error"] - average) <= 1e-12


def test_global_pattern_metrics_monte_carlo_ordering():
    wins = 0
    for trial in range(120):
        rng = RngStream(1000 + trial)
        preds = rng.normals(80).reshape(8, 10)
        truths = rng.normals(80).reshape(8, 10)
        out = global_pattern_metrics(preds, truths)
        wins += out["average_error"] < out["token_error"]
    assert wins == 120


@given(st.integers(0, 2 ** 32))
@settings(max_examples=30, deadline=None)
def test_global_pattern_average_never_exceeds_token(seed):
    rng = RngStream(seed)
    preds = rng.normals(30).reshape(5, 6)
    truths = rng.normals(30).reshape(5, 6)
    out = global_pattern_metrics(preds, truths)
    assert out["average_error"] <= out["token_error"] + 1e-15


def test_global_pattern_metrics_shape_mismatch():
    with pytest.raises(EvalError):
        global_pattern_metrics(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(EvalError):
        global_pattern_metrics(np.zeros(6), np.zeros(6))


# ------------------------------------------------------------------ reports


def test_eval_row_validation():
    with pytest.raises(EvalError):
        EvalRow("x", 0, 0.1, 0.0, 1)
    with pytest.raises(EvalError):
        EvalRow("x", 6, 0.1, 0.0, 1)
    with pytest.raises(EvalError):
        EvalRow("x", 1, -0.1, 0.0, 1)
    with pytest.raises(EvalError):
        EvalRow("x", 1, 0.1, 0.0, 0)


def test_eval_report_csv_and_accessor(tmp_path):
    report = EvalReport(rows=[EvalRow("ode1_fwd", 1, 0.5, 0.1, 4),
                              EvalRow("ode1_fwd", 5, 0.25, 0.05, 4)])
    assert report.mean("ode1_fwd", 5) == 0.25
    with pytest.raises(KeyError):
        report.mean("ode1_fwd", 2)
    f = tmp_path / "r.csv"
    report.to_csv(f)
    lines = f.read_text().strip().split("\n")
    assert lines[0].startswith("label,demo_count,mean_rel_error")
    assert lines[1].split(",")[0] == "ode1_fwd"
    with pytest.raises(EvalError):
        report.examples_to_json(tmp_path / "e.json")


def test_bench_report_validation():
    with pytest.raises(EvalError):
        BenchReport(rows=[BenchRow(100, 1.0, 0.1, 0.5), BenchRow(50, 1.0, 0.1, 0.5)])
    with pytest.raises(EvalError):
        BenchReport(rows=[BenchRow(50, 0.0, 0.1, 0.5)])


# -------------------------------------------------------------- demo sweeps


def test_error_vs_demos_validation_and_determinism(tiny_params, ode1_corpus):
    with pytest.raises(EvalError):
        error_vs_demos(tiny_params, ode1_corpus, [1], 0)
    with pytest.raises(EvalError):
        error_vs_demos(tiny_params, ode1_corpus, [0, 1], 3)
    a = error_vs_demos(tiny_params, ode1_corpus, [1, 3], 4, seed=8,
                       points_per_function=6)
    b = error_vs_demos(tiny_params, ode1_corpus, [1, 3], 4, seed=8,
                       points_per_function=6)
    assert a.rows == b.rows


def test_error_vs_demos_untrained_model_is_flat(tiny_params, ode1_corpus):
    report = error_vs_demos(tiny_params, ode1_corpus, [1, 5], 6, seed=2,
                            points_per_function=6)
    means = [r.mean_error for r in report.rows]
    assert max(means) / min(means) < 3.0  # no in-context effect before training


def test_error_vs_demos_examples_retained(tiny_params, ode1_corpus):
    report = error_vs_demos(tiny_params, ode1_corpus, [2], 3, seed=1,
                            points_per_function=5, keep_examples=True)
    assert len(report.examples) == 3
    ex = report.examples[0]
    assert set(ex) >= {"label", "demo_count", "pred", "truth", "rel_error"}
    assert len(ex["pred"]) == len(ex["truth"]) == 5


# --------------------------------------------------------------- heat study


def test_heat_study_rejects_heat_trained_checkpoints(tiny_params):
    with pytest.raises(EvalError, match="out of distribution"):
        heat_ood_study(tiny_params, 2, [1], trained_families=("ode1_fwd", "heat_fwd"))
    with pytest.raises(EvalError, match="required"):
        heat_ood_study(tiny_params, 2, [1], trained_families=None)


def test_heat_study_reports_both_variants(tiny_params):
    report = heat_ood_study(tiny_params, 2, [1, 2], trained_families=("ode1_fwd",),
                            seed=3, points_per_function=6, keep_examples=True)
    labels = {r.label for r in report.rows}
    assert labels == {"heat_homogeneous", "heat_nonhomogeneous"}
    assert len(report.rows) == 4
    # aligned query coordinates across cases within a variant
    homog = [e for e in report.examples if e["label"] == "heat_homogeneous"]
    assert all(e["coords"] == homog[0]["coords"] for e in homog)


def test_heat_study_deterministic(tiny_params):
    a = heat_ood_study(tiny_params, 2, [1], trained_families=(), seed=5,
                       points_per_function=5)
    b = heat_ood_study(tiny_params, 2, [1], trained_families=(), seed=5,
                       points_per_function=5)
    assert a.rows == b.rows


def test_homogeneous_steady_state_profile_is_preserved():
    # alpha = 0 and a linear initial profile: diffusion has nothing to do
    grid = Grid1D(0.0, 1.0, 50)
    x = grid.points()
    u0, uL = -0.25, 0.75
    profile = u0 + (uL - u0) * x
    u = heat_step_implicit(profile, 0.005, 0.0, u0, uL, 1e-3, grid, 100)
    assert np.max(np.abs(u - profile)) <= 1e-10


# ---------------------------------------------------------------- benchmark


def test_bench_scaling_validation(tiny_params):
    with pytest.raises(EvalError, match="poisson"):
        bench_scaling(tiny_params, "ode1_fwd", [10], 3)
    with pytest.raises(EvalError, match="repeats"):
        bench_scaling(tiny_params, "poisson_fwd", [10], 1)
    with pytest.raises(EvalError, match="500"):
        bench_scaling(tiny_params, "poisson_fwd", [600], 3)
    with pytest.raises(EvalError, match="distinct"):
        bench_scaling(tiny_params, "poisson_fwd", [10, 10], 3)


def test_bench_scaling_rows(tiny_params, tmp_path):
    report = bench_scaling(tiny_params, "poisson_fwd", [20, 10], 3, seed=4)
    assert [r.n for r in report.rows] == [10, 20]  # sorted ascending
    for r in report.rows:
        assert r.model_time_s > 0.0 and r.solver_time_s > 0.0
        assert np.isfinite(r.model_rel_error)
    f = tmp_path / "bench.csv"
    report.to_csv(f)
    assert f.read_text().startswith("n,model_time_s,solver_time_s,model_rel_error")
