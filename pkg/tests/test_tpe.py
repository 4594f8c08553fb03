import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from striatum import models, tensor
from striatum.errors import ConfigError, DataFormatError
from striatum.rng import Xoshiro256pp
from striatum.tpe import (
    COMPLETE,
    FAILED,
    Categorical,
    Integer,
    LogUniform,
    ParamSpace,
    TpeConfig,
    Trial,
    Uniform,
    default_search_spaces,
    good_set_size,
    load_history,
    optimize,
    sample_prior,
    save_history,
    suggest,
)

MIXED_SPACE = ParamSpace(
    (
        Uniform("x", 0.0, 1.0),
        LogUniform("lr", 1e-4, 1e-1),
        Integer("units", 8, 64),
        Categorical("act", ("relu", "tanh")),
    )
)


def _in_bounds(assignment, space):
    for dim in space.dimensions:
        v = assignment[dim.name]
        if isinstance(dim, Categorical):
            assert v in dim.choices
        elif isinstance(dim, Integer):
            assert isinstance(v, int) and dim.lo <= v <= dim.hi
        else:
            assert dim.lo <= v <= dim.hi


def _mixed_objective(a):
    # smooth bowl with a known floor of 0.05 at
    # (x=0.3, lr=10**-2.5, units=33, act='relu')
    return (
        0.05
        + (a["x"] - 0.3) ** 2
        + 0.15 * ((math.log10(a["lr"]) + 2.5) / 1.5) ** 2
        + 0.3 * ((a["units"] - 33) / 28.0) ** 2
        + (0.2 if a["act"] == "tanh" else 0.0)
    )


def _grid_minimum():
    best = math.inf
    for x in np.linspace(0, 1, 101):
        for lg in np.linspace(-4, -1, 61):
            for units in range(8, 65):
                for act in ("relu", "tanh"):
                    best = min(
                        best,
                        _mixed_objective(
                            {"x": x, "lr": 10.0**lg, "units": units, "act": act}
                        ),
                    )
    return best


def _random_search(space, budget, seed):
    rng = Xoshiro256pp(seed)
    trials = []
    for _ in range(budget):
        a = sample_prior(space, rng)
        trials.append(Trial(assignment=a, objective=_mixed_objective(a), status=COMPLETE))
    return trials


# ---------------------------------------------------------------------------
# structure validation
# ---------------------------------------------------------------------------

def test_space_validation():
    with pytest.raises(ConfigError):
        ParamSpace(())
    with pytest.raises(ConfigError):
        ParamSpace((Uniform("a", 1.0, 1.0),))
    with pytest.raises(ConfigError):
        ParamSpace((Categorical("a", ()),))
    with pytest.raises(ConfigError):
        ParamSpace((Uniform("a", 0, 1), Uniform("a", 0, 2)))
    with pytest.raises(ConfigError):
        LogUniform("lr", 0.0, 1.0)


def test_trial_validation():
    with pytest.raises(ConfigError):
        Trial(assignment={}, objective=1.0, status=FAILED)
    with pytest.raises(ConfigError):
        Trial(assignment={}, objective=None, status=COMPLETE)
    with pytest.raises(ConfigError):
        Trial(assignment={}, objective=None, status="running")


def test_good_set_size_formula():
    for n in range(1, 40):
        for gamma in (0.1, 0.25, 0.5):
            assert good_set_size(n, gamma) == max(1, math.ceil(gamma * n))


# ---------------------------------------------------------------------------
# suggest
# ---------------------------------------------------------------------------

def test_empty_history_samples_prior_in_bounds():
    cfg = TpeConfig(seed=0)
    a = suggest([], MIXED_SPACE, cfg, Xoshiro256pp(0))
    _in_bounds(a, MIXED_SPACE)


def test_identical_objectives_degenerate_split_in_bounds():
    rng = Xoshiro256pp(3)
    history = [
        Trial(assignment=sample_prior(MIXED_SPACE, rng), objective=1.0, status=COMPLETE)
        for _ in range(20)
    ]
    a = suggest(history, MIXED_SPACE, TpeConfig(n_startup=5, seed=0), Xoshiro256pp(1))
    _in_bounds(a, MIXED_SPACE)


def test_suggest_deterministic():
    rng = Xoshiro256pp(9)
    history = [
        Trial(assignment=sample_prior(MIXED_SPACE, rng), objective=float(i % 7), status=COMPLETE)
        for i in range(25)
    ]
    cfg = TpeConfig(n_startup=5, seed=0)
    a = suggest(history, MIXED_SPACE, cfg, Xoshiro256pp(42))
    b = suggest(history, MIXED_SPACE, cfg, Xoshiro256pp(42))
    assert a == b


@settings(max_examples=25, deadline=None)
@given(
    n_trials=st.integers(0, 30),
    seed=st.integers(0, 2**32),
    objective_seed=st.integers(0, 2**32),
)
def test_suggestions_always_in_bounds(n_trials, seed, objective_seed):
    rng = Xoshiro256pp(objective_seed)
    history = []
    for i in range(n_trials):
        a = sample_prior(MIXED_SPACE, rng)
        if i % 5 == 4:
            history.append(Trial(assignment=a, objective=None, status=FAILED))
        else:
            history.append(Trial(assignment=a, objective=rng.uniform(-5, 5), status=COMPLETE))
    suggestion = suggest(history, MIXED_SPACE, TpeConfig(n_startup=8, seed=0), Xoshiro256pp(seed))
    _in_bounds(suggestion, MIXED_SPACE)


def test_failed_trials_excluded_from_densities():
    # a failed trial at an extreme point must not attract suggestions
    rng = Xoshiro256pp(5)
    history = []
    for _ in range(15):
        a = sample_prior(MIXED_SPACE, rng)
        a["x"] = min(0.2, a["x"])
        history.append(Trial(assignment=a, objective=a["x"], status=COMPLETE))
    history.append(
        Trial(assignment={"x": 1.0, "lr": 1e-1, "units": 64, "act": "tanh"}, objective=None, status=FAILED)
    )
    a = suggest(history, MIXED_SPACE, TpeConfig(n_startup=5, seed=0), Xoshiro256pp(2))
    _in_bounds(a, MIXED_SPACE)


# ---------------------------------------------------------------------------
# optimize
# ---------------------------------------------------------------------------

def test_optimize_budget_one():
    best, history = optimize(_mixed_objective, MIXED_SPACE, 1, TpeConfig(seed=1))
    assert len(history) == 1
    assert best is history[0]


def test_optimize_constant_objective():
    best, history = optimize(lambda a: 3.5, MIXED_SPACE, 12, TpeConfig(seed=2))
    assert len(history) == 12
    assert best is history[0]
    assert all(t.objective == 3.5 for t in history)


def test_optimize_all_failures_raises():
    def boom(a):
        raise RuntimeError("no")

    with pytest.raises(RuntimeError, match="all 5 trials failed"):
        optimize(boom, MIXED_SPACE, 5, TpeConfig(seed=3))


def test_optimize_records_partial_failures():
    calls = {"n": 0}

    def sometimes(a):
        calls["n"] += 1
        if calls["n"] % 3 == 0:
            raise ValueError("flaky")
        return a["x"]

    best, history = optimize(sometimes, MIXED_SPACE, 15, TpeConfig(seed=4))
    assert len(history) == 15
    assert sum(t.status == FAILED for t in history) == 5
    assert best.status == COMPLETE


def test_nonfinite_objective_becomes_failed_trial():
    best, history = optimize(
        lambda a: float("nan") if a["x"] < 0.5 else a["x"], MIXED_SPACE, 10, TpeConfig(seed=5)
    )
    assert all(t.status in (COMPLETE, FAILED) for t in history)
    assert best.objective >= 0.5


def test_startup_equals_budget_is_pure_random_search():
    budget = 17
    cfg = TpeConfig(n_startup=budget, seed=123)
    best, history = optimize(_mixed_objective, MIXED_SPACE, budget, cfg)
    reference = _random_search(MIXED_SPACE, budget, seed=123)
    assert [t.assignment for t in history] == [t.assignment for t in reference]
    assert best.objective == min(t.objective for t in reference)


def test_tpe_beats_random_on_1d_quadratic():
    space = ParamSpace((Uniform("x", 0.0, 1.0),))

    def objective(a):
        return (a["x"] - 0.3) ** 2

    tpe_best, rs_best = [], []
    for seed in range(20):
        cfg = TpeConfig(n_startup=10, seed=seed)
        best, _ = optimize(objective, space, 40, cfg)
        tpe_best.append(best.objective)
        rng = Xoshiro256pp(seed)
        rs_best.append(min(objective(sample_prior(space, rng)) for _ in range(40)))
    assert np.median(tpe_best) <= np.median(rs_best)


def test_mixed_space_reaches_twice_the_true_minimum():
    true_min = _grid_minimum()
    assert true_min == pytest.approx(0.05, abs=0.01)
    hits = 0
    for seed in range(20):
        best, _ = optimize(_mixed_objective, MIXED_SPACE, 60, TpeConfig(seed=seed))
        if best.objective <= 2.0 * true_min:
            hits += 1
    assert hits >= 15


# ---------------------------------------------------------------------------
# default spaces
# ---------------------------------------------------------------------------

def test_default_cnn_space_contains_published_optimum():
    space = default_search_spaces()["cnn"]
    dims = {d.name: d for d in space.dimensions}
    assert 64 in dims["conv1_filters"].choices
    assert 5 in dims["conv1_kernel"].choices
    assert 32 in dims["conv2_filters"].choices
    assert 3 in dims["conv2_kernel"].choices
    assert 16 in dims["dense_units"].choices
    assert dims["dropout"].lo <= 0.2 <= dims["dropout"].hi


def test_default_mlp_space_contains_published_optimum():
    space = default_search_spaces()["mlp"]
    dims = {d.name: d for d in space.dimensions}
    assert 32 in dims["hidden_units"].choices
    assert dims["dropout"].lo <= 0.4 <= dims["dropout"].hi


def test_every_sampled_cnn_point_builds():
    space = default_search_spaces()["cnn"]
    rng = Xoshiro256pp(31)
    for _ in range(12):
        a = sample_prior(space, rng)
        net = models.build_cnn(models.cnn_spec_from_assignment(a, seed=1))
        shapes = tensor.layer_output_shapes(net, (109, 91, 1))
        assert shapes[-1] == (2,)


def test_every_sampled_mlp_point_builds():
    space = default_search_spaces()["mlp"]
    rng = Xoshiro256pp(32)
    for _ in range(8):
        a = sample_prior(space, rng)
        net = models.build_mlp(models.mlp_spec_from_assignment(a, seed=1))
        shapes = tensor.layer_output_shapes(net, (109, 91, 1))
        assert shapes[-1] == (2,)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_history_round_trip(tmp_path):
    rng = Xoshiro256pp(8)
    history = [
        Trial(assignment=sample_prior(MIXED_SPACE, rng), objective=float(i), status=COMPLETE)
        for i in range(5)
    ]
    history.append(Trial(assignment=sample_prior(MIXED_SPACE, rng), objective=None, status=FAILED))
    path = tmp_path / "h.jsonl"
    save_history(history, path)
    back = load_history(path)
    assert back == history


def test_history_rejects_garbage(tmp_path):
    path = tmp_path / "h.jsonl"
    path.write_text('{"assignment": {}, "objective": 1.0, "status": "complete"}\nnot-json\n')
    with pytest.raises(DataFormatError, match="h.jsonl:2"):
        load_history(path)


def test_optimize_resumes_from_history():
    cfg = TpeConfig(seed=6)
    best_a, first = optimize(_mixed_objective, MIXED_SPACE, 8, cfg)
    best_b, resumed = optimize(_mixed_objective, MIXED_SPACE, 12, cfg, history=list(first))
    assert len(resumed) == 12
    assert resumed[:8] == first
    assert best_b.objective <= best_a.objective
