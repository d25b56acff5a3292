import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfrca.dynamics import DynamicScm, NoiseModel, Trajectory, simulate
from cfrca.errors import CapacityError
from cfrca.graph import SummaryGraph
from cfrca.models import LinearTransition
from cfrca.scoring import (
    Band,
    Corridor,
    CounterfactualContext,
    LogLik,
    ScoreEntry,
    ScoreTable,
    ZScore,
    approx_shapley,
    classifier_from_json,
    classifier_to_json,
    exact_shapley_oracle,
    node_level_scores,
    point_candidates,
    rank,
    smoothed_log_mean,
)
from cfrca.systems import make_linear_4node


def table(scores, bounded=True):
    entries = tuple(ScoreEntry(node, t, s, 5, 0) for (node, t), s in scores.items())
    return ScoreTable(entries, 5, 1.0, bounded)


def test_corridor_inside_is_one():
    g = SummaryGraph.from_names([("z", 2)])
    phi = Corridor(g, "z", [0.0, 1.0], [0.5, 0.5])
    assert phi.normality(np.array([[0.1, 1.2], [-0.4, 0.6]])) == 1.0
    assert phi.normality(np.array([[0.1, 1.2], [-0.6, 0.6]])) == 0.75


def test_band_one_excursion_is_zero():
    g = SummaryGraph.from_names([("x", 2)])
    ref = np.zeros((5, 2))
    phi = Band(g, ref, 0.05, 10.0)
    y = ref.copy()
    assert phi.normality(y) == 1.0
    y[3, 1] = 0.5 + 1e-9
    assert phi.normality(y) == 0.0


def test_zscore():
    g = SummaryGraph.from_names([("a", 1), ("b", 1)])
    phi = ZScore(g, "b", 1.0, 0.5, 3.0)
    y = np.array([[0.0, 1.0], [0.0, 2.4], [9.0, 2.6]])
    assert phi.normality(y) == pytest.approx(2 / 3)


def test_loglik_matches_entropy():
    scm = make_linear_4node()
    g = scm.graph
    var = 0.01
    fitted = DynamicScm(g, scm.transitions, NoiseModel((var,) * 4))
    phi = LogLik(fitted)
    vals = [phi.normality(simulate(fitted, np.zeros(8), 50, seed=s)) for s in range(100)]
    expected = -0.5 * math.log(2 * math.pi * var) - 0.5
    # one-step log-densities are averaged per node; each node has 2 dims
    assert np.mean(vals) == pytest.approx(2 * expected, rel=0.05)


def test_smoothed_examples():
    assert smoothed_log_mean(np.ones(5)) == pytest.approx(math.log(6 / 7))
    assert smoothed_log_mean(np.zeros(5)) == pytest.approx(math.log(1 / 7))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0.1, 5))
def test_smoothed_within_endpoints(values, alpha):
    # all-zero and all-one outcomes land exactly on the endpoints
    n = len(values)
    s = smoothed_log_mean(np.array(values), alpha)
    assert math.isfinite(s)
    assert math.log(alpha / (2 * alpha + n)) - 1e-12 <= s <= math.log((alpha + n) / (2 * alpha + n)) + 1e-12


def test_shapley_two_players():
    v = {frozenset(): 0, frozenset({1}): 1, frozenset({2}): 0, frozenset({1, 2}): 1}
    assert exact_shapley_oracle([1, 2], v.__getitem__) == {1: 1.0, 2: 0.0}


def test_shapley_additive():
    w = {"a": 0.3, "b": -1.2, "c": 2.0}
    sh = exact_shapley_oracle(list(w), lambda S: sum(w[i] for i in S))
    for k in w:
        assert sh[k] == pytest.approx(w[k], abs=1e-12)


def test_shapley_capacity():
    with pytest.raises(CapacityError):
        exact_shapley_oracle(list(range(13)), len)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_shapley_efficiency_and_symmetry(n, seed):
    rng = np.random.default_rng(seed)
    table_ = {}
    players = list(range(n))

    def v(S):
        # players 0 and 1 are interchangeable by construction
        key = frozenset({0 if p == 1 else 1 if p == 0 else p for p in S})
        canon = min(tuple(sorted(S)), tuple(sorted(key)))
        if canon not in table_:
            table_[canon] = float(rng.normal())
        return table_[canon]

    sh = exact_shapley_oracle(players, v)
    assert sum(sh.values()) == pytest.approx(v(frozenset(players)) - v(frozenset()), abs=1e-10)
    if n >= 2:
        assert sh[0] == pytest.approx(sh[1], abs=1e-10)


def test_rank_unique_and_ties():
    r = rank(table({("a", 1): -0.1, ("b", 2): -0.5}), ("a", 1))
    assert r.unique and r.identified
    r = rank(table({("a", 1): -0.3, ("b", 2): -0.3, ("c", 3): -0.3}), ("b", 2))
    assert len(r.argmax) == 3 and r.identified and not r.unique
    r = rank(table({("a", 1): -0.3}), ("q", 9))
    assert r.identified is False
    assert rank(table({("a", 1): -0.3}), None).identified is None


def test_rank_tie_tolerance():
    r = rank(table({("a", 1): -0.3, ("b", 1): -0.3 + 1e-14}))
    assert len(r.argmax) == 2


def test_rank_affine_invariance():
    rng = np.random.default_rng(0)
    raw = rng.uniform(0, 1, (6, 10))
    keys = [("n", t) for t in range(6)]
    base = rank(table({k: smoothed_log_mean(r) for k, r in zip(keys, raw)}))
    for a, b in ((0.5, 0.25), (0.1, 0.9)):
        moved = rank(table({k: smoothed_log_mean(a * r + b) for k, r in zip(keys, raw)}))
        assert moved.argmax == base.argmax


def _toy_context():
    scm = make_linear_4node()
    tr = simulate(scm, np.zeros(8), 10, seed=0)
    return scm, CounterfactualContext.build(scm, tr)


def test_approx_shapley_order_invariant():
    scm, ctx = _toy_context()
    phi = Corridor(scm.graph, "z", [0.0, 0.0], [0.02, 0.02])
    var = dict(zip(scm.graph.names, scm.noise.variances))
    cands = point_candidates(scm.graph, 10, var)
    a = approx_shapley(cands, ctx, phi, 8, seed=3).scores
    b = approx_shapley(cands[::-1], ctx, phi, 8, seed=3, batch_rows=24).scores
    assert a == b


def test_approx_ranking_matches_exact_for_additive_value():
    scm, ctx = _toy_context()
    var = dict(zip(scm.graph.names, scm.noise.variances))
    cands = point_candidates(scm.graph, 10, var, nodes=["x", "z"])[:8]
    phi = Corridor(scm.graph, "z", [0.0, 0.0], [0.02, 0.02])
    st_ = approx_shapley(cands, ctx, phi, 16, seed=1)
    w = {k: math.exp(s) for k, s in st_.scores.items()}
    exact = exact_shapley_oracle(list(w), lambda S: sum(w[k] for k in S))
    assert sorted(w, key=w.get) == sorted(exact, key=exact.get)


def test_all_diverged_candidate_flagged():
    g = SummaryGraph.from_names([("a", 1)])
    scm = DynamicScm(g, (LinearTransition([[0.0]]),), NoiseModel((1.0,)))
    ctx = CounterfactualContext.build(scm, Trajectory(np.zeros((4, 1)), g))
    boom = LinearTransition([[0.0]], [np.inf])
    cands = point_candidates(g, 4, {"a": 1.0}, {"a": boom})
    st_ = approx_shapley(cands, ctx, Corridor(g, "a", [0.0], [1.0]), 4, 0)
    assert all(e.flagged and e.score == -math.inf for e in st_.entries)
    assert all(e.n_diverged == 4 for e in st_.entries)


def test_node_level_single_node_and_exclusion():
    g = SummaryGraph.from_names([("a", 1)])
    scm = DynamicScm(g, (LinearTransition([[-0.5]]),), NoiseModel((0.1,)))
    ctx = CounterfactualContext.build(scm, simulate(scm, [0.0], 20, 0))
    st_ = node_level_scores(ctx, g.names, {"a": 0.1}, Corridor(g, "a", [0.0], [1.0]), 4, 0)
    assert st_.candidates == [("a", None)]
    scm4, ctx4 = _toy_context()
    var = dict(zip(scm4.graph.names, scm4.noise.variances))
    phi = Corridor(scm4.graph, "z", [0.0, 0.0], [1.0, 1.0])
    st4 = node_level_scores(ctx4, scm4.graph.names, var, phi, 4, 0, exclude=["w"])
    assert [k[0] for k in st4.candidates] == ["x", "y", "z"]


def test_score_csv_round_trip():
    t = table({("a", 1): -0.25, ("b", None): -math.inf})
    back = ScoreTable.from_csv(t.to_csv())
    assert back.scores == t.scores
    assert t.to_csv().splitlines()[0] == "candidate_node,candidate_time,score,n_samples,n_diverged"


def test_classifier_json_round_trip():
    scm = make_linear_4node()
    g = scm.graph
    ref = simulate(scm, np.zeros(8), 10, seed=0)
    y = simulate(scm, np.zeros(8), 10, seed=1).values
    for phi in (
        Corridor(g, "z", [0.0, 0.1], [0.02, 0.03]),
        Band(g, ref, 0.01, 10.0),
        ZScore(g, "y", [0.0, 0.0], [0.01, 0.02], 3.0),
    ):
        back = classifier_from_json(classifier_to_json(phi), g, ref)
        assert back.normality(y) == phi.normality(y)
    factory = classifier_from_json({"type": "loglik"}, g)
    assert callable(factory)
