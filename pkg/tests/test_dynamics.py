import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfrca.dynamics import (
    AdditiveConstant,
    DynamicScm,
    Intervention,
    NoiseModel,
    ShiftedTransition,
    Trajectory,
    abduct,
    counterfactual_sample,
    draw_noise,
    inject,
    sample_counterfactuals,
    simulate,
    treatment_effect,
)
from cfrca.errors import BoundsError, DivergenceError, ShapeError
from cfrca.graph import SummaryGraph
from cfrca.models import LinearTransition
from cfrca.scoring import Corridor
from cfrca.systems import FhnSpec, FhnTransition, fhn_rhs, make_fhn, make_linear_4node

from conftest import random_scm


def test_zero_state_stays_zero():
    scm = make_linear_4node()
    tr = simulate(scm, np.zeros(8), 50, seed=0, noiseless=True)
    assert np.all(tr.values == 0.0)


def test_fhn_single_euler_step_from_origin():
    scm = make_fhn(FhnSpec(substeps=1))
    tr = simulate(scm, np.zeros(2), 2, seed=0, noiseless=True)
    np.testing.assert_allclose(tr.values[1], [0.0, 0.0667], atol=1e-4)


def test_fhn_substeps_refine_the_step():
    coarse = FhnTransition(1.0, 1).forward(np.array([[0.5, 0.5]]))
    fine = FhnTransition(1.0, 10).forward(np.array([[0.5, 0.5]]))
    tiny = FhnTransition(0.01, 1).forward(np.array([[0.5, 0.5]]))
    np.testing.assert_allclose(tiny, 0.01 * fhn_rhs(np.array([[0.5, 0.5]])), rtol=1e-12)
    assert not np.allclose(coarse, fine)


def test_w_block_decays():
    scm = make_linear_4node()
    y0 = np.zeros(8)
    y0[:2] = [1.0, -0.5]
    w = simulate(scm, y0, 1000, seed=0, noiseless=True).node("w")
    norms = np.linalg.norm(w, axis=1)
    assert np.all(np.diff(norms) < 0)


def test_matrix_oracle():
    scm = make_linear_4node()
    g = scm.graph
    M = np.zeros((8, 8))
    for j, f in enumerate(scm.transitions):
        rows = g.block(j)
        cols = g.input_columns(j)
        M[rows, cols] += f.W
        M[rows, rows] += np.eye(2)
    rng = np.random.default_rng(0)
    y = rng.normal(size=8)
    tr = simulate(scm, y, 10, seed=0, noiseless=True)
    expected = [y]
    for _ in range(9):
        expected.append(M @ expected[-1])
    np.testing.assert_allclose(tr.values, np.array(expected), rtol=0, atol=1e-14)


def test_simulate_deterministic():
    scm = make_linear_4node()
    a = simulate(scm, np.zeros(8), 30, seed=5)
    b = simulate(scm, np.zeros(8), 30, seed=5)
    assert np.array_equal(a.values, b.values)


def test_simulate_divergence_names_node():
    g = SummaryGraph.from_names([("a", 1)])
    scm = DynamicScm(g, (LinearTransition([[1e200]], [0.0]),), NoiseModel((1.0,)))
    with pytest.raises(DivergenceError) as info:
        simulate(scm, [1e200], 10, seed=0, noiseless=True)
    assert "a" in str(info.value)


def test_abduct_recovers_noise():
    scm = make_linear_4node()
    tr = simulate(scm, np.zeros(8), 40, seed=9)
    ab = abduct(scm, tr)
    np.testing.assert_allclose(ab.residuals, draw_noise(scm, 40, 9), rtol=0, atol=1e-12)


def test_abduct_zero_map():
    g = SummaryGraph.from_names([("a", 2), ("b", 1)], [("a", "b")])
    scm = DynamicScm(
        g, (LinearTransition(np.zeros((2, 2))), LinearTransition(np.zeros((1, 3)))), NoiseModel((1.0, 1.0))
    )
    ab = abduct(scm, Trajectory(np.zeros((5, 3)), g))
    assert np.all(ab.residuals == 0)


def test_abduct_injection_is_local():
    scm = make_linear_4node()
    clean = simulate(scm, np.zeros(8), 20, seed=3)
    faulty, label = inject(scm, np.zeros(8), 20, 3, AdditiveConstant("x", 1, 6, 2.5))
    assert label == ("x", 6)
    diff = abduct(scm, faulty).residuals - abduct(scm, clean).residuals
    expected = np.zeros_like(diff)
    expected[5, scm.graph.block("x").start + 1] = 2.5
    np.testing.assert_allclose(diff, expected, atol=1e-12)


def test_inject_zero_constant_identical():
    scm = make_linear_4node()
    clean = simulate(scm, np.zeros(8), 20, seed=4)
    faulty, _ = inject(scm, np.zeros(8), 20, 4, AdditiveConstant("x", 0, 6, 0.0))
    assert np.array_equal(clean.values, faulty.values)


def test_fhn_injection_row_shift():
    scm = make_fhn()
    y0 = np.array([-1.0, 1.0])
    clean = simulate(scm, y0, 50, seed=1)
    faulty, _ = inject(scm, y0, 50, 1, AdditiveConstant("x", 0, 24, 2.0 * 0.05))
    assert faulty.values[24, 0] - clean.values[24, 0] == pytest.approx(0.1, abs=1e-12)
    assert np.array_equal(faulty.values[:24], clean.values[:24])


def test_inject_out_of_range():
    scm = make_linear_4node()
    for inj in (AdditiveConstant("x", 0, 0, 1.0), AdditiveConstant("x", 0, 20, 1.0), AdditiveConstant("x", 2, 5, 1.0)):
        with pytest.raises(BoundsError):
            inject(scm, np.zeros(8), 20, 0, inj)
    with pytest.raises(BoundsError):
        inject(scm, np.zeros(8), 20, 0, AdditiveConstant("q", 0, 5, 1.0))


def test_empty_intervention_reproduces_factum():
    scm = make_fhn()
    tr = simulate(scm, [-1.0, 1.0], 50, seed=2)
    samples = counterfactual_sample(scm, abduct(scm, tr), tr, [], 3, seed=0)
    for s in samples:
        np.testing.assert_allclose(s.values, tr.values, rtol=0, atol=1e-12)


def test_zero_variance_same_transition_zeroes_one_residual():
    scm = make_linear_4node()
    tr = simulate(scm, np.zeros(8), 20, seed=8)
    ab = abduct(scm, tr)
    iv = Intervention("y", 7, 0.0, scm.transition("y"))
    (cf,) = counterfactual_sample(scm, ab, tr, [iv], 1, seed=0)
    res = abduct(scm, cf).residuals
    expected = ab.residuals.copy()
    expected[6, scm.graph.block("y")] = 0.0
    np.testing.assert_allclose(res, expected, atol=1e-12)


def test_noise_replace_pulls_toward_clean():
    scm = make_linear_4node()
    clean = simulate(scm, np.zeros(8), 20, seed=5)
    faulty, _ = inject(scm, np.zeros(8), 20, 5, AdditiveConstant("x", 0, 6, 5.0))
    ab = abduct(scm, faulty)
    iv = Intervention("x", 6, scm.noise.variances[1])
    values, _ = sample_counterfactuals(scm, ab, faulty, [iv], 64, seed=1)
    cf_err = np.abs(values.mean(axis=0)[6:] - clean.values[6:]).mean()
    factum_err = np.abs(faulty.values[6:] - clean.values[6:]).mean()
    assert cf_err < 0.05 * factum_err


def test_locality_of_residual_change():
    scm = make_linear_4node()
    g = scm.graph
    tr = simulate(scm, np.zeros(8), 20, seed=6)
    ab = abduct(scm, tr)
    (cf,) = counterfactual_sample(scm, ab, tr, [Intervention("y", 9, 1.0)], 1, seed=0)
    changed = np.abs(cf.values - tr.values) > 1e-12
    assert not changed[:9].any()
    for name in ("w", "x"):
        assert not changed[:, g.block(name)].any()
    assert changed[9, g.block("y")].any()


def test_counterfactual_deterministic():
    scm = make_linear_4node()
    tr = simulate(scm, np.zeros(8), 20, seed=6)
    ab = abduct(scm, tr)
    ivs = [Intervention("x", 3, 0.1)]
    a = sample_counterfactuals(scm, ab, tr, ivs, 5, seed=42)[0]
    b = sample_counterfactuals(scm, ab, tr, ivs, 5, seed=42)[0]
    assert np.array_equal(a, b)


def test_intervention_validation():
    scm = make_linear_4node()
    tr = simulate(scm, np.zeros(8), 20, seed=6)
    ab = abduct(scm, tr)
    with pytest.raises(ValueError):
        Intervention("x", 3)
    with pytest.raises(BoundsError):
        counterfactual_sample(scm, ab, tr, [Intervention("x", 0, 1.0)], 1, 0)
    with pytest.raises(BoundsError):
        counterfactual_sample(scm, ab, tr, [Intervention("nope", 2, 1.0)], 1, 0)
    with pytest.raises(ShapeError):
        counterfactual_sample(scm, ab, tr, [Intervention("x", 2, None, LinearTransition(np.eye(2)))], 1, 0)


def test_diverged_samples_are_dropped():
    g = SummaryGraph.from_names([("a", 1)])
    scm = DynamicScm(g, (LinearTransition([[0.0]]),), NoiseModel((1.0,)))
    tr = Trajectory(np.zeros((5, 1)), g)
    ab = abduct(scm, tr)
    boom = LinearTransition([[0.0]], [np.inf])
    values, diverged = sample_counterfactuals(scm, ab, tr, [Intervention("a", 2, None, boom)], 3, 0)
    assert diverged.all()
    assert counterfactual_sample(scm, ab, tr, [Intervention("a", 2, None, boom)], 3, 0) == []


def test_treatment_effect_empty_is_zero():
    scm = make_linear_4node()
    phi = Corridor(scm.graph, "z", [0.0, 0.0], [0.05, 0.05])
    assert treatment_effect(scm, [], phi, 50, 0, np.zeros(8), 20) == 0.0


def test_treatment_effect_large_injection():
    scm = make_linear_4node()
    normal = [simulate(scm, np.zeros(8), 1000, seed=0)]
    phi = Corridor.from_normal(normal, "z", 3.0)
    shifted = Intervention("x", 6, None, ShiftedTransition(scm.transition("x"), [5.0, 0.0]))
    # the corridor averages over all rows, so a fault lasting a few steps
    # moves it by a fraction; the all-or-nothing reading flips almost surely
    assert treatment_effect(scm, [shifted], phi, 200, 1, np.zeros(8), 20) > 0.05
    assert treatment_effect(scm, [shifted], _Worst(phi), 200, 1, np.zeros(8), 20) > 0.5


def test_treatment_effect_no_causal_path():
    scm = make_linear_4node()
    phi = Corridor(scm.graph, "w", [0.0, 0.0], [0.05, 0.05])
    shifted = Intervention("z", 6, None, ShiftedTransition(scm.transition("z"), [5.0, 5.0]))
    assert treatment_effect(scm, [shifted], phi, 100, 2, np.zeros(8), 20) == 0.0


class _Worst:
    """1 if every entry stays inside the corridor, else 0."""

    bounded = True

    def __init__(self, corridor):
        self.c = corridor

    def normality_batch(self, values):
        return (self.c.normality_batch(values) == 1.0).astype(float)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["lin", "nlin"]), st.integers(2, 30))
def test_round_trip_property(seed, family, T):
    rng = np.random.default_rng(seed)
    scm = random_scm(rng, family)
    tr = simulate(scm, rng.normal(size=scm.graph.total_dim), T, seed)
    (cf,) = counterfactual_sample(scm, abduct(scm, tr), tr, [], 1, seed)
    np.testing.assert_allclose(cf.values, tr.values, rtol=0, atol=1e-12)


def test_trajectory_validation():
    g = SummaryGraph.from_names([("a", 2)])
    with pytest.raises(ShapeError):
        Trajectory(np.zeros((1, 2)), g)
    with pytest.raises(ShapeError):
        Trajectory(np.zeros((3, 3)), g)
    with pytest.raises(ValueError):
        Trajectory(np.array([[0.0, np.nan], [0.0, 0.0]]), g)
