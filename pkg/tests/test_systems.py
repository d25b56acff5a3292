from dataclasses import replace

import numpy as np
import pytest

from cfrca.dynamics import inject, simulate
from cfrca.systems import (
    BenchmarkSpec,
    LinearSystemSpec,
    ParametricChange,
    StructuralBreak,
    fhn_rhs,
    generate_benchmark_instance,
    injection_case,
    make_fhn,
    make_linear_4node,
    normal_data,
)


def test_fhn_rhs_examples():
    np.testing.assert_allclose(fhn_rhs(np.array([0.0, 0.0])), [0.0, 0.0667], atol=1e-4)
    np.testing.assert_allclose(fhn_rhs(np.array([1.0, -1.0])), [-1.0, -0.8667], atol=1e-4)


def test_fhn_limit_cycle_bounded():
    tr = simulate(make_fhn(), [-1.0, 1.0], 200, seed=0, noiseless=True)
    x1 = tr.values[:, 0]
    assert np.abs(x1).max() < 3.0
    # still oscillating at the end, not settled at a fixed point
    assert x1[100:].max() - x1[100:].min() > 2.0


def test_linear_system_matrices():
    spec = LinearSystemSpec()
    np.testing.assert_array_equal(spec.A["w"], [[0.949, 0.313], [-0.313, 0.949]])
    np.testing.assert_array_equal(spec.B[("x", "z")], [[0.4, 0.9], [0.9, 0.4]])
    assert spec.graph.edge_names() == [("w", "x"), ("x", "y"), ("x", "z"), ("y", "z")]


def test_linear_blocks_are_stable():
    spec = LinearSystemSpec()
    moduli = np.abs(np.linalg.eigvals(spec.A["w"]))
    np.testing.assert_allclose(moduli, np.hypot(0.949, 0.313))
    assert all(np.abs(np.linalg.eigvals(a)).max() < 1 for a in spec.A.values())


def test_unstable_block_rejected():
    spec = LinearSystemSpec()
    A = dict(spec.A, w=np.eye(2) * 1.01)
    with pytest.raises(ValueError):
        make_linear_4node(replace(spec, A=A))


def test_linear_generator_increment():
    scm = make_linear_4node()
    f = scm.transition("z")
    spec = LinearSystemSpec()
    rng = np.random.default_rng(0)
    x, y, z = rng.normal(size=(3, 2))
    expected = spec.B[("x", "z")] @ x + spec.B[("y", "z")] @ y + spec.A["z"] @ z - z
    np.testing.assert_allclose(f.forward(np.concatenate([x, y, z])[None])[0], expected, atol=1e-14)


def test_benchmark_graph_shape():
    for seed in range(10):
        inst = generate_benchmark_instance(BenchmarkSpec(), seed)
        g = inst.graph
        roots = [j for j in range(len(g)) if not g.parent_indices(j)]
        assert roots == [0] and inst.root == "n0"
        assert all(1 <= len(g.parent_indices(j)) <= 2 for j in range(1, len(g)))
        assert all(s < d for s, d in g.edges)
        assert inst.target != inst.root
        assert all(rc["time"] >= 1 for rc in inst.truth)


def test_benchmark_deterministic():
    a = generate_benchmark_instance(BenchmarkSpec(kind="structural"), 4)
    b = generate_benchmark_instance(BenchmarkSpec(kind="structural"), 4)
    assert np.array_equal(a.factum.values, b.factum.values)
    assert np.array_equal(a.normal.values, b.normal.values)
    assert a.truth == b.truth


def test_structural_break_regression_oracle():
    spec = BenchmarkSpec(kind="structural", T=400)
    inst = generate_benchmark_instance(spec, 2)
    g, v = inst.graph, inst.factum.values
    j = g.index(inst.target)
    onset = spec.T // 2
    rows = np.arange(onset, spec.T)
    X = v[rows - 1][:, g.parent_indices(j)]
    y = v[rows, j] - spec.self_coef * v[rows - 1, j]
    coef = np.linalg.lstsq(X, y, rcond=None)[0]
    assert np.abs(coef).max() < 0.05
    # the same regression before onset recovers the original coefficients
    rows = np.arange(1, onset)
    coef_before = np.linalg.lstsq(v[rows - 1][:, g.parent_indices(j)], v[rows, j] - 0.2 * v[rows - 1, j], rcond=None)[0]
    true = inst.scm.transitions[j].W[0, :-1]
    np.testing.assert_allclose(coef_before, true, atol=0.2)


def test_parametric_change_with_original_coefficients_is_null():
    inst = generate_benchmark_instance(BenchmarkSpec(T=60), 5)
    scm = inst.scm
    j = scm.graph.index(inst.target)
    base = scm.transitions[j]
    same = ParametricChange(inst.target, 30, coefficients=tuple(B[0, 0] for B in base.B_parents))
    y0 = np.zeros(len(scm.graph))
    faulty, _ = inject(scm, y0, 60, 11, same)
    np.testing.assert_allclose(faulty.values, simulate(scm, y0, 60, 11).values, atol=1e-14)


def test_parametric_change_flips_sign():
    inst = generate_benchmark_instance(BenchmarkSpec(), 1)
    base = inst.scm.transition(inst.target)
    new = ParametricChange(inst.target, 10, seed=3, low=0.5, high=1.5).new_transition(base)
    for old, nb in zip(base.B_parents, new.B_parents):
        assert np.sign(old[0, 0]) == -np.sign(nb[0, 0])
        assert 0.5 <= abs(nb[0, 0]) <= 1.5


def test_structural_break_on_root_zeroes_self():
    inst = generate_benchmark_instance(BenchmarkSpec(), 1)
    new = StructuralBreak("n0", 10).new_transition(inst.scm.transition("n0"))
    np.testing.assert_array_equal(new.forward(np.array([[2.0]])), [[-2.0]])


def test_benchmark_spec_validation():
    with pytest.raises(ValueError):
        BenchmarkSpec(kind="other")


def test_injection_case_is_single_entry():
    case = injection_case("linear4", 500, 20, seed=3)
    diff = case.factum.values - case.clean.values
    first = np.flatnonzero(np.abs(diff).max(axis=1) > 0)[0]
    assert first == 6
    col = case.factum.graph.block("x").start
    np.testing.assert_allclose(diff[6], np.eye(8)[col] * 5.0, atol=1e-12)
    assert case.label == ("x", 6)


def test_generators_deterministic():
    a = normal_data("fhn", 100, 7)[0]
    b = normal_data("fhn", 100, 7)[0]
    assert np.array_equal(a.values, b.values)
    c = injection_case("fhn", 2.0, 50, 1)
    d = injection_case("fhn", 2.0, 50, 1)
    assert np.array_equal(c.factum.values, d.factum.values)
