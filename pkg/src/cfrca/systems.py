"""Ground-truth systems and root-cause injectors.

* the linear 4-node system ``w -> x -> {y, z}, y -> z`` with fixed matrices,
* the FitzHugh-Nagumo oscillator sampled every ``dt`` time units,
* a random 6-node univariate linear benchmark with persistent root causes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cfrca.dynamics import (
    AdditiveConstant,
    DynamicScm,
    NoiseModel,
    Trajectory,
    child_rng,
    child_seed,
    inject,
    simulate,
)
from cfrca.graph import SummaryGraph
from cfrca.models import LinearTransition

# -- linear 4-node system ----------------------------------------------------

LINEAR_NOISE_SIGMA = 0.01  # entry of the noise scale matrix C; unit for injected constants


def _m(a):
    return np.array(a, dtype=float)


@dataclass(frozen=True)
class LinearSystemSpec:
    """``Y^j_t = A^j Y^j_{t-1} + sum_k B^{kj} Y^k_{t-1} + C^j N^j_t``."""

    graph: SummaryGraph = field(
        default_factory=lambda: SummaryGraph.from_names(
            [("w", 2), ("x", 2), ("y", 2), ("z", 2)],
            [("w", "x"), ("x", "y"), ("x", "z"), ("y", "z")],
        )
    )
    A: dict = field(
        default_factory=lambda: {
            "w": _m([[0.949, 0.313], [-0.313, 0.949]]),
            "x": _m([[0.2, -0.1], [-0.1, 0.2]]),
            "y": _m([[0.2, 0.1], [0.1, 0.2]]),
            "z": _m([[0.2, 0.1], [0.1, 0.2]]),
        }
    )
    B: dict = field(
        default_factory=lambda: {
            ("w", "x"): _m([[0.5, 0.2], [0.2, -0.5]]),
            ("x", "y"): _m([[-0.9, 0.7], [0.7, -0.9]]),
            ("x", "z"): _m([[0.4, 0.9], [0.9, 0.4]]),
            ("y", "z"): _m([[0.6, 0.4], [0.4, 0.6]]),
        }
    )
    C: dict = field(default_factory=lambda: {n: _m([[0.01, 0.01], [0.01, 0.01]]) for n in "wxyz"})


class LinearGenerator(LinearTransition):
    """Ground-truth increment ``A y + sum_k B^k y_k - y`` for one node."""

    variant = "linear"

    def __init__(self, A, B_parents):
        A = np.asarray(A, dtype=float)
        W = np.hstack([np.asarray(B, dtype=float) for B in B_parents] + [A - np.eye(A.shape[0])])
        super().__init__(W, np.zeros(A.shape[0]))
        self.A = A
        self.B_parents = [np.asarray(B, dtype=float) for B in B_parents]


def make_linear_4node(spec: LinearSystemSpec | None = None) -> DynamicScm:
    spec = spec or LinearSystemSpec()
    g = spec.graph
    for name in g.names:
        radius = np.max(np.abs(np.linalg.eigvals(spec.A[name])))
        if radius >= 1.0:
            raise ValueError(f"A^{name} has spectral radius {radius:.4f} >= 1")
    transitions = []
    for j, name in enumerate(g.names):
        Bs = [spec.B[(g.names[p], name)] for p in g.parent_indices(j)]
        transitions.append(LinearGenerator(spec.A[name], Bs))
    scales = tuple(spec.C[n] for n in g.names)
    variances = tuple(float(np.trace(c @ c.T)) / c.shape[0] for c in scales)
    return DynamicScm(g, tuple(transitions), NoiseModel(variances, scales), 1.0)


# -- FitzHugh-Nagumo ----------------------------------------------------------


@dataclass(frozen=True)
class FhnSpec:
    """FHN oscillator observed every ``dt`` time units.

    Each observation step integrates the vector field with ``substeps``
    explicit Euler steps of size ``dt / substeps``. A single Euler step of
    size 1.0 blows up within a few steps, hence the default of 10.
    """

    noise_variance: float = 0.0025
    dt: float = 1.0
    substeps: int = 10
    y0: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.noise_variance))


def fhn_rhs(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([3.0 * (x1 - x1**3 / 3.0 + x2), (0.2 - 3.0 * x1 - 0.2 * x2) / 3.0], axis=-1)


class FhnTransition:
    in_dim = 2
    out_dim = 2
    variant = "fhn"

    def __init__(self, dt: float = 1.0, substeps: int = 10):
        self.dt = dt
        self.substeps = substeps

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = x.copy()
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            y = y + h * fhn_rhs(y)
        return y - x


def make_fhn(spec: FhnSpec | None = None) -> DynamicScm:
    spec = spec or FhnSpec()
    g = SummaryGraph.from_names([("x", 2)])
    return DynamicScm(g, (FhnTransition(spec.dt, spec.substeps),), NoiseModel((spec.noise_variance,)), spec.dt)


# -- persistent root causes for linear generators -----------------------------


@dataclass(frozen=True)
class ParametricChange:
    """From ``onset_time`` on, the node's parent coefficients are redrawn.

    Univariate nodes only. Each new coefficient has magnitude uniform in
    ``[low, high]`` and the opposite sign of the one it replaces, so the change
    is never negligible. ``coefficients`` overrides the random draw; for a
    node without parents the self coefficient is redrawn instead.
    """

    node: str
    onset_time: int
    seed: int = 0
    coefficients: tuple[float, ...] | None = None
    low: float = 0.2
    high: float = 0.8
    kind: str = "parametric"

    @property
    def label(self) -> tuple[str, int]:
        return (self.node, self.onset_time)

    def new_transition(self, base: LinearGenerator) -> LinearGenerator:
        n_par = len(base.B_parents)
        if self.coefficients is not None:
            coef = np.asarray(self.coefficients, dtype=float)
        else:
            rng = np.random.default_rng(self.seed)
            old = np.array([B[0, 0] for B in base.B_parents] if n_par else [base.A[0, 0]])
            sign = np.where(old > 0, -1.0, 1.0)
            coef = rng.uniform(self.low, self.high, old.size) * sign
        if n_par:
            return LinearGenerator(base.A, [np.array([[c]]) for c in coef])
        return LinearGenerator(np.array([[coef[0]]]), [])

    def apply(self, scm: DynamicScm, T: int):
        return _persistent(scm, T, self.node, self.onset_time, self.new_transition)


@dataclass(frozen=True)
class StructuralBreak:
    """From ``onset_time`` on, the node's parent coefficients are zero.

    A node without parents loses its self coefficient instead.
    """

    node: str
    onset_time: int
    kind: str = "structural"

    @property
    def label(self) -> tuple[str, int]:
        return (self.node, self.onset_time)

    def new_transition(self, base: LinearGenerator) -> LinearGenerator:
        if base.B_parents:
            return LinearGenerator(base.A, [np.zeros_like(B) for B in base.B_parents])
        return LinearGenerator(np.zeros_like(base.A), [])

    def apply(self, scm: DynamicScm, T: int):
        return _persistent(scm, T, self.node, self.onset_time, self.new_transition)


def _persistent(scm: DynamicScm, T: int, node: str, onset: int, make):
    from cfrca.errors import BoundsError

    if node not in scm.graph:
        raise BoundsError(f"unknown node {node!r}")
    if not 1 <= onset <= T - 1:
        raise BoundsError(f"onset {onset} outside [1, {T - 1}]")
    j = scm.graph.index(node)
    mask = np.zeros(T - 1, dtype=bool)
    mask[onset - 1 :] = True
    return np.zeros((T - 1, scm.graph.total_dim)), [(j, make(scm.transitions[j]), mask)]


class _Combined:
    """Several injections applied together; labelled by the last one."""

    def __init__(self, *injections):
        self.injections = injections
        self.label = injections[-1].label

    def apply(self, scm, T):
        offset = np.zeros((T - 1, scm.graph.total_dim))
        overrides = []
        for inj in self.injections:
            o, ov = inj.apply(scm, T)
            offset += o
            overrides += ov
        return offset, overrides


# -- benchmark ----------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkSpec:
    """Random univariate linear DAG with two persistent root causes.

    Node 0 is the unique root; every other node takes 1-2 parents among
    earlier nodes. Coefficients are uniform in ``+-[coef_low, coef_high]``.
    Both root causes start at ``T // 2``: one on the root, one on a random
    other node.
    """

    n_nodes: int = 6
    n_graphs: int = 30
    T: int = 100
    kind: str = "parametric"
    coef_low: float = 0.2
    coef_high: float = 0.8
    self_coef: float = 0.2
    noise_sigma: float = 0.1
    burn_in: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("parametric", "structural"):
            raise ValueError(f"unknown root-cause kind {self.kind!r}")
        if self.n_nodes < 2:
            raise ValueError("need at least 2 nodes")
        if self.T < 4:
            raise ValueError("T must be >= 4")


@dataclass(frozen=True, eq=False)
class BenchmarkInstance:
    graph: SummaryGraph
    scm: DynamicScm
    normal: Trajectory
    factum: Trajectory
    truth: list[dict]
    root: str

    @property
    def target(self) -> str:
        """The evaluated (non-root) root-cause node."""
        return [rc["node"] for rc in self.truth if rc["node"] != self.root][0]


def random_benchmark_graph(spec: BenchmarkSpec, rng: np.random.Generator) -> tuple[SummaryGraph, dict]:
    names = [f"n{i}" for i in range(spec.n_nodes)]
    edges, coefs = [], {}
    for i in range(1, spec.n_nodes):
        k = 1 if i == 1 else int(rng.integers(1, 3))
        for p in sorted(rng.choice(i, size=k, replace=False)):
            edges.append((names[p], names[i]))
            coefs[(names[p], names[i])] = float(rng.uniform(spec.coef_low, spec.coef_high) * rng.choice([-1.0, 1.0]))
    return SummaryGraph.from_names([(n, 1) for n in names], edges), coefs


def generate_benchmark_instance(spec: BenchmarkSpec, seed: int) -> BenchmarkInstance:
    rng = child_rng(seed, 0)
    g, coefs = random_benchmark_graph(spec, rng)
    transitions = []
    for j, name in enumerate(g.names):
        Bs = [np.array([[coefs[(g.names[p], name)]]]) for p in g.parent_indices(j)]
        transitions.append(LinearGenerator(np.array([[spec.self_coef]]), Bs))
    scm = DynamicScm(g, tuple(transitions), NoiseModel((spec.noise_sigma**2,) * len(g)), 1.0)

    root = g.names[0]
    target = g.names[int(rng.integers(1, len(g)))]
    onset = spec.T // 2
    if spec.kind == "parametric":
        # The root's redrawn self coefficient keeps the default law so it stays stable.
        rc_root = ParametricChange(root, onset, seed=int(rng.integers(2**31)))
        rc_target = ParametricChange(
            target, onset, seed=int(rng.integers(2**31)), low=spec.coef_low, high=spec.coef_high
        )
    else:
        rc_root = StructuralBreak(root, onset)
        rc_target = StructuralBreak(target, onset)

    zeros = np.zeros(g.total_dim)
    s_normal, s_factum = (int(child_seed(seed, k).generate_state(1)[0]) for k in (1, 2))
    start_n = simulate(scm, zeros, spec.burn_in + 1, s_normal).values[-1]
    start_f = simulate(scm, zeros, spec.burn_in + 1, s_factum).values[-1]
    normal = simulate(scm, start_n, spec.T, s_normal + 1)
    factum, _ = inject(scm, start_f, spec.T, s_factum + 1, _Combined(rc_root, rc_target))
    truth = [
        {"node": root, "time": onset, "kind": spec.kind},
        {"node": target, "time": onset, "kind": spec.kind},
    ]
    return BenchmarkInstance(g, scm, normal, factum, truth, root)


# -- synthetic experiment data -------------------------------------------------


@dataclass(frozen=True, eq=False)
class InjectionCase:
    scm: DynamicScm
    factum: Trajectory
    clean: Trajectory
    label: tuple[str, int]
    injection: AdditiveConstant


LINEAR_SITE = ("x", 0, 6)  # node, dim index, time
FHN_SITE = ("x", 0, 24)


def system_setup(system: str, fhn: FhnSpec | None = None):
    """``(scm, sigma, site)`` for ``"linear4"`` or ``"fhn"``."""
    if system == "linear4":
        return make_linear_4node(), LINEAR_NOISE_SIGMA, LINEAR_SITE
    if system == "fhn":
        spec = fhn or FhnSpec()
        return make_fhn(spec), spec.sigma, FHN_SITE
    raise ValueError(f"unknown system {system!r}")


def initial_state(system: str, scm: DynamicScm, seed: int, burn_in: int = 0, fhn: FhnSpec | None = None):
    """Start of a trajectory: FHN uses its fixed initial values, the linear
    system starts at zero, optionally after a noisy burn-in."""
    if system == "fhn":
        return np.asarray((fhn or FhnSpec()).y0, dtype=float)
    if burn_in == 0:
        return np.zeros(scm.graph.total_dim)
    return simulate(scm, np.zeros(scm.graph.total_dim), burn_in + 1, seed).values[-1]


def normal_data(system: str, T_train: int, seed: int, fhn: FhnSpec | None = None) -> list[Trajectory]:
    scm, _, _ = system_setup(system, fhn)
    s_start, s_run = (int(child_seed(seed, k).generate_state(1)[0]) for k in (10, 11))
    y0 = initial_state(system, scm, s_start, fhn=fhn)
    return [simulate(scm, y0, T_train, s_run)]


def injection_case(
    system: str,
    multiple: float,
    T_factum: int,
    seed: int,
    fhn: FhnSpec | None = None,
) -> InjectionCase:
    """A factum with an additive constant ``multiple * sigma`` at the system's site, plus its clean twin."""
    scm, sigma, (node, dim, time) = system_setup(system, fhn)
    s_start, s_run = (int(child_seed(seed, k).generate_state(1)[0]) for k in (20, 21))
    y0 = initial_state(system, scm, s_start, fhn=fhn)
    injection = AdditiveConstant(node, dim, time, multiple * sigma)
    factum, label = inject(scm, y0, T_factum, s_run, injection)
    clean = simulate(scm, y0, T_factum, s_run)
    return InjectionCase(scm, factum, clean, label, injection)
