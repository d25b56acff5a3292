"""Dynamic SCM engine: simulation, abduction and counterfactual sampling.

A node ``j`` evolves as ``Y^j_t = Y^j_{t-1} + f^j(Y^{PA(j)}_{t-1}, Y^j_{t-1}) + N^j_t``.
Noise is added once per step without any ``sqrt(dt)`` scaling. Row 0 of a
trajectory is the initial condition and is never intervened on.

All batched routines work on arrays shaped ``(B, T, D)``; ``B`` indexes
independent samples that share the structural equations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol, Sequence

import numpy as np

from cfrca.errors import BoundsError, DivergenceError, ShapeError
from cfrca.graph import SummaryGraph

log = logging.getLogger(__name__)


class Transition(Protocol):
    in_dim: int
    out_dim: int

    def forward(self, x: np.ndarray) -> np.ndarray: ...


def child_seed(master: int, *key: int) -> np.random.SeedSequence:
    """Deterministic child stream for task ``key`` of a master seed."""
    return np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, *(int(k) & 0xFFFFFFFF for k in key)])


def child_rng(master: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, *key))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """``T x D`` observations; row ``t`` concatenates the node blocks in graph order."""

    values: np.ndarray
    graph: SummaryGraph
    dt: float = 1.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ShapeError(f"trajectory must be 2-D, got shape {values.shape}")
        if values.shape[0] < 2:
            raise ShapeError("trajectory needs at least 2 rows")
        if values.shape[1] != self.graph.total_dim:
            raise ShapeError(f"trajectory has {values.shape[1]} columns, graph needs {self.graph.total_dim}")
        if not np.all(np.isfinite(values)):
            raise ValueError("trajectory contains non-finite values")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def node(self, node) -> np.ndarray:
        return self.values[:, self.graph.block(node)]

    def with_graph(self, graph: SummaryGraph) -> "Trajectory":
        return Trajectory(self.values, graph, self.dt)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.graph.names == other.graph.names and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean Gaussian noise per node.

    Nodes with a ``scales`` entry draw ``C @ z`` with ``z`` standard normal,
    others draw isotropically with their variance.
    """

    variances: tuple[float, ...]
    scales: tuple[Any, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "variances", tuple(float(v) for v in self.variances))
        if any(not v > 0 for v in self.variances):
            raise ValueError("noise variances must be positive")
        if self.scales is not None:
            scales = tuple(None if c is None else np.asarray(c, dtype=float) for c in self.scales)
            for c in scales:
                if c is not None and (c.ndim != 2 or c.shape[0] != c.shape[1]):
                    raise ValueError("noise scale matrices must be square")
            object.__setattr__(self, "scales", scales)

    @classmethod
    def isotropic(cls, variances: Sequence[float]) -> "NoiseModel":
        return cls(tuple(variances))

    def scale(self, graph: SummaryGraph, z: np.ndarray) -> np.ndarray:
        """Map standard-normal draws ``z[..., D]`` to noise of this model."""
        out = np.empty_like(z)
        for j in range(len(graph)):
            blk = graph.block(j)
            c = self.scales[j] if self.scales is not None else None
            if c is None:
                out[..., blk] = math.sqrt(self.variances[j]) * z[..., blk]
            else:
                if c.shape[0] != graph.dims[j]:
                    raise ShapeError(f"scale matrix for {graph.names[j]!r} does not match node dim")
                out[..., blk] = z[..., blk] @ c.T
        return out


@dataclass(frozen=True)
class DynamicScm:
    graph: SummaryGraph
    transitions: tuple
    noise: NoiseModel
    dt: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))
        if len(self.transitions) != len(self.graph):
            raise ShapeError("need exactly one transition per node")
        if len(self.noise.variances) != len(self.graph):
            raise ShapeError("need exactly one noise variance per node")
        for j, f in enumerate(self.transitions):
            if f.in_dim != self.graph.input_dim(j) or f.out_dim != self.graph.dims[j]:
                raise ShapeError(
                    f"transition for {self.graph.names[j]!r} maps {f.in_dim}->{f.out_dim}, "
                    f"graph needs {self.graph.input_dim(j)}->{self.graph.dims[j]}"
                )

    def transition(self, node):
        return self.transitions[self.graph.index(node)]

    def with_graph(self, graph: SummaryGraph, transitions=None) -> "DynamicScm":
        return DynamicScm(graph, tuple(transitions or self.transitions), self.noise, self.dt)


@dataclass(frozen=True)
class Intervention:
    """Noise and/or structural-equation replacement at ``(node, time)``.

    ``new_variance`` alone replaces the noise distribution; ``replacement``
    alone swaps the increment function while the active noise rule stays in
    place; both together is the canonical structural intervention.
    """

    node: str
    time: int
    new_variance: float | None = None
    replacement: Any = None

    def __post_init__(self):
        if self.new_variance is None and self.replacement is None:
            raise ValueError("intervention needs a new_variance, a replacement, or both")
        if self.new_variance is not None and self.new_variance < 0:
            raise ValueError("new_variance must be >= 0")

    @property
    def kind(self) -> str:
        if self.replacement is None:
            return "noise"
        return "struct" if self.new_variance is None else "both"


@dataclass(frozen=True, eq=False)
class AbductedNoise:
    """``residuals[t-1]`` is the noise ``N_t`` that reproduces the observed row ``t``."""

    residuals: np.ndarray
    graph: SummaryGraph

    def __post_init__(self):
        r = np.asarray(self.residuals, dtype=float)
        if r.ndim != 2 or r.shape[1] != self.graph.total_dim:
            raise ShapeError(f"residuals have shape {r.shape}")
        if not np.all(np.isfinite(r)):
            raise ValueError("abducted residuals are not finite")
        r.setflags(write=False)
        object.__setattr__(self, "residuals", r)


@dataclass
class _Override:
    node: int
    fn: Any
    mask: np.ndarray  # (B, T-1) bool


@dataclass
class RolloutPlan:
    """Per-sample noise and structural overrides for a batched rollout."""

    noise: np.ndarray  # (B, T-1, D)
    overrides: list = field(default_factory=list)

    @property
    def batch(self) -> int:
        return self.noise.shape[0]

    @staticmethod
    def stack(plans: Sequence["RolloutPlan"]) -> "RolloutPlan":
        noise = np.concatenate([p.noise for p in plans], axis=0)
        sizes = [p.batch for p in plans]
        starts = np.concatenate([[0], np.cumsum(sizes)])
        merged: dict[tuple[int, int], _Override] = {}
        for k, p in enumerate(plans):
            for ov in p.overrides:
                key = (ov.node, id(ov.fn))
                if key not in merged:
                    merged[key] = _Override(ov.node, ov.fn, np.zeros((noise.shape[0], noise.shape[1]), dtype=bool))
                merged[key].mask[starts[k] : starts[k + 1]] |= ov.mask
        return RolloutPlan(noise, list(merged.values()))


def rollout(
    scm: DynamicScm,
    y0: np.ndarray,
    plan: RolloutPlan,
    raise_on_divergence: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the structural equations forward for every sample in ``plan``.

    Returns ``(values, diverged)`` with ``values`` shaped ``(B, T, D)``. A
    diverged sample keeps NaNs from its first non-finite step onwards.
    """
    g = scm.graph
    B, steps, D = plan.noise.shape
    y0 = np.broadcast_to(np.asarray(y0, dtype=float), (B, D))
    out = np.empty((B, steps + 1, D))
    out[:, 0] = y0
    diverged = np.zeros(B, dtype=bool)
    cols = [g.input_columns(j) for j in range(len(g))]
    blocks = [g.block(j) for j in range(len(g))]
    by_node: dict[int, list[_Override]] = {}
    for ov in plan.overrides:
        by_node.setdefault(ov.node, []).append(ov)
    with np.errstate(all="ignore"):
        for t in range(1, steps + 1):
            prev = out[:, t - 1]
            cur = out[:, t]
            for j, f in enumerate(scm.transitions):
                x = prev[:, cols[j]]
                inc = f.forward(x)
                for ov in by_node.get(j, ()):
                    m = ov.mask[:, t - 1]
                    if m.any():
                        inc = np.array(inc, copy=True)
                        inc[m] = ov.fn.forward(x[m])
                cur[:, blocks[j]] = prev[:, blocks[j]] + inc + plan.noise[:, t - 1, blocks[j]]
                bad = ~np.isfinite(cur[:, blocks[j]]).all(axis=1)
                if bad.any():
                    if raise_on_divergence:
                        raise DivergenceError(g.names[j], t)
                    diverged |= bad
    out[diverged] = np.where(np.isfinite(out[diverged]), out[diverged], np.nan)
    return out, diverged


def draw_noise(scm: DynamicScm, T: int, seed: int) -> np.ndarray:
    """The ``(T-1, D)`` noise sequence that ``simulate`` uses for ``seed``."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((T - 1, scm.graph.total_dim))
    return scm.noise.scale(scm.graph, z)


def simulate(scm: DynamicScm, y0, T: int, seed: int, noiseless: bool = False) -> Trajectory:
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    if y0.shape[0] != scm.graph.total_dim:
        raise ShapeError(f"y0 has width {y0.shape[0]}, graph needs {scm.graph.total_dim}")
    if T < 2:
        raise ValueError("T must be >= 2")
    noise = np.zeros((T - 1, scm.graph.total_dim)) if noiseless else draw_noise(scm, T, seed)
    values, _ = rollout(scm, y0, RolloutPlan(noise[None]), raise_on_divergence=True)
    return Trajectory(values[0], scm.graph, scm.dt)


class Injection(Protocol):
    label: tuple

    def apply(self, scm: DynamicScm, T: int) -> tuple[np.ndarray, list]: ...


@dataclass(frozen=True)
class AdditiveConstant:
    """Add ``c`` to dimension ``dim`` of ``node``'s structural equation at one step."""

    node: str
    dim: int
    time: int
    c: float

    @property
    def label(self) -> tuple[str, int]:
        return (self.node, self.time)

    def apply(self, scm: DynamicScm, T: int) -> tuple[np.ndarray, list]:
        g = scm.graph
        if self.node not in g:
            raise BoundsError(f"unknown node {self.node!r}")
        j = g.index(self.node)
        if not 0 <= self.dim < g.dims[j]:
            raise BoundsError(f"dim {self.dim} outside node {self.node!r} (dim {g.dims[j]})")
        if not 1 <= self.time <= T - 1:
            raise BoundsError(f"time {self.time} outside [1, {T - 1}]")
        offset = np.zeros((T - 1, g.total_dim))
        offset[self.time - 1, g.block(j).start + self.dim] = self.c
        return offset, []


def inject(scm: DynamicScm, y0, T: int, seed: int, injection) -> tuple[Trajectory, tuple]:
    """Simulate like ``simulate(scm, y0, T, seed)`` with one root cause injected.

    Returns the faulty trajectory and the ground-truth label of the injection.
    """
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    offset, overrides = injection.apply(scm, T)
    noise = draw_noise(scm, T, seed) + offset
    plan = RolloutPlan(noise[None], [_Override(j, fn, mask[None]) for j, fn, mask in overrides])
    values, _ = rollout(scm, y0, plan, raise_on_divergence=True)
    return Trajectory(values[0], scm.graph, scm.dt), injection.label


def _increments(scm: DynamicScm, values: np.ndarray) -> np.ndarray:
    """``f^j`` evaluated on rows ``0..T-2`` of ``values[..., T, D]``."""
    g = scm.graph
    prev = values[..., :-1, :]
    out = np.empty(prev.shape)
    for j, f in enumerate(scm.transitions):
        x = prev[..., g.input_columns(j)]
        flat = f.forward(x.reshape(-1, x.shape[-1]))
        out[..., g.block(j)] = flat.reshape(*prev.shape[:-1], g.dims[j])
    return out


def abduct(scm: DynamicScm, factum: Trajectory) -> AbductedNoise:
    """Residuals ``N_t = Y_t - Y_{t-1} - f(Y_{t-1})`` for ``t = 1..T-1``."""
    if factum.graph.names != scm.graph.names or factum.graph.dims != scm.graph.dims:
        raise ShapeError("factum layout does not match the SCM graph")
    v = factum.values
    residuals = v[1:] - v[:-1] - _increments(scm, v)
    return AbductedNoise(residuals, scm.graph)


def _check_interventions(scm: DynamicScm, interventions: Iterable[Intervention], T: int) -> list[Intervention]:
    items = list(interventions)
    for iv in items:
        if iv.node not in scm.graph:
            raise BoundsError(f"intervention on unknown node {iv.node!r}")
        if not 1 <= iv.time <= T - 1:
            raise BoundsError(f"intervention time {iv.time} outside [1, {T - 1}]")
        if iv.replacement is not None:
            j = scm.graph.index(iv.node)
            if iv.replacement.in_dim != scm.graph.input_dim(j) or iv.replacement.out_dim != scm.graph.dims[j]:
                raise ShapeError(f"replacement transition for {iv.node!r} has the wrong width")
    return items


def plan_interventions(
    scm: DynamicScm,
    base_noise: np.ndarray,
    interventions: Sequence[Intervention],
    z: np.ndarray,
) -> RolloutPlan:
    """Build a rollout plan from replayed ``base_noise`` ``(T-1, D)``.

    ``z`` holds standard-normal draws ``(B, T-1, D)``; a noise-replacing
    intervention at ``(j, t)`` uses ``sqrt(var) * z[:, t-1, block_j]``.
    """
    g = scm.graph
    B = z.shape[0]
    noise = np.repeat(base_noise[None], B, axis=0)
    overrides: dict[tuple[int, int], _Override] = {}
    for iv in interventions:
        j = g.index(iv.node)
        blk = g.block(j)
        if iv.new_variance is not None:
            noise[:, iv.time - 1, blk] = math.sqrt(iv.new_variance) * z[:, iv.time - 1, blk]
        if iv.replacement is not None:
            key = (j, id(iv.replacement))
            if key not in overrides:
                overrides[key] = _Override(j, iv.replacement, np.zeros((B, base_noise.shape[0]), dtype=bool))
            overrides[key].mask[:, iv.time - 1] = True
    return RolloutPlan(noise, list(overrides.values()))


def sample_counterfactuals(
    scm: DynamicScm,
    abducted: AbductedNoise,
    factum: Trajectory,
    interventions: Iterable[Intervention],
    n_samples: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Array form of :func:`counterfactual_sample`: ``(values (n, T, D), diverged (n,))``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    items = _check_interventions(scm, interventions, factum.T)
    if abducted.residuals.shape != (factum.T - 1, scm.graph.total_dim):
        raise ShapeError("abducted noise does not match the factum")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_samples, factum.T - 1, scm.graph.total_dim))
    plan = plan_interventions(scm, abducted.residuals, items, z)
    return rollout(scm, factum.values[0], plan)


def counterfactual_sample(
    scm: DynamicScm,
    abducted: AbductedNoise,
    factum: Trajectory,
    interventions: Iterable[Intervention],
    n_samples: int,
    seed: int,
) -> list[Trajectory]:
    """Abduction, action and prediction for one intervention set.

    Diverged samples are dropped with a warning in the log.
    """
    values, diverged = sample_counterfactuals(scm, abducted, factum, interventions, n_samples, seed)
    if diverged.any():
        log.warning("%d of %d counterfactual samples diverged", int(diverged.sum()), n_samples)
    return [Trajectory(v, scm.graph, scm.dt) for v, bad in zip(values, diverged) if not bad]


def treatment_effect(
    scm: DynamicScm,
    interventions: Iterable[Intervention],
    phi,
    n: int,
    seed: int,
    y0,
    T: int,
) -> float:
    """Increase in failure rate ``E[fault | M_Xi] - E[fault | M]``.

    Faultiness is the negated normality of ``phi``. Both arms share the same
    standard-normal draws, so an empty intervention set gives exactly 0.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    items = _check_interventions(scm, interventions, T)
    rng = np.random.default_rng(seed)
    g = scm.graph
    z = rng.standard_normal((n, T - 1, g.total_dim))
    base = scm.noise.scale(g, z)
    plan_base = RolloutPlan(base)
    plan_int = RolloutPlan(base.copy())
    overrides: dict[tuple[int, int], _Override] = {}
    for iv in items:
        j = g.index(iv.node)
        blk = g.block(j)
        if iv.new_variance is not None:
            plan_int.noise[:, iv.time - 1, blk] = math.sqrt(iv.new_variance) * z[:, iv.time - 1, blk]
        if iv.replacement is not None:
            key = (j, id(iv.replacement))
            overrides.setdefault(key, _Override(j, iv.replacement, np.zeros((n, T - 1), dtype=bool)))
            overrides[key].mask[:, iv.time - 1] = True
    plan_int.overrides = list(overrides.values())
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    v0, d0 = rollout(scm, y0, plan_base)
    v1, d1 = rollout(scm, y0, plan_int)
    ok = ~(d0 | d1)
    if not ok.any():
        return math.nan
    n0 = phi.normality_batch(v0[ok])
    n1 = phi.normality_batch(v1[ok])
    return float(np.mean(n0) - np.mean(n1))


class ShiftedTransition:
    """``base`` plus a constant offset on its output; models an additive fault."""

    def __init__(self, base, offset):
        self.base = base
        self.offset = np.asarray(offset, dtype=float)
        self.in_dim = base.in_dim
        self.out_dim = base.out_dim

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.base.forward(x) + self.offset
