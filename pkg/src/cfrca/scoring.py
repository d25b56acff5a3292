"""Normality classifiers, candidate scoring and ranking.

Every classifier returns *normality* (higher is more normal), so the root
cause is the candidate whose counterfactuals look most normal. Bounded
classifiers (values in [0, 1]) are scored as the log of a Laplace-smoothed
mean; the unbounded log-likelihood is scored by its plain mean.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

from cfrca.dynamics import (
    AbductedNoise,
    DynamicScm,
    Intervention,
    RolloutPlan,
    Trajectory,
    _increments,
    abduct,
    child_rng,
    plan_interventions,
    rollout,
)
from cfrca.errors import CapacityError, ShapeError
from cfrca.graph import SummaryGraph


def _as_batch(y, graph: SummaryGraph) -> np.ndarray:
    v = y.values if isinstance(y, Trajectory) else np.asarray(y, dtype=float)
    v = v[None] if v.ndim == 2 else v
    if v.shape[-1] != graph.total_dim:
        raise ShapeError(f"trajectory width {v.shape[-1]} does not match classifier graph ({graph.total_dim})")
    return v


class Classifier:
    bounded = True
    graph: SummaryGraph

    def normality_batch(self, values: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def normality(self, y) -> float:
        return float(self.normality_batch(_as_batch(y, self.graph))[0])


class Corridor(Classifier):
    """Fraction of ``(time, dim)`` entries of ``node`` inside ``center +- halfwidth``."""

    def __init__(self, graph: SummaryGraph, node: str, center, halfwidth):
        self.graph = graph
        self.node = node
        self.center = np.asarray(center, dtype=float)
        self.halfwidth = np.asarray(halfwidth, dtype=float)
        d = graph.dims[graph.index(node)]
        if self.center.shape != (d,) or self.halfwidth.shape != (d,):
            raise ShapeError(f"corridor needs {d} centers and halfwidths")
        if np.any(self.halfwidth <= 0):
            raise ValueError("halfwidths must be positive")

    @classmethod
    def from_normal(cls, data: Sequence[Trajectory], node: str, width: float = 3.0) -> "Corridor":
        """Centered on the normal-data mean, ``width`` standard deviations wide."""
        block = np.concatenate([tr.node(node) for tr in data])
        return cls(data[0].graph, node, block.mean(axis=0), width * block.std(axis=0))

    def normality_batch(self, values):
        v = _as_batch(values, self.graph)[..., self.graph.block(self.node)]
        inside = np.abs(v - self.center) <= self.halfwidth
        return inside.mean(axis=(1, 2))


class Band(Classifier):
    """1 if every entry of ``node`` stays within ``reference +- k*sigma`` at all times, else 0."""

    def __init__(self, graph: SummaryGraph, reference, sigma, k: float = 10.0, node: str | None = None):
        self.graph = graph
        self.node = node
        self.reference = np.asarray(reference.values if isinstance(reference, Trajectory) else reference, dtype=float)
        if self.reference.ndim != 2 or self.reference.shape[1] != graph.total_dim:
            raise ShapeError("reference must be a T x D array")
        self.sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (graph.total_dim,)).copy()
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive")
        self.k = float(k)

    def normality_batch(self, values):
        v = _as_batch(values, self.graph)
        if v.shape[1] != self.reference.shape[0]:
            raise ShapeError("trajectory length differs from the band reference")
        cols = slice(None) if self.node is None else self.graph.block(self.node)
        dev = np.abs(v[..., cols] - self.reference[:, cols])
        return np.all(dev <= self.k * self.sigma[cols], axis=(1, 2)).astype(float)


class LogLik(Classifier):
    """Average one-step Gaussian log-density under a fitted SCM.

    ``(1 / (N (T-1))) * sum_{j,t} log N(Y^j_t | Y^j_{t-1} + f^j(...), s_j I)``
    with ``s_j`` the node's validation variance. Unbounded.
    """

    bounded = False

    def __init__(self, scm: DynamicScm):
        self.scm = scm
        self.graph = scm.graph
        self.variances = np.asarray(scm.noise.variances, dtype=float)

    def normality_batch(self, values):
        v = _as_batch(values, self.graph)
        g = self.graph
        with np.errstate(all="ignore"):
            resid = v[:, 1:] - v[:, :-1] - _increments(self.scm, v)
            total = np.zeros(v.shape[0])
            for j in range(len(g)):
                r = resid[..., g.block(j)]
                s = self.variances[j]
                total += np.sum(-0.5 * np.log(2 * np.pi * s) - r**2 / (2 * s), axis=(1, 2))
        return total / (len(g) * (v.shape[1] - 1))


class ZScore(Classifier):
    """Fraction of time steps whose z-score stays below ``threshold`` in every dim of ``node``."""

    def __init__(self, graph: SummaryGraph, node: str, mean, std, threshold: float):
        self.graph = graph
        self.node = node
        d = graph.dims[graph.index(node)]
        self.mean = np.broadcast_to(np.asarray(mean, dtype=float), (d,)).copy()
        self.std = np.broadcast_to(np.asarray(std, dtype=float), (d,)).copy()
        if np.any(self.std <= 0):
            raise ValueError("std must be positive")
        self.threshold = float(threshold)

    @classmethod
    def from_normal(cls, data: Sequence[Trajectory], node: str, threshold: float) -> "ZScore":
        block = np.concatenate([tr.node(node) for tr in data])
        return cls(data[0].graph, node, block.mean(axis=0), block.std(axis=0), threshold)

    def normality_batch(self, values):
        v = _as_batch(values, self.graph)[..., self.graph.block(self.node)]
        z = np.abs(v - self.mean) / self.std
        return np.all(z < self.threshold, axis=2).mean(axis=1)


# -- candidates and scores -----------------------------------------------------

Key = tuple  # (node, time) or (node, None) for node-level sets


@dataclass(frozen=True)
class Candidate:
    node: str
    time: int | None
    interventions: tuple[Intervention, ...]

    @property
    def key(self) -> Key:
        return (self.node, self.time)


def point_candidates(
    graph: SummaryGraph,
    T: int,
    variance: Mapping[str, float],
    replacement: Mapping[str, object] | None = None,
    nodes: Iterable[str] | None = None,
) -> list[Candidate]:
    """One singleton intervention per ``(node, t)``, ``t = 1..T-1``."""
    out = []
    for name in nodes if nodes is not None else graph.names:
        rep = replacement[name] if replacement is not None else None
        for t in range(1, T):
            out.append(Candidate(name, t, (Intervention(name, t, variance[name], rep),)))
    return out


def node_candidates(
    graph: SummaryGraph,
    T: int,
    variance: Mapping[str, float],
    replacement: Mapping[str, object] | None = None,
    nodes: Iterable[str] | None = None,
) -> list[Candidate]:
    """One candidate per node intervening at every ``t = 1..T-1`` at once."""
    out = []
    for name in nodes if nodes is not None else graph.names:
        rep = replacement[name] if replacement is not None else None
        ivs = tuple(Intervention(name, t, variance[name], rep) for t in range(1, T))
        out.append(Candidate(name, None, ivs))
    return out


@dataclass(frozen=True, eq=False)
class CounterfactualContext:
    """The SCM hosting the counterfactual plus the factum's abducted noise."""

    scm: DynamicScm
    factum: Trajectory
    abducted: AbductedNoise

    @classmethod
    def build(cls, scm: DynamicScm, factum: Trajectory) -> "CounterfactualContext":
        return cls(scm, factum, abduct(scm, factum))


@dataclass(frozen=True)
class ScoreEntry:
    node: str
    time: int | None
    score: float
    n_samples: int
    n_diverged: int
    flagged: bool = False

    @property
    def key(self) -> Key:
        return (self.node, self.time)


@dataclass(frozen=True)
class ScoreTable:
    entries: tuple[ScoreEntry, ...]
    n_samples: int
    alpha: float
    bounded: bool = True

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def scores(self) -> dict[Key, float]:
        return {e.key: e.score for e in self.entries}

    @property
    def candidates(self) -> list[Key]:
        return [e.key for e in self.entries]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["candidate_node", "candidate_time", "score", "n_samples", "n_diverged"])
        for e in self.entries:
            w.writerow([e.node, "" if e.time is None else e.time, repr(float(e.score)), e.n_samples, e.n_diverged])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, alpha: float = 1.0) -> "ScoreTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        entries = tuple(
            ScoreEntry(
                r["candidate_node"],
                None if r["candidate_time"] == "" else int(r["candidate_time"]),
                float(r["score"]),
                int(r["n_samples"]),
                int(r["n_diverged"]),
                flagged=float(r["score"]) == -math.inf,
            )
            for r in rows
        )
        n = entries[0].n_samples if entries else 0
        return cls(entries, n, alpha)


def smoothed_log_mean(normalities: np.ndarray, alpha: float = 1.0) -> float:
    """``log((alpha + sum) / (2 alpha + n))``."""
    n = normalities.shape[0]
    return math.log((alpha + float(np.sum(normalities))) / (2 * alpha + n))


def _candidate_seed_key(graph: SummaryGraph, key: Key) -> tuple[int, int]:
    node, time = key
    return graph.index(node), 0 if time is None else time + 1


def approx_shapley(
    candidates: Sequence[Candidate],
    context: CounterfactualContext,
    classifier: Classifier,
    n_samples: int,
    seed: int,
    alpha: float = 1.0,
    batch_rows: int = 4096,
) -> ScoreTable:
    """Score each singleton candidate by the normality of its counterfactuals.

    Each candidate draws its fresh noise from a stream keyed by its own
    ``(node, time)``, so the table does not depend on enumeration order.
    A candidate whose samples all diverge gets ``-inf`` and is flagged.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    scm, factum = context.scm, context.factum
    g = scm.graph
    T, D = factum.T, g.total_dim
    per_chunk = max(1, batch_rows // n_samples)
    entries: list[ScoreEntry] = []
    for start in range(0, len(candidates), per_chunk):
        chunk = candidates[start : start + per_chunk]
        plans = []
        for cand in chunk:
            rng = child_rng(seed, *_candidate_seed_key(g, cand.key))
            z = rng.standard_normal((n_samples, T - 1, D))
            plans.append(plan_interventions(scm, context.abducted.residuals, cand.interventions, z))
        values, diverged = rollout(scm, factum.values[0], RolloutPlan.stack(plans))
        for k, cand in enumerate(chunk):
            rows = slice(k * n_samples, (k + 1) * n_samples)
            ok = ~diverged[rows]
            n_div = int(n_samples - ok.sum())
            if not ok.any():
                entries.append(ScoreEntry(cand.node, cand.time, -math.inf, n_samples, n_div, flagged=True))
                continue
            norm = classifier.normality_batch(values[rows][ok])
            norm = norm[np.isfinite(norm)]
            if norm.size == 0:
                entries.append(ScoreEntry(cand.node, cand.time, -math.inf, n_samples, n_div, flagged=True))
                continue
            score = smoothed_log_mean(norm, alpha) if classifier.bounded else float(np.mean(norm))
            entries.append(ScoreEntry(cand.node, cand.time, score, n_samples, n_div))
    return ScoreTable(tuple(entries), n_samples, alpha, classifier.bounded)


def node_level_scores(
    context: CounterfactualContext,
    nodes: Iterable[str],
    variance: Mapping[str, float],
    classifier: Classifier,
    n_samples: int,
    seed: int,
    replacement: Mapping[str, object] | None = None,
    exclude: Iterable[str] = (),
    alpha: float = 1.0,
) -> ScoreTable:
    """Score node-level intervention sets (every time step of one node)."""
    skip = set(exclude)
    keep = [n for n in nodes if n not in skip]
    cands = node_candidates(context.scm.graph, context.factum.T, variance, replacement, keep)
    return approx_shapley(cands, context, classifier, n_samples, seed, alpha)


def exact_shapley_oracle(
    players: Sequence[Hashable],
    v: Callable[[frozenset], float],
    max_players: int = 12,
) -> dict[Hashable, float]:
    """Shapley values by enumerating all coalitions (``2^n`` evaluations of ``v``)."""
    players = list(players)
    n = len(players)
    if n > max_players:
        raise CapacityError(f"{n} players exceed the exact-enumeration limit of {max_players}")
    if len(set(players)) != n:
        raise ValueError("players must be distinct")
    value = {}
    for mask in range(1 << n):
        value[mask] = float(v(frozenset(players[i] for i in range(n) if mask >> i & 1)))
    weight = [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)]
    out = {}
    for i, p in enumerate(players):
        bit = 1 << i
        total = 0.0
        for mask in range(1 << n):
            if mask & bit:
                continue
            total += weight[bin(mask).count("1")] * (value[mask | bit] - value[mask])
        out[p] = total
    return out


@dataclass(frozen=True)
class RankingResult:
    argmax: tuple[Key, ...]
    ordered: tuple[tuple[Key, float], ...]
    identified: bool | None

    @property
    def unique(self) -> bool:
        return len(self.argmax) == 1

    def to_json(self) -> dict:
        return {
            "argmax": [{"node": k[0], "time": k[1]} for k in self.argmax],
            "identified": self.identified,
        }


def rank(st: ScoreTable, truth=None, decimals: int = 12) -> RankingResult:
    """Argmax set under equality after rounding to ``decimals`` places.

    ``truth`` is a ``(node, time)`` key, a ``(node, None)`` node-level key, or
    ``None`` when no ground truth exists.
    """
    if not st.entries:
        raise ValueError("empty score table")
    rounded = [round(e.score, decimals) if math.isfinite(e.score) else e.score for e in st.entries]
    best = max(rounded)
    argmax = tuple(e.key for e, r in zip(st.entries, rounded) if r == best)
    order = sorted(zip(st.entries, rounded), key=lambda er: -er[1] if er[1] != -math.inf else math.inf)
    ordered = tuple((e.key, e.score) for e, _ in order)
    identified = None if truth is None else tuple(truth) in set(argmax)
    return RankingResult(argmax, ordered, identified)


# -- classifier configuration ----------------------------------------------------


def classifier_to_json(phi: Classifier) -> dict:
    """Serializable description; a band's reference trajectory is stored separately."""
    if isinstance(phi, Corridor):
        return {"type": "corridor", "node": phi.node, "center": phi.center.tolist(), "halfwidth": phi.halfwidth.tolist()}
    if isinstance(phi, Band):
        return {"type": "band", "sigma": phi.sigma.tolist(), "k": phi.k, "node": phi.node}
    if isinstance(phi, LogLik):
        return {"type": "loglik"}
    if isinstance(phi, ZScore):
        return {
            "type": "zscore",
            "node": phi.node,
            "mean": phi.mean.tolist(),
            "std": phi.std.tolist(),
            "threshold": phi.threshold,
        }
    raise TypeError(f"cannot serialize {type(phi).__name__}")


def classifier_from_json(doc: Mapping, graph: SummaryGraph, reference=None):
    """Inverse of :func:`classifier_to_json`.

    Returns a :class:`Classifier`, except for ``"loglik"`` which needs a
    fitted model and comes back as a factory ``fit_result -> LogLik``.
    """
    kind = doc.get("type")
    if kind == "corridor":
        return Corridor(graph, doc["node"], doc["center"], doc["halfwidth"])
    if kind == "band":
        if reference is None:
            raise ValueError("band classifier needs a reference trajectory")
        return Band(graph, reference, doc["sigma"], doc.get("k", 10.0), doc.get("node"))
    if kind == "loglik":
        return lambda fit: LogLik(fit.scm())
    if kind == "zscore":
        return ZScore(graph, doc["node"], doc["mean"], doc["std"], doc["threshold"])
    raise ValueError(f"unknown classifier type {kind!r}")
