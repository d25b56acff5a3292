"""Summary graph over named, possibly multivariate nodes.

Self-dependence ``Y^j_{t-1} -> Y^j_t`` is implicit and never stored as an edge.
Every edge points from time ``t-1`` to time ``t`` in the unrolled graph, so a
cyclic summary graph still unrolls to a DAG.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cfrca.errors import CapacityError, DataError

Edge = tuple[int, int]


@dataclass(frozen=True)
class NodeId:
    index: int
    name: str


@dataclass(frozen=True)
class SummaryGraph:
    """Nodes in declaration order plus directed edges between node indices.

    ``latent`` holds declared-but-unobserved nodes (e.g. a confounder) and
    ``latent_edges`` their outgoing edges by name. Both are carried through
    file round-trips but ignored by simulation and fitting.
    """

    names: tuple[str, ...]
    dims: tuple[int, ...]
    edges: tuple[Edge, ...] = ()
    latent: tuple[tuple[str, int], ...] = ()
    latent_edges: tuple[tuple[str, str], ...] = ()
    _lookup: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if len(self.names) != len(self.dims):
            raise ValueError("names and dims differ in length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("node names must be unique")
        if any(int(d) < 1 for d in self.dims):
            raise ValueError("node dims must be >= 1")
        n = len(self.names)
        edges = set()
        for src, dst in self.edges:
            if not (0 <= src < n and 0 <= dst < n):
                raise ValueError(f"edge ({src}, {dst}) references an unknown node")
            if src == dst:
                raise ValueError(f"self-loop on {self.names[src]!r}; self-dependence is implicit")
            edges.add((int(src), int(dst)))
        object.__setattr__(self, "edges", tuple(sorted(edges)))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "_lookup", {name: i for i, name in enumerate(self.names)})

    @classmethod
    def from_names(cls, nodes: Sequence[tuple[str, int]], edges: Iterable[tuple[str, str]] = ()) -> "SummaryGraph":
        names = tuple(name for name, _ in nodes)
        lookup = {name: i for i, name in enumerate(names)}
        try:
            idx_edges = tuple((lookup[s], lookup[d]) for s, d in edges)
        except KeyError as exc:
            raise KeyError(f"edge endpoint {exc.args[0]!r} is not a node") from None
        return cls(names, tuple(d for _, d in nodes), idx_edges)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, node) -> bool:
        if isinstance(node, NodeId):
            return 0 <= node.index < len(self.names) and self.names[node.index] == node.name
        return node in self._lookup

    @property
    def nodes(self) -> list[NodeId]:
        return [NodeId(i, name) for i, name in enumerate(self.names)]

    def index(self, node: str | int | NodeId) -> int:
        if isinstance(node, NodeId):
            if node not in self:
                raise KeyError(f"unknown node {node!r}")
            return node.index
        if isinstance(node, (int, np.integer)):
            if not 0 <= node < len(self.names):
                raise KeyError(f"unknown node index {node}")
            return int(node)
        try:
            return self._lookup[node]
        except KeyError:
            raise KeyError(f"unknown node {node!r}") from None

    def node(self, node: str | int | NodeId) -> NodeId:
        i = self.index(node)
        return NodeId(i, self.names[i])

    @property
    def total_dim(self) -> int:
        return sum(self.dims)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.dims)[:-1]])) if self.dims else ()

    def block(self, node) -> slice:
        i = self.index(node)
        start = self.offsets[i]
        return slice(start, start + self.dims[i])

    def parent_indices(self, node) -> list[int]:
        j = self.index(node)
        return sorted(src for src, dst in self.edges if dst == j)

    def children_indices(self, node) -> list[int]:
        j = self.index(node)
        return sorted(dst for src, dst in self.edges if src == j)

    def input_columns(self, node) -> np.ndarray:
        """Column indices feeding node ``node``'s transition: parents in index order, then self."""
        cols = [np.arange(self.block(p).start, self.block(p).stop) for p in self.parent_indices(node)]
        cols.append(np.arange(self.block(node).start, self.block(node).stop))
        return np.concatenate(cols)

    def input_dim(self, node) -> int:
        return self.dims[self.index(node)] + sum(self.dims[p] for p in self.parent_indices(node))

    def column_names(self) -> list[str]:
        return [f"{name}_{k}" for name, d in zip(self.names, self.dims) for k in range(d)]

    def edge_names(self) -> list[tuple[str, str]]:
        return [(self.names[s], self.names[d]) for s, d in self.edges]

    def with_edges(self, edges: Iterable[Edge]) -> "SummaryGraph":
        return SummaryGraph(self.names, self.dims, tuple(edges), self.latent, self.latent_edges)

    def descendants(self, node) -> set[int]:
        seen: set[int] = set()
        stack = [self.index(node)]
        while stack:
            for c in self.children_indices(stack.pop()):
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        return seen

    # -- file format -------------------------------------------------------

    def to_json(self) -> dict:
        nodes = [{"name": n, "dim": d} for n, d in zip(self.names, self.dims)]
        nodes += [{"name": n, "dim": d, "latent": True} for n, d in self.latent]
        edges = [[s, d] for s, d in self.edge_names()] + [[s, d] for s, d in self.latent_edges]
        return {"nodes": nodes, "edges": edges}

    @classmethod
    def from_json(cls, doc: dict) -> "SummaryGraph":
        try:
            raw_nodes = doc["nodes"]
            raw_edges = doc.get("edges", [])
            observed = [(str(n["name"]), int(n.get("dim", 1))) for n in raw_nodes if not n.get("latent", False)]
            latent = tuple((str(n["name"]), int(n.get("dim", 1))) for n in raw_nodes if n.get("latent", False))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed graph document: {exc}") from None
        latent_names = {n for n, _ in latent}
        obs_edges, lat_edges = [], []
        for pair in raw_edges:
            if len(pair) != 2:
                raise DataError(f"edge {pair!r} is not a [src, dst] pair")
            src, dst = str(pair[0]), str(pair[1])
            (lat_edges if src in latent_names or dst in latent_names else obs_edges).append((src, dst))
        try:
            g = cls.from_names(observed, obs_edges)
        except (KeyError, ValueError) as exc:
            raise DataError(str(exc)) from None
        return cls(g.names, g.dims, g.edges, latent, tuple(lat_edges))

    def save(self, path: str | Path) -> None:
        from cfrca.io import atomic_write_text

        atomic_write_text(path, json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SummaryGraph":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise DataError(f"graph file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(doc)


@dataclass(frozen=True)
class GraphPerturbation:
    removed: tuple[tuple[str, str], ...]
    added: tuple[tuple[str, str], ...]
    seed: int
    isolated: tuple[str, ...] = ()


def parents(g: SummaryGraph, j) -> list[NodeId]:
    """Parents of ``j`` in node-index order; never contains ``j`` itself."""
    return [g.node(i) for i in g.parent_indices(j)]


def topological_schedule(g: SummaryGraph) -> list[NodeId]:
    """Canonical evaluation order for one unrolled step.

    Values at step ``t`` only depend on step ``t-1``, so any order is valid;
    declaration order keeps runs reproducible.
    """
    return g.nodes


def perturb(g: SummaryGraph, n_remove: int, n_add: int, seed: int) -> tuple[SummaryGraph, GraphPerturbation]:
    """Remove and add random edges, uniformly without replacement.

    Added edges are drawn from ordered pairs that are neither self-loops nor
    edges of ``g``. Nodes left without any edge are recorded in ``isolated``.
    """
    if n_remove < 0 or n_add < 0:
        raise ValueError("edit counts must be non-negative")
    existing = list(g.edges)
    if n_remove > len(existing):
        raise CapacityError(f"cannot remove {n_remove} of {len(existing)} edges")
    taken = set(existing)
    absent = [pair for pair in itertools.permutations(range(len(g)), 2) if pair not in taken]
    if n_add > len(absent):
        raise CapacityError(f"cannot add {n_add} edges, only {len(absent)} pairs are free")
    rng = np.random.default_rng(seed)
    removed = [existing[i] for i in sorted(rng.choice(len(existing), size=n_remove, replace=False))] if n_remove else []
    added = [absent[i] for i in sorted(rng.choice(len(absent), size=n_add, replace=False))] if n_add else []
    new_edges = [e for e in existing if e not in removed] + added
    new_g = g.with_edges(new_edges)
    touched = {i for e in new_g.edges for i in e}
    isolated = tuple(g.names[i] for i in range(len(g)) if i not in touched)
    record = GraphPerturbation(
        removed=tuple((g.names[s], g.names[d]) for s, d in removed),
        added=tuple((g.names[s], g.names[d]) for s, d in added),
        seed=int(seed),
        isolated=isolated,
    )
    return new_g, record
