"""Trainable transition functions and the per-node fitting loop.

Two families are provided: an affine map (``LinearTransition``) and a
three-layer tanh network (``ResidualMlp``). Both predict the increment
``Y_t - Y_{t-1}``; the residual ``+ Y_{t-1}`` lives in the SCM step.

Training minimises the mean squared error over samples *and* output
dimensions with full-batch gradient steps.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from cfrca.dynamics import DynamicScm, NoiseModel, Trajectory, child_rng
from cfrca.errors import DataError, ShapeError
from cfrca.graph import SummaryGraph

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-12


class LinearTransition:
    """``f(x) = W x + b``."""

    variant = "linear"

    def __init__(self, W, b=None):
        self.W = np.asarray(W, dtype=float)
        self.b = np.zeros(self.W.shape[0]) if b is None else np.asarray(b, dtype=float)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError("W must be (out, in) and b must be (out,)")
        self.out_dim, self.in_dim = self.W.shape

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "LinearTransition":
        bound = 1.0 / np.sqrt(in_dim)
        return cls(rng.uniform(-bound, bound, (out_dim, in_dim)), rng.uniform(-bound, bound, out_dim))

    @property
    def params(self) -> list[np.ndarray]:
        return [self.W, self.b]

    def with_params(self, params: Sequence[np.ndarray]) -> "LinearTransition":
        return LinearTransition(*params)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"input width {x.shape[-1]} != {self.in_dim}")
        return x @ self.W.T + self.b

    def backward(self, x: np.ndarray, dy: np.ndarray) -> list[np.ndarray]:
        return [dy.T @ x, dy.sum(axis=0)]

    def loss_and_grad(self, X: np.ndarray, Y: np.ndarray) -> tuple[float, list[np.ndarray]]:
        resid = Y - (X @ self.W.T + self.b)
        return float(np.mean(resid**2)), self.backward(X, -2.0 * resid / resid.size)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.W, self.b)]


class ResidualMlp:
    """``f(x) = W3 tanh(W2 tanh(W1 x + b1) + b2) + b3`` with a 128-unit latent layer by default."""

    variant = "residual_mlp"

    def __init__(self, W1, b1, W2, b2, W3, b3):
        self.W1, self.b1, self.W2, self.b2, self.W3, self.b3 = (
            np.asarray(a, dtype=float) for a in (W1, b1, W2, b2, W3, b3)
        )
        h = self.W1.shape[0]
        if (
            self.b1.shape != (h,)
            or self.W2.shape != (h, h)
            or self.b2.shape != (h,)
            or self.W3.shape[1] != h
            or self.b3.shape != (self.W3.shape[0],)
        ):
            raise ShapeError("inconsistent ResidualMlp parameter shapes")
        self.in_dim = self.W1.shape[1]
        self.out_dim = self.W3.shape[0]
        self.hidden = h

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, hidden: int = 128) -> "ResidualMlp":
        params = []
        for fan_in, fan_out in ((in_dim, hidden), (hidden, hidden), (hidden, out_dim)):
            bound = 1.0 / np.sqrt(fan_in)
            params.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
            params.append(rng.uniform(-bound, bound, fan_out))
        return cls(*params)

    @property
    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2, self.W3, self.b3]

    def with_params(self, params: Sequence[np.ndarray]) -> "ResidualMlp":
        return ResidualMlp(*params)

    def _hidden(self, x):
        h1 = np.tanh(x @ self.W1.T + self.b1)
        h2 = np.tanh(h1 @ self.W2.T + self.b2)
        return h1, h2

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"input width {x.shape[-1]} != {self.in_dim}")
        _, h2 = self._hidden(x)
        return h2 @ self.W3.T + self.b3

    def backward(self, x: np.ndarray, dy: np.ndarray) -> list[np.ndarray]:
        h1, h2 = self._hidden(x)
        return self._grads(x, h1, h2, dy)

    def _grads(self, x, h1, h2, dy):
        da2 = (dy @ self.W3) * (1.0 - h2**2)
        da1 = (da2 @ self.W2) * (1.0 - h1**2)
        return [da1.T @ x, da1.sum(axis=0), da2.T @ h1, da2.sum(axis=0), dy.T @ h2, dy.sum(axis=0)]

    def loss_and_grad(self, X: np.ndarray, Y: np.ndarray) -> tuple[float, list[np.ndarray]]:
        """Mean squared error and its gradient from a single forward pass."""
        h1, h2 = self._hidden(X)
        resid = Y - (h2 @ self.W3.T + self.b3)
        return float(np.mean(resid**2)), self._grads(X, h1, h2, -2.0 * resid / resid.size)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.W1, self.b1), (self.W2, self.b2), (self.W3, self.b3)]


FAMILIES = {"lin": LinearTransition, "nlin": ResidualMlp}


def mse(f, X: np.ndarray, Y: np.ndarray) -> float:
    """Mean of squared errors over samples and output dims."""
    return float(np.mean((Y - f.forward(X)) ** 2))


def gradient(f, X: np.ndarray, Y: np.ndarray) -> list[np.ndarray]:
    """Analytic gradient of :func:`mse` w.r.t. ``f.params``.

    With ``n`` samples and ``out`` output dims the loss is
    ``sum((Y - f(X))**2) / (n * out)``, so for the linear family
    ``dW = -2 (Y - f(X))^T X / (n * out)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    resid = Y - f.forward(X)
    dy = -2.0 * resid / resid.size
    return f.backward(X, dy)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epochs: int = 50
    splits: int = 4
    seed: int = 0
    optimizer: str = "adam"
    hidden: int = 128
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.splits < 2:
            raise ValueError("splits must be >= 2")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        from cfrca.config import PRESETS

        p = PRESETS[name]
        return replace(cls(lr=p["lr"], epochs=p["epochs"], splits=p["splits"]), **overrides)


def train(f, X: np.ndarray, Y: np.ndarray, cfg: TrainConfig):
    """Full-batch Adam (or plain gradient descent) on the mean squared error.

    Returns the trained transition and the loss before each step.
    """
    params = [p.copy() for p in f.params]
    curve: list[float] = []
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2 = cfg.betas
    for epoch in range(1, cfg.epochs + 1):
        loss, grads = f.with_params(params).loss_and_grad(X, Y)
        curve.append(loss)
        if cfg.optimizer == "gd":
            for p, g in zip(params, grads):
                p -= cfg.lr * g
            continue
        c1 = 1 - b1**epoch
        c2 = 1 - b2**epoch
        for p, g, mi, vi in zip(params, grads, m, v):
            mi *= b1
            mi += (1 - b1) * g
            vi *= b2
            vi += (1 - b2) * g * g
            p -= cfg.lr * (mi / c1) / (np.sqrt(vi / c2) + cfg.eps)
    return f.with_params(params), curve


def canonical_order(data: Sequence[Trajectory]) -> list[Trajectory]:
    """Content-based order so fits do not depend on how the caller listed the data."""
    return sorted(data, key=lambda tr: (tr.T, tr.values.tobytes()))


def training_pairs(data: Sequence[Trajectory], graph: SummaryGraph, node) -> tuple[np.ndarray, np.ndarray]:
    """Inputs ``concat(parents_{t-1}, self_{t-1})`` and targets ``self_t - self_{t-1}``."""
    cols = graph.input_columns(node)
    blk = graph.block(node)
    xs, ys = [], []
    for tr in canonical_order(data):
        if tr.values.shape[1] != graph.total_dim:
            raise ShapeError("trajectory layout does not match the graph")
        v = tr.values
        xs.append(v[:-1, cols])
        ys.append(v[1:, blk] - v[:-1, blk])
    if not xs:
        return np.empty((0, len(cols))), np.empty((0, graph.dims[graph.index(node)]))
    return np.concatenate(xs), np.concatenate(ys)


@dataclass(frozen=True, eq=False)
class NodeFit:
    transition: object
    sigma_val_sq: float
    loss_curve: tuple[float, ...] = ()

    def to_json(self) -> dict:
        return transition_to_json(self.transition, self.sigma_val_sq)


def fit(
    data: Sequence[Trajectory],
    graph: SummaryGraph,
    node,
    cfg: TrainConfig,
    family: str = "nlin",
    validate: bool = True,
    init=None,
) -> NodeFit:
    """Fit one node's transition and estimate its validation noise variance.

    The pairs of all trajectories are cut into ``cfg.splits`` contiguous
    segments; each segment is held out once and the pooled held-out squared
    residual (over samples and output dims) is the noise variance. The
    returned transition is then refit on all pairs.

    With ``validate=False`` the folds are skipped and the variance is the
    in-sample error of the final model. ``init`` replaces the random
    initialization of the final model (warm start).
    """
    X, Y = training_pairs(data, graph, node)
    if X.shape[0] < cfg.splits:
        raise DataError(f"need at least {cfg.splits} transition pairs for node {graph.names[graph.index(node)]!r}")
    j = graph.index(node)
    cls = FAMILIES[family]

    def fresh():
        rng = child_rng(cfg.seed, j)
        if cls is ResidualMlp:
            return ResidualMlp.init(X.shape[1], Y.shape[1], rng, hidden=cfg.hidden)
        return cls.init(X.shape[1], Y.shape[1], rng)

    if not validate:
        final, curve = train(init if init is not None else fresh(), X, Y, cfg)
        sigma = max(float(np.mean((Y - final.forward(X)) ** 2)), SIGMA_FLOOR)
        return NodeFit(final, sigma, tuple(curve))

    sq_err = 0.0
    for held in np.array_split(np.arange(X.shape[0]), cfg.splits):
        keep = np.ones(X.shape[0], dtype=bool)
        keep[held] = False
        model, _ = train(fresh(), X[keep], Y[keep], cfg)
        sq_err += float(np.sum((Y[held] - model.forward(X[held])) ** 2))
    sigma = sq_err / Y.size
    if not np.isfinite(sigma):
        raise FloatingPointError(f"validation error diverged for node {graph.names[j]!r}")
    if sigma < SIGMA_FLOOR:
        warnings.warn(f"validation variance for {graph.names[j]!r} is {sigma:.3g}; flooring at {SIGMA_FLOOR}")
        sigma = SIGMA_FLOOR
    final, curve = train(init if init is not None else fresh(), X, Y, cfg)
    return NodeFit(final, sigma, tuple(curve))


@dataclass(frozen=True, eq=False)
class FitResult:
    graph: SummaryGraph
    nodes: tuple[NodeFit, ...]
    family: str = "nlin"

    @property
    def transitions(self) -> tuple:
        return tuple(n.transition for n in self.nodes)

    @property
    def sigma_val_sq(self) -> dict[str, float]:
        return {name: n.sigma_val_sq for name, n in zip(self.graph.names, self.nodes)}

    @property
    def train_loss_curve(self) -> dict[str, tuple[float, ...]]:
        return {name: n.loss_curve for name, n in zip(self.graph.names, self.nodes)}

    def scm(self, dt: float = 1.0) -> DynamicScm:
        return DynamicScm(self.graph, self.transitions, NoiseModel(tuple(n.sigma_val_sq for n in self.nodes)), dt)

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "graph": self.graph.to_json(),
            "nodes": {name: n.to_json() for name, n in zip(self.graph.names, self.nodes)},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FitResult":
        graph = SummaryGraph.from_json(doc["graph"])
        nodes = []
        for name in graph.names:
            t, s = transition_from_json(doc["nodes"][name])
            nodes.append(NodeFit(t, s))
        return cls(graph, tuple(nodes), doc.get("family", "nlin"))

    def save(self, path: str | Path) -> None:
        from cfrca.io import atomic_write_text

        atomic_write_text(path, json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FitResult":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"{path}: cannot read model ({exc})") from None


def fit_scm(
    data: Sequence[Trajectory],
    graph: SummaryGraph,
    cfg: TrainConfig,
    family: str = "nlin",
    validate: bool = True,
) -> FitResult:
    """Fit every node of ``graph``; ``graph`` may differ from the data-generating one."""
    data = [tr if tr.graph is graph else tr.with_graph(graph) for tr in data]
    nodes = tuple(fit(data, graph, j, cfg, family, validate) for j in range(len(graph)))
    return FitResult(graph, nodes, family)


def fit_fm(
    normal: Sequence[Trajectory],
    factum: Trajectory,
    graph: SummaryGraph,
    cfg: TrainConfig,
    family: str = "nlin",
) -> FitResult:
    """Fit on the normal data plus the factum.

    Only the transitions of this model are used downstream (intervention
    variances come from the normal-data fit), so the validation folds are
    skipped.
    """
    return fit_scm(list(normal) + [factum], graph, cfg, family, validate=False)


def transition_to_json(f, sigma_val_sq: float | None = None) -> dict:
    return {
        "variant": f.variant,
        "in_dim": int(f.in_dim),
        "out_dim": int(f.out_dim),
        "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in f.layers()],
        "sigma_val_sq": sigma_val_sq,
    }


def transition_from_json(doc: dict):
    layers = [(np.asarray(layer["W"], dtype=float), np.asarray(layer["b"], dtype=float)) for layer in doc["layers"]]
    if doc["variant"] == "linear":
        f = LinearTransition(*layers[0])
    elif doc["variant"] == "residual_mlp":
        f = ResidualMlp(*[a for layer in layers for a in layer])
    else:
        raise DataError(f"unknown transition variant {doc['variant']!r}")
    if (f.in_dim, f.out_dim) != (doc["in_dim"], doc["out_dim"]):
        raise DataError("declared in_dim/out_dim do not match the weights")
    return f, doc.get("sigma_val_sq")
