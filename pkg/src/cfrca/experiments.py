"""Experiment runners: injection sweeps, graph robustness and the random benchmark.

Each runner returns a list of :class:`Cell` results (one per table cell and
method variant) that can be written as plot-ready CSV with :func:`cells_to_csv`.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from cfrca.config import ExperimentConfig
from cfrca.dynamics import child_seed
from cfrca.graph import SummaryGraph, perturb
from cfrca.models import FitResult, TrainConfig, fit_scm
from cfrca.pipeline import ALL_VARIANTS, DiagnoseConfig, MethodVariant, diagnose
from cfrca.scoring import Band, Classifier, Corridor, LogLik
from cfrca.systems import (
    BenchmarkSpec,
    FhnSpec,
    InjectionCase,
    generate_benchmark_instance,
    injection_case,
    normal_data,
)

log = logging.getLogger(__name__)

CORRIDOR_NODE = "z"
CORRIDOR_WIDTH = 3.0
BAND_K = 10.0


def seed_int(master: int, *key: int) -> int:
    return int(child_seed(master, *key).generate_state(1)[0])


@dataclass(frozen=True)
class Cell:
    """Identification outcomes of one variant in one table cell."""

    label: tuple[tuple[str, object], ...]
    variant: MethodVariant
    hits: tuple[bool, ...]

    @property
    def n(self) -> int:
        return len(self.hits)

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.hits)) if self.hits else float("nan")

    @property
    def stderr(self) -> float:
        if self.n < 2:
            return 0.0
        return float(np.std(np.asarray(self.hits, dtype=float), ddof=1) / np.sqrt(self.n))

    def get(self, key: str):
        return dict(self.label)[key]

    def __str__(self) -> str:
        where = ", ".join(f"{k}={v}" for k, v in self.label)
        return f"{where}, {self.variant.name}: {self.accuracy:.2f} +- {self.stderr:.2f} (n={self.n})"


def cells_to_csv(cells: Sequence[Cell]) -> str:
    keys: list[str] = []
    for c in cells:
        keys += [k for k, _ in c.label if k not in keys]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys + ["variant", "accuracy", "stderr", "n"])
    for c in cells:
        lab = dict(c.label)
        w.writerow([lab.get(k, "") for k in keys] + [c.variant.slug, repr(c.accuracy), repr(c.stderr), c.n])
    return buf.getvalue()


def find(cells: Iterable[Cell], variant: MethodVariant | str, **label) -> Cell:
    v = MethodVariant.parse(variant) if isinstance(variant, str) else variant
    for c in cells:
        if c.variant == v and all(c.get(k) == val for k, val in label.items()):
            return c
    raise KeyError(f"no cell for {v.name} with {label}")


def _diag_config(cfg: ExperimentConfig, train: TrainConfig, **kw) -> DiagnoseConfig:
    return DiagnoseConfig(train=train, n_samples=cfg.n_samples, n_exemplars=0, **kw)


def _classifier(system: str, case: InjectionCase, corridor: Corridor | None, fhn: FhnSpec) -> Classifier:
    if system == "fhn":
        return Band(case.factum.graph, case.clean, fhn.sigma, BAND_K)
    return corridor


@dataclass
class _Fits:
    """Normal-data fits per (graph, family), computed on first use."""

    normal: list
    train: TrainConfig

    def __post_init__(self):
        self._cache: dict = {}

    def get(self, graph: SummaryGraph, family: str) -> FitResult:
        key = (graph.names, graph.edges, family)
        if key not in self._cache:
            self._cache[key] = fit_scm(self.normal, graph, self.train, family)
        return self._cache[key]


def _injection_setup(system: str, cfg: ExperimentConfig, seed: int):
    fhn = FhnSpec()
    normal = normal_data(system, cfg.T_train, seed_int(seed, 0), fhn=fhn)
    corridor = Corridor.from_normal(normal, CORRIDOR_NODE, CORRIDOR_WIDTH) if system == "linear4" else None
    return fhn, normal, corridor


def run_injection_protocol(
    system: str,
    constants: Sequence[float],
    n_facta: int = 20,
    cfg: ExperimentConfig | None = None,
    variants: Sequence[MethodVariant] = ALL_VARIANTS,
    seed: int = 0,
    progress: Callable[[str], None] | None = None,
) -> list[Cell]:
    """Accuracy per injected constant (a multiple of the system's noise std).

    The same ``n_facta`` factum seeds are reused for every constant, and the
    normal-data model ``M`` is fitted once per model family.
    """
    cfg = cfg or ExperimentConfig(preset="lin" if system == "linear4" else "fhn", system=system)
    train = cfg.train_config(seed)
    fhn, normal, corridor = _injection_setup(system, cfg, seed)
    fits = _Fits(normal, train)
    graph = normal[0].graph
    dcfg = _diag_config(cfg, train)
    cells = []
    for c in constants:
        hits: dict[MethodVariant, list[bool]] = {v: [] for v in variants}
        for k in range(n_facta):
            case = injection_case(system, c, cfg.T_factum, seed_int(seed, 1, k), fhn=fhn)
            phi = _classifier(system, case, corridor, fhn)
            for v in variants:
                rep = diagnose(
                    normal, case.factum, graph, v, dcfg, phi, seed_int(seed, 2, k),
                    truth=case.label, m_fit=fits.get(graph, v.model),
                )
                hits[v].append(bool(rep.ranking.identified))
            if progress:
                progress(f"constant {c:g}: factum {k + 1}/{n_facta}")
        cells += [Cell((("constant", c),), v, tuple(h)) for v, h in hits.items()]
    return cells


def run_robustness(
    cfg: ExperimentConfig | None = None,
    n_edits: int = 1,
    mode: str = "remove",
    n_facta: int = 20,
    variants: Sequence[MethodVariant] = ALL_VARIANTS,
    seed: int = 0,
    constant: float = 500.0,
    n_graphs: int = 4,
    progress: Callable[[str], None] | None = None,
) -> list[Cell]:
    """Diagnose linear-system facta with a perturbed model-side graph.

    Data are always generated with the true graph. ``n_graphs`` perturbed
    graphs are drawn and the facta are shared among them round-robin; the
    factum seeds do not depend on ``mode`` so remove/add runs are paired.
    """
    if mode not in ("remove", "add"):
        raise ValueError("mode must be 'remove' or 'add'")
    cfg = cfg or ExperimentConfig(preset="lin", system="linear4")
    train = cfg.train_config(seed)
    fhn, normal, corridor = _injection_setup("linear4", cfg, seed)
    fits = _Fits(normal, train)
    true_graph = normal[0].graph
    graphs = []
    for i in range(n_graphs):
        n_rm, n_add = (n_edits, 0) if mode == "remove" else (0, n_edits)
        g, edit = perturb(true_graph, n_rm, n_add, seed_int(seed, 3, n_edits, i))
        log.info("perturbed graph %d: removed %s, added %s", i, edit.removed, edit.added)
        graphs.append(g)
    dcfg = _diag_config(cfg, train)
    hits: dict[MethodVariant, list[bool]] = {v: [] for v in variants}
    for k in range(n_facta):
        g = graphs[k % n_graphs]
        case = injection_case("linear4", constant, cfg.T_factum, seed_int(seed, 1, k), fhn=fhn)
        for v in variants:
            rep = diagnose(
                normal, case.factum, g, v, dcfg, corridor, seed_int(seed, 2, k),
                truth=case.label, m_fit=fits.get(g, v.model),
            )
            hits[v].append(bool(rep.ranking.identified))
        if progress:
            progress(f"{mode} {n_edits}: factum {k + 1}/{n_facta}")
    label = (("mode", mode), ("n_edits", n_edits))
    return [Cell(label, v, tuple(h)) for v, h in hits.items()]


def run_benchmark(
    spec: BenchmarkSpec | None = None,
    variants: Sequence[MethodVariant] = ALL_VARIANTS,
    Ts: Sequence[int] = (100,),
    kinds: Sequence[str] = ("parametric", "structural"),
    n_graphs: int | None = None,
    cfg: ExperimentConfig | None = None,
    seed: int = 0,
    progress: Callable[[str], None] | None = None,
) -> list[Cell]:
    """Node-level root cause identification on random linear DAGs.

    The root node's root cause is excluded: the root is not a candidate, and
    identification asks whether the other injected node is in the argmax set.
    Normality is the average log-likelihood under the normal-data model.
    """
    spec = spec or BenchmarkSpec()
    cfg = cfg or ExperimentConfig(preset="benchmark", system="benchmark")
    n_graphs = spec.n_graphs if n_graphs is None else n_graphs
    train = cfg.train_config(seed)
    cells = []
    for kind in kinds:
        for T in Ts:
            hits: dict[MethodVariant, list[bool]] = {v: [] for v in variants}
            for i in range(n_graphs):
                inst = generate_benchmark_instance(replace(spec, T=T, kind=kind), seed_int(seed, 4, i))
                dcfg = _diag_config(cfg, train, mode="node", exclude=(inst.root,))
                m_fits: dict[str, FitResult] = {}
                for v in variants:
                    if v.model not in m_fits:
                        m_fits[v.model] = fit_scm([inst.normal], inst.graph, train, v.model)
                    rep = diagnose(
                        [inst.normal], inst.factum, inst.graph, v, dcfg, _loglik, seed_int(seed, 5, i),
                        truth=(inst.target, None), m_fit=m_fits[v.model],
                    )
                    hits[v].append(bool(rep.ranking.identified))
                if progress:
                    progress(f"{kind} T={T}: graph {i + 1}/{n_graphs}")
            cells += [Cell((("kind", kind), ("T", T)), v, tuple(h)) for v, h in hits.items()]
    return cells


def _loglik(fit: FitResult) -> LogLik:
    return LogLik(fit.scm())
