"""End-to-end diagnosis of one faulty trajectory."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from cfrca.config import DEFAULT_N_SAMPLES
from cfrca.dynamics import Trajectory, child_rng, sample_counterfactuals
from cfrca.graph import SummaryGraph
from cfrca.models import FitResult, TrainConfig, fit_fm, fit_scm
from cfrca.scoring import (
    Classifier,
    CounterfactualContext,
    RankingResult,
    ScoreTable,
    approx_shapley,
    node_candidates,
    point_candidates,
    rank,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MethodVariant:
    """Model family (``"lin"`` or ``"nlin"``) and intervention type (``"N"`` or ``"SN"``)."""

    model: str
    intervention: str

    def __post_init__(self):
        if self.model not in ("lin", "nlin"):
            raise ValueError(f"unknown model family {self.model!r}")
        if self.intervention not in ("N", "SN"):
            raise ValueError(f"unknown intervention type {self.intervention!r}")

    @property
    def structural(self) -> bool:
        return self.intervention == "SN"

    @property
    def name(self) -> str:
        fam = "Lin" if self.model == "lin" else "NLin"
        return f"{fam}(S,N)" if self.structural else f"{fam}(N)"

    @property
    def slug(self) -> str:
        return f"{self.model}-{self.intervention.lower()}"

    @classmethod
    def parse(cls, text: str) -> "MethodVariant":
        """Accepts ``nlin-sn``, ``lin-n``, ``NLin(S,N)`` and similar spellings."""
        t = text.strip().lower().replace(" ", "")
        for model in ("nlin", "lin"):
            if t.startswith(model):
                rest = t[len(model) :].strip("-_()")
                if rest in ("sn", "s,n"):
                    return cls(model, "SN")
                if rest == "n":
                    return cls(model, "N")
        raise ValueError(f"cannot parse method variant {text!r}")

    def __str__(self) -> str:
        return self.name


ALL_VARIANTS = tuple(MethodVariant(m, i) for m in ("nlin", "lin") for i in ("SN", "N"))


@dataclass(frozen=True)
class DiagnoseConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    n_samples: int = DEFAULT_N_SAMPLES
    mode: str = "point"  # "point": every (node, t); "node": node-level sets
    exclude: tuple[str, ...] = ()
    n_exemplars: int = 5
    alpha: float = 1.0

    def __post_init__(self):
        if self.mode not in ("point", "node"):
            raise ValueError(f"unknown candidate mode {self.mode!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass(frozen=True, eq=False)
class DiagnosisReport:
    variant: MethodVariant
    scores: ScoreTable
    ranking: RankingResult
    exemplars: tuple[Trajectory, ...]
    sigma_val_sq: dict
    runtime: dict
    n_diverged: int

    def to_json(self) -> dict:
        return {
            "variant": self.variant.name,
            "ranking": self.ranking.to_json(),
            "top": [{"node": k[0], "time": k[1], "score": s} for k, s in self.ranking.ordered[:10]],
            "scores_csv": self.scores.to_csv(),
            "sigma_val_sq": self.sigma_val_sq,
            "runtime": self.runtime,
            "n_diverged": self.n_diverged,
            "n_exemplars": len(self.exemplars),
        }


def fit_models(
    normal: Sequence[Trajectory],
    factum: Trajectory,
    graph: SummaryGraph,
    variant: MethodVariant,
    cfg: TrainConfig,
    m_fit: FitResult | None = None,
) -> tuple[FitResult, FitResult | None]:
    """``M`` on normal data and, for structural variants, ``FM`` on normal + factum."""
    m = m_fit if m_fit is not None else fit_scm(normal, graph, cfg, variant.model)
    fm = fit_fm(normal, factum, graph, cfg, variant.model) if variant.structural else None
    return m, fm


def diagnose(
    normal: Sequence[Trajectory],
    factum: Trajectory,
    graph: SummaryGraph,
    variant: MethodVariant,
    cfg: DiagnoseConfig,
    phi: Classifier | Callable[[FitResult], Classifier],
    seed: int,
    truth=None,
    m_fit: FitResult | None = None,
    fm_fit: FitResult | None = None,
) -> DiagnosisReport:
    """Fit, abduct, intervene, score and rank.

    ``graph`` is the graph the models assume; it may differ from the one that
    generated the data. ``phi`` is either a classifier or a factory that
    builds one from the normal-data fit (used by the log-likelihood score).
    Pass ``m_fit``/``fm_fit`` to reuse fits across variants or facta.
    """
    t0 = time.perf_counter()
    if m_fit is None:
        m_fit = fit_scm(normal, graph, cfg.train, variant.model)
    if variant.structural and fm_fit is None:
        fm_fit = fit_fm(normal, factum, graph, cfg.train, variant.model)
    t_fit = time.perf_counter() - t0

    m_scm = m_fit.scm(factum.dt)
    variance = m_fit.sigma_val_sq
    if variant.structural:
        host = fm_fit.scm(factum.dt)
        replacement = dict(zip(graph.names, m_fit.transitions))
    else:
        host = m_scm
        replacement = None
    classifier = phi if isinstance(phi, Classifier) else phi(m_fit)

    factum = factum.with_graph(graph)
    context = CounterfactualContext.build(host, factum)
    nodes = [n for n in graph.names if n not in set(cfg.exclude)]
    if cfg.mode == "point":
        cands = point_candidates(graph, factum.T, variance, replacement, nodes)
    else:
        cands = node_candidates(graph, factum.T, variance, replacement, nodes)
    t1 = time.perf_counter()
    table = approx_shapley(cands, context, classifier, cfg.n_samples, seed, cfg.alpha)
    t_score = time.perf_counter() - t1
    ranking = rank(table, truth)

    exemplars: tuple[Trajectory, ...] = ()
    if cfg.n_exemplars > 0:
        top = ranking.ordered[0][0]
        cand = next(c for c in cands if c.key == top)
        ex_seed = int(child_rng(seed, 7919).integers(2**31))
        values, div = sample_counterfactuals(
            host, context.abducted, factum, cand.interventions, cfg.n_exemplars, ex_seed
        )
        exemplars = tuple(Trajectory(v, graph, factum.dt) for v, bad in zip(values, div) if not bad)

    n_div = sum(e.n_diverged for e in table.entries)
    if n_div:
        log.info("%s: %d diverged counterfactual samples", variant.name, n_div)
    return DiagnosisReport(
        variant=variant,
        scores=table,
        ranking=ranking,
        exemplars=exemplars,
        sigma_val_sq=variance,
        runtime={"fit_s": t_fit, "score_s": t_score, "n_candidates": len(cands)},
        n_diverged=n_div,
    )
