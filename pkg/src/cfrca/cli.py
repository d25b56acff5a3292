"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Every flag can also be given in a JSON file passed with ``--config``; flags
given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from cfrca.config import PRESETS, SYSTEM_PRESET, ExperimentConfig, load_config_file
from cfrca.errors import DataError
from cfrca.experiments import (
    CORRIDOR_NODE,
    CORRIDOR_WIDTH,
    BAND_K,
    cells_to_csv,
    run_benchmark,
    run_injection_protocol,
    run_robustness,
    seed_int,
)
from cfrca.io import atomic_write_text, read_dataset, read_json, write_dataset, write_json, write_trajectory
from cfrca.models import fit_scm
from cfrca.pipeline import ALL_VARIANTS, DiagnoseConfig, MethodVariant, diagnose
from cfrca.scoring import Band, Corridor, LogLik, classifier_from_json, classifier_to_json

log = logging.getLogger("cfrca")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DEFAULT_CONSTANT = {"linear4": 500.0, "fhn": 2.0}

# Defaults applied after the config file is merged; ``None`` means "no default".
DEFAULTS = {
    "generate": {"system": "linear4", "kind": "parametric", "T": 100},
    "train": {"family": "nlin"},
    "diagnose": {"variant": ["nlin-sn"], "n_exemplars": 5},
    "benchmark": {"graphs": 10, "T": [100, 200], "kind": ["parametric", "structural"]},
    "inject-sweep": {"system": "linear4", "n_facta": 20},
    "robustness": {"edits": [1], "mode": ["remove", "add"], "n_facta": 20, "n_graphs": 4, "constant": 500.0},
    "ingest-river": {},
}
SEEDED = {"generate", "train", "diagnose", "benchmark", "inject-sweep", "robustness"}


def _variant(text: str) -> MethodVariant:
    try:
        return MethodVariant.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_training(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--preset", choices=sorted(PRESETS), help="hyperparameter preset (default: by system)")
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--splits", type=int)
    g.add_argument("--n-samples", type=int, help="counterfactual samples per candidate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfrca", description="Counterfactual root cause analysis.")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, help="JSON file with flag values")
        p.add_argument("--seed", type=int)
        return p

    p = command("generate", "write a synthetic dataset directory")
    p.add_argument("--system", choices=["linear4", "fhn", "benchmark"])
    p.add_argument("--out", type=Path)
    p.add_argument("--constant", type=float, help="injected constant in noise standard deviations")
    p.add_argument("--kind", choices=["parametric", "structural"], help="benchmark root-cause kind")
    p.add_argument("--T", type=int, help="benchmark factum length")
    p.add_argument("--T-train", type=int)
    p.add_argument("--T-factum", type=int)
    p.add_argument("--coef-low", type=float)
    p.add_argument("--coef-high", type=float)
    p.add_argument("--preset", choices=sorted(PRESETS))

    p = command("train", "fit the normal-data model and save it as JSON")
    p.add_argument("--data", type=Path)
    p.add_argument("--family", choices=["lin", "nlin"])
    p.add_argument("--out", type=Path)
    _add_training(p)

    p = command("diagnose", "rank root-cause candidates for a dataset's factum")
    p.add_argument("--data", type=Path)
    p.add_argument("--variant", type=_variant, action="append", help="nlin-sn, nlin-n, lin-sn or lin-n; repeatable")
    p.add_argument("--out", type=Path)
    p.add_argument("--mode", choices=["point", "node"])
    p.add_argument("--n-exemplars", type=int)
    p.add_argument("--emit-plot-data", action="store_true", default=None, help="write (time, score) CSV per node")
    _add_training(p)

    p = command("benchmark", "accuracy on random linear DAGs with persistent root causes")
    p.add_argument("--out", type=Path)
    p.add_argument("--graphs", type=int)
    p.add_argument("--T", type=int, action="append")
    p.add_argument("--kind", choices=["parametric", "structural"], action="append")
    p.add_argument("--variant", type=_variant, action="append")
    p.add_argument("--coef-low", type=float)
    p.add_argument("--coef-high", type=float)
    _add_training(p)

    p = command("inject-sweep", "accuracy against the size of an injected constant")
    p.add_argument("--system", choices=["linear4", "fhn"])
    p.add_argument("--constants", type=float, nargs="+")
    p.add_argument("--n-facta", type=int)
    p.add_argument("--variant", type=_variant, action="append")
    p.add_argument("--out", type=Path)
    _add_training(p)

    p = command("robustness", "accuracy with edges removed from or added to the model graph")
    p.add_argument("--edits", type=int, choices=[1, 2], action="append")
    p.add_argument("--mode", choices=["remove", "add"], action="append")
    p.add_argument("--n-facta", type=int)
    p.add_argument("--n-graphs", type=int)
    p.add_argument("--constant", type=float)
    p.add_argument("--variant", type=_variant, action="append")
    p.add_argument("--out", type=Path)
    _add_training(p)

    p = command("ingest-river", "align station CSVs into a dataset directory")
    p.add_argument("--fixture", action="store_true", default=None, help="use the shipped synthetic fixture")
    p.add_argument("--station", action="append", metavar="NAME=PATH", help="station file; repeatable")
    p.add_argument("--graph", type=Path)
    p.add_argument("--train-window", nargs=2, metavar=("START", "END"))
    p.add_argument("--factum-window", nargs=2, metavar=("START", "END"))
    p.add_argument("--threshold", type=float, help="z-score threshold for the target station")
    p.add_argument("--target", help="station read by the z-score classifier")
    p.add_argument("--train-cap", type=int)
    p.add_argument("--out", type=Path)
    return parser


def merge_config(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    """Fill flags not given on the command line from ``--config``, then from defaults."""
    if getattr(args, "config", None) is not None:
        doc = load_config_file(args.config)
        for key, value in doc.items():
            attr = key.replace("-", "_")
            if attr in ("command", "config") or not hasattr(args, attr):
                raise DataError(f"{args.config}: unknown key {key!r} for '{args.command}'")
            if getattr(args, attr) is None:
                if attr == "variant":
                    value = [_variant(v) for v in ([value] if isinstance(value, str) else value)]
                setattr(args, attr, value)
    for key, value in DEFAULTS[args.command].items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    if args.command in SEEDED and args.seed is None:
        parser.error(f"{args.command}: --seed is required")
    if isinstance(getattr(args, "variant", None), list):
        args.variant = [v if isinstance(v, MethodVariant) else _variant(v) for v in args.variant]
    return args


def experiment_config(args, system: str) -> ExperimentConfig:
    preset = getattr(args, "preset", None) or SYSTEM_PRESET.get(system, "lin")
    overrides = {k: getattr(args, k, None) for k in ("lr", "epochs", "splits")}
    cfg = ExperimentConfig(
        preset=preset,
        system=system,
        seed=args.seed,
        T_train=getattr(args, "T_train", None),
        T_factum=getattr(args, "T_factum", None),
        **{k: v for k, v in overrides.items() if v is not None},
    )
    if getattr(args, "n_samples", None) is not None:
        cfg.n_samples = args.n_samples
    return cfg


def _require(args, *names: str) -> None:
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise _Usage(f"{args.command}: missing {flags}")


class _Usage(Exception):
    pass


# -- subcommands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    from cfrca.systems import BenchmarkSpec, FhnSpec, generate_benchmark_instance, injection_case, normal_data

    _require(args, "out")
    if args.system == "benchmark":
        spec = BenchmarkSpec(T=args.T, kind=args.kind)
        if args.coef_low is not None or args.coef_high is not None:
            spec = replace(spec, coef_low=args.coef_low or spec.coef_low, coef_high=args.coef_high or spec.coef_high)
        inst = generate_benchmark_instance(spec, args.seed)
        truth = {"root_causes": inst.truth, "excluded_nodes": [inst.root], "candidate_mode": "node"}
        write_dataset(args.out, inst.graph, [inst.normal], inst.factum, truth, {"type": "loglik"})
        write_json(Path(args.out) / "dataset.json", {"system": "benchmark", "seed": args.seed, "T": args.T})
    else:
        cfg = experiment_config(args, args.system)
        constant = DEFAULT_CONSTANT[args.system] if args.constant is None else args.constant
        normal = normal_data(args.system, cfg.T_train, seed_int(args.seed, 0))
        case = injection_case(args.system, constant, cfg.T_factum, seed_int(args.seed, 1, 0))
        node, time = case.label
        truth = {
            "root_causes": [{"node": node, "time": time, "kind": "additive", "dim": case.injection.dim}],
            "constant_sigmas": constant,
        }
        if args.system == "fhn":
            phi = Band(case.factum.graph, case.clean, FhnSpec().sigma, BAND_K)
            reference = case.clean
        else:
            phi = Corridor.from_normal(normal, CORRIDOR_NODE, CORRIDOR_WIDTH)
            reference = None
        write_dataset(args.out, case.factum.graph, normal, case.factum, truth, classifier_to_json(phi), reference)
        write_json(Path(args.out) / "dataset.json", {"system": args.system, "seed": args.seed})
    print(f"wrote dataset to {args.out}")
    return 0


def _dataset_config(args) -> ExperimentConfig:
    """Training settings keyed by the ``system`` recorded in ``dataset.json``."""
    meta = Path(args.data) / "dataset.json"
    system = read_json(meta).get("system", "linear4") if meta.exists() else "linear4"
    return experiment_config(args, system)


def cmd_train(args) -> int:
    _require(args, "data", "out")
    data = read_dataset(args.data)
    cfg = _dataset_config(args)
    fit = fit_scm(data.normal, data.graph, cfg.train_config(args.seed), args.family)
    fit.save(args.out)
    for name, s in fit.sigma_val_sq.items():
        print(f"{name}: sigma_val_sq = {s:.6g}")
    return 0


def _truth_key(truth: dict | None, mode: str):
    if not truth:
        return None
    excluded = set(truth.get("excluded_nodes", []))
    rc = next(r for r in truth["root_causes"] if r["node"] not in excluded)
    return (rc["node"], None) if mode == "node" else (rc["node"], rc["time"])


def cmd_diagnose(args) -> int:
    _require(args, "data", "out")
    data = read_dataset(args.data)
    cfg = _dataset_config(args)
    truth = data.truth or {}
    mode = args.mode or truth.get("candidate_mode", "point")
    phi = classifier_from_json(data.classifier, data.graph, data.reference) if data.classifier else None
    if phi is None:
        phi = lambda fit: LogLik(fit.scm())  # noqa: E731
    dcfg = DiagnoseConfig(
        train=cfg.train_config(args.seed),
        n_samples=cfg.n_samples,
        mode=mode,
        exclude=tuple(truth.get("excluded_nodes", ())),
        n_exemplars=args.n_exemplars,
    )
    key = _truth_key(data.truth, mode)
    out = Path(args.out)
    m_fits = {}
    for variant in args.variant:
        if variant.model not in m_fits:
            m_fits[variant.model] = fit_scm(data.normal, data.graph, dcfg.train, variant.model)
        rep = diagnose(
            data.normal, data.factum, data.graph, variant, dcfg, phi, args.seed, truth=key, m_fit=m_fits[variant.model]
        )
        doc = rep.to_json()
        write_json(out / f"report_{variant.slug}.json", doc)
        atomic_write_text(out / f"scores_{variant.slug}.csv", rep.scores.to_csv())
        for k, ex in enumerate(rep.exemplars):
            write_trajectory(out / f"exemplar_{variant.slug}_{k}.csv", ex)
        if args.emit_plot_data:
            atomic_write_text(out / f"shapley_{variant.slug}.csv", _plot_rows(rep.scores))
        print(f"[{variant.name}]")
        for (node, t), s in rep.ranking.ordered[:5]:
            print(f"  {node:>12} t={'all' if t is None else t:<4} score={s:.6g}")
        if not rep.ranking.unique:
            print(f"  no unique root cause: {len(rep.ranking.argmax)} candidates tie for the top score")
        if rep.ranking.identified is not None:
            print(f"identified: {'true' if rep.ranking.identified else 'false'}")
    return 0


def _plot_rows(table) -> str:
    lines = ["node,time,score"]
    for e in sorted(table.entries, key=lambda e: (e.node, -1 if e.time is None else e.time)):
        lines.append(f"{e.node},{'' if e.time is None else e.time},{e.score!r}")
    return "\n".join(lines) + "\n"


def _progress(msg: str) -> None:
    log.info(msg)


def _write_cells(args, cells, name: str) -> None:
    for c in cells:
        print(c)
    if args.out is not None:
        atomic_write_text(Path(args.out) / name, cells_to_csv(cells))
        print(f"wrote {Path(args.out) / name}")


def cmd_benchmark(args) -> int:
    from cfrca.systems import BenchmarkSpec

    cfg = experiment_config(args, "benchmark")
    spec = BenchmarkSpec()
    if args.coef_low is not None or args.coef_high is not None:
        spec = replace(spec, coef_low=args.coef_low or spec.coef_low, coef_high=args.coef_high or spec.coef_high)
    cells = run_benchmark(
        spec, args.variant or ALL_VARIANTS, args.T, args.kind, args.graphs, cfg, args.seed, _progress
    )
    _write_cells(args, cells, "benchmark.csv")
    return 0


def cmd_inject_sweep(args) -> int:
    _require(args, "constants")
    cfg = experiment_config(args, args.system)
    cells = run_injection_protocol(
        args.system, args.constants, args.n_facta, cfg, args.variant or ALL_VARIANTS, args.seed, _progress
    )
    _write_cells(args, cells, f"inject_{args.system}.csv")
    return 0


def cmd_robustness(args) -> int:
    cfg = experiment_config(args, "linear4")
    cells = []
    for n in args.edits:
        for mode in args.mode:
            cells += run_robustness(
                cfg, n, mode, args.n_facta, args.variant or ALL_VARIANTS, args.seed,
                args.constant, args.n_graphs, _progress,
            )
    _write_cells(args, cells, "robustness.csv")
    return 0


def cmd_ingest_river(args) -> int:
    from cfrca.config import RIVER_TRAIN_CAP
    from cfrca.graph import SummaryGraph
    from cfrca.river import TARGET_STATION, fixture_dir, ingest_river
    from cfrca.scoring import ZScore

    _require(args, "out")
    truth = None
    if args.fixture:
        base = fixture_dir()
        fx = read_json(base / "river.json")
        stations = {k: base / v for k, v in fx["stations"].items()}
        graph_path = base / fx["graph"]
        train_window = args.train_window or fx["train_window"]
        factum_window = args.factum_window or fx["factum_window"]
        threshold = args.threshold if args.threshold is not None else fx["classifier"]["threshold"]
        target = args.target or fx["classifier"]["node"]
        truth = {"root_causes": [{**fx["truth"], "kind": "additive"}]}
    else:
        _require(args, "station", "graph", "train_window", "factum_window", "threshold")
        stations = {}
        for item in args.station:
            name, sep, path = item.partition("=")
            if not sep:
                raise _Usage(f"--station expects NAME=PATH, got {item!r}")
            stations[name] = Path(path)
        graph_path, train_window, factum_window = args.graph, args.train_window, args.factum_window
        threshold, target = args.threshold, args.target or TARGET_STATION
    graph = SummaryGraph.load(graph_path)
    cap = RIVER_TRAIN_CAP if args.train_cap is None else args.train_cap
    ds = ingest_river(stations, graph, train_window, factum_window, cap)
    if target not in graph:
        raise DataError(f"z-score target {target!r} is not a station")
    phi = ZScore.from_normal(ds.train, target, threshold)
    write_dataset(args.out, graph, ds.train, ds.factum, truth, classifier_to_json(phi))
    write_json(Path(args.out) / "dataset.json", {"system": "river"})
    write_json(
        Path(args.out) / "river_meta.json",
        {
            "factum_start": str(ds.factum_start),
            "step_minutes": 15,
            "training_segments": [tr.T for tr in ds.train],
            "gaps": [
                {"station": g.station, "start": str(g.start), "length": g.length, "interpolated": g.interpolated}
                for g in ds.gaps
            ],
        },
    )
    print(f"wrote river dataset to {args.out}: {len(ds.train)} training segments, factum of {ds.factum.T} steps")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "diagnose": cmd_diagnose,
    "benchmark": cmd_benchmark,
    "inject-sweep": cmd_inject_sweep,
    "robustness": cmd_robustness,
    "ingest-river": cmd_ingest_river,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = merge_config(parser, args)
        return COMMANDS[args.command](args)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
