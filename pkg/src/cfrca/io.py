"""Trajectory CSVs, dataset directories and atomic file writes."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from cfrca.dynamics import Trajectory
from cfrca.errors import DataError
from cfrca.graph import SummaryGraph


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(x: float) -> str:
    """Shortest decimal string that round-trips to the same double."""
    return repr(float(x))


def trajectory_to_csv(tr: Trajectory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + tr.graph.column_names())
    for t, row in enumerate(tr.values):
        w.writerow([t] + [fmt(x) for x in row])
    return buf.getvalue()


def write_trajectory(path: str | Path, tr: Trajectory) -> None:
    atomic_write_text(path, trajectory_to_csv(tr))


def read_trajectory(path: str | Path, graph: SummaryGraph, dt: float = 1.0) -> Trajectory:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataError(f"trajectory file not found: {path}") from None
    if not rows:
        raise DataError(f"{path}: empty file, header row is mandatory")
    header = rows[0]
    expected = ["t"] + graph.column_names()
    if header != expected:
        raise DataError(f"{path}: header {header} does not match graph columns {expected}")
    try:
        steps = [int(r[0]) for r in rows[1:]]
        values = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=float)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed row ({exc})") from None
    if steps != list(range(len(steps))):
        raise DataError(f"{path}: column 't' must count 0, 1, 2, ...")
    try:
        return Trajectory(values.reshape(len(steps), len(expected) - 1), graph, dt)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_json(path: str | Path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def read_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Contents of a dataset directory."""

    graph: SummaryGraph
    normal: list[Trajectory]
    factum: Trajectory
    truth: dict | None
    classifier: dict | None
    reference: Trajectory | None = None


def normal_paths(directory: Path) -> list[Path]:
    single = directory / "normal.csv"
    if single.exists():
        return [single]
    return sorted(directory.glob("normal_*.csv"))


def write_dataset(
    directory: str | Path,
    graph: SummaryGraph,
    normal: Sequence[Trajectory],
    factum: Trajectory,
    truth: dict | None = None,
    classifier: dict | None = None,
    reference: Trajectory | None = None,
) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    graph.save(d / "graph.json")
    if len(normal) == 1:
        write_trajectory(d / "normal.csv", normal[0])
    else:
        for k, tr in enumerate(normal):
            write_trajectory(d / f"normal_{k:03d}.csv", tr)
    write_trajectory(d / "factum.csv", factum)
    if truth is not None:
        write_json(d / "truth.json", truth)
    if classifier is not None:
        write_json(d / "classifier.json", classifier)
    if reference is not None:
        write_trajectory(d / "reference.csv", reference)


def read_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"dataset directory not found: {d}")
    graph = SummaryGraph.load(d / "graph.json")
    paths = normal_paths(d)
    if not paths:
        raise DataError(f"{d}: no normal.csv or normal_*.csv")
    normal = [read_trajectory(p, graph) for p in paths]
    factum = read_trajectory(d / "factum.csv", graph)
    truth = read_json(d / "truth.json") if (d / "truth.json").exists() else None
    if truth is not None:
        try:
            for rc in truth["root_causes"]:
                if rc["node"] not in graph:
                    raise DataError(f"truth.json names unknown node {rc['node']!r}")
        except (KeyError, TypeError):
            raise DataError(f"{d / 'truth.json'}: expected {{'root_causes': [{{'node', 'time', 'kind'}}]}}") from None
    clf = read_json(d / "classifier.json") if (d / "classifier.json").exists() else None
    reference = read_trajectory(d / "reference.csv", graph) if (d / "reference.csv").exists() else None
    return Dataset(graph, normal, factum, truth, clf, reference)
