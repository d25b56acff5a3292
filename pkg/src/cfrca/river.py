"""River gauge ingestion on a 15-minute grid, plus a synthetic 4-station generator.

Each station file is a CSV with a ``timestamp,value`` header. Timestamps must
sit on the 15-minute grid. After alignment, gaps of up to four steps are filled
by linear interpolation; longer gaps split the training data into separate
trajectories.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from cfrca.config import RIVER_TRAIN_CAP
from cfrca.dynamics import Trajectory, child_rng
from cfrca.errors import DataError
from cfrca.graph import SummaryGraph

log = logging.getLogger(__name__)

STEP = np.timedelta64(15, "m")
MAX_INTERP_GAP = 4

STATIONS = ("henthorn", "whalley_weir", "new_jumbles_rock", "samlesbury")
TARGET_STATION = "new_jumbles_rock"


def river_graph() -> SummaryGraph:
    """Two upstream gauges feed New Jumbles Rock, which feeds Samlesbury; rain ``Z`` is latent."""
    g = SummaryGraph.from_names(
        [(s, 1) for s in STATIONS],
        [("henthorn", "new_jumbles_rock"), ("whalley_weir", "new_jumbles_rock"), ("new_jumbles_rock", "samlesbury")],
    )
    return SummaryGraph(g.names, g.dims, g.edges, (("Z", 1),), (("Z", "henthorn"), ("Z", "whalley_weir")))


def parse_time(text: str) -> np.datetime64:
    try:
        return np.datetime64(text.strip().replace(" ", "T"), "s")
    except ValueError:
        raise DataError(f"cannot parse timestamp {text!r}") from None


def read_station_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Timestamps (``datetime64[s]``, ascending) and values of one station file."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataError(f"station file not found: {path}") from None
    if not rows or [c.strip() for c in rows[0]] != ["timestamp", "value"]:
        raise DataError(f"{path}: expected header 'timestamp,value'")
    times, values = [], []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"{path}:{n}: expected 2 fields, got {len(row)}")
        times.append(parse_time(row[0]))
        try:
            values.append(float(row[1]))
        except ValueError:
            raise DataError(f"{path}:{n}: value {row[1]!r} is not a number") from None
    t = np.array(times, dtype="datetime64[s]")
    v = np.array(values, dtype=float)
    order = np.argsort(t, kind="stable")
    t, v = t[order], v[order]
    dup = t[1:][t[1:] == t[:-1]]
    if dup.size:
        raise DataError(f"{path}: duplicate timestamps {[str(x) for x in dup[:5]]}")
    if not np.all(np.isfinite(v)):
        raise DataError(f"{path}: non-finite values")
    return t, v


@dataclass(frozen=True)
class GapEvent:
    station: str
    start: np.datetime64
    length: int
    interpolated: bool


def align(series: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    """Place every station on one common 15-minute grid; missing entries are NaN."""
    offenders = []
    for name, (t, _) in series.items():
        off = t[(t - t.astype("datetime64[D]")) % STEP != np.timedelta64(0, "s")]
        offenders += [f"{name}@{x}" for x in off]
    if offenders:
        shown = ", ".join(offenders[:10])
        more = f" (+{len(offenders) - 10} more)" if len(offenders) > 10 else ""
        raise DataError(f"timestamps off the 15-minute grid: {shown}{more}")
    if any(t.size == 0 for t, _ in series.values()):
        raise DataError("a station file has no rows")
    start = min(t[0] for t, _ in series.values())
    stop = max(t[-1] for t, _ in series.values())
    grid = np.arange(start, stop + STEP, STEP).astype("datetime64[s]")
    values = np.full((grid.size, len(series)), np.nan)
    for s, (t, v) in enumerate(series.values()):
        values[((t - start) // STEP).astype(int), s] = v
    return grid, values


def fill_gaps(grid: np.ndarray, values: np.ndarray, names: Sequence[str], max_gap: int = MAX_INTERP_GAP):
    """Interpolate interior NaN runs of length ``<= max_gap``; longer runs stay NaN."""
    out = values.copy()
    events = []
    idx = np.arange(len(grid))
    for s, name in enumerate(names):
        col = out[:, s]
        missing = np.isnan(col)
        if not missing.any():
            continue
        edges = np.diff(np.concatenate([[0], missing.astype(int), [0]]))
        for a, b in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
            interior = a > 0 and b < len(col)
            fill = interior and b - a <= max_gap
            if fill:
                col[a:b] = np.interp(idx[a:b], [a - 1, b], [col[a - 1], col[b]])
                log.info("%s: interpolated %d missing steps from %s", name, b - a, grid[a])
            else:
                log.info("%s: gap of %d steps from %s splits the data", name, b - a, grid[a])
            events.append(GapEvent(name, grid[a], int(b - a), bool(fill)))
    return out, events


def complete_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open index ranges where ``mask`` is true."""
    edges = np.diff(np.concatenate([[0], mask.astype(int), [0]]))
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


@dataclass(frozen=True, eq=False)
class RiverDataset:
    graph: SummaryGraph
    stations: tuple[str, ...]
    times: np.ndarray
    values: np.ndarray
    train: list[Trajectory]
    factum: Trajectory
    factum_start: np.datetime64
    gaps: tuple[GapEvent, ...]


def _window(grid: np.ndarray, window: Sequence[str]) -> np.ndarray:
    if len(window) != 2:
        raise DataError(f"window must be [start, end], got {window!r}")
    a, b = parse_time(window[0]), parse_time(window[1])
    if not a < b:
        raise DataError(f"empty window {window!r}")
    return (grid >= a) & (grid < b)


def ingest_river(
    station_paths: Mapping[str, str | Path],
    graph: SummaryGraph,
    train_window: Sequence[str],
    factum_window: Sequence[str],
    train_cap: int = RIVER_TRAIN_CAP,
) -> RiverDataset:
    """Read, align and gap-fill station files and cut training and factum windows.

    Windows are half-open ``[start, end)``. Rows in the factum window are
    never used for training. Training keeps the most recent ``train_cap``
    rows.
    """
    if set(station_paths) != set(graph.names):
        raise DataError(f"station files {sorted(station_paths)} do not match graph nodes {sorted(graph.names)}")
    if any(d != 1 for d in graph.dims):
        raise DataError("river stations must be univariate")
    names = list(graph.names)
    series = {name: read_station_csv(station_paths[name]) for name in names}
    grid, raw = align(series)
    values, gaps = fill_gaps(grid, raw, names)
    complete = ~np.isnan(values).any(axis=1)

    fmask = _window(grid, factum_window)
    if not fmask.any():
        raise DataError("factum window contains no grid points")
    if not complete[fmask].all():
        raise DataError("factum window contains unfilled gaps")
    fidx = np.flatnonzero(fmask)
    factum = Trajectory(values[fidx], graph)

    tmask = _window(grid, train_window) & complete & ~fmask
    keep = np.flatnonzero(tmask)[-train_cap:] if train_cap else np.flatnonzero(tmask)
    capped = np.zeros_like(tmask)
    capped[keep] = True
    train = [Trajectory(values[a:b], graph) for a, b in complete_runs(capped) if b - a >= 2]
    if not train:
        raise DataError("training window yields no trajectory with at least 2 rows")
    log.info("river: %d training segments, %d rows; factum %d rows", len(train), int(capped.sum()), factum.T)
    return RiverDataset(graph, tuple(names), grid, values, train, factum, grid[fidx[0]], tuple(gaps))


# -- synthetic stations ---------------------------------------------------------


def synthetic_river(
    T: int,
    seed: int,
    start: str = "2019-02-01T00:00:00",
    anomaly: tuple[str, int, float] | None = None,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gauge levels driven by a shared latent rain process.

    ``anomaly = (station, index, size)`` adds ``size`` to that station's
    increment at one step, which then propagates downstream.
    """
    rng = child_rng(seed, 0)
    rain = np.zeros(T)
    for t in range(1, T):
        rain[t] = 0.92 * rain[t - 1] + (rng.exponential(0.05) if rng.random() < 0.02 else 0.0)
    lv = {s: np.zeros(T) for s in STATIONS}
    base = {"henthorn": 0.6, "whalley_weir": 0.8, "new_jumbles_rock": 1.2, "samlesbury": 1.5}
    for s in STATIONS:
        lv[s][0] = base[s]
    noise = rng.normal(0.0, 0.003, (T, len(STATIONS)))
    for t in range(1, T):
        h, w, n, m = (lv[s][t - 1] for s in STATIONS)
        inc = {
            "henthorn": 0.05 * (base["henthorn"] - h) + 0.4 * rain[t - 1],
            "whalley_weir": 0.04 * (base["whalley_weir"] - w) + 0.3 * rain[t - 1],
            "new_jumbles_rock": 0.1 * (0.2 + 0.6 * h + 0.5 * w - n),
            "samlesbury": 0.1 * (0.3 + 1.0 * n - m),
        }
        if anomaly is not None and anomaly[1] == t:
            inc[anomaly[0]] += anomaly[2]
        for k, s in enumerate(STATIONS):
            lv[s][t] = lv[s][t - 1] + inc[s] + noise[t, k]
    times = np.arange(np.datetime64(start, "s"), np.datetime64(start, "s") + T * STEP, STEP).astype("datetime64[s]")
    return times, lv


def write_station_csv(path: str | Path, times: np.ndarray, values: np.ndarray) -> None:
    from cfrca.io import atomic_write_text, fmt

    lines = ["timestamp,value"] + [f"{t},{fmt(v)}" for t, v in zip(times.astype(str), values)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def fixture_dir() -> Path:
    """Directory of the shipped synthetic 4-station fixture."""
    return Path(__file__).parent / "data" / "river_fixture"


def load_fixture_config(directory: str | Path | None = None) -> tuple[Path, dict]:
    from cfrca.io import read_json

    d = Path(directory) if directory is not None else fixture_dir()
    return d, read_json(d / "river.json")
