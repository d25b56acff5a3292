"""Regenerate the synthetic 4-station river fixture shipped with the package.

The fixture carries a 2-step gap (interpolated on ingestion), a 10-step gap
(splits the training data) and a single-step level jump at Whalley Weir
inside the factum window.
"""

import numpy as np

from cfrca.io import write_json
from cfrca.river import STATIONS, fixture_dir, river_graph, synthetic_river, write_station_csv

T = 3000
ANOMALY = ("whalley_weir", 2930, 1.5)
DROP = {"henthorn": range(500, 502), "whalley_weir": range(1200, 1210)}


def main() -> None:
    out = fixture_dir()
    out.mkdir(parents=True, exist_ok=True)
    times, levels = synthetic_river(T, seed=2019, anomaly=ANOMALY)
    for s in STATIONS:
        keep = np.ones(T, dtype=bool)
        keep[list(DROP.get(s, []))] = False
        write_station_csv(out / f"{s}.csv", times[keep], levels[s][keep])
    river_graph().save(out / "graph.json")
    write_json(
        out / "river.json",
        {
            "stations": {s: f"{s}.csv" for s in STATIONS},
            "graph": "graph.json",
            "train_window": [str(times[0]), str(times[2900])],
            "factum_window": [str(times[2900]), str(times[2990])],
            "classifier": {"type": "zscore", "node": "new_jumbles_rock", "threshold": 3.0},
            "threshold_is_placeholder": True,
            "truth": {"node": ANOMALY[0], "time": ANOMALY[1] - 2900},
        },
    )


if __name__ == "__main__":
    main()
