"""Experiment presets and the JSON-backed experiment configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from cfrca.errors import DataError

# Hyperparameters per experiment family. ``None`` for T_train/T_factum means
# "same length as the benchmark factum".
PRESETS: dict[str, dict] = {
    "lin": {"splits": 4, "T_train": 1000, "T_factum": 20, "lr": 0.01, "epochs": 50, "dim": 2},
    "fhn": {"splits": 4, "T_train": 1000, "T_factum": 50, "lr": 0.01, "epochs": 100, "dim": 2},
    "benchmark": {"splits": 6, "T_train": None, "T_factum": None, "lr": 0.1, "epochs": 200, "dim": 1},
    "river": {"splits": 4, "T_train": 300_000, "T_factum": 90, "lr": 0.01, "epochs": 50, "dim": 1},
}

SYSTEM_PRESET = {"linear4": "lin", "fhn": "fhn", "benchmark": "benchmark", "river": "river"}

DEFAULT_N_SAMPLES = 32
RIVER_TRAIN_CAP = 50_000


@dataclass
class ExperimentConfig:
    preset: str = "lin"
    system: str = "linear4"
    lr: float | None = None
    epochs: int | None = None
    splits: int | None = None
    T_train: int | None = None
    T_factum: int | None = None
    n_samples: int = DEFAULT_N_SAMPLES
    seed: int | None = None
    out: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise DataError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        p = PRESETS[self.preset]
        for key in ("lr", "epochs", "splits", "T_train", "T_factum"):
            if getattr(self, key) is None:
                setattr(self, key, p[key])

    def train_config(self, seed: int | None = None):
        from cfrca.models import TrainConfig

        return TrainConfig(
            lr=self.lr,
            epochs=self.epochs,
            splits=self.splits,
            seed=self.seed if seed is None else seed,
        )

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)} - {"extra"}
        base = {k: v for k, v in doc.items() if k in known}
        extra = {k: v for k, v in doc.items() if k not in known}
        return cls(**base, extra=extra)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


def load_config_file(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return doc
