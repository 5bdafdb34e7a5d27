"""Run configuration: one JSON document plus command-line overrides."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenertError
from .geometry import RxConfig, TxConfig
from .predictor import PredictorConfig
from .scene import Humidity, resolve_scene_path
from .toy import TOY_TX
from .tracer import COVERING_CAPTURE_FACTOR, TraceLimits
from .training import E2ESchedule, PretrainSchedule

OUT_ENV = "GENERT_OUT"


@dataclass
class GridSpec:
    nx: int = 24
    ny: int = 16
    height: float = 1.5
    x_range: tuple = (-35.0, 35.0)
    y_range: tuple = (-9.0, 9.0)

    def positions(self) -> np.ndarray:
        xs = np.linspace(*self.x_range, self.nx)
        ys = np.linspace(*self.y_range, self.ny)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(self.height))], axis=1)


@dataclass
class Seeds:
    data: int = 0
    init: int = 0
    pretrain: int = 0
    train: int = 0
    split: int = 0


@dataclass
class RunConfig:
    scene: str = "box_canyon"
    humidity: str = "dry"
    frequency_hz: float = 3.5e9
    txs: list = field(default_factory=lambda: [{"position": list(TOY_TX)}])
    rxs: list | None = None  # explicit positions; overrides rx_grid
    rx_grid: GridSpec = field(default_factory=GridSpec)
    angular_spacing_deg: float = 0.4
    capture_factor: float = COVERING_CAPTURE_FACTOR
    max_interactions: int = 3
    power_floor_db: float = -40.0
    include_los: bool = True
    pretrain_budget: int = 10_000
    pretrain_epochs: int = 400
    pretrain_lr: float = 1e-3
    pretrain_halve_every: int = 80
    train_epochs: int = 200
    train_lr: float = 4e-4
    train_halve_every: int = 50
    batch_size: int = 64
    predictor: dict = field(default_factory=dict)
    seeds: Seeds = field(default_factory=Seeds)
    include_aod: bool = True
    bench_grids: int = 8
    output_dir: str = "genert-out"
    base_dir: str = "."

    # ------------------------------------------------------------------ derived objects

    @property
    def scene_path(self) -> Path:
        p = Path(self.scene)
        if not p.is_absolute() and (Path(self.base_dir) / p).exists():
            p = Path(self.base_dir) / p
        return resolve_scene_path(p)

    @property
    def angular_spacing(self) -> float:
        return math.radians(self.angular_spacing_deg)

    @property
    def limits(self) -> TraceLimits:
        return TraceLimits(self.max_interactions, self.power_floor_db, self.include_los)

    def tx_configs(self) -> list[TxConfig]:
        out = []
        for t in self.txs:
            out.append(TxConfig(position=t["position"], e_field_dir=t.get("e_field_dir", (0.0, 0.0, 1.0)),
                                gain_dbi=t.get("gain_dbi", 0.0), power_dbm=t.get("power_dbm", 0.0),
                                frequency_hz=t.get("frequency_hz", self.frequency_hz)))
        return out

    def rx_configs(self) -> list[RxConfig]:
        pos = np.asarray(self.rxs, float).reshape(-1, 3) if self.rxs is not None else self.rx_grid.positions()
        return [RxConfig(position=p) for p in pos]

    def predictor_config(self, class_vocab: int) -> PredictorConfig:
        return PredictorConfig.from_dict({"class_vocab": class_vocab, **self.predictor})

    def pretrain_schedule(self) -> PretrainSchedule:
        return PretrainSchedule(epochs=self.pretrain_epochs, lr=self.pretrain_lr,
                                halve_every=self.pretrain_halve_every, batch_size=self.batch_size,
                                seed=self.seeds.pretrain)

    def train_schedule(self) -> E2ESchedule:
        return E2ESchedule(epochs=self.train_epochs, lr=self.train_lr, halve_every=self.train_halve_every,
                           batch_size=self.batch_size, seed=self.seeds.train)

    out_override = None  # set from the command line; not part of the document

    def out_dir(self) -> Path:
        """``--out`` beats ``GENERT_OUT`` beats ``output_dir``."""
        return Path(self.out_override or os.environ.get(OUT_ENV) or self.output_dir)

    # ------------------------------------------------------------------ validation / io

    def validate(self) -> "RunConfig":
        try:
            self.scene_path
            Humidity.parse(self.humidity)
            if not self.txs:
                raise ConfigError("at least one transmitter is required")
            self.tx_configs()
            if not self.rx_configs():
                raise ConfigError("at least one receiver is required")
            if not self.angular_spacing_deg > 0:
                raise ConfigError("angular_spacing_deg must be positive")
            self.pretrain_schedule().validate()
            self.train_schedule().validate()
            self.predictor_config(1).validate()
        except ConfigError:
            raise
        except (GenertError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid run configuration: {exc}") from exc
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def config_from_dict(doc: dict, base_dir=".") -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    doc = dict(doc)
    try:
        if "rx_grid" in doc:
            doc["rx_grid"] = GridSpec(**doc["rx_grid"])
        if "seeds" in doc:
            doc["seeds"] = Seeds(**doc["seeds"])
        cfg = RunConfig(**doc)
    except TypeError as exc:
        raise ConfigError(f"invalid run configuration: {exc}") from exc
    cfg.base_dir = str(base_dir)
    return cfg


def load_config(path=None) -> RunConfig:
    """Load a JSON run configuration; ``None`` gives the defaults."""
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return config_from_dict(doc, p.parent).validate()
