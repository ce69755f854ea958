"""Run configuration: one JSON document plus command-line overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, UsageError
from .model import VARIANTS, ModelConfig
from .training import TrainConfig

# field -> help text; order is the order shown in --help
RUN_FIELDS = {
    "data": "mapping ticker -> Yahoo-format CSV path (relative to the config file)",
    "members": "tickers forming the group, in GMNN column order (default: keys of data)",
    "targets": "tickers to score the model against (default: members)",
    "base": "base ticker for the correlation report (default: first member)",
    "max_lag": "largest lag K for correlation curves",
    "correlate_on": "series correlated by `correlate`: normalized | close",
    "price_column": "price column feeding the pipeline: close | adj_close",
    "ma_window": "moving-average period in trading days",
    "split": "train/val/test fractions",
    "inversion": "close-price reconstruction: teacher | autoregressive",
    "variant": "model variant: " + " | ".join(VARIANTS),
    "single_feature": "train one model per target on that target alone",
    "write_stages": "write per-stage date,value CSVs under <out>/stages",
    "seed": "seed for initialisation, shuffling and dropout",
    "out": "output directory",
}


@dataclass
class RunConfig:
    data: dict = field(default_factory=dict)
    members: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    base: str | None = None
    max_lag: int = 20
    correlate_on: str = "normalized"
    price_column: str = "close"
    ma_window: int = 14
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    inversion: str = "teacher"
    variant: str = "base"
    single_feature: bool = False
    write_stages: bool = True
    seed: int = 0
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    root: Path = field(default=Path("."), repr=False, compare=False)

    @property
    def model_config(self) -> ModelConfig:
        return self.model.with_variant(self.variant)

    @property
    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def data_path(self, ticker: str) -> Path:
        p = Path(self.data[ticker])
        return p if p.is_absolute() else self.root / p

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "root"}
        d["model"] = self.model.to_dict()
        d["train"] = self.train.to_dict()
        d["train"].pop("seed")
        return json.loads(json.dumps(d))

    def validate(self) -> "RunConfig":
        if not self.data:
            raise ConfigError("config has no data files")
        if not self.members:
            self.members = list(self.data)
        if not self.targets:
            self.targets = list(self.members)
        missing = [t for t in self.members if t not in self.data]
        if missing:
            raise ConfigError(f"members {missing} have no data file")
        unknown = [t for t in self.targets if t not in self.members]
        if unknown:
            raise ConfigError(f"unknown target ticker(s) {unknown}; group members are {self.members}")
        if self.base is not None and self.base not in self.members:
            raise ConfigError(f"base {self.base!r} is not a group member")
        choices = {"correlate_on": ("normalized", "close"),
                   "price_column": ("close", "adj_close"),
                   "inversion": ("teacher", "autoregressive"),
                   "variant": tuple(VARIANTS)}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {list(allowed)}, got {getattr(self, name)!r}")
        if self.ma_window < 1 or self.max_lag < 0 or self.seed < 0:
            raise ConfigError("ma_window must be >= 1, max_lag and seed >= 0")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-12:
            raise ConfigError("split must be three fractions summing to 1")
        try:
            self.model_config
        except UsageError as exc:
            raise ConfigError(str(exc)) from None
        return self


def _build(d: dict, root: Path) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)} - {"root"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
    d = dict(d)
    try:
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
    except (UsageError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(root=root, **d)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (JSON) and apply non-None ``overrides``; flags win."""
    if path is None:
        d, root = {}, Path(".")
    else:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        root = path.parent
    cfg = _build(d, root)
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate()


def describe_fields() -> str:
    """Every config field with its default, for ``--help``."""
    base = RunConfig()
    lines = ["configuration fields (JSON file; flags override):"]
    for name, text in RUN_FIELDS.items():
        default = getattr(base, name)
        lines.append(f"  {name:<15} {text} [default: {json.dumps(default)}]")
    lines.append("  model.*         model hyperparameters (variant flags are set by `variant`):")
    for k, v in asdict(ModelConfig()).items():
        if not k.startswith("use_"):
            lines.append(f"    {k:<13} [default: {json.dumps(v)}]")
    lines.append("  train.*         optimiser and early stopping (seed comes from `seed`):")
    for k, v in asdict(TrainConfig()).items():
        if k != "seed":
            lines.append(f"    {k:<13} [default: {json.dumps(v)}]")
    return "\n".join(lines)
