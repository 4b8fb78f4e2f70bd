import dataclasses
import math
import typing as tp
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from cosmo.exceptions import ConfigError, LabelSpaceError, SplitError
from cosmo.log import LOGGER

# keys a config *file* has to spell out; the thresholds are never published
# alongside results, so every experiment records them explicitly
MANDATORY_CONFIG_KEYS = (
    "kappa_lower",
    "kappa_upper",
    "kappa_known",
    "total_iterations",
    "weight_decay",
)
PRECISIONS = ("float32", "float64")
CONTEXT_INITS = ("random", "template")
PERCENT_DECIMALS = 2


@dataclass(frozen=True)
class LabelSpace:
    """
    Ordered known classes plus the single "unknown" output slot.

    The order of `known_classes` fixes the row order of every prompt and
    logit matrix downstream; `unknown_index` is always the last row.

    Raises:
        LabelSpaceError: on empty or duplicated class names
    """

    known_classes: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "known_classes", tuple(self.known_classes))
        if not self.known_classes:
            raise LabelSpaceError("Label space needs at least one known class.")
        empty = [i for i, name in enumerate(self.known_classes) if not name or not name.strip()]
        if empty:
            raise LabelSpaceError(f"Empty class names at positions {empty}.")
        duplicates = sorted({n for n in self.known_classes if self.known_classes.count(n) > 1})
        if duplicates:
            raise LabelSpaceError(f"Duplicated class names: {duplicates}.")

    @property
    def unknown_index(self) -> int:
        return len(self.known_classes)

    @property
    def n_known(self) -> int:
        return len(self.known_classes)

    @property
    def n_outputs(self) -> int:
        return len(self.known_classes) + 1

    def index_of(self, class_name: str | None) -> int:
        """Ground-truth index of a class; anything outside the known set maps to unknown."""
        try:
            return self.known_classes.index(class_name)  # type: ignore[arg-type]
        except ValueError:
            return self.unknown_index

    def to_dict(self) -> dict[str, tp.Any]:
        return {"known_classes": list(self.known_classes), "unknown_index": self.unknown_index}

    @classmethod
    def from_dict(cls, data: tp.Mapping[str, tp.Any]) -> "LabelSpace":
        label_space = cls(tuple(data["known_classes"]))
        if "unknown_index" in data and data["unknown_index"] != label_space.unknown_index:
            raise LabelSpaceError(
                f"Serialized unknown_index {data['unknown_index']} does not match "
                f"{label_space.n_known} known classes."
            )
        return label_space


@dataclass(frozen=True)
class SplitSpec:
    """Open-set split of a dataset into one source domain and blended target domains."""

    dataset_name: str
    source_domain: str
    target_domains: tuple[str, ...]
    known_classes: tuple[str, ...]
    unknown_classes: tuple[str, ...]
    seed: int = 0
    dataset_root: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "target_domains", tuple(self.target_domains))
        object.__setattr__(self, "known_classes", tuple(self.known_classes))
        object.__setattr__(self, "unknown_classes", tuple(self.unknown_classes))
        if not self.target_domains:
            raise SplitError("At least one target domain is required.")
        if self.source_domain in self.target_domains:
            raise SplitError(
                f"Source domain {self.source_domain!r} cannot also be a target domain."
            )
        overlap = sorted(set(self.known_classes) & set(self.unknown_classes))
        if overlap:
            raise SplitError(f"Classes both known and unknown: {overlap}.")
        if not self.unknown_classes:
            raise SplitError("Open-set split needs at least one unknown class.")

    @property
    def label_space(self) -> LabelSpace:
        return LabelSpace(self.known_classes)

    @property
    def all_classes(self) -> tuple[str, ...]:
        return self.known_classes + self.unknown_classes

    def to_dict(self) -> dict[str, tp.Any]:
        data = dataclasses.asdict(self)
        for key in ("target_domains", "known_classes", "unknown_classes"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: tp.Mapping[str, tp.Any]) -> "SplitSpec":
        try:
            return cls(**data)
        except TypeError as e:
            raise SplitError(f"Malformed split document: {e}") from e

    def save(self, path: Path) -> None:
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: Path) -> "SplitSpec":
        if not path.exists():
            raise FileNotFoundError(f"Split file {path} does not exist.")
        return cls.from_dict(yaml.safe_load(path.read_text()))


@dataclass(frozen=True)
class TrainConfig:
    """
    Hyperparameters of a training run. Field names are the config file keys.

    Defaults: batch size 32, context length 4, entropy weight 1.0 and
    learning rate 0.001 follow the published protocol; the temperature is
    the frozen logit scale of the published dual-encoder checkpoints
    (1/100); the thresholds are this project's choices.
    """

    batch_size: int = 32
    context_length: int = 4
    temperature: float = 0.01
    entropy_weight: float = 1.0
    kappa_lower: float = 0.4
    kappa_upper: float = 0.6
    kappa_known: float | None = None
    learning_rate: float = 0.001
    total_iterations: int = 2000
    weight_decay: float = 0.01
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    hidden_width: int = 32
    separate_prompts: bool = True
    use_bias_net: bool = True
    context_init: str = "random"
    checkpoint_every: int = 500
    precision: str = "float32"

    def to_dict(self) -> dict[str, tp.Any]:
        data = dataclasses.asdict(self)
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: tp.Mapping[str, tp.Any]) -> "TrainConfig":
        return validate_config(data)


@dataclass(frozen=True)
class MetricsReport:
    """
    Open-set evaluation summary. Percentages are kept at full precision and
    rounded to two decimals only when reported.

    `unk` is None when no ground-truth unknown sample was evaluated (then
    `hos` and `os` are None as well); `os_star` is None when no known one was.
    """

    per_known_class_accuracy: dict[str, float]
    os_star: float | None
    unk: float | None
    hos: float | None
    os: float | None
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("os_star", "unk", "hos", "os"):
            value = getattr(self, name)
            if value is not None and not (0.0 <= value <= 100.0 + 1e-9):
                raise ValueError(f"{name}={value} is not a percentage.")
        for name, accuracy in self.per_known_class_accuracy.items():
            if not 0.0 <= accuracy <= 1.0:
                raise ValueError(f"Accuracy of class {name!r} is {accuracy}, expected [0, 1].")

    @property
    def n_samples(self) -> int:
        return sum(self.counts.values())

    def to_dict(self, decimals: int | None = PERCENT_DECIMALS) -> dict[str, tp.Any]:
        def _round(value: float | None) -> float | str | None:
            if value is None:
                return "n/a"
            return round(value, decimals) if decimals is not None else value

        return {
            "os_star": _round(self.os_star),
            "unk": _round(self.unk),
            "hos": _round(self.hos),
            "os": _round(self.os),
            "per_known_class_accuracy": dict(self.per_known_class_accuracy),
            "counts": dict(self.counts),
        }

    @classmethod
    def from_dict(cls, data: tp.Mapping[str, tp.Any]) -> "MetricsReport":
        def _value(value: tp.Any) -> float | None:
            return None if value in (None, "n/a") else float(value)

        return cls(
            per_known_class_accuracy=dict(data["per_known_class_accuracy"]),
            os_star=_value(data["os_star"]),
            unk=_value(data["unk"]),
            hos=_value(data["hos"]),
            os=_value(data["os"]),
            counts={k: int(v) for k, v in data.get("counts", {}).items()},
        )


def build_label_space(known_class_names: tp.Sequence[str]) -> LabelSpace:
    """Build the label space for an ordered list of known class names.

    Args:
        known_class_names (tp.Sequence[str]): known classes, in model row order

    Raises:
        LabelSpaceError: on duplicated or empty names

    Returns:
        LabelSpace: label space with `unknown_index == len(known_class_names)`
    """
    return LabelSpace(tuple(known_class_names))


def _check_probability(name: str, value: float, allow_above_one: bool) -> None:
    if value <= 0 or (value >= 1 and not allow_above_one):
        bound = "(0, inf)" if allow_above_one else "(0, 1)"
        raise ConfigError(f"{name}={value} should be in {bound}.")
    if value > 1:
        LOGGER.warning(f"{name}={value} is above 1, the corresponding pseudo-label rule is disabled.")


def validate_config(cfg: TrainConfig | tp.Mapping[str, tp.Any] | None = None) -> TrainConfig:
    """Check a config against its invariants and fill defaults for absent fields.

    Args:
        cfg (TrainConfig | tp.Mapping[str, tp.Any] | None): config object or
            a mapping of config keys; None means all defaults

    Raises:
        ConfigError: on unknown keys or violated invariants

    Returns:
        TrainConfig: validated config with `kappa_known` resolved
    """
    if cfg is None:
        cfg = TrainConfig()
    if not isinstance(cfg, TrainConfig):
        known_fields = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown_keys = sorted(set(cfg) - known_fields)
        if unknown_keys:
            raise ConfigError(f"Unknown config keys: {unknown_keys}.")
        values = dict(cfg)
        if "betas" in values:
            values["betas"] = tuple(values["betas"])
        try:
            cfg = TrainConfig(**values)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    if cfg.batch_size < 1:
        raise ConfigError(f"batch_size={cfg.batch_size} should be at least 1.")
    if cfg.context_length < 1:
        raise ConfigError(f"context_length={cfg.context_length} should be at least 1.")
    if not cfg.temperature > 0 or not math.isfinite(cfg.temperature):
        raise ConfigError(f"temperature={cfg.temperature} should be a positive number.")
    if cfg.entropy_weight < 0:
        raise ConfigError(f"entropy_weight={cfg.entropy_weight} should be non-negative.")
    if not cfg.learning_rate > 0:
        raise ConfigError(f"learning_rate={cfg.learning_rate} should be positive.")
    if cfg.total_iterations < 1:
        raise ConfigError(f"total_iterations={cfg.total_iterations} should be at least 1.")
    if cfg.weight_decay < 0:
        raise ConfigError(f"weight_decay={cfg.weight_decay} should be non-negative.")
    if cfg.hidden_width < 1:
        raise ConfigError(f"hidden_width={cfg.hidden_width} should be at least 1.")
    if cfg.checkpoint_every < 1:
        raise ConfigError(f"checkpoint_every={cfg.checkpoint_every} should be at least 1.")
    if len(cfg.betas) != 2 or not all(0 <= b < 1 for b in cfg.betas):
        raise ConfigError(f"betas={cfg.betas} should be two numbers in [0, 1).")
    if cfg.precision not in PRECISIONS:
        raise ConfigError(f"precision={cfg.precision!r} should be one of {PRECISIONS}.")
    if cfg.context_init not in CONTEXT_INITS:
        raise ConfigError(f"context_init={cfg.context_init!r} should be one of {CONTEXT_INITS}.")

    _check_probability("kappa_lower", cfg.kappa_lower, allow_above_one=False)
    _check_probability("kappa_upper", cfg.kappa_upper, allow_above_one=True)
    if cfg.kappa_lower > cfg.kappa_upper:
        raise ConfigError(
            f"kappa_lower={cfg.kappa_lower} should not exceed kappa_upper={cfg.kappa_upper}."
        )
    if cfg.kappa_known is None:
        cfg = dataclasses.replace(cfg, kappa_known=cfg.kappa_upper)
    else:
        _check_probability("kappa_known", cfg.kappa_known, allow_above_one=True)
    return cfg


def load_config(path: Path, overrides: tp.Mapping[str, tp.Any] | None = None) -> TrainConfig:
    """Read a YAML config file, apply overrides and validate it.

    Args:
        path (Path): YAML file whose keys are `TrainConfig` field names
        overrides (tp.Mapping[str, tp.Any] | None): values taking precedence
            over the file, typically CLI flags; None values are ignored

    Raises:
        FileNotFoundError: if the file does not exist
        ConfigError: on a missing mandatory key or an invalid value

    Returns:
        TrainConfig: validated config
    """
    if not path.exists():
        raise FileNotFoundError(f"Config file {path} does not exist.")
    values = yaml.safe_load(path.read_text()) or {}
    if not isinstance(values, dict):
        raise ConfigError(f"Config file {path} should contain a mapping of keys.")
    missing = [key for key in MANDATORY_CONFIG_KEYS if key not in values]
    if missing:
        raise ConfigError(f"Config file {path} is missing mandatory keys: {missing}.")
    values |= {k: v for k, v in (overrides or {}).items() if v is not None}
    return validate_config(values)


def save_config(cfg: TrainConfig, path: Path) -> None:
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
