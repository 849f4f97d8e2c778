"""Run configuration: nested dataclasses addressed by dotted keys.

A config file is flat ``key=value`` text, one setting per line, ``#`` starts
a comment::

    train.sgd.learning_rate=0.01
    sampler.radial_divisions=8
    sint_plus=true

Short aliases map onto the nested sections (``sampler.*`` and ``flow.*``
live under ``tracker``, ``sgd.*`` under ``train``; ``sint_plus``,
``flow_threshold`` and ``refine_gate`` are tracker flags).
"""
import dataclasses
from dataclasses import dataclass, field

from .datagen import PairSamplerConfig
from .nnet import SgdConfig
from .siamese import DEFAULT_ARCH, FC_ONLY_ARCH, MAXPOOL_FC_ARCH
from .tracker import TrackerConfig, WindowConfig
from .training import TrainingConfig

ARCH_PRESETS = {
    "default": DEFAULT_ARCH,
    "fc-only": FC_ONLY_ARCH,
    "maxpool-fc": MAXPOOL_FC_ARCH,
}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    """Synthetic corpus used when no dataset directory is given."""

    n_train: int = 200
    n_val: int = 40
    length: int = 40
    image_size: int = 64
    max_distortions: int = 1
    train_seed_offset: int = 0
    val_seed_offset: int = 100000
    frame_pairs_train: int = 5
    frame_pairs_val: int = 5
    val_fraction: float = 0.2


@dataclass
class ModelConfig:
    preset: str = "default"
    layers: str = ""
    taps: str = ""
    roi_grid: int = 3

    def architecture(self):
        if self.preset not in ARCH_PRESETS:
            raise ConfigError(f"unknown model preset {self.preset!r}; choose from {sorted(ARCH_PRESETS)}")
        arch = ARCH_PRESETS[self.preset]
        changes = {}
        if self.layers:
            changes["layers"] = tuple(self.layers.split(","))
        if self.taps:
            changes["taps"] = tuple(self.taps.split(","))
        if self.roi_grid != arch.roi_grid:
            changes["roi_grid"] = self.roi_grid
        try:
            return arch.replace(**changes) if changes else arch
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _desk_training():
    # from-scratch training on small synthetic data needs a larger step than fine-tuning
    return TrainingConfig(sgd=SgdConfig(learning_rate=0.05, lr_decay_every=100), max_epochs=5)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    pairs: PairSamplerConfig = field(default_factory=PairSamplerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainingConfig = field(default_factory=_desk_training)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    reid: WindowConfig = field(default_factory=WindowConfig)


ALIASES = {
    "sampler.": "tracker.sampler.",
    "flow.": "tracker.flow.",
    "sgd.": "train.sgd.",
}
TRACKER_FLAGS = ("sint_plus", "flow_threshold", "refine_gate")


def canonical_key(key):
    key = key.strip()
    if key in TRACKER_FLAGS:
        return "tracker." + key
    for short, full in ALIASES.items():
        if key.startswith(short):
            return full + key[len(short):]
    return key


def _parse_value(text, current, key):
    text = text.strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
        if current is None:
            return None if text.lower() in ("", "none") else float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(current).__name__}") from None


def _set(obj, path, text, key):
    name, rest = path[0], path[1:]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, name)
    if rest:
        value = _set(current, rest, text, key)
    elif dataclasses.is_dataclass(current):
        raise ConfigError(f"{key!r} names a section, not a setting")
    else:
        value = _parse_value(text, current, key)
    try:
        return dataclasses.replace(obj, **{name: value})
    except ValueError as exc:
        raise ConfigError(f"{key}={text}: {exc}") from exc


def apply_overrides(config, items):
    """Return a copy of ``config`` with ``key=value`` strings applied in order."""
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {item!r}")
        config = _set(config, canonical_key(key).split("."), value, key.strip())
    return config


def parse_config_text(text):
    items = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            items.append(line)
    return items


def load_config(path, base=None):
    with open(path) as fh:
        return apply_overrides(base or RunConfig(), parse_config_text(fh.read()))


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if value is None:
        return "none"
    return str(value)


def flatten(config, prefix=""):
    """``{dotted_key: text}`` for every leaf setting; round-trips through :func:`apply_overrides`."""
    out = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = _format(value)
    return out


def dump_config(config):
    return "".join(f"{k}={v}\n" for k, v in flatten(config).items())


def with_seed(config, seed):
    """Propagate the run seed to every seeded component."""
    return dataclasses.replace(
        config,
        train=dataclasses.replace(config.train, seed=seed),
        tracker=dataclasses.replace(config.tracker, seed=seed),
    )

