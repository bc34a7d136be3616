"""Flat ``section.key = value`` run configuration.

Files hold one assignment per line; ``#`` starts a comment. Command-line
overrides use the same dotted names (``--adv.alpha 0``) or any unambiguous
field name (``--alpha 0``, ``--k-steps 0``).

The top-level ``seed`` is the only source of randomness. Model init, batch
shuffling, dropout and perturbation noise each derive their own stream from it.
"""

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .training import AdvConfig, TrainConfig, derive_seed

_DERIVED = {"model.seed", "model.vocab_size", "train.seed"}


@dataclass
class DataConfig:
    source: str = "files"
    dir: str = ""
    train_path: str = ""
    dev_path: str = ""
    test_path: str = ""
    zero_shot_train_path: str = ""
    max_vocab: int = 2048


@dataclass
class SynthConfig:
    seed: int = 7
    n_mwes: int = 40
    examples_per_mwe: int = 8


@dataclass
class RunConfig:
    seed: int = 0
    setting: str = "zero_shot"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adv: AdvConfig = field(default_factory=AdvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    SECTIONS = ("model", "train", "adv", "data", "synth")

    def keys(self):
        out = ["seed", "setting"]
        for sec in self.SECTIONS:
            out += [f"{sec}.{f.name}" for f in fields(getattr(self, sec))
                    if f"{sec}.{f.name}" not in _DERIVED]
        return out

    def get(self, key):
        if "." not in key:
            return getattr(self, key)
        sec, name = key.split(".", 1)
        return getattr(getattr(self, sec), name)

    def set(self, key, raw):
        if key not in self.keys():
            raise ConfigError(f"unknown config key {key!r}")
        if "." in key:
            sec, name = key.split(".", 1)
            target = getattr(self, sec)
        else:
            target, name = self, key
        kind = next(f.type for f in fields(target) if f.name == name)
        setattr(target, name, _coerce(raw, kind, key))

    def resolve(self):
        """Fill derived seeds and validate every section."""
        if self.setting not in ("zero_shot", "one_shot"):
            raise ConfigError(f"unknown setting {self.setting!r}")
        if self.data.source not in ("files", "synthetic"):
            raise ConfigError("data.source must be 'files' or 'synthetic'")
        self.model.seed = derive_seed(self.seed, "init")
        self.train.seed = self.seed
        self.train.validate()
        self.adv.validate()
        return self

    def dump(self):
        lines = [f"{k} = {self.get(k)}" for k in self.keys()]
        lines += [f"# derived: {k} = {self.get(k)}" for k in sorted(_DERIVED)]
        return "\n".join(lines) + "\n"


def _coerce(raw, kind, key):
    if not isinstance(raw, str):
        return raw
    try:
        if kind in (bool, "bool"):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None
    return raw


def resolve_key(cfg, name):
    """Map an override name to a full dotted key."""
    name = name.replace("-", "_")
    keys = cfg.keys()
    if name in keys:
        return name
    matches = [k for k in keys if k.split(".")[-1] == name]
    if len(matches) == 1:
        return matches[0]
    if matches:
        raise ConfigError(f"ambiguous override --{name}: use one of {', '.join(matches)}")
    raise ConfigError(f"unknown config key --{name}")


def parse_text(text, cfg, base_dir=None):
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _DERIVED:
            raise ConfigError(f"config line {lineno}: {key} is derived and cannot be set")
        cfg.set(key, value)
    if base_dir is not None:
        for name in ("dir", "train_path", "dev_path", "test_path", "zero_shot_train_path"):
            value = getattr(cfg.data, name)
            if value and not Path(value).is_absolute():
                setattr(cfg.data, name, str(Path(base_dir) / value))
    return cfg


def parse_overrides(tokens, cfg):
    """Apply ``--key value`` / ``--key=value`` pairs in order."""
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            name, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {tok} needs a value")
            name, value = tok[2:], tokens[i + 1]
            i += 2
        cfg.set(resolve_key(cfg, name), value)
    return cfg


def load_config(path=None, overrides=()):
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parse_text(path.read_text(encoding="utf-8"), cfg, base_dir=path.parent)
    parse_overrides(list(overrides), cfg)
    return cfg.resolve()
