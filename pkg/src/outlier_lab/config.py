"""Experiment configuration: INI sections mapped onto the stage dataclasses.

Grammar: one ``[section]`` per stage, ``key = value`` lines inside.  Values
are parsed by the type of the target field (int, float, bool or str).
Overrides use ``section.key=value``.  Stage seeds are derived from the
master seed unless a section sets ``seed`` itself.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

from .corpus import CorpusSpec, Scheme
from .model import ModelConfig
from .train import ProbeTask, TrainConfig, default_finetune_config


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def derive_seed(master: int, label: str) -> int:
    """Stage seed from the master seed by labeled hashing."""
    digest = hashlib.sha256(f"outlier-lab:{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class SchemeConfig:
    name: str = "SPLIT"
    max_seq_len: int = 64
    freq_threshold: float = 5e-4
    replace_prob: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        try:
            Scheme(self.name)
        except ValueError:
            raise ValueError(f"name must be one of {[s.value for s in Scheme]}") from None
        if self.max_seq_len < 3:
            raise ValueError("max_seq_len must be >= 3")
        if not 0 <= self.freq_threshold <= 1:
            raise ValueError("freq_threshold must lie in [0, 1]")
        if not 0 <= self.replace_prob <= 1:
            raise ValueError("replace_prob must lie in [0, 1]")


@dataclass(frozen=True)
class DetectConfig:
    k_sigma: float = 3.0
    min_coverage: float = 0.5
    ratio_threshold: float = 5.0
    n_random: int = 10
    eval_rows: int = 512
    mask_rate: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if not self.k_sigma > 0:
            raise ValueError("k_sigma must be > 0")
        if not 0 < self.min_coverage <= 1:
            raise ValueError("min_coverage must lie in (0, 1]")
        if self.n_random < 10:
            raise ValueError("n_random must be >= 10")
        if self.eval_rows < 1:
            raise ValueError("eval_rows must be >= 1")
        if not 0 < self.mask_rate < 1:
            raise ValueError("mask_rate must lie in (0, 1)")


@dataclass(frozen=True)
class DiagnosticsConfig:
    n_rows: int = 512
    n_control: int = 10
    per_type: bool = False
    method: str = "pearson"
    bins: int = 20
    mask_rate: float = 0.15
    dynamics: bool = True
    dynamics_every: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.n_rows < 1:
            raise ValueError("n_rows must be >= 1")
        if self.n_control < 1:
            raise ValueError("n_control must be >= 1")
        if self.method not in ("pearson", "spearman"):
            raise ValueError("method must be pearson or spearman")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.dynamics_every < 1:
            raise ValueError("dynamics_every must be >= 1")


@dataclass(frozen=True)
class CompareConfig:
    schemes: str = "SPLIT,ONE_SEP,RANDOMIZE"

    def scheme_list(self) -> list[str]:
        return [s.strip() for s in self.schemes.split(",") if s.strip()]

    def validate(self) -> None:
        names = self.scheme_list()
        if not names:
            raise ValueError("schemes must name at least one scheme")
        for s in names:
            try:
                Scheme(s)
            except ValueError:
                raise ValueError(f"unknown scheme {s!r}") from None


SECTIONS = {
    "corpus": CorpusSpec,
    "scheme": SchemeConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "finetune": TrainConfig,
    "probe": ProbeTask,
    "detect": DetectConfig,
    "diagnostics": DiagnosticsConfig,
    "compare": CompareConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=default_finetune_config)
    probe: ProbeTask = field(default_factory=ProbeTask)
    detect: DetectConfig = field(default_factory=DetectConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)

    def validate(self) -> None:
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except ConfigError:
                raise
            except ValueError as e:
                raise ConfigError(name, str(e)) from None
        if self.model.vocab_size != self.corpus.vocab_size:
            raise ConfigError("model.vocab_size", f"must equal corpus.vocab_size ({self.corpus.vocab_size})")
        if self.model.max_seq_len < self.scheme.max_seq_len:
            raise ConfigError("model.max_seq_len", f"must be >= scheme.max_seq_len ({self.scheme.max_seq_len})")
        try:
            self.probe.validate(self.corpus.vocab_size)
        except ValueError as e:
            raise ConfigError("probe", str(e)) from None
        if self.probe.window >= self.scheme.max_seq_len - 2:
            raise ConfigError("probe.window", "must be smaller than the row body length")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _parse_value(path: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        name = typ if isinstance(typ, str) else typ.__name__
        raise ConfigError(path, f"expected {name}, got {raw!r}") from None


def _field_types(cls) -> dict[str, object]:
    return {f.name: f.type for f in fields(cls)}


def resolve_config(config_path: str | Path | None = None, overrides: Iterable[str] = (),
                   seed: int | None = None) -> ExperimentConfig:
    """File values, then ``section.key=value`` overrides, then ``seed``; stage seeds derived last."""
    values: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    master: str | None = None
    if config_path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(config_path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(str(config_path), "config file not found") from None
        except configparser.Error as e:
            raise ConfigError(str(config_path), " ".join(str(e).split())) from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                if section == "experiment" and key == "seed":
                    master = raw
                    continue
                if section not in SECTIONS:
                    raise ConfigError(f"{section}.{key}", "unknown key path")
                values[section][key] = raw
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        path, raw = item.split("=", 1)
        path = path.strip()
        if path in ("seed", "experiment.seed"):
            master = raw
            continue
        section, _, key = path.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(path, "unknown key path")
        values[section][key] = raw
    master_seed = seed if seed is not None else _parse_value("experiment.seed", master, int) if master else 0

    built = {}
    for section, cls in SECTIONS.items():
        types = _field_types(cls)
        kwargs = {}
        for key, raw in values[section].items():
            if key not in types:
                raise ConfigError(f"{section}.{key}", "unknown key path")
            kwargs[key] = _parse_value(f"{section}.{key}", raw, types[key])
        base = getattr(ExperimentConfig(), section)
        if "seed" in types and "seed" not in kwargs:
            kwargs["seed"] = derive_seed(master_seed, section)
        built[section] = replace(base, **kwargs)
    # the model and corpus share vocabulary/sequence length unless set explicitly
    if "vocab_size" not in values["model"]:
        built["model"] = replace(built["model"], vocab_size=built["corpus"].vocab_size)
    if "max_seq_len" not in values["model"]:
        built["model"] = replace(built["model"], max_seq_len=built["scheme"].max_seq_len)
    cfg = ExperimentConfig(seed=master_seed, **built)
    cfg.validate()
    return cfg


def write_config_ini(path: str | Path, cfg: ExperimentConfig) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["experiment"] = {"seed": str(cfg.seed)}
    for section in SECTIONS:
        parser[section] = {k: str(v) for k, v in dataclasses.asdict(getattr(cfg, section)).items()}
    with open(path, "w") as fh:
        parser.write(fh)
