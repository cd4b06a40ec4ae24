"""Run configuration: INI sections mapped onto the per-module dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from . import nn
from .augment import AugmentPolicy, CropConfig, SyntheticCorpusSpec
from .clustering import PipelineConfig
from .dino import DinoConfig
from .features import FeatureConfig
from .supervised import AAMConfig, FinetuneConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class BackendConfig:
    plda_dim: int = 16
    plda_iters: int = 20
    plda_init: str = "pca"


@dataclass
class EvalConfig:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0
    n_target_per_utt: int = 2
    n_nontarget_per_utt: int = 2


@dataclass
class RunConfig:
    seed: int = 0
    synth: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    crop: CropConfig = field(default_factory=CropConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    encoder: nn.EncoderConfig = field(default_factory=nn.EncoderConfig)
    head: nn.HeadConfig = field(default_factory=nn.HeadConfig)
    dino: DinoConfig = field(default_factory=DinoConfig)
    aam: AAMConfig = field(default_factory=AAMConfig)
    supervised: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    cluster: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        # sub-configs that appear inside others are shared, not duplicated
        self.dino.crop = self.crop
        self.dino.encoder = self.encoder
        self.dino.head = self.head
        self.head.in_dim = self.encoder.emb_dim
        self.encoder.in_dim = self.features.n_mels
        self.cluster.train = self.supervised
        self.cluster.aam = self.aam


SECTIONS = ["run", "synth", "features", "crop", "augment", "encoder", "head", "dino", "aam",
            "supervised", "finetune", "backend", "cluster", "eval"]
# fields holding nested configs are set through their own section
_NESTED = {"crop", "encoder", "head", "train", "aam"}


def _scalar_fields(obj):
    return [f for f in dataclasses.fields(obj) if f.name not in _NESTED]


def _parse_value(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "on", "yes"):
                return True
            if low in ("0", "false", "off", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(","))
        if isinstance(default, dict):  # "kind:lo:hi, kind:lo:hi"
            out = {}
            for item in text.split(","):
                kind, lo, hi = item.strip().split(":")
                out[kind] = (float(lo), float(hi))
            return out
        if default is None:
            return None if text.lower() in ("", "none") else int(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for '{key}': {text!r}") from exc


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, dict):
        return ", ".join(f"{k}:{lo!r}:{hi!r}" for k, (lo, hi) in v.items())
    return "none" if v is None else str(v)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """Build a :class:`RunConfig` from INI text; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    base = RunConfig()
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        target = base if section == "run" else getattr(base, section)
        known = {f.name: getattr(target, f.name) for f in _scalar_fields(target)}
        if section == "run":
            known = {"seed": base.seed}
        for key, raw in cp.items(section):
            if key not in known:
                raise ConfigError(f"unknown key '{key}' in [{section}]")
            values.setdefault(section, {})[key] = _parse_value(raw, known[key], f"{section}.{key}")
    try:
        sub = {}
        for section in SECTIONS[1:]:
            cls = type(getattr(base, section))
            kwargs = values.get(section, {})
            if section == "dino":
                kwargs = {**kwargs, "crop": CropConfig(**values.get("crop", {})),
                          "encoder": nn.EncoderConfig(**values.get("encoder", {})),
                          "head": nn.HeadConfig(**values.get("head", {}))}
            if section == "finetune":
                kwargs = {**kwargs, "aam": AAMConfig(**{"margin_warmup_epochs": 0, **values.get("aam", {})})}
            sub[section] = cls(**kwargs)
        cfg = RunConfig(seed=values.get("run", {}).get("seed", 0), **sub)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    """Fully resolved INI text; ``parse_config(dump_config(c))`` reproduces ``c``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {"seed": str(cfg.seed)}
    for section in SECTIONS[1:]:
        obj = getattr(cfg, section)
        cp[section] = {f.name: _format_value(getattr(obj, f.name)) for f in _scalar_fields(obj)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
