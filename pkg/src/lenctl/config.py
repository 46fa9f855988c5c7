"""Experiment configuration: a flat INI file with one section per stage.

Validation is fail-fast: a config object is checked in full before any stage
runs. The four experiment settings select RL and/or best-of-N filtering on
top of the supervised baseline; the control scope picks between a single
equal-to constraint and the four bounded kinds.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields

from .grammar import BOUNDED_KINDS, ControlKind
from .lm import SftConfig
from .ppo import ConfigError, PPOConfig

SETTINGS = ("prompt", "prompt_rl", "prompt_filter", "prompt_rl_filter")
SCOPES = ("single_type", "multiple_type")


@dataclass
class CorpusConfig:
    n_train: int = 2000
    n_val: int = 256
    n_eval: int = 512
    doc_len_min: int = 150
    doc_len_max: int = 400
    ref_mean: float = 71.0
    ref_std: float = 28.0
    ref_clip_min: int = 20
    ref_clip_max: int = 180
    seed: int = 11


@dataclass
class PolicyConfig:
    vocab_size: int = 64
    emb_dim: int = 16
    hidden_dim: int = 32
    max_gen_len: int = 256
    seed: int = 0


@dataclass
class CriticConfig:
    emb_dim: int = 8
    hidden_dim: int = 16
    seed: int = 5


@dataclass
class ExtractorTrainConfig:
    n_train: int = 28000
    n_between_extra: int = 12000
    n_heldout: int = 2000
    lr: float = 0.02
    epochs: int = 30
    batch_size: int = 64
    seed: int = 3


@dataclass
class RewardModelConfig:
    kind: str = "rule"  # rule | trained
    n_sim: int = 100000
    hidden: int = 32
    lr: float = 3e-3
    epochs: int = 30
    batch_size: int = 256
    seed: int = 4
    max_output_len: int = 256


@dataclass
class ExperimentConfig:
    setting: str = "prompt_rl"
    control_scope: str = "single_type"
    seed: int = 0
    relevance_drop_threshold: float = 0.01
    filter_n: int = 8
    eval_seed: int = 99
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    sft: SftConfig = field(default_factory=lambda: SftConfig(seed=1))
    ppo: PPOConfig = field(default_factory=lambda: PPOConfig(seed=2))
    extractor: ExtractorTrainConfig = field(default_factory=ExtractorTrainConfig)
    reward_model: RewardModelConfig = field(default_factory=RewardModelConfig)

    def validate(self) -> None:
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.control_scope not in SCOPES:
            raise ConfigError(f"control_scope must be one of {SCOPES}, got {self.control_scope!r}")
        if self.filter_n < 1:
            raise ConfigError("filter_n must be >= 1")
        if self.relevance_drop_threshold < 0:
            raise ConfigError("relevance_drop_threshold must be >= 0")
        if self.corpus.doc_len_min > self.corpus.doc_len_max:
            raise ConfigError("doc_len_min > doc_len_max")
        if self.reward_model.kind not in ("rule", "trained"):
            raise ConfigError(f"reward_model.kind must be rule|trained, got {self.reward_model.kind!r}")
        if self.policy.max_gen_len != self.ppo.max_gen_len:
            raise ConfigError("policy.max_gen_len and ppo.max_gen_len must agree")
        self.ppo.validate()

    @property
    def kinds(self) -> tuple[ControlKind, ...]:
        if self.control_scope == "single_type":
            return (ControlKind.EQUAL_TO,)
        return BOUNDED_KINDS

    @property
    def uses_rl(self) -> bool:
        return self.setting in ("prompt_rl", "prompt_rl_filter")

    @property
    def uses_filtering(self) -> bool:
        return self.setting in ("prompt_filter", "prompt_rl_filter")


_SECTIONS = {
    "corpus": CorpusConfig,
    "policy": PolicyConfig,
    "critic": CriticConfig,
    "sft": SftConfig,
    "ppo": PPOConfig,
    "extractor": ExtractorTrainConfig,
    "reward_model": RewardModelConfig,
}

_TOP_KEYS = ("setting", "control_scope", "seed", "relevance_drop_threshold", "filter_n", "eval_seed")


def _coerce(value: str, target_type):
    if target_type is bool:
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    return target_type(value)


def load_config(path=None, text: str | None = None) -> ExperimentConfig:
    """Parse an INI config; unknown sections or keys are errors, missing ones
    keep their defaults."""
    parser = configparser.ConfigParser()
    if text is not None:
        parser.read_string(text)
    elif path is not None:
        with open(path, encoding="utf-8") as f:
            parser.read_string(f.read())
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section == "experiment":
            for key, value in parser.items(section):
                if key not in _TOP_KEYS:
                    raise ConfigError(f"unknown key [experiment] {key}")
                cur = getattr(cfg, key)
                setattr(cfg, key, _coerce(value, type(cur)))
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        sub = getattr(cfg, section)
        known = {f.name: f.type for f in fields(sub)}
        for key, value in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key [{section}] {key}")
            cur = getattr(sub, key)
            setattr(sub, key, _coerce(value, type(cur)))
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser["experiment"] = {k: str(getattr(cfg, k)) for k in _TOP_KEYS}
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        parser[section] = {f.name: str(getattr(sub, f.name)) for f in fields(sub)}
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:16]
