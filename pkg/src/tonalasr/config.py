"""Sectioned run configuration (``key = value`` under ``[section]`` headers).

Every key has a typed default here; unknown sections or keys are errors.
Path-valued keys are resolved relative to the directory of the config file.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any

from .model import ConfigError, ModelConfig
from .synth_corpus import ToyLanguageSpec
from .training import TrainConfig


# section -> key -> default; the default's type decides parsing
DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"seed": 0, "run_dir": "run"},
    "corpus": {
        "train_size": 600, "dev_size": 100, "test_size": 100,
        "source_train_size": 600, "source_overlap": 0.6,
        "lexicon_size": 48, "homophone_rate": 0.3, "han_ambiguity": 0.15,
        "noise_sigma": 0.1, "feature_dim": 16, "num_speakers": 24, "speaker_pitch_sigma": 0.0,
        "min_words": 2, "max_words": 6,
    },
    "tokenizer": {"vocab_size": 500},
    "model": {"subsample": 2, "num_layers": 2, "hidden_dim": 128, "d_model": 256,
              "embed_dim": 256, "nonlinearity": "tanh"},
    "train": {
        "base_lr": 0.0005, "clip_norm": 2.0, "accum_steps": 4, "batch_size": 4,
        "epochs_pretrain": 20, "epochs_stage1": 20, "epochs_stage2": 40, "epochs_direct": 60,
        "max_frames": 600, "lr_batches": 5000.0, "lr_epochs": 6.0, "freeze": "",
    },
    "decode": {"beam": 1, "max_symbols": 8},
}
PATH_KEYS = {("run", "run_dir")}


def _parse(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


@dataclasses.dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]
    base_dir: Path

    @classmethod
    def defaults(cls, base_dir=".") -> "RunConfig":
        return cls({s: dict(keys) for s, keys in DEFAULTS.items()}, Path(base_dir))

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        cfg = cls.defaults(Path(path).resolve().parent if path else Path.cwd())
        if path:
            parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
            parser.optionxform = str
            try:
                with open(path, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except (OSError, configparser.Error) as exc:
                raise ConfigError(f"{path}: {exc}") from None
            for section in parser.sections():
                for key, raw in parser.items(section):
                    cfg.set(f"{section}.{key}", raw)
        for dotted, raw in (overrides or {}).items():
            if raw is not None:
                cfg.set(dotted, raw)
        return cfg

    def set(self, dotted: str, raw) -> None:
        section, _, key = dotted.partition(".")
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        default = DEFAULTS[section][key]
        self.values[section][key] = _parse(section, key, str(raw), default) if isinstance(raw, str) else raw

    def get(self, dotted: str):
        section, _, key = dotted.partition(".")
        value = self.values[section][key]
        if (section, key) in PATH_KEYS:
            return (self.base_dir / value).resolve()
        return value

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def run_dir(self) -> Path:
        return self.get("run.run_dir")

    def corpus_spec(self) -> ToyLanguageSpec:
        c = self.values["corpus"]
        return ToyLanguageSpec(lexicon_size=c["lexicon_size"], homophone_rate=c["homophone_rate"],
                               han_ambiguity=c["han_ambiguity"], noise_sigma=c["noise_sigma"],
                               feature_dim=c["feature_dim"], num_speakers=c["num_speakers"],
                               speaker_pitch_sigma=c["speaker_pitch_sigma"],
                               words_per_utterance=(c["min_words"], c["max_words"]), seed=self.seed)

    def sizes(self, source: bool = False) -> dict[str, int]:
        c = self.values["corpus"]
        if source:
            return {"train": c["source_train_size"], "dev": max(1, c["dev_size"] // 4),
                    "test": max(1, c["test_size"] // 4)}
        return {"train": c["train_size"], "dev": c["dev_size"], "test": c["test_size"]}

    def model_config(self, vocab_size: int) -> ModelConfig:
        m = self.values["model"]
        return ModelConfig(vocab_size=vocab_size, input_dim=self.values["corpus"]["feature_dim"], **m)

    def train_config(self, freeze=None) -> TrainConfig:
        t = dict(self.values["train"])
        listed = t.pop("freeze")
        if freeze is None:
            freeze = [c for c in listed.replace(",", " ").split() if c]
        try:
            return TrainConfig(seed=self.seed, freeze=frozenset(freeze), **t)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_text(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in keys.items()]
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        """SHA-256 of the canonical key/value dump (paths as written, not resolved)."""
        return hashlib.sha256(json.dumps(self.values, sort_keys=True, default=str).encode()).hexdigest()


def flag_specs():
    """(dotted key, default) for every config key, in declaration order."""
    for section, keys in DEFAULTS.items():
        for key, default in keys.items():
            yield f"{section}.{key}", default
