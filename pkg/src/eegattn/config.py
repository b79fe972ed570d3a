"""Run configuration: a JSON document with data / model / attention / train /
output sections (plus an optional profile section).

Every section is expanded with its defaults before hashing, so two files that
spell the same run differently share one ``config_hash``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

from eegattn.attention import KINDS, AttentionSpec
from eegattn.basenet import BaseNetConfig
from eegattn.exceptions import ConfigError
from eegattn.signal import SPLIT_MODES, SynthSpec, TrialSet, bandpass, generate, load, manifest_path, znormalize
from eegattn.training import TrainConfig

HASH_LENGTH = 12
DATA_DIMS = ("in_channels", "n_samples", "n_classes")


def _check_keys(section: str, d: dict, allowed):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object, got {type(d).__name__}")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}; allowed: {sorted(allowed)}")


@dataclass
class DataConfig:
    synthetic: Optional[SynthSpec] = None
    path: Optional[str] = None
    highpass_hz: Optional[float] = 4.0
    lowpass_hz: Optional[float] = 40.0
    znormalize: bool = True
    split_mode: str = "within_subject"
    subjects: Optional[List[int]] = None

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            self.synthetic = SynthSpec.from_dict(self.synthetic)
        if self.synthetic is None and self.path is None:
            self.synthetic = SynthSpec()
        if self.synthetic is not None and self.path is not None:
            raise ConfigError("data: give either 'synthetic' or 'path', not both")
        if self.split_mode not in SPLIT_MODES:
            raise ConfigError(f"data.split_mode must be one of {SPLIT_MODES}, got {self.split_mode!r}")
        if self.subjects is not None:
            self.subjects = [int(s) for s in self.subjects]

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        _check_keys("data", d, cls.__dataclass_fields__)
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synthetic"] = self.synthetic.to_dict() if self.synthetic is not None else None
        return d

    def shape(self) -> Tuple[int, int, int]:
        """(channels, samples, classes) without generating or reading the payload."""
        if self.synthetic is not None:
            s = self.synthetic
            return s.n_channels, int(round(s.fs * s.duration_s)), s.n_classes
        with open(manifest_path(self.path)) as fh:
            m = json.load(fh)
        return int(m["n_channels"]), int(m["n_samples"]), int(m["n_classes"])

    def raw(self) -> TrialSet:
        if self.synthetic is not None:
            return generate(self.synthetic)
        return load(self.path)

    def preprocess(self, ts: TrialSet) -> TrialSet:
        if self.highpass_hz is not None or self.lowpass_hz is not None:
            ts = bandpass(ts, self.highpass_hz, self.lowpass_hz)
        if self.znormalize:
            ts = znormalize(ts)
        return ts

    def target_subjects(self, ts: TrialSet) -> List[int]:
        present = sorted(set(ts.subject_ids.tolist()))
        if self.subjects is None:
            return present
        missing = set(self.subjects) - set(present)
        if missing:
            raise ConfigError(f"data.subjects {sorted(missing)} not present; subjects: {present}")
        return list(self.subjects)


@dataclass
class OutputConfig:
    directory: str = "out"
    checkpoints: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "OutputConfig":
        _check_keys("output", d, cls.__dataclass_fields__)
        return cls(**d)


@dataclass
class ProfileConfig:
    variants: Union[str, List[str]] = "all"
    iters: int = 50
    warmup: int = 5

    def __post_init__(self):
        if isinstance(self.variants, str) and self.variants != "all":
            self.variants = [self.variants]
        if not isinstance(self.variants, str):
            self.variants = [str(v).lower() for v in self.variants]
            for v in self.variants:
                if v != "none" and v not in KINDS:
                    raise ConfigError(f"profile variant {v!r} unknown; valid: none, {', '.join(KINDS)}")

    def kinds(self) -> List[str]:
        return ["none", *KINDS] if self.variants == "all" else list(self.variants)

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileConfig":
        _check_keys("profile", d, cls.__dataclass_fields__)
        return cls(**d)


SECTIONS = ("data", "model", "attention", "train", "output", "profile")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)
    attention: Optional[AttentionSpec] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    profile: Optional[ProfileConfig] = None

    def __post_init__(self):
        if isinstance(self.attention, (str, dict)):
            self.attention = BaseNetConfig(attention=self.attention).attention
        model = dict(self.model or {})
        if "attention" in model:
            raise ConfigError("put the attention block in the top-level 'attention' section")
        _check_keys("model", model, set(BaseNetConfig.__dataclass_fields__) - {"attention"})
        self.model = model
        self.train.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys("config", d, SECTIONS)
        att = d.get("attention")
        return cls(
            data=DataConfig.from_dict(d.get("data", {})),
            model=d.get("model", {}),
            attention=None if att in (None, "none") else att,
            train=TrainConfig.from_dict(d.get("train", {})),
            output=OutputConfig.from_dict(d.get("output", {})),
            profile=ProfileConfig.from_dict(d["profile"]) if d.get("profile") is not None else None,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "model": self.model_config().to_dict() | {"attention": None},
            "attention": self.attention.to_dict() if self.attention is not None else None,
            "train": self.train.to_dict(),
            "output": asdict(self.output),
            "profile": asdict(self.profile) if self.profile is not None else None,
        }

    def canonical(self) -> str:
        d = self.to_dict()
        del d["model"]["attention"]
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:HASH_LENGTH]

    def model_config(self, attention: Optional[AttentionSpec] = "inherit") -> BaseNetConfig:
        """BaseNet config with the input dimensions taken from the data section."""
        C, T_len, n_classes = self.data.shape()
        dims = dict(zip(DATA_DIMS, (C, T_len, n_classes)))
        for k, v in dims.items():
            if k in self.model and int(self.model[k]) != v:
                raise ConfigError(f"model.{k}={self.model[k]} disagrees with the data ({v})")
        att = self.attention if attention == "inherit" else attention
        cfg = BaseNetConfig(**{**self.model, **dims, "attention": copy.deepcopy(att)})
        cfg.validate()
        return cfg

    def with_attention(self, spec: Optional[AttentionSpec]) -> "RunConfig":
        new = copy.deepcopy(self)
        new.attention = spec
        return new

    def output_dir(self) -> Path:
        return Path(self.output.directory) / self.config_hash
