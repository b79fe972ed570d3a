"""BaseNet EEG decoder with pluggable channel-attention blocks."""

from eegattn.attention import KINDS, AttentionSpec, build_attention
from eegattn.basenet import BaseNet, BaseNetConfig, attach_attention, build, load_checkpoint, param_count, save_checkpoint
from eegattn.config import RunConfig
from eegattn.estimator import BandpassFilter, BaseNetClassifier, ChannelStandardizer
from eegattn.exceptions import ConfigError, DataFormatError, ShapeError
from eegattn.signal import SynthSpec, TrialSet, bandpass, generate, split, znormalize
from eegattn.training import TrainConfig, lr_at, profile, run_protocol, train

__version__ = "0.1.0"

__all__ = [
    "KINDS", "AttentionSpec", "build_attention", "BaseNet", "BaseNetConfig", "attach_attention", "build",
    "load_checkpoint", "param_count", "save_checkpoint", "RunConfig", "BandpassFilter", "BaseNetClassifier",
    "ChannelStandardizer", "ConfigError", "DataFormatError", "ShapeError", "SynthSpec", "TrialSet", "bandpass",
    "generate", "split", "znormalize", "TrainConfig", "lr_at", "profile", "run_protocol", "train",
]
