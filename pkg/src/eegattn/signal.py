"""Trial sets: synthetic motor-imagery data, preprocessing, splits and file I/O.

File format
-----------
A trial set is stored as two files sharing a stem:

``<stem>.trials.json``
    Manifest: ``format`` ("trials"), ``version`` (1), ``n_trials``,
    ``n_channels``, ``n_samples``, ``n_classes``, ``fs``, ``dtype`` ("<f4"),
    ``order`` ("trial,channel,sample"), and the per-trial arrays ``labels``,
    ``subject_ids`` and ``session_ids``.
``<stem>.trials.f32``
    Raw little-endian float32 samples, trial-major, then channel, then sample.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import signal as sps

from eegattn.exceptions import ConfigError, DataFormatError
from eegattn.rng import make_rng

STD_FLOOR = 1e-8
MU_BAND = (8.0, 13.0)
FILTER_ORDER = 4


@dataclass
class TrialSet:
    data: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray
    session_ids: np.ndarray
    fs: float
    n_classes: Optional[int] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DataFormatError(f"trial data must be [trial, channel, sample], got {self.data.shape}")
        n = self.data.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64).reshape(-1)
        self.session_ids = np.asarray(self.session_ids, dtype=np.int64).reshape(-1)
        for name in ("labels", "subject_ids", "session_ids"):
            if getattr(self, name).shape[0] != n:
                raise DataFormatError(f"{name} has {getattr(self, name).shape[0]} entries for {n} trials")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if n else 0
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataFormatError(f"labels must lie in [0, {self.n_classes})")
        self.fs = float(self.fs)

    def __len__(self):
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    def subset(self, idx) -> "TrialSet":
        idx = np.asarray(idx, dtype=np.int64)
        return TrialSet(self.data[idx], self.labels[idx], self.subject_ids[idx], self.session_ids[idx],
                        self.fs, self.n_classes)

    def with_data(self, data) -> "TrialSet":
        return TrialSet(data, self.labels, self.subject_ids, self.session_ids, self.fs, self.n_classes)


@dataclass
class SynthSpec:
    """Desk-scale surrogate for two-session motor-imagery recordings.

    Each trial is 1/f^noise_exponent background noise plus a mu-band
    rhythm with random phase per channel. For a trial of class c the rhythm
    on channel group c is attenuated by ``erd_depth`` (event-related
    desynchronization). Every subject gets a fixed near-identity channel
    mixing matrix and a slightly shifted mu frequency.
    """

    n_subjects: int = 1
    trials_per_session: int = 48
    sessions: int = 2
    n_channels: int = 8
    n_classes: int = 2
    fs: float = 250.0
    duration_s: float = 4.0
    mu_freq_hz: float = 11.0
    erd_depth: float = 0.5
    noise_exponent: float = 1.0
    mu_amplitude: float = 1.0
    amplitude_jitter: float = 0.25
    mixing_strength: float = 0.1
    seed: int = 0

    def validate(self):
        if self.n_subjects < 1 or self.trials_per_session < 1 or self.sessions < 1:
            raise ConfigError("n_subjects, trials_per_session and sessions must be positive")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_classes > self.n_channels:
            raise ConfigError(
                f"n_classes={self.n_classes} exceeds the {self.n_channels} channel groups available"
            )
        if not 0.0 < self.erd_depth <= 1.0:
            raise ConfigError(f"erd_depth must be in (0, 1], got {self.erd_depth}")
        if self.mu_freq_hz >= self.fs / 2:
            raise ConfigError("mu frequency must be below Nyquist")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic-data keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def channel_groups(n_channels: int, n_classes: int):
    """Contiguous channel block modulated by each class."""
    size = n_channels // n_classes
    return [np.arange(c * size, (c + 1) * size) for c in range(n_classes)]


def pink_noise(rng: np.random.Generator, shape, exponent: float) -> np.ndarray:
    """Unit-variance noise with power spectrum ~ 1/f^exponent along the last axis."""
    n = shape[-1]
    spec = rng.standard_normal(shape[:-1] + (n // 2 + 1,)) + 1j * rng.standard_normal(shape[:-1] + (n // 2 + 1,))
    f = np.fft.rfftfreq(n)
    f[0] = f[1]
    spec *= f ** (-exponent / 2.0)
    spec[..., 0] = 0.0
    out = np.fft.irfft(spec, n=n)
    return out / out.std(axis=-1, keepdims=True)


def generate(spec: SynthSpec) -> TrialSet:
    spec.validate()
    n_samples = int(round(spec.fs * spec.duration_s))
    t = np.arange(n_samples) / spec.fs
    groups = channel_groups(spec.n_channels, spec.n_classes)
    C = spec.n_channels
    data, labels, subjects, sessions = [], [], [], []
    for subj in range(spec.n_subjects):
        srng = make_rng(spec.seed, "data", "subject", subj)
        mixing = np.eye(C) + spec.mixing_strength * srng.standard_normal((C, C)) / np.sqrt(C)
        mu_freq = spec.mu_freq_hz + srng.uniform(-1.0, 1.0)
        for sess in range(1, spec.sessions + 1):
            rng = make_rng(spec.seed, "data", "session", subj, sess)
            n = spec.trials_per_session
            y = np.arange(n) % spec.n_classes
            y = y[rng.permutation(n)]
            noise = pink_noise(rng, (n, C, n_samples), spec.noise_exponent)
            phase = rng.uniform(0, 2 * np.pi, (n, C, 1))
            freq = mu_freq + rng.normal(0.0, 0.3, (n, 1, 1))
            amp = spec.mu_amplitude * np.exp(spec.amplitude_jitter * rng.standard_normal((n, C, 1)))
            for i in range(n):
                amp[i, groups[y[i]]] *= 1.0 - spec.erd_depth
            x = noise + amp * np.sin(2 * np.pi * freq * t + phase)
            x = np.einsum("ij,njt->nit", mixing, x)
            data.append(x.astype(np.float32))
            labels.append(y)
            subjects.append(np.full(n, subj))
            sessions.append(np.full(n, sess))
    return TrialSet(np.concatenate(data), np.concatenate(labels), np.concatenate(subjects),
                    np.concatenate(sessions), spec.fs, spec.n_classes)


# ---------------------------------------------------------------------------
# preprocessing


def design_filter(fs: float, low_hz: Optional[float] = None, high_hz: Optional[float] = None,
                  order: int = FILTER_ORDER) -> np.ndarray:
    """Butterworth second-order sections.

    ``high_hz`` alone gives a lowpass, ``low_hz`` alone a highpass, both a
    bandpass.
    """
    nyq = fs / 2.0
    for name, v in (("low_hz", low_hz), ("high_hz", high_hz)):
        if v is not None and not 0.0 < v < nyq:
            raise ConfigError(f"{name}={v} must lie in (0, Nyquist={nyq})")
    if low_hz is not None and high_hz is not None:
        if low_hz >= high_hz:
            raise ConfigError(f"band edges must satisfy low < high, got {low_hz} >= {high_hz}")
        return sps.butter(order, [low_hz, high_hz], btype="bandpass", fs=fs, output="sos")
    if high_hz is not None:
        return sps.butter(order, high_hz, btype="lowpass", fs=fs, output="sos")
    if low_hz is not None:
        return sps.butter(order, low_hz, btype="highpass", fs=fs, output="sos")
    raise ConfigError("give at least one of low_hz / high_hz")


def filter_array(x: np.ndarray, fs: float, low_hz=None, high_hz=None, order: int = FILTER_ORDER) -> np.ndarray:
    """Zero-phase (forward-backward) Butterworth filter along the last axis.

    Edges are padded by mirror reflection; odd extension lets a tone pass
    nearly unattenuated at the trial boundaries.
    """
    sos = design_filter(fs, low_hz, high_hz, order)
    return sps.sosfiltfilt(sos, np.asarray(x, dtype=np.float64), axis=-1, padtype="even")


def bandpass(ts: TrialSet, low_hz: Optional[float] = None, high_hz: Optional[float] = None) -> TrialSet:
    return ts.with_data(filter_array(ts.data, ts.fs, low_hz, high_hz).astype(np.float32))


def znormalize_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mu) / np.maximum(sd, STD_FLOOR)


def znormalize(ts: TrialSet) -> TrialSet:
    return ts.with_data(znormalize_array(ts.data).astype(np.float32))


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    mode: str
    target_subject: int
    train: np.ndarray = field(repr=False)
    test: np.ndarray = field(repr=False)


SPLIT_MODES = ("within_subject", "cross_subject")


def split(ts: TrialSet, mode: str, target_subject: int) -> SplitPlan:
    """Train on session 1 (of the target, or of everyone else), test on the target's session 2."""
    if mode not in SPLIT_MODES:
        raise ConfigError(f"split mode must be one of {SPLIT_MODES}, got {mode!r}")
    if target_subject not in set(ts.subject_ids.tolist()):
        raise ConfigError(f"subject {target_subject} not present; subjects: {sorted(set(ts.subject_ids.tolist()))}")
    is_target = ts.subject_ids == target_subject
    test = np.flatnonzero(is_target & (ts.session_ids == 2))
    if mode == "within_subject":
        train = np.flatnonzero(is_target & (ts.session_ids == 1))
    else:
        train = np.flatnonzero(~is_target & (ts.session_ids == 1))
    return SplitPlan(mode, int(target_subject), train, test)


# ---------------------------------------------------------------------------
# band-power reference classifier


def log_band_power(x: np.ndarray, fs: float, band: Tuple[float, float] = MU_BAND) -> np.ndarray:
    """Log mean periodogram power inside ``band``, shape [trials, channels]."""
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean(axis=-1, keepdims=True)
    spec = np.abs(np.fft.rfft(x * np.hanning(x.shape[-1]), axis=-1)) ** 2
    f = np.fft.rfftfreq(x.shape[-1], d=1.0 / fs)
    sel = (f >= band[0]) & (f <= band[1])
    return np.log(spec[..., sel].mean(axis=-1) + 1e-12)


def band_power_oracle(train: TrialSet, test: TrialSet, band: Tuple[float, float] = MU_BAND) -> float:
    """Test accuracy of a band-power classifier fitted on ``train``.

    Two classes: project log band power onto the difference of class means
    and threshold at the midpoint. More classes: nearest class mean.
    """
    ftr = log_band_power(train.data, train.fs, band)
    fte = log_band_power(test.data, test.fs, band)
    classes = np.arange(train.n_classes)
    means = np.stack([ftr[train.labels == c].mean(axis=0) for c in classes])
    if len(classes) == 2:
        w = means[1] - means[0]
        thr = 0.5 * (means[0] @ w + means[1] @ w)
        pred = (fte @ w > thr).astype(np.int64)
    else:
        pred = np.argmin(((fte[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
    return float((pred == test.labels).mean())


# ---------------------------------------------------------------------------
# file I/O

MANIFEST_SUFFIX = ".trials.json"
PAYLOAD_SUFFIX = ".trials.f32"


def _stem(path) -> Path:
    p = Path(path)
    if p.is_dir():
        manifests = sorted(p.glob("*" + MANIFEST_SUFFIX))
        if len(manifests) == 1:
            return Path(str(manifests[0])[: -len(MANIFEST_SUFFIX)])
        return p / "dataset"
    for suffix in (MANIFEST_SUFFIX, PAYLOAD_SUFFIX):
        if p.name.endswith(suffix):
            return p.with_name(p.name[: -len(suffix)])
    return p


def manifest_path(path) -> Path:
    return Path(str(_stem(path)) + MANIFEST_SUFFIX)


def save(ts: TrialSet, path) -> Path:
    """Write manifest + payload; returns the manifest path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "trials",
        "version": 1,
        "n_trials": len(ts),
        "n_channels": ts.n_channels,
        "n_samples": ts.n_samples,
        "n_classes": ts.n_classes,
        "fs": ts.fs,
        "dtype": "<f4",
        "order": "trial,channel,sample",
        "labels": ts.labels.tolist(),
        "subject_ids": ts.subject_ids.tolist(),
        "session_ids": ts.session_ids.tolist(),
    }
    payload = Path(str(stem) + PAYLOAD_SUFFIX)
    mpath = Path(str(stem) + MANIFEST_SUFFIX)
    for target, blob in ((payload, np.ascontiguousarray(ts.data, dtype="<f4").tobytes()),
                         (mpath, json.dumps(manifest, indent=1).encode())):
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_bytes(blob)
        os.replace(tmp, target)
    return mpath


def load(path) -> TrialSet:
    stem = _stem(path)
    mpath = Path(str(stem) + MANIFEST_SUFFIX)
    payload = Path(str(stem) + PAYLOAD_SUFFIX)
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read manifest {mpath}: {exc}") from None
    if manifest.get("format") != "trials" or manifest.get("dtype") != "<f4":
        raise DataFormatError(f"{mpath}: not a float32 trials manifest")
    n, c, t = (int(manifest[k]) for k in ("n_trials", "n_channels", "n_samples"))
    raw = payload.read_bytes()
    expected = n * c * t
    got = len(raw) // 4
    if len(raw) % 4 or got != expected:
        raise DataFormatError(
            f"payload {payload} holds {len(raw)} bytes ({got} samples) but the manifest declares "
            f"{n} trials x {c} channels x {t} samples = {expected} samples"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(n, c, t).astype(np.float32)
    return TrialSet(data, manifest["labels"], manifest["subject_ids"], manifest["session_ids"],
                    manifest["fs"], manifest.get("n_classes"))
