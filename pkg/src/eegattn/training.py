"""Training protocol: Adam with linear warmup + cosine decay, multi-seed runs,
evaluation on the last checkpoint, and inference profiling."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from eegattn import tensor as T
from eegattn.basenet import BaseNet, build, param_count, save_checkpoint
from eegattn.exceptions import ConfigError
from eegattn.rng import make_rng
from eegattn.signal import SplitPlan, TrialSet, split
from eegattn.tensor import Tensor

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

RESULT_COLUMNS = ("run_id", "subject", "seed", "split_mode", "attention_kind", "config_hash", "test_accuracy",
                  "params_trainable", "params_total", "wall_time_s")
PROFILE_COLUMNS = ("model", "params", "latency_mean_ms", "latency_std_ms")


@dataclass
class TrainConfig:
    epochs: int = 1000
    warmup_epochs: int = 20
    peak_lr: float = 1e-3
    batch_size: int = 64
    seeds: int = 5

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs must be in [0, epochs), got {self.warmup_epochs}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.batch_size < 1 or self.seeds < 1:
            raise ConfigError("batch_size and seeds must be positive")

    @classmethod
    def cross_subject(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 125, "warmup_epochs": 3, **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 0-based epoch: linear warmup to the peak, then cosine decay."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.peak_lr * (epoch + 1) / w
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (cfg.epochs - w)))


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, Optional[np.ndarray]], state: dict, lr: float,
              betas=ADAM_BETAS, eps=ADAM_EPS):
    """One bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        m[name] = b1 * m[name] + (1.0 - b1) * g
        v[name] = b2 * v[name] + (1.0 - b2) * (g * g)
        p -= (lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, named_params):
        self.params = dict(named_params)
        self.state: dict = {}

    def step(self, lr: float):
        adam_step({k: p.data for k, p in self.params.items()},
                  {k: p.grad for k, p in self.params.items()}, self.state, lr)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def predict_logits(model: BaseNet, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = [model(Tensor(np.asarray(X[i : i + batch_size], dtype=model.dtype))).data
           for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def accuracy(model: BaseNet, X: np.ndarray, y: np.ndarray) -> float:
    if len(X) == 0:
        return float("nan")
    return float((predict_logits(model, X).argmax(axis=1) == np.asarray(y)).mean())


def fit_model(model: BaseNet, X: np.ndarray, y: np.ndarray, cfg: TrainConfig, seed: int,
              callback=None) -> List[float]:
    """Mini-batch training for ``cfg.epochs`` epochs; returns the mean loss per epoch."""
    cfg.validate()
    n = len(X)
    if n == 0:
        raise ConfigError("training split is empty")
    X = np.asarray(X, dtype=model.dtype)
    y = np.asarray(y, dtype=np.int64)
    rng = make_rng(seed, "shuffle")
    model.set_dropout_seed(seed)
    opt = Adam(model.named_parameters())
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        model.train()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = T.cross_entropy(model(Tensor(X[idx])), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            total += float(loss.data) * len(idx)
        mean_loss = total / n
        if not math.isfinite(mean_loss):
            raise FloatingPointError(f"loss became non-finite at epoch {epoch}")
        history.append(mean_loss)
        if callback is not None:
            callback(epoch, mean_loss)
    model.eval()
    return history


@dataclass
class RunResult:
    subject: int
    seed: int
    test_accuracy: float
    train_accuracy: float
    loss_history: List[float] = field(repr=False)
    wall_time_s: float
    params_trainable: int
    params_total: int
    model: Optional[BaseNet] = field(default=None, repr=False)
    checkpoint: Optional[str] = None


def train(model: BaseNet, data: TrialSet, plan: SplitPlan, cfg: TrainConfig, seed: int) -> RunResult:
    """Train on ``plan.train`` and evaluate the final weights on ``plan.test``.

    Only the training indices are read before the final evaluation.
    """
    if len(plan.train) == 0:
        raise ConfigError(f"empty training split for subject {plan.target_subject} ({plan.mode})")
    t0 = time.perf_counter()
    Xtr, ytr = data.data[plan.train], data.labels[plan.train]
    history = fit_model(model, Xtr, ytr, cfg, seed)
    train_acc = accuracy(model, Xtr, ytr)
    test_acc = accuracy(model, data.data[plan.test], data.labels[plan.test])
    wall = time.perf_counter() - t0
    trainable, total = param_count(model)
    log.info("subject %d seed %d: test acc %.4f (%.1fs)", plan.target_subject, seed, test_acc, wall)
    return RunResult(plan.target_subject, seed, test_acc, train_acc, history, wall, trainable, total, model)


def aggregate(results: List[RunResult]) -> dict:
    """Per-subject rows plus the across-seed summary.

    For each seed the test accuracy is averaged over subjects; the reported
    mean and std are taken over these per-seed averages (population std).
    """
    subjects = sorted({r.subject for r in results})
    seeds = sorted({r.seed for r in results})
    acc = {(r.subject, r.seed): r.test_accuracy for r in results}
    rows = []
    for s in subjects:
        vals = np.array([acc[(s, k)] for k in seeds if (s, k) in acc])
        rows.append({"subject": s, "mean": float(vals.mean()), "std": float(vals.std()), "n_seeds": len(vals)})
    per_seed = np.array([np.mean([acc[(s, k)] for s in subjects if (s, k) in acc]) for k in seeds])
    summary = {"mean": float(per_seed.mean()), "std": float(per_seed.std()), "per_seed": per_seed.tolist()}
    if len(subjects) > 1:
        rows.append({"subject": "mean", "mean": summary["mean"], "std": summary["std"], "n_seeds": len(seeds)})
    return {"rows": rows, **summary}


def profile(model: BaseNet, input_shape=None, warmup_iters: int = 5, measured_iters: int = 50) -> dict:
    """Batch-1 eval-mode forward latency and parameter counts."""
    if measured_iters < 10:
        raise ConfigError(f"measured_iters must be >= 10, got {measured_iters}")
    c = model.config
    shape = tuple(input_shape) if input_shape is not None else (1, c.in_channels, c.n_samples)
    x = Tensor(make_rng(0, "profile").standard_normal(shape).astype(model.dtype))
    model.eval()
    for _ in range(warmup_iters):
        model(x)
    times = np.empty(measured_iters)
    for i in range(measured_iters):
        t0 = time.perf_counter()
        model(x)
        times[i] = (time.perf_counter() - t0) * 1e3
    trainable, total = param_count(model)
    return {
        "params_trainable": trainable,
        "params_total": total,
        "latency_mean_ms": float(times.mean()),
        "latency_std_ms": float(times.std()),
    }


def write_csv(path, columns: Sequence[str], rows: List[dict]):
    """Write ``rows`` to ``path`` via a temporary file and an atomic rename."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: row[k] for k in columns})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


@dataclass
class ProtocolReport:
    config_hash: str
    results: List[RunResult]
    rows: List[dict]
    summary: dict


def run_id(config_hash: str, subject: int, seed: int) -> str:
    return f"{config_hash}-s{subject}-seed{seed}"


def _run_cell(cfg, ts: TrialSet, subject: int, seed: int, ckpt_dir: Optional[str], keep_model: bool) -> RunResult:
    plan = split(ts, cfg.data.split_mode, subject)
    model = build(cfg.model_config(), seed=seed)
    res = train(model, ts, plan, cfg.train, seed)
    if ckpt_dir is not None:
        rid = run_id(cfg.config_hash, subject, seed)
        path = Path(ckpt_dir) / f"{rid}.ckpt"
        meta = {
            "run_id": rid,
            "subject": subject,
            "seed": seed,
            "config_hash": cfg.config_hash,
            "test_accuracy": res.test_accuracy,
            "data": {k: v for k, v in cfg.data.to_dict().items() if k not in ("synthetic", "path")},
        }
        tmp = path.with_name(path.name + ".tmp")
        save_checkpoint(model, tmp, meta)
        os.replace(tmp, path)
        res.checkpoint = str(path)
    if not keep_model:
        res.model = None
    return res


def run_protocol(cfg, out_dir=None, workers: int = 1, data: Optional[TrialSet] = None) -> ProtocolReport:
    """Train every (subject, seed) cell of ``cfg`` and aggregate the test accuracies.

    ``cfg`` is a :class:`eegattn.config.RunConfig`. With ``out_dir`` the
    checkpoints and ``results.csv`` are written there.
    """
    ts = cfg.data.preprocess(data if data is not None else cfg.data.raw())
    subjects = cfg.data.target_subjects(ts)
    seeds = list(range(cfg.train.seeds))
    ckpt_dir = None
    if out_dir is not None and cfg.output.checkpoints:
        ckpt_dir = str(Path(out_dir) / "checkpoints")
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
    cells = [(s, k) for s in subjects for k in seeds]
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
            futures = [pool.submit(_run_cell, cfg, ts, s, k, ckpt_dir, False) for s, k in cells]
            results = [f.result() for f in futures]
    else:
        results = [_run_cell(cfg, ts, s, k, ckpt_dir, True) for s, k in cells]
    kind = cfg.attention.kind if cfg.attention is not None else "none"
    rows = [
        {
            "run_id": run_id(cfg.config_hash, r.subject, r.seed),
            "subject": r.subject,
            "seed": r.seed,
            "split_mode": cfg.data.split_mode,
            "attention_kind": kind,
            "config_hash": cfg.config_hash,
            "test_accuracy": repr(r.test_accuracy),
            "params_trainable": r.params_trainable,
            "params_total": r.params_total,
            "wall_time_s": f"{r.wall_time_s:.3f}",
        }
        for r in results
    ]
    if out_dir is not None:
        write_csv(Path(out_dir) / "results.csv", RESULT_COLUMNS, rows)
    return ProtocolReport(cfg.config_hash, results, rows, aggregate(results))
