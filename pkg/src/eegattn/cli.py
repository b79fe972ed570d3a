"""Command-line entry point.

    eegattn generate --spec synth.json --out data/
    eegattn train    --config run.json
    eegattn eval     --checkpoint out/<hash>/checkpoints/<run>.ckpt --data out/<hash>/data
    eegattn ablate   --config run.json --grid "r=1,2,4,8"
    eegattn gradcheck --all
    eegattn profile  --config run.json --iters 50

Exit status: 0 success, 1 some requested work failed, 2 invalid input.
Set EEGATTN_NUM_THREADS to cap BLAS threads (1 gives bitwise-reproducible runs).
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from eegattn import gradcheck as gc
from eegattn.attention import KINDS, AttentionSpec
from eegattn.basenet import build, load_checkpoint, param_count
from eegattn.config import DataConfig, RunConfig
from eegattn.exceptions import ConfigError, DataFormatError, ShapeError
from eegattn.signal import SynthSpec, generate, load, save, split
from eegattn.training import PROFILE_COLUMNS, accuracy, profile, run_protocol, write_csv

THREADS_ENV = "EEGATTN_NUM_THREADS"
EXIT_OK, EXIT_FAILED, EXIT_INVALID = 0, 1, 2
ABLATION_COLUMNS = ("cell", "status", "mean_accuracy", "std_accuracy", "params_trainable", "params_total",
                    "param_delta")

log = logging.getLogger("eegattn")


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _lock(cfg: RunConfig, out_dir: Path):
    _write_text(out_dir / "config.lock", json.dumps(json.loads(cfg.canonical()), indent=2, sort_keys=True) + "\n")


def _payload_digest(path: Path) -> str:
    return hashlib.sha256(Path(str(path).replace(".trials.json", ".trials.f32")).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    spec = SynthSpec()
    if args.spec:
        with open(args.spec) as fh:
            spec = SynthSpec.from_dict(json.load(fh))
    spec.validate()
    ts = generate(spec)
    try:
        manifest = save(ts, Path(args.out) / "dataset")
    except OSError as exc:
        print(f"error: cannot write to {args.out}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    counts = np.bincount(ts.labels, minlength=ts.n_classes).tolist()
    print(f"wrote {len(ts)} trials ({ts.n_channels} channels x {ts.n_samples} samples) to {manifest}")
    print(f"per-class counts: {counts}; subjects: {spec.n_subjects}; sessions: {spec.sessions}")
    print(f"payload sha256: {_payload_digest(manifest)}")
    return EXIT_OK


def _summary_lines(report) -> List[str]:
    lines = [f"{'subject':>8}  {'mean':>7}  {'std':>7}"]
    for row in report.summary["rows"]:
        lines.append(f"{row['subject']!s:>8}  {100 * row['mean']:7.2f}  {100 * row['std']:7.2f}")
    return lines


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg.model_config()
    out_dir = cfg.output_dir()
    raw = cfg.data.raw()
    if cfg.data.synthetic is not None:
        save(raw, out_dir / "data" / "dataset")
    report = run_protocol(cfg, out_dir=out_dir, workers=args.workers, data=raw)
    _lock(cfg, out_dir)
    print(f"config {cfg.config_hash}: {len(report.results)} runs -> {out_dir}")
    print("\n".join(_summary_lines(report)))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    data_cfg = DataConfig(path=str(args.data), **meta.get("data", {}))
    ts = data_cfg.preprocess(load(args.data))
    subject = int(meta.get("subject", 0))
    plan = split(ts, data_cfg.split_mode, subject)
    acc = accuracy(model, ts.data[plan.test], ts.labels[plan.test])
    print(f"test accuracy: {acc!r}")
    if "test_accuracy" in meta:
        recorded = float(meta["test_accuracy"])
        print(f"recorded accuracy: {recorded!r} ({'match' if recorded == acc else 'MISMATCH'})")
        if recorded != acc:
            return EXIT_FAILED
    return EXIT_OK


def parse_grid(text: str) -> List[Dict[str, int]]:
    """``"r=1,2;k=3,5"`` -> cartesian list of attention overrides."""
    axes = []
    for part in filter(None, (p.strip() for p in text.replace("x", ";").replace("×", ";").split(";"))):
        key, sep, values = part.partition("=")
        key = key.strip()
        if not sep or key not in ("r", "k", "codewords"):
            raise ConfigError(f"grid axis {part!r} must look like r=1,2,4 (axes: r, k, codewords)")
        vals = [int(v) for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"grid axis {key!r} has no values")
        axes.append((key, vals))
    if not axes:
        raise ConfigError("empty grid")
    keys = [k for k, _ in axes]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in axes))]


def _cell_label(cell: Dict[str, int]) -> str:
    return ",".join(f"{k}={v}" for k, v in cell.items())


def _ablate_cell(cfg: RunConfig, cell_dir: str) -> dict:
    report = run_protocol(cfg, out_dir=cell_dir, workers=1)
    _lock(cfg, Path(cell_dir))
    r = report.results[0]
    return {"status": "ok", "mean_accuracy": f"{report.summary['mean']:.6f}",
            "std_accuracy": f"{report.summary['std']:.6f}",
            "params_trainable": r.params_trainable, "params_total": r.params_total}


def cmd_ablate(args) -> int:
    base = RunConfig.load(args.config)
    if base.attention is None:
        raise ConfigError("ablation needs an attention section to sweep")
    cells = parse_grid(args.grid)
    out_dir = base.output_dir()
    baseline, _ = param_count(build(base.model_config(attention=None)))
    rows, jobs = [], []
    for cell in cells:
        label = _cell_label(cell)
        row = {"cell": label, "status": "", "mean_accuracy": "", "std_accuracy": "", "params_trainable": "",
               "params_total": "", "param_delta": ""}
        try:
            spec = AttentionSpec.from_dict({**base.attention.to_dict(), **cell})
            cfg = base.with_attention(spec)
            cfg.model_config()
        except ConfigError as exc:
            row["status"] = f"config-error: {exc}"
        else:
            jobs.append((row, cfg, str(out_dir / "ablation" / label.replace(",", "_").replace("=", ""))))
        rows.append(row)
    workers = max(1, min(args.workers, len(jobs)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(row, pool.submit(_ablate_cell, cfg, d)) for row, cfg, d in jobs]
            for row, fut in futures:
                try:
                    row.update(fut.result())
                except Exception as exc:  # noqa: BLE001 - reported per cell
                    row["status"] = f"error: {exc}"
    else:
        for row, cfg, d in jobs:
            try:
                row.update(_ablate_cell(cfg, d))
            except Exception as exc:  # noqa: BLE001
                row["status"] = f"error: {exc}"
    for row in rows:
        if row["status"] == "ok":
            row["param_delta"] = row["params_trainable"] - baseline
    write_csv(out_dir / "ablation.csv", ABLATION_COLUMNS, rows)
    _lock(base, out_dir)
    for row in rows:
        print(f"{row['cell']:<16} {row['status'][:60]:<12} acc={row['mean_accuracy'] or '-':<9} "
              f"delta={row['param_delta']}")
    ok = [r for r in rows if r["status"] == "ok"]
    if ok:
        best = max(ok, key=lambda r: (float(r["mean_accuracy"]), -r["params_trainable"]))
        print(f"best cell: {best['cell']} (mean accuracy {float(best['mean_accuracy']):.4f})")
    failed = [r["cell"] for r in rows if r["status"] != "ok"]
    if failed:
        print(f"failed cells: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.block:
        kind = AttentionSpec(kind=args.block).kind
        results = gc.run([kind], include_basenet=False)
    else:
        results = gc.run(KINDS, include_basenet=True)
    worst = 0.0
    for name, err in results:
        status = "ok" if err <= gc.TOLERANCE else "FAIL"
        print(f"{name:<16} max rel error {err:.3e}  {status}")
        worst = max(worst, err)
    return EXIT_OK if worst <= gc.TOLERANCE else EXIT_FAILED


def cmd_profile(args) -> int:
    cfg = RunConfig.load(args.config)
    pcfg = cfg.profile
    iters = args.iters if args.iters is not None else (pcfg.iters if pcfg else 50)
    if iters < 10:
        raise ConfigError(f"--iters must be >= 10, got {iters}")
    warmup = pcfg.warmup if pcfg else 5
    kinds = pcfg.kinds() if pcfg else ["none", *KINDS]
    rows = []
    for kind in kinds:
        spec = None if kind == "none" else AttentionSpec.default(kind)
        model = build(cfg.model_config(attention=spec), seed=0)
        p = profile(model, warmup_iters=warmup, measured_iters=iters)
        name = "basenet" if kind == "none" else f"basenet+{kind}"
        rows.append({"model": name, "params": p["params_trainable"],
                     "latency_mean_ms": f"{p['latency_mean_ms']:.4f}", "latency_std_ms": f"{p['latency_std_ms']:.4f}"})
        print(f"{name:<24} params={p['params_trainable']:>6}  latency={p['latency_mean_ms']:.3f}"
              f" +- {p['latency_std_ms']:.3f} ms")
    out_dir = cfg.output_dir()
    write_csv(out_dir / "profile.csv", PROFILE_COLUMNS, rows)
    _lock(cfg, out_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eegattn", description="BaseNet + channel attention for EEG trials")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic trial set")
    g.add_argument("--spec", help="JSON file of synthetic-data fields (defaults used when omitted)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train every subject x seed of a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--workers", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="re-evaluate a checkpoint on its test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweep attention hyperparameters")
    a.add_argument("--config", required=True)
    a.add_argument("--grid", required=True, help='e.g. "r=1,2,4,8" or "r=2,4;k=3,5,7"')
    a.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of attention blocks and BaseNet")
    which = c.add_mutually_exclusive_group(required=True)
    which.add_argument("--all", action="store_true")
    which.add_argument("--block", metavar="KIND")
    c.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("profile", help="batch-1 inference latency per model variant")
    f.add_argument("--config", required=True)
    f.add_argument("--iters", type=int)
    f.set_defaults(func=cmd_profile)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get(THREADS_ENV)
    try:
        with threadpool_limits(limits=int(threads) if threads else None):
            return args.func(args)
    except (ConfigError, DataFormatError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
