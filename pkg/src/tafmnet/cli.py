"""Command-line entry point: ``tafmnet {synth,train,eval,gradcheck,edt}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensorcore as tc
from .data import (
    SynthConfig,
    read_manifest,
    read_raster,
    render_sample,
    resize_to_input,
    split,
    write_dataset,
)
from .distance import edt
from .exceptions import DivergedLoss, InvalidConfig, TAFMError
from .losses import LOSS_KINDS, LossSchedule
from .model import ModelConfig, TAFMNet, load_checkpoint
from .training import TrainConfig, evaluate, train, write_eval_outputs, write_run_outputs

log = logging.getLogger("tafmnet")

DATA_DEFAULTS = {
    "manifest": None,
    "n_train": 200,
    "n_val": 50,
    "n_test": 50,
    "fractions": [0.8, 0.1, 0.1],
    "threshold_policy": "fixed",
    "precision": "float64",
}


class UsageError(Exception):
    pass


def _pick(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown {name} field(s): {', '.join(sorted(unknown))}")
    return section


def load_config(path: str | None) -> dict:
    """Read a JSON config with optional ``model``/``train``/``synth``/``data`` sections."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: top level must be an object")
    extra = set(cfg) - {"model", "train", "synth", "data"}
    if extra:
        raise UsageError(f"{path}: unknown section(s) {', '.join(sorted(extra))}")
    return cfg


def build_configs(raw: dict, args) -> tuple[ModelConfig, TrainConfig, SynthConfig, dict]:
    model_d = dict(_pick(ModelConfig, raw.get("model", {}), "model"))
    train_d = dict(_pick(TrainConfig, raw.get("train", {}), "train"))
    synth_d = dict(_pick(SynthConfig, raw.get("synth", {}), "synth"))
    data = dict(DATA_DEFAULTS)
    unknown = set(raw.get("data", {})) - set(DATA_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown data field(s): {', '.join(sorted(unknown))}")
    data.update(raw.get("data", {}))
    loss_d = dict(train_d.pop("loss", {}))
    _pick(LossSchedule, loss_d, "loss")
    if getattr(args, "seed", None) is not None:
        for d in (model_d, train_d, synth_d):
            d["seed"] = args.seed
    if getattr(args, "loss", None):
        loss_d["kind"] = args.loss
    if getattr(args, "connection", None):
        model_d["connection_mode"] = args.connection
    model_cfg = ModelConfig(**model_d)
    synth_d.setdefault("size", model_cfg.input_size)
    train_cfg = TrainConfig(loss=LossSchedule(**loss_d), **train_d)
    return model_cfg, train_cfg, SynthConfig(**synth_d), data


def resolve_threads(args) -> int:
    env = os.environ.get("TAFM_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"TAFM_THREADS must be an integer, got {env!r}") from None
    else:
        n = getattr(args, "threads", None) or 1
    if n < 1:
        raise UsageError("thread count must be at least 1")
    return n


def _precision(data: dict):
    prec = data.get("precision", "float64")
    if prec not in ("float64", "float32"):
        raise UsageError("data.precision must be 'float64' or 'float32'")
    return np.float64 if prec == "float64" else np.float32


def synthesize(cfg: SynthConfig, n: int, threads: int = 1):
    # each sample has its own seeded streams, so threads cannot change the output
    if threads <= 1:
        return [render_sample(cfg, i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda i: render_sample(cfg, i), range(n)))


def _splits(data: dict, synth_cfg: SynthConfig, model_cfg: ModelConfig, threads: int):
    if data["manifest"]:
        samples = [resize_to_input(s, model_cfg.input_size) for s in read_manifest(data["manifest"])]
        return split(samples, data["fractions"], synth_cfg.seed)
    n_tr, n_va, n_te = data["n_train"], data["n_val"], data["n_test"]
    samples = synthesize(synth_cfg, n_tr + n_va + n_te, threads)
    return samples[:n_tr], samples[n_tr:n_tr + n_va], samples[n_tr + n_va:]


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    raw = load_config(args.config)
    _, _, synth_cfg, _ = build_configs(raw, args)
    threads = resolve_threads(args)
    samples = synthesize(synth_cfg, args.count, threads)
    out = Path(args.out)
    manifest = write_dataset(samples, out)
    (out / "synth_config.json").write_text(json.dumps(synth_cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(samples)} samples to {manifest}")
    return 0


def cmd_train(args) -> int:
    if args.config is None:
        raise UsageError("train needs --config PATH")
    raw = load_config(args.config)
    model_cfg, train_cfg, synth_cfg, data = build_configs(raw, args)
    threads = resolve_threads(args)
    out = Path(args.out)
    with tc.use_dtype(_precision(data)):
        train_set, val_set, test_set = _splits(data, synth_cfg, model_cfg, threads)
        model = TAFMNet(model_cfg)
        try:
            report = train(model, train_set, val_set, train_cfg, out_dir=out)
        except DivergedLoss as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            return 1
        result = evaluate(model, test_set or val_set, data["threshold_policy"],
                          batch_size=train_cfg.eval_batch_size, threads=threads)
    report.final_metrics = result.to_dict()["metrics"]
    write_run_outputs(report, out, result)
    resolved = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                "synth": synth_cfg.to_dict(), "data": data}
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    print(f"best epoch {report.best_epoch} val J {report.best_val_J:.4f}; "
          f"test J {result.pooled['J']:.4f} at threshold {result.threshold}")
    return 0


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    if not Path(args.manifest).is_file():
        raise UsageError(f"manifest not found: {args.manifest}")
    threads = resolve_threads(args)
    model = load_checkpoint(args.checkpoint)
    samples = [resize_to_input(s, model.cfg.input_size) for s in read_manifest(args.manifest)]
    result = evaluate(model, samples, args.threshold_policy, args.threshold, threads=threads)
    write_eval_outputs(result, args.out)
    print(", ".join(f"{k}={result.pooled[k]:.4f}" for k in ("A", "Sn", "Sp", "J", "D")))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run_suite
    results = run_suite(seed=args.seed or 0, include_model=not args.skip_model)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.name} max_rel_error={r.max_rel_error:.3e} ({r.seconds:.2f}s)")
    total = sum(r.seconds for r in results)
    print(f"{len(results) - failed}/{len(results)} cases below {TOLERANCE:g} in {total:.1f}s")
    return 1 if failed else 0


def cmd_edt(args) -> int:
    path = Path(args.mask)
    if not path.is_file():
        raise UsageError(f"mask not found: {args.mask}")
    raw = read_raster(path)
    if raw.ndim == 3:
        raw = raw[..., 0]
    dist = edt(raw >= 128)
    lines = [",".join("inf" if np.isinf(v) else repr(float(v)) for v in row) for row in dist]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tafmnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--out", metavar="DIR", required=out_required)
        p.add_argument("--threads", type=int, metavar="N")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p)
    p.add_argument("--count", type=int, default=300)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a JSON config")
    common(p)
    p.add_argument("--loss", type=str.upper, choices=LOSS_KINDS, metavar="{bce,dsc,jsc,ft,b,l1..l6}")
    p.add_argument("--connection", choices=("residual", "dense"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold-policy", choices=("fixed", "max_f1"), default="fixed")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--skip-model", action="store_true", help="ops and losses only")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("edt", help="distance transform of a mask image, as CSV")
    p.add_argument("mask")
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_edt)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        # one BLAS thread keeps reductions in a fixed order
        with threadpool_limits(limits=1):
            return args.func(args)
    except (UsageError, InvalidConfig) as exc:
        print(f"tafmnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TAFMError as exc:
        print(f"tafmnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
