"""Command-line interface.

Subcommands: synth, train, eval, gradcheck, export-attention, params.
Exit codes: 0 success, 1 user error (bad flags, paths, configs), 2 internal
invariant violation (failed gradient check, non-finite loss, corrupted
state).  The PROXYATTN_SEED environment variable overrides any seed from
flags or config files.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import DatasetManifest, default_h36m17_skeleton, load_sequence, synth_generate
from .gradcheck import finite_diff_report
from .metrics import LossWeights, total_loss
from .model import ModelConfig, ProxyLifter
from .rng import Rng
from .tensor import InvariantError, Tensor
from .tensor_io import DtypeMismatchError, ShapeMismatchError
from .trainer import (AdamW, TrainConfig, TrainingDiverged, checkpoint_load,
                      checkpoint_save, evaluate, train)

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_MAX_PARAMS = 100_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        raise UsageError(message)


def _seed_override(seed: int) -> int:
    env = os.environ.get("PROXYATTN_SEED")
    return int(env) if env else seed


def load_run_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Parse a flat JSON run config into model and train configs."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing config file {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    model_keys = set(ModelConfig.__dataclass_fields__)
    train_keys = set(TrainConfig.__dataclass_fields__)
    unknown = set(doc) - model_keys - train_keys
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    model_cfg = ModelConfig.from_dict({k: v for k, v in doc.items() if k in model_keys})
    train_cfg = TrainConfig.from_dict({k: v for k, v in doc.items() if k in train_keys})
    return model_cfg, train_cfg


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = _seed_override(args.seed)
    if args.frames < 2:
        raise UsageError(f"--frames must be >= 2, got {args.frames}")
    if args.sequences < 1:
        raise UsageError(f"--sequences must be >= 1, got {args.sequences}")
    skeleton = default_h36m17_skeleton()
    manifest = synth_generate(Rng(seed), args.sequences, args.frames, skeleton, args.out)
    print(json.dumps({"out": str(args.out), "sequences": len(manifest.sequences),
                      "frames": args.frames, "joints": skeleton.joints, "seed": seed}))
    return 0


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    if not data_dir.exists():
        raise FileNotFoundError(f"missing data directory {data_dir}")
    manifest = DatasetManifest.load(data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.resume:
        model, optimizer, state = checkpoint_load(args.resume)
        train_cfg = state.train_cfg
        start_epoch, step = state.epoch, state.step
    else:
        if not args.config:
            raise UsageError("--config is required unless --resume is given")
        model_cfg, train_cfg = load_run_config(args.config)
        if model_cfg.joints != manifest.skeleton.joints:
            raise ShapeMismatchError(
                f"config joints {model_cfg.joints} vs dataset joints {manifest.skeleton.joints}")
        train_cfg.seed = _seed_override(train_cfg.seed)
        model = ProxyLifter(model_cfg, Rng(train_cfg.seed))
        optimizer = AdamW.from_train_config(model.parameters(), train_cfg)
        start_epoch, step = 0, 0

    records = train(model, manifest, train_cfg,
                    log_path=out / "log.jsonl",
                    checkpoint_dir=out,
                    optimizer=optimizer,
                    start_epoch=start_epoch,
                    global_step=step)
    losses = [r["loss"] for r in records if "loss" in r]
    print(json.dumps({"steps": len(losses),
                      "final_loss": losses[-1] if losses else None,
                      "checkpoint": str(out / "latest"),
                      "log": str(out / "log.jsonl")}))
    return 0


def cmd_eval(args) -> int:
    manifest = DatasetManifest.load(args.data)
    model, _, state = checkpoint_load(args.ckpt)
    report = evaluate(model, manifest, flip_tta=args.flip_tta,
                      target_scale=state.train_cfg.target_scale)
    print(json.dumps(report))
    return 0


def cmd_gradcheck(args) -> int:
    seed = _seed_override(args.seed)
    model_cfg, train_cfg = load_run_config(args.config)
    rng = Rng(seed)
    model = ProxyLifter(model_cfg, rng)
    n = model.param_count()
    if n > GRADCHECK_MAX_PARAMS:
        raise UsageError(
            f"config has {n} parameters; finite differences need 2 forward passes per "
            f"coordinate, so gradcheck refuses configs above {GRADCHECK_MAX_PARAMS}")

    x = Tensor(rng.normal((model_cfg.frames, model_cfg.joints, model_cfg.in_channels), 1.0))
    y = Tensor(rng.normal((model_cfg.frames, model_cfg.joints, model_cfg.out_channels), 0.5))
    weights = LossWeights(train_cfg.lambda_t)

    def objective():
        return total_loss(model.forward(x).y_hat, y, weights)

    report = finite_diff_report(objective, model.parameters())
    failures = 0
    for name in sorted(report):
        err = report[name]
        ok = err < GRADCHECK_TOLERANCE
        failures += 0 if ok else 1
        print(f"{name}  {err:.3e}  {'PASS' if ok else 'FAIL'}")
    worst = max(report, key=report.get)
    print(f"worst {worst}  {report[worst]:.3e}  tolerance {GRADCHECK_TOLERANCE:.0e}")
    if failures:
        print(f"gradcheck FAILED for {failures} parameter group(s)", file=sys.stderr)
        return 2
    return 0


def cmd_export_attention(args) -> int:
    model, _, _ = checkpoint_load(args.ckpt)
    cfg = model.config
    seq = load_sequence(args.input, default_h36m17_skeleton())
    x = seq.data
    if x.shape[0] < cfg.frames:
        raise UsageError(f"input has {x.shape[0]} frames; model needs {cfg.frames}")
    if x.shape[1] != cfg.joints or x.shape[2] != cfg.in_channels:
        raise ShapeMismatchError(
            f"input shape {x.shape} does not match model ({cfg.joints} joints, "
            f"{cfg.in_channels} channels)")
    x = x[: cfg.frames]

    if not 0 <= args.layer < cfg.layers:
        raise UsageError(f"--layer {args.layer} out of range [0, {cfg.layers})")
    if not 0 <= args.joint < cfg.joints:
        raise UsageError(f"--joint {args.joint} out of range [0, {cfg.joints})")
    head = args.head
    if head != "mean":
        head = int(head)
        if not 0 <= head < cfg.heads:
            raise UsageError(f"--head {head} out of range [0, {cfg.heads}) (or 'mean')")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace = model.forward(Tensor(x), trace=True).traces[args.layer]

    def select(mat):
        sl = mat[args.joint]  # (H, rows, cols)
        return sl.mean(axis=0) if head == "mean" else sl[head]

    exports = {
        "self": select(_softmax(trace.m_self_logits / np.sqrt(cfg.hidden))),
        "fused": select(_softmax(trace.m_fused_logits / np.sqrt(cfg.hidden))),
    }
    if trace.m_agg is not None:
        exports["agg"] = select(trace.m_agg)
        exports["p2f"] = select(trace.m_p_to_f)
        exports["f2p"] = select(trace.m_f_to_p)

    tag = f"L{args.layer}_j{args.joint}_h{head}"
    written = []
    for family, mat in exports.items():
        r, c = mat.shape
        path = out_dir / f"{family}_{tag}_{r}x{c}.csv"
        _write_csv(path, _minmax(mat))
        written.append(str(path))
    print(json.dumps({"written": written, "sigmoid_mu": trace.sigmoid_mu}))
    return 0


def cmd_params(args) -> int:
    model_cfg, _ = load_run_config(args.config)
    model = ProxyLifter(model_cfg, Rng(0))
    breakdown = model.param_breakdown()
    print(json.dumps({"breakdown": breakdown, "total": model.param_count()}))
    return 0


# ---------------------------------------------------------------------------
# Helpers and wiring
# ---------------------------------------------------------------------------


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _minmax(mat: np.ndarray) -> np.ndarray:
    lo, hi = float(mat.min()), float(mat.max())
    if hi == lo:
        return np.zeros_like(mat)
    return (mat - lo) / (hi - lo)


def _write_csv(path, mat: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in mat:
            writer.writerow([repr(float(v)) for v in row])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="proxyattn", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic motion dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=8)
    p.add_argument("--frames", type=int, default=27)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; prints a JSON metric report")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--flip-tta", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-attention", help="export attention matrices as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--joint", type=int, required=True)
    p.add_argument("--head", default="mean", help="head index or 'mean'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("params", help="parameter count and per-module breakdown")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_params)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ShapeMismatchError, DtypeMismatchError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (InvariantError, TrainingDiverged, AssertionError) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
