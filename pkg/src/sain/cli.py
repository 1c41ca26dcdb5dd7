"""Command-line entry point. Every command is driven by a JSON run config
(paths resolved relative to the config file) with optional flag overrides;
flags win over file values. Outputs are deterministic functions of (config,
input files, seed); wall-clock timings go to a separate sidecar file so the
primary outputs stay byte-reproducible.

Exit codes: 0 success; 3 io; 4 parse; 5 shape; 6 divergence; 7 manifest-drift;
1 anything else. Errors print one machine-parsable line to stderr:
`error category=<cat>: <message>`.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from .data import DatasetManifest, PreparedData, build_dataset
from .errors import IoError, ManifestDriftError, ParseError, SainError, ShapeError
from .gradcheck import TOLERANCE, run_suite
from .model import ModelConfig
from .training import (TrainConfig, attention_matrices, evaluate_mf, evaluate_sain,
                       fmt, load_model, predict_mf, predict_sain, save_model,
                       sweep_top_k, train_biasedmf, train_sain,
                       write_attention_csv, write_sweep_csv, write_training_log)

MODEL_KINDS = ("sain", "biasedmf")
CHECKPOINT_NAME = "model.ckpt"


@dataclass
class RunManifest:
    """Materialized run configuration: dataset manifest path, model kind,
    output directory, and the full model/train configs with defaults filled."""

    dataset: str
    model: str
    output_dir: str
    split_by_time: bool
    model_config: ModelConfig
    train_config: TrainConfig

    @classmethod
    def load(cls, path: str, overrides: dict | None = None) -> "RunManifest":
        if not os.path.exists(path):
            raise IoError(f"run config not found: {path}")
        try:
            with open(path, encoding="utf-8") as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"run config {path}: {e}") from e
        if "dataset" not in raw:
            raise ParseError(f"run config {path}: missing key 'dataset'")
        base = os.path.dirname(os.path.abspath(path))
        mc = {**ModelConfig().to_dict(), **raw.get("model_config", {})}
        tc = {**TrainConfig().to_dict(), **raw.get("train_config", {})}
        top = {"model": raw.get("model", "sain"),
               "output_dir": raw.get("output_dir", "run"),
               "split_by_time": bool(raw.get("split_by_time", False))}
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            scope, name = key.split(".", 1)
            {"model_config": mc, "train_config": tc, "top": top}[scope][name] = value
        if top["model"] not in MODEL_KINDS:
            raise ParseError(f"unknown model kind {top['model']!r}; "
                             f"expected one of {MODEL_KINDS}")
        try:
            model_config = ModelConfig.from_dict(mc)
            train_config = TrainConfig.from_dict(tc)
        except TypeError as e:
            raise ParseError(f"run config {path}: {e}") from e
        return cls(dataset=os.path.join(base, raw["dataset"]), model=top["model"],
                   output_dir=os.path.join(base, top["output_dir"]),
                   split_by_time=top["split_by_time"],
                   model_config=model_config, train_config=train_config)

    def resolved(self) -> dict:
        return {"dataset": self.dataset, "model": self.model,
                "output_dir": self.output_dir, "split_by_time": self.split_by_time,
                "model_config": self.model_config.to_dict(),
                "train_config": self.train_config.to_dict()}


def _overrides(args: argparse.Namespace) -> dict:
    pairs = {
        "train_config.seed": args.seed,
        "train_config.learning_rate": args.learning_rate,
        "train_config.weight_decay": args.weight_decay,
        "train_config.batch_size": args.batch_size,
        "train_config.max_epochs": args.max_epochs,
        "train_config.patience": args.patience,
        "model_config.embed_dim": args.embed_dim,
        "model_config.num_heads": args.num_heads,
        "model_config.top_k": args.top_k,
        "model_config.dropout_rate": args.dropout_rate,
        "model_config.l2_scope": args.l2_scope,
        "model_config.renormalize_topk": args.renormalize_topk,
        "model_config.gate_shared": args.gate_shared,
        "top.model": args.model,
        "top.output_dir": args.output_dir,
        "top.split_by_time": args.split_by_time,
    }
    return pairs


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--num-heads", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--dropout-rate", type=float)
    p.add_argument("--l2-scope", choices=("all", "embeddings", "projections"))
    p.add_argument("--renormalize-topk", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--gate-shared", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--output-dir")
    p.add_argument("--split-by-time", action=argparse.BooleanOptionalAction,
                   default=None)


def _write_timing(out_dir: str, command: str, seconds: float) -> None:
    with open(os.path.join(out_dir, f"{command}.timing.json"), "w") as f:
        json.dump({"command": command, "wall_seconds": seconds}, f, sort_keys=True)
        f.write("\n")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def _prepare(rm: RunManifest, seed: int) -> PreparedData:
    manifest = DatasetManifest.from_file(rm.dataset)
    return build_dataset(manifest, seed, by_time=rm.split_by_time)


def _load_checkpoint_for(rm: RunManifest, args) -> tuple:
    path = args.checkpoint or os.path.join(rm.output_dir, CHECKPOINT_NAME)
    return load_model(path)


def _check_drift(data: PreparedData, meta: dict) -> None:
    stored = meta.get("dataset_digest")
    if stored is not None and stored != data.digest():
        raise ManifestDriftError(
            "dataset content or split differs from the one this checkpoint "
            "was trained on")


def cmd_train(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    rm = RunManifest.load(args.config, _overrides(args))
    data = _prepare(rm, rm.train_config.seed)
    if rm.model == "sain":
        result = train_sain(data, rm.model_config, rm.train_config)
    else:
        result = train_biasedmf(data, rm.model_config.embed_dim, rm.train_config,
                                l2_scope=rm.model_config.l2_scope)
    os.makedirs(rm.output_dir, exist_ok=True)
    meta = {"kind": rm.model, "seed": rm.train_config.seed,
            "dataset_digest": data.digest(), "best_epoch": result.best_epoch,
            "best_val_rmse": result.best_val_rmse,
            "epochs_run": len(result.history),
            "stopped_early": result.stopped_early,
            "split_by_time": rm.split_by_time}
    ckpt_path = os.path.join(rm.output_dir, CHECKPOINT_NAME)
    save_model(ckpt_path, rm.model, result.params, result.adam, meta)
    write_training_log(os.path.join(rm.output_dir, "training_log.csv"),
                       result.history)
    _write_json(os.path.join(rm.output_dir, "resolved.json"), rm.resolved())
    _write_timing(rm.output_dir, "train", time.perf_counter() - started)
    print(f"model={rm.model} epochs={len(result.history)} "
          f"best_epoch={result.best_epoch} "
          f"val_rmse={fmt(result.best_val_rmse)} checkpoint={ckpt_path}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    rm = RunManifest.load(args.config, _overrides(args))
    kind, params, _, meta = _load_checkpoint_for(rm, args)
    data = _prepare(rm, int(meta["seed"]))
    _check_drift(data, meta)
    report = (evaluate_sain(params, data, args.split) if kind == "sain"
              else evaluate_mf(params, data, args.split))
    os.makedirs(rm.output_dir, exist_ok=True)
    payload = {"split": args.split, "rmse": report.rmse, "mae": report.mae,
               "n": report.count,
               "detail": {k: list(v) for k, v in report.detail.items()}}
    _write_json(os.path.join(rm.output_dir, f"eval_{args.split}.json"), payload)
    _write_timing(rm.output_dir, "evaluate", time.perf_counter() - started)
    print(f"RMSE={fmt(report.rmse)} MAE={fmt(report.mae)} N={report.count}")
    return 0


def _dense_ids(data: PreparedData, user: str, item: str) -> tuple[int, int]:
    if user not in data.user_ids:
        raise ShapeError(f"unknown user id {user!r}")
    if item not in data.item_ids:
        raise ShapeError(f"unknown item id {item!r}")
    return data.user_ids[user], data.item_ids[item]


def cmd_predict(args: argparse.Namespace) -> int:
    rm = RunManifest.load(args.config, _overrides(args))
    kind, params, _, meta = _load_checkpoint_for(rm, args)
    data = _prepare(rm, int(meta["seed"]))
    _check_drift(data, meta)
    uid, iid = _dense_ids(data, args.user, args.item)
    if kind == "sain":
        row = predict_sain(params, data, np.asarray([uid]), np.asarray([iid]))[0]
        print(f"score={fmt(row['score'])} "
              f"score_content={fmt(row['score_content'])} "
              f"score_preference={fmt(row['score_preference'])} "
              f"gate_user={fmt(row['gate_user'])} gate_item={fmt(row['gate_item'])}")
    else:
        row = predict_mf(params, np.asarray([uid]), np.asarray([iid]))[0]
        print(f"score={fmt(row['score'])}")
    return 0


def cmd_attention(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    rm = RunManifest.load(args.config, _overrides(args))
    kind, params, _, meta = _load_checkpoint_for(rm, args)
    if kind != "sain":
        raise ShapeError("attention export requires an attention-model checkpoint")
    data = _prepare(rm, int(meta["seed"]))
    _check_drift(data, meta)
    uid, iid = _dense_ids(data, args.user, args.item)
    matrices = attention_matrices(params, data.user_features[uid],
                                  data.item_features[iid])
    os.makedirs(rm.output_dir, exist_ok=True)
    labels = params.layout.fields
    for h, matrix in enumerate(matrices):
        write_attention_csv(os.path.join(rm.output_dir, f"attention_head{h}.csv"),
                            matrix, labels)
    _write_timing(rm.output_dir, "attention", time.perf_counter() - started)
    print(f"heads={len(matrices)} output_dir={rm.output_dir}")
    return 0


def cmd_sweep_k(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    rm = RunManifest.load(args.config, _overrides(args))
    if rm.model != "sain":
        raise ShapeError("sweep-k requires the attention model")
    try:
        k_values = [int(k) for k in args.k_values.split(",") if k.strip() != ""]
    except ValueError:
        raise ParseError(f"bad --k-values {args.k_values!r}; expected "
                         "comma-separated integers") from None
    if not k_values:
        raise ParseError("--k-values is empty")
    data = _prepare(rm, rm.train_config.seed)
    rows = sweep_top_k(data, rm.model_config, rm.train_config, k_values,
                       repeats=args.repeats)
    os.makedirs(rm.output_dir, exist_ok=True)
    write_sweep_csv(os.path.join(rm.output_dir, "sweep_k.csv"), rows)
    _write_timing(rm.output_dir, "sweep-k", time.perf_counter() - started)
    for r in rows:
        print(f"k={r['k']} repeat={r['repeat']} test_rmse={fmt(r['test_rmse'])} "
              f"test_mae={fmt(r['test_mae'])}")
    if args.repeats > 1:
        for k in k_values:
            vals = np.asarray([r["test_rmse"] for r in rows if r["k"] == k])
            print(f"k={k} mean_rmse={fmt(vals.mean())} std_rmse={fmt(vals.std())}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = run_suite(num_seeds=args.seeds)
    for c in report.cases:
        k = "-" if c.top_k is None else c.top_k
        print(f"model={c.model} seed={c.seed} k={k} "
              f"max_rel_err={fmt(c.max_rel_err)} worst={c.worst_tensor}")
    status = "pass" if report.passed else "fail"
    print(f"max_rel_err={fmt(report.max_rel_err)} tolerance={fmt(TOLERANCE)} "
          f"status={status}")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sain",
        description="Hybrid attention recommender: train, evaluate, and inspect.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a run config")
    _add_override_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    _add_override_flags(p_eval)
    p_eval.add_argument("--checkpoint", help="checkpoint path "
                        "(default: <output_dir>/model.ckpt)")
    p_eval.add_argument("--split", default="test",
                        choices=("train", "validation", "test"))
    p_eval.set_defaults(func=cmd_evaluate)

    p_pred = sub.add_parser("predict", help="score one user-item pair")
    _add_override_flags(p_pred)
    p_pred.add_argument("--checkpoint")
    p_pred.add_argument("--user", required=True, help="raw user id")
    p_pred.add_argument("--item", required=True, help="raw item id")
    p_pred.set_defaults(func=cmd_predict)

    p_attn = sub.add_parser("attention",
                            help="export per-head attention matrices for a pair")
    _add_override_flags(p_attn)
    p_attn.add_argument("--checkpoint")
    p_attn.add_argument("--user", required=True)
    p_attn.add_argument("--item", required=True)
    p_attn.set_defaults(func=cmd_attention)

    p_sweep = sub.add_parser("sweep-k", help="retrain across top-K values")
    _add_override_flags(p_sweep)
    p_sweep.add_argument("--k-values", required=True,
                         help="comma-separated K values, e.g. 2,4,8")
    p_sweep.add_argument("--repeats", type=int, default=1)
    p_sweep.set_defaults(func=cmd_sweep_k)

    p_grad = sub.add_parser("gradcheck",
                            help="finite-difference gradient certification")
    p_grad.add_argument("--seeds", type=int, default=20)
    p_grad.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SainError as e:
        print(f"error category={e.category}: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"error category=error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
