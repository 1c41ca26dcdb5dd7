"""Mini-batch training with Adam, seeded shuffles, validation-driven early
stopping, divergence detection, and deterministic reporting. One generic loop
drives both model kinds through a small engine interface; evaluation clips
predictions to the rating range; every emitted number is formatted with repr()
so logs are byte-stable across runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .baseline import MfParams, mf_backward, mf_loss, mf_scores
from .checkpoint import (Checkpoint, adam_states_from_header,
                         adam_states_to_header, load_checkpoint, save_checkpoint)
from .data import EntityFeatures, PreparedData, interactions_to_arrays
from .errors import DivergenceError, ParseError, ShapeError
from .model import (FieldLayout, ModelConfig, SainParams, backward,
                    decayed_names, forward, forward_batch, joint_loss)
from .seeding import derive_seed, stream_rng
from .tensor import AdamState, adam_step

RATING_MIN, RATING_MAX = 1.0, 5.0
EVAL_BATCH = 4096
DIVERGENCE_LIMIT = 1e8


def fmt(x) -> str:
    """Canonical float text: repr of the Python float, shortest round-trip."""
    return repr(float(x))


def clip_ratings(scores: np.ndarray) -> np.ndarray:
    return np.clip(scores, RATING_MIN, RATING_MAX)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, and patience must be >= 1")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "weight_decay": self.weight_decay,
                "batch_size": self.batch_size, "max_epochs": self.max_epochs,
                "patience": self.patience, "min_delta": self.min_delta,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EvalReport:
    """Headline numbers are for the served prediction (the combined score);
    detail carries (rmse, mae) per scoring head."""

    rmse: float
    mae: float
    count: int
    detail: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass
class EpochLog:
    epoch: int
    loss_content: float | None
    loss_preference: float | None
    loss_combined: float
    val_rmse: float
    val_mae: float


@dataclass
class TrainResult:
    """params/adam are the best-validation-epoch snapshot (what gets served
    and checkpointed); final_params is the state after the last epoch run."""

    params: object
    adam: dict[str, AdamState]
    history: list[EpochLog]
    best_epoch: int
    best_val_rmse: float
    stopped_early: bool
    seed: int
    final_params: object


def _clone_adam(states: dict[str, AdamState]) -> dict[str, AdamState]:
    return {k: AdamState(m=s.m.copy(), v=s.v.copy(), t=s.t, beta1=s.beta1,
                         beta2=s.beta2, eps=s.eps) for k, s in states.items()}


class SainEngine:
    """Attention-model steps: joint three-score loss, full backward, per-tensor
    Adam with scoped decoupled decay, and batch-norm running-stat commits."""

    kind = "sain"

    def __init__(self, data: PreparedData, params: SainParams, tcfg: TrainConfig):
        self.data = data
        self.params = params
        self.mcfg = params.config
        self.tcfg = tcfg
        self.users, self.items, self.ratings = interactions_to_arrays(data.split.train)
        self.adam = {k: AdamState.for_param(v) for k, v in params.tensors.items()}
        self.dropout_rng = stream_rng(tcfg.seed, "dropout")
        self.decay_set = decayed_names(params, self.mcfg.l2_scope)

    @property
    def n_train(self) -> int:
        return self.users.shape[0]

    def step(self, idx: np.ndarray):
        u, i, r = self.users[idx], self.items[idx], self.ratings[idx]
        trace = forward_batch(u, i, self.data.user_packed, self.data.item_packed,
                              self.params, self.mcfg, mode="train",
                              dropout_rng=self.dropout_rng)
        loss, parts = joint_loss(trace, r, self.mcfg.loss_weights)
        grads = backward(trace, r, self.params, self.mcfg)
        for name, tensor in self.params.tensors.items():
            wd = self.tcfg.weight_decay if name in self.decay_set else 0.0
            self.params.tensors[name], self.adam[name] = adam_step(
                tensor, grads[name], self.adam[name], self.tcfg.learning_rate, wd)
        self.params.bn_mean = trace.bn_new_mean
        self.params.bn_var = trace.bn_new_var
        return loss, parts

    def evaluate(self, split: str) -> EvalReport:
        return evaluate_sain(self.params, self.data, split)

    def snapshot(self):
        return self.params.clone(), _clone_adam(self.adam)


class MfEngine:
    """Baseline steps: single MSE loss; the log's content/preference columns
    stay empty because the model has one scoring head."""

    kind = "biasedmf"

    def __init__(self, data: PreparedData, params: MfParams, tcfg: TrainConfig,
                 l2_scope: str = "all"):
        self.data = data
        self.params = params
        self.tcfg = tcfg
        self.users, self.items, self.ratings = interactions_to_arrays(data.split.train)
        self.adam = {k: AdamState.for_param(v) for k, v in params.tensors.items()}
        self.decay_set = decayed_names(params, l2_scope)

    @property
    def n_train(self) -> int:
        return self.users.shape[0]

    def step(self, idx: np.ndarray):
        u, i, r = self.users[idx], self.items[idx], self.ratings[idx]
        scores = mf_scores(u, i, self.params)
        loss = mf_loss(scores, r)
        grads = mf_backward(u, i, scores, r, self.params)
        for name, tensor in self.params.tensors.items():
            wd = self.tcfg.weight_decay if name in self.decay_set else 0.0
            self.params.tensors[name], self.adam[name] = adam_step(
                tensor, grads[name], self.adam[name], self.tcfg.learning_rate, wd)
        return loss, (None, None, loss)

    def evaluate(self, split: str) -> EvalReport:
        return evaluate_mf(self.params, self.data, split)

    def snapshot(self):
        return self.params.clone(), _clone_adam(self.adam)


def run_training(engine, tcfg: TrainConfig) -> TrainResult:
    """Generic epoch loop: seeded shuffle, mini-batch steps, validation after
    every epoch, early stop after `patience` epochs without improvement, abort
    on a non-finite or runaway loss. The returned params/optimizer state are the
    snapshot from the best validation epoch."""
    shuffle_rng = stream_rng(tcfg.seed, "shuffle")
    n = engine.n_train
    history: list[EpochLog] = []
    best_rmse = float("inf")
    best_epoch = 0
    best_params, best_adam = engine.snapshot()
    bad = 0
    stopped_early = False
    for epoch in range(1, tcfg.max_epochs + 1):
        perm = shuffle_rng.permutation(n)
        sse = [0.0, 0.0, 0.0]
        seen = [False, False, False]
        for start in range(0, n, tcfg.batch_size):
            idx = perm[start:start + tcfg.batch_size]
            loss, parts = engine.step(idx)
            if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"training diverged at epoch {epoch}: loss={loss!r}")
            for j, p in enumerate(parts):
                if p is not None:
                    sse[j] += p * idx.shape[0]
                    seen[j] = True
        val = engine.evaluate("validation")
        history.append(EpochLog(
            epoch=epoch,
            loss_content=sse[0] / n if seen[0] else None,
            loss_preference=sse[1] / n if seen[1] else None,
            loss_combined=sse[2] / n,
            val_rmse=val.rmse, val_mae=val.mae))
        if val.rmse < best_rmse - tcfg.min_delta:
            best_rmse = val.rmse
            best_epoch = epoch
            best_params, best_adam = engine.snapshot()
            bad = 0
        else:
            bad += 1
            if bad >= tcfg.patience:
                stopped_early = True
                break
    return TrainResult(params=best_params, adam=best_adam, history=history,
                       best_epoch=best_epoch, best_val_rmse=best_rmse,
                       stopped_early=stopped_early, seed=tcfg.seed,
                       final_params=engine.params.clone())


def train_sain(data: PreparedData, mcfg: ModelConfig, tcfg: TrainConfig) -> TrainResult:
    layout = FieldLayout.from_vocab(data.vocab, data.num_users, data.num_items)
    params = SainParams.init(layout, mcfg, stream_rng(tcfg.seed, "init"))
    return run_training(SainEngine(data, params, tcfg), tcfg)


def train_biasedmf(data: PreparedData, dim: int, tcfg: TrainConfig,
                   l2_scope: str = "all") -> TrainResult:
    _, _, train_r = interactions_to_arrays(data.split.train)
    mu = float(train_r.mean())
    params = MfParams.init(data.num_users, data.num_items, dim, mu,
                           stream_rng(tcfg.seed, "init"))
    return run_training(MfEngine(data, params, tcfg, l2_scope), tcfg)


def rmse_mae(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Root-mean-squared and mean-absolute error of a prediction set."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError("prediction and truth lengths differ")
    if pred.size == 0:
        raise ValueError("empty prediction set")
    err = pred - truth
    return float(np.sqrt(np.mean(err * err))), float(np.mean(np.abs(err)))


def evaluate_sain(params: SainParams, data: PreparedData,
                  split: str = "test") -> EvalReport:
    """Deterministic eval-mode metrics. The served combined score is clipped to
    the rating range; the content/preference breakdown stays unclipped as a
    diagnostic."""
    users, items, ratings = interactions_to_arrays(data.split.select(split))
    cols = {"content": [], "preference": [], "combined": []}
    for start in range(0, users.shape[0], EVAL_BATCH):
        sl = slice(start, start + EVAL_BATCH)
        trace = forward_batch(users[sl], items[sl], data.user_packed,
                              data.item_packed, params, params.config, mode="eval")
        cols["content"].append(trace.score_content)
        cols["preference"].append(trace.score_preference)
        cols["combined"].append(trace.score_combined)
    detail = {"content": rmse_mae(np.concatenate(cols["content"]), ratings),
              "preference": rmse_mae(np.concatenate(cols["preference"]), ratings),
              "combined": rmse_mae(clip_ratings(np.concatenate(cols["combined"])),
                                    ratings)}
    rmse, mae = detail["combined"]
    return EvalReport(rmse=rmse, mae=mae, count=int(users.shape[0]), detail=detail)


def evaluate_mf(params: MfParams, data: PreparedData,
                split: str = "test") -> EvalReport:
    users, items, ratings = interactions_to_arrays(data.split.select(split))
    pred = clip_ratings(mf_scores(users, items, params))
    rmse, mae = rmse_mae(pred, ratings)
    return EvalReport(rmse=rmse, mae=mae, count=int(users.shape[0]),
                      detail={"combined": (rmse, mae)})


def predict_sain(params: SainParams, data: PreparedData, uids: np.ndarray,
                 iids: np.ndarray) -> list[dict]:
    """Per-pair served prediction plus the blend diagnostics."""
    uids = np.asarray(uids, dtype=np.int64)
    iids = np.asarray(iids, dtype=np.int64)
    rows = []
    for start in range(0, uids.shape[0], EVAL_BATCH):
        sl = slice(start, start + EVAL_BATCH)
        trace = forward_batch(uids[sl], iids[sl], data.user_packed,
                              data.item_packed, params, params.config, mode="eval")
        comb = clip_ratings(trace.score_combined)
        cont = clip_ratings(trace.score_content)
        pref = clip_ratings(trace.score_preference)
        for j in range(comb.shape[0]):
            rows.append({"score": float(comb[j]),
                         "score_content": float(cont[j]),
                         "score_preference": float(pref[j]),
                         "gate_user": float(trace.gate_alpha["user"][j]),
                         "gate_item": float(trace.gate_alpha["item"][j])})
    return rows


def predict_mf(params: MfParams, uids: np.ndarray, iids: np.ndarray) -> list[dict]:
    pred = clip_ratings(mf_scores(uids, iids, params))
    return [{"score": float(s)} for s in pred]


def sweep_top_k(data: PreparedData, mcfg: ModelConfig, tcfg: TrainConfig,
                k_values: list[int], repeats: int = 1) -> list[dict]:
    """Retrain per K on the fixed split. Every K shares the same seed so rows
    are comparable; extra repeats rerun the whole sweep under derived seeds.
    Repeat 0 uses the base seed itself."""
    if any(int(k) < 1 for k in k_values):
        raise ValueError("k values must be >= 1")
    rows = []
    for rep in range(repeats):
        run_seed = tcfg.seed if rep == 0 else derive_seed(tcfg.seed, "sweep", rep)
        run_tcfg = TrainConfig.from_dict({**tcfg.to_dict(), "seed": run_seed})
        for k in k_values:
            cfg_k = ModelConfig.from_dict({**mcfg.to_dict(), "top_k": int(k)})
            result = train_sain(data, cfg_k, run_tcfg)
            test = evaluate_sain(result.params, data, "test")
            rows.append({"k": int(k), "repeat": rep, "seed": run_seed,
                         "best_epoch": result.best_epoch,
                         "val_rmse": result.best_val_rmse,
                         "test_rmse": test.rmse, "test_mae": test.mae})
    return rows


def attention_matrices(params: SainParams, user: EntityFeatures,
                       item: EntityFeatures) -> list[np.ndarray]:
    """Eval-mode pre-top-K attention, one (m+n, m+n) matrix per head, rows =
    query positions in field order (user fields then item fields)."""
    trace = forward(user, item, params, params.config, mode="eval")
    return [trace.alpha_full[h][0] for h in range(params.config.num_heads)]


def write_training_log(path: str, history: list[EpochLog]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss_content", "loss_preference", "loss_combined",
                    "val_rmse", "val_mae"])
        for e in history:
            w.writerow([e.epoch,
                        "" if e.loss_content is None else fmt(e.loss_content),
                        "" if e.loss_preference is None else fmt(e.loss_preference),
                        fmt(e.loss_combined), fmt(e.val_rmse), fmt(e.val_mae)])


def write_sweep_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k", "test_rmse", "test_mae"])
        for r in rows:
            w.writerow([r["k"], fmt(r["test_rmse"]), fmt(r["test_mae"])])


def write_attention_csv(path: str, matrix: np.ndarray, labels: list[str]) -> None:
    """Square labeled matrix: header row of field names, each data row led by
    its query field name."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["field"] + list(labels))
        for qname, row in zip(labels, matrix):
            w.writerow([qname] + [fmt(v) for v in row])


def save_model(path: str, kind: str, params, adam: dict[str, AdamState] | None = None,
               meta: dict | None = None) -> None:
    """Serialize either model kind (plus optional optimizer state) into the
    binary checkpoint container."""
    if kind == "sain":
        ckpt = Checkpoint(kind=kind, config=params.config.to_dict(),
                          layout=params.layout.to_dict(), tensors=params.tensors,
                          stats={"bn_mean": params.bn_mean, "bn_var": params.bn_var},
                          adam=adam_states_to_header(adam) if adam else None,
                          meta=meta or {})
    elif kind == "biasedmf":
        layout = {"num_users": params.num_users, "num_items": params.num_items,
                  "dim": params.dim, "mu": params.mu}
        ckpt = Checkpoint(kind=kind, config={}, layout=layout,
                          tensors=params.tensors, stats={},
                          adam=adam_states_to_header(adam) if adam else None,
                          meta=meta or {})
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    save_checkpoint(path, ckpt)


def load_model(path: str):
    """Inverse of save_model: (kind, params, adam or None, meta)."""
    ckpt = load_checkpoint(path)
    if ckpt.kind == "sain":
        params = SainParams(FieldLayout.from_dict(ckpt.layout),
                            ModelConfig.from_dict(ckpt.config),
                            dict(ckpt.tensors), ckpt.stats["bn_mean"],
                            ckpt.stats["bn_var"])
    elif ckpt.kind == "biasedmf":
        params = MfParams(dict(ckpt.tensors), mu=float(ckpt.layout["mu"]),
                          num_users=int(ckpt.layout["num_users"]),
                          num_items=int(ckpt.layout["num_items"]),
                          dim=int(ckpt.layout["dim"]))
    else:
        raise ParseError(f"unknown model kind in checkpoint: {ckpt.kind!r}")
    adam = adam_states_from_header(ckpt.adam) if ckpt.adam else None
    return ckpt.kind, params, adam, ckpt.meta
