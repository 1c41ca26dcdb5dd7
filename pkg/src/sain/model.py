"""The hybrid attention recommender: shared feature embeddings, feature-level
multi-head self-attention with top-K filtering, batch-norm/dropout/residual/ReLU
block, per-entity affine aggregation, collaborative-filtering latent vectors, a
learned gate blending both signals per entity, three dot-product scoring heads,
a jointly weighted MSE loss, and exact hand-derived reverse-mode gradients for
every learnable tensor.

Shapes: B batch, S = m + n feature positions (m user fields then n item
fields), d embed dim, H heads, dh = d // H.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import EntityFeatures, FeatureVocab, PackedFeatures
from .errors import ShapeError
from .tensor import softmax_rows, top_k_mask_rows

L2_SCOPES = ("all", "embeddings", "projections")
EMBEDDING_TENSORS = ("embeddings", "cf_user", "cf_item")


@dataclass
class ModelConfig:
    embed_dim: int = 64
    num_heads: int = 2
    top_k: int = 8
    dropout_rate: float = 0.1
    num_attention_layers: int = 1
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    gate_shared: bool = False
    renormalize_topk: bool = True
    l2_scope: str = "all"
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by "
                             f"num_heads {self.num_heads}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0,1)")
        if self.num_attention_layers != 1:
            raise ValueError("num_attention_layers is fixed at 1")
        if len(self.loss_weights) != 3:
            raise ValueError("loss_weights needs exactly three entries")
        if self.l2_scope not in L2_SCOPES:
            raise ValueError(f"l2_scope must be one of {L2_SCOPES}")
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        return {"embed_dim": self.embed_dim, "num_heads": self.num_heads,
                "top_k": self.top_k, "dropout_rate": self.dropout_rate,
                "num_attention_layers": self.num_attention_layers,
                "loss_weights": list(self.loss_weights),
                "gate_shared": self.gate_shared,
                "renormalize_topk": self.renormalize_topk,
                "l2_scope": self.l2_scope, "bn_epsilon": self.bn_epsilon,
                "bn_momentum": self.bn_momentum}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = tuple(d["loss_weights"])
        return cls(**d)


@dataclass
class FieldLayout:
    """Order-sensitive field manifest: user fields then item fields, embedding
    row counts per field, and the entity table sizes."""

    user_fields: list[str]
    item_fields: list[str]
    sizes: dict[str, int]
    num_users: int
    num_items: int

    @classmethod
    def from_vocab(cls, vocab: FeatureVocab, num_users: int, num_items: int) -> "FieldLayout":
        return cls(user_fields=list(vocab.user_fields),
                   item_fields=list(vocab.item_fields),
                   sizes={f: vocab.field_size(f) for f in vocab.fields},
                   num_users=num_users, num_items=num_items)

    @property
    def fields(self) -> list[str]:
        return self.user_fields + self.item_fields

    @property
    def m(self) -> int:
        return len(self.user_fields)

    @property
    def n(self) -> int:
        return len(self.item_fields)

    @property
    def seq_len(self) -> int:
        return self.m + self.n

    def offsets(self) -> dict[str, int]:
        out, acc = {}, 0
        for fname in self.fields:
            out[fname] = acc
            acc += self.sizes[fname]
        return out

    @property
    def total_rows(self) -> int:
        return sum(self.sizes[f] for f in self.fields)

    def to_dict(self) -> dict:
        return {"user_fields": list(self.user_fields),
                "item_fields": list(self.item_fields),
                "sizes": dict(self.sizes),
                "num_users": self.num_users, "num_items": self.num_items}

    @classmethod
    def from_dict(cls, d: dict) -> "FieldLayout":
        return cls(user_fields=list(d["user_fields"]), item_fields=list(d["item_fields"]),
                   sizes=dict(d["sizes"]), num_users=int(d["num_users"]),
                   num_items=int(d["num_items"]))


class SainParams:
    """All learnable tensors plus batch-norm running statistics. Every learnable
    tensor is registered exactly once in `tensors`; the registration order
    drives initialization draws, the optimizer loop, and the flat vector used
    by the finite-difference oracle. Running stats are excluded from gradients."""

    def __init__(self, layout: FieldLayout, config: ModelConfig,
                 tensors: dict[str, np.ndarray], bn_mean: np.ndarray,
                 bn_var: np.ndarray):
        self.layout = layout
        self.config = config
        self.tensors = tensors
        self.bn_mean = bn_mean
        self.bn_var = bn_var

    @classmethod
    def init(cls, layout: FieldLayout, config: ModelConfig,
             rng: np.random.Generator) -> "SainParams":
        if layout.m == 0 or layout.n == 0:
            raise ShapeError("the attention model needs at least one feature "
                             "field on each of the user and item sides")
        d, dh = config.embed_dim, config.head_dim
        scale = 1.0 / math.sqrt(d)

        def uniform(*shape):
            return rng.uniform(-scale, scale, size=shape)

        t: dict[str, np.ndarray] = {}
        t["embeddings"] = uniform(layout.total_rows, d)
        t["cf_user"] = uniform(layout.num_users, d)
        t["cf_item"] = uniform(layout.num_items, d)
        for h in range(config.num_heads):
            t[f"attn{h}_wq"] = uniform(d, dh)
            t[f"attn{h}_wk"] = uniform(d, dh)
            t[f"attn{h}_wv"] = uniform(d, dh)
        t["agg_user_w"] = uniform(layout.m * d, d)
        t["agg_user_b"] = np.zeros(d)
        t["agg_item_w"] = uniform(layout.n * d, d)
        t["agg_item_b"] = np.zeros(d)
        t["bn_gamma"] = np.ones(d)
        t["bn_beta"] = np.zeros(d)
        if config.gate_shared:
            t["gate_w"] = uniform(d)
            t["gate_b"] = np.zeros(1)
        else:
            t["gate_user_w"] = uniform(d)
            t["gate_user_b"] = np.zeros(1)
            t["gate_item_w"] = uniform(d)
            t["gate_item_b"] = np.zeros(1)
        return cls(layout, config, t, bn_mean=np.zeros(d), bn_var=np.ones(d))

    def gate(self, side: str) -> tuple[np.ndarray, np.ndarray, str, str]:
        """Gate weight/bias for one side and their registry names."""
        if self.config.gate_shared:
            return self.tensors["gate_w"], self.tensors["gate_b"], "gate_w", "gate_b"
        return (self.tensors[f"gate_{side}_w"], self.tensors[f"gate_{side}_b"],
                f"gate_{side}_w", f"gate_{side}_b")

    def clone(self) -> "SainParams":
        return SainParams(self.layout, self.config,
                          {k: v.copy() for k, v in self.tensors.items()},
                          self.bn_mean.copy(), self.bn_var.copy())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        if vec.size != sum(v.size for v in self.tensors.values()):
            raise ShapeError("flat vector length does not match parameter count")
        pos = 0
        for k, v in self.tensors.items():
            self.tensors[k] = vec[pos:pos + v.size].reshape(v.shape).copy()
            pos += v.size


def decayed_names(params, scope: str) -> set[str]:
    """Learnable tensor names subject to decoupled weight decay under a scope."""
    names = set(params.tensors)
    if scope == "all":
        return names
    embedding = {n for n in names if n in EMBEDDING_TENSORS or n in ("user_factors",
                 "item_factors", "user_bias", "item_bias")}
    return embedding if scope == "embeddings" else names - embedding


def _stable_sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class ForwardTrace:
    """Everything the backward pass needs, for a batch (B may be 1)."""

    uids: np.ndarray
    iids: np.ndarray
    mode: str
    x: np.ndarray                      # (B,S,d) embedded feature sequence
    embed_cache: list                  # per side: list of (field pos, idx, weights)
    q: list                           # per head (B,S,dh)
    k: list
    v: list
    alpha_full: list                   # per head (B,S,S) pre-top-K softmax
    topk_mask: list                    # per head (B,S,S) bool
    alpha_topk: list                   # per head (B,S,S) post-top-K weights
    sel_sum: list                      # per head (B,S,1) selected-weight row sums
    head_out: list                     # per head (B,S,dh)
    concat: np.ndarray                 # (B,S,d) pre batch norm
    bn_xhat: np.ndarray                # (B,S,d)
    bn_inv_std: np.ndarray             # (d,)
    bn_new_mean: np.ndarray            # (d,) running stats after this pass
    bn_new_var: np.ndarray
    dropout_mask: np.ndarray | None    # (B,S,d) inverted-scale mask, None in eval
    resid: np.ndarray                  # (B,S,d) pre-ReLU residual sum
    xbar: np.ndarray                   # (B,S,d)
    content_user: np.ndarray           # (B,d)
    content_item: np.ndarray
    cf_user: np.ndarray                # (B,d)
    cf_item: np.ndarray
    gate_t: dict                       # side -> (B,) logit difference
    gate_alpha: dict                   # side -> (B,) blend weight in (0,1)
    combined_user: np.ndarray          # (B,d)
    combined_item: np.ndarray
    score_content: np.ndarray          # (B,)
    score_preference: np.ndarray
    score_combined: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]

    def scores(self) -> np.ndarray:
        """(B,3) columns: content, preference, combined."""
        return np.stack([self.score_content, self.score_preference,
                         self.score_combined], axis=1)


def embed_pair(user: EntityFeatures, item: EntityFeatures,
               params: SainParams) -> np.ndarray:
    """(S,d) sequence: one vector per field slot, user fields then item fields;
    multi-valued slots are the arithmetic mean of their category embeddings."""
    layout, emb = params.layout, params.tensors["embeddings"]
    offsets = layout.offsets()
    rows = []
    for fname, slot in zip(layout.user_fields, user.slots):
        rows.append(_pool_slot(emb, slot, offsets[fname], layout.sizes[fname], fname))
    for fname, slot in zip(layout.item_fields, item.slots):
        rows.append(_pool_slot(emb, slot, offsets[fname], layout.sizes[fname], fname))
    return np.stack(rows, axis=0)


def _pool_slot(emb: np.ndarray, slot: list[int], offset: int, size: int,
               fname: str) -> np.ndarray:
    idx = np.asarray(slot, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= size:
        raise ShapeError(f"feature index out of range for field {fname!r}")
    return emb[idx + offset].mean(axis=0)


def _embed_batch(uids, iids, user_packed: PackedFeatures, item_packed: PackedFeatures,
                 params: SainParams):
    """(B,S,d) pooled embeddings plus the scatter cache for the backward pass."""
    emb = params.tensors["embeddings"]
    B = uids.shape[0]
    cols, cache = [], []
    for packed, ids in ((user_packed, uids), (item_packed, iids)):
        for fi in range(len(packed.fields)):
            idx = packed.index[fi][ids]                      # (B,L)
            w = packed.mask[fi][ids] / packed.counts[fi][ids][:, None]
            cols.append(np.einsum("bl,bld->bd", w, emb[idx]))
            cache.append((idx, w))
    return np.stack(cols, axis=1), cache


def _attention_heads(x: np.ndarray, params: SainParams, config: ModelConfig):
    """Per-head scaled dot-product attention with top-K row filtering."""
    S = x.shape[1]
    k_eff = min(config.top_k, S)
    scale = 1.0 / math.sqrt(config.head_dim)
    q, k, v, alpha_full, masks, alpha_topk, sel_sums, outs = [], [], [], [], [], [], [], []
    for h in range(config.num_heads):
        qh = x @ params.tensors[f"attn{h}_wq"]
        kh = x @ params.tensors[f"attn{h}_wk"]
        vh = x @ params.tensors[f"attn{h}_wv"]
        logits = np.einsum("bsh,bth->bst", qh, kh) * scale
        alpha = softmax_rows(logits)
        mask = top_k_mask_rows(alpha, k_eff)
        selected = alpha * mask
        ssum = selected.sum(axis=-1, keepdims=True)
        ahat = selected / ssum if config.renormalize_topk else selected
        out = np.einsum("bst,bth->bsh", ahat, vh)
        q.append(qh); k.append(kh); v.append(vh)
        alpha_full.append(alpha); masks.append(mask)
        alpha_topk.append(ahat); sel_sums.append(ssum); outs.append(out)
    return q, k, v, alpha_full, masks, alpha_topk, sel_sums, outs


def attention_head(x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray,
                   k: int, renormalize: bool = True):
    """Single-sequence attention head. Returns (outputs (S,dh), pre-top-K
    attention matrix, post-top-K weight matrix)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    S = x.shape[0]
    dh = wq.shape[1]
    qh, kh, vh = x @ wq, x @ wk, x @ wv
    logits = (qh @ kh.T) / math.sqrt(dh)
    alpha = softmax_rows(logits)
    mask = top_k_mask_rows(alpha, min(k, S))
    selected = alpha * mask
    ahat = selected / selected.sum(axis=-1, keepdims=True) if renormalize else selected
    return ahat @ vh, alpha, ahat


def _batch_norm_forward(z: np.ndarray, params: SainParams, config: ModelConfig,
                        mode: str):
    """Channel-wise batch norm over the batch x feature-position axis. Train
    mode normalizes with batch statistics (biased variance) and returns updated
    running stats; eval mode uses the stored running stats."""
    gamma, beta = params.tensors["bn_gamma"], params.tensors["bn_beta"]
    flat = z.reshape(-1, z.shape[-1])
    if mode == "train":
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        mom = config.bn_momentum
        new_mean = (1.0 - mom) * params.bn_mean + mom * mean
        new_var = (1.0 - mom) * params.bn_var + mom * var
    else:
        mean, var = params.bn_mean, params.bn_var
        new_mean, new_var = params.bn_mean.copy(), params.bn_var.copy()
    inv_std = 1.0 / np.sqrt(var + config.bn_epsilon)
    xhat = (z - mean) * inv_std
    return gamma * xhat + beta, xhat, inv_std, new_mean, new_var


def forward_batch(uids: np.ndarray, iids: np.ndarray, user_packed: PackedFeatures,
                  item_packed: PackedFeatures, params: SainParams,
                  config: ModelConfig, mode: str = "eval",
                  dropout_rng: np.random.Generator | None = None) -> ForwardTrace:
    """Full batched forward pass. Eval mode is a pure deterministic function of
    (inputs, params); train mode uses batch statistics and, when dropout_rate
    is positive, a recorded inverted-scale dropout mask."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    uids = np.asarray(uids, dtype=np.int64)
    iids = np.asarray(iids, dtype=np.int64)
    if uids.size == 0:
        raise ValueError("empty batch")

    x, embed_cache = _embed_batch(uids, iids, user_packed, item_packed, params)
    q, k, v, alpha_full, masks, alpha_topk, sel_sums, outs = _attention_heads(
        x, params, config)
    concat = np.concatenate(outs, axis=-1)

    bn_out, xhat, inv_std, new_mean, new_var = _batch_norm_forward(
        concat, params, config, mode)

    if mode == "train" and config.dropout_rate > 0.0:
        if dropout_rng is None:
            raise ValueError("train mode with dropout needs a dropout rng")
        keep = 1.0 - config.dropout_rate
        dropout_mask = (dropout_rng.random(bn_out.shape) < keep) / keep
        dropped = bn_out * dropout_mask
    else:
        dropout_mask = None
        dropped = bn_out

    resid = dropped + x
    xbar = np.maximum(resid, 0.0)

    m = params.layout.m
    B = uids.shape[0]
    d = config.embed_dim
    flat_u = xbar[:, :m, :].reshape(B, m * d)
    flat_i = xbar[:, m:, :].reshape(B, -1)
    content_user = flat_u @ params.tensors["agg_user_w"] + params.tensors["agg_user_b"]
    content_item = flat_i @ params.tensors["agg_item_w"] + params.tensors["agg_item_b"]

    cf_user = params.tensors["cf_user"][uids]
    cf_item = params.tensors["cf_item"][iids]

    gate_t, gate_alpha = {}, {}
    combined = {}
    for side, cf_vec, ct_vec in (("user", cf_user, content_user),
                                 ("item", cf_item, content_item)):
        w, _, _, _ = params.gate(side)
        # Both affine logits carry the same bias, so it cancels exactly in the
        # difference; computing the subtracted form keeps that identity in
        # floating point too.
        t = (cf_vec - ct_vec) @ w
        a = _stable_sigmoid(t)
        gate_t[side] = t
        gate_alpha[side] = a
        combined[side] = a[:, None] * cf_vec + (1.0 - a)[:, None] * ct_vec

    score_content = np.einsum("bd,bd->b", content_user, content_item)
    score_preference = np.einsum("bd,bd->b", cf_user, cf_item)
    score_combined = np.einsum("bd,bd->b", combined["user"], combined["item"])

    return ForwardTrace(uids=uids, iids=iids, mode=mode, x=x, embed_cache=embed_cache,
                        q=q, k=k, v=v, alpha_full=alpha_full, topk_mask=masks,
                        alpha_topk=alpha_topk, sel_sum=sel_sums, head_out=outs,
                        concat=concat, bn_xhat=xhat, bn_inv_std=inv_std,
                        bn_new_mean=new_mean, bn_new_var=new_var,
                        dropout_mask=dropout_mask, resid=resid, xbar=xbar,
                        content_user=content_user, content_item=content_item,
                        cf_user=cf_user, cf_item=cf_item, gate_t=gate_t,
                        gate_alpha=gate_alpha, combined_user=combined["user"],
                        combined_item=combined["item"], score_content=score_content,
                        score_preference=score_preference,
                        score_combined=score_combined)


def multi_head_block(x: np.ndarray, params: SainParams, config: ModelConfig,
                     mode: str = "eval",
                     dropout_rng: np.random.Generator | None = None) -> np.ndarray:
    """Single-sequence interaction block: heads, concat, batch norm, dropout,
    residual, ReLU. (S,d) in, (S,d) out."""
    x3 = np.asarray(x, dtype=np.float64)[None, :, :]
    _, _, _, _, _, _, _, outs = _attention_heads(x3, params, config)
    concat = np.concatenate(outs, axis=-1)
    bn_out, _, _, _, _ = _batch_norm_forward(concat, params, config, mode)
    if mode == "train" and config.dropout_rate > 0.0:
        if dropout_rng is None:
            raise ValueError("train mode with dropout needs a dropout rng")
        keep = 1.0 - config.dropout_rate
        bn_out = bn_out * ((dropout_rng.random(bn_out.shape) < keep) / keep)
    return np.maximum(bn_out + x3, 0.0)[0]


def aggregate_entities(xbar: np.ndarray, params: SainParams):
    """Affine maps from the concatenated user / item positions of one sequence
    to the two d-dim content vectors."""
    m = params.layout.m
    flat_u = xbar[:m, :].reshape(-1)
    flat_i = xbar[m:, :].reshape(-1)
    xu = flat_u @ params.tensors["agg_user_w"] + params.tensors["agg_user_b"]
    xv = flat_i @ params.tensors["agg_item_w"] + params.tensors["agg_item_b"]
    return xu, xv


def score_content(xu: np.ndarray, xv: np.ndarray) -> float:
    return float(np.dot(xu, xv))


def score_preference(cf_u: np.ndarray, cf_v: np.ndarray) -> float:
    return float(np.dot(cf_u, cf_v))


def integration_gate(x_cf: np.ndarray, x_bar: np.ndarray, w: np.ndarray,
                     b: float = 0.0):
    """Two-logit softmax over the gated scalars of both vectors, then the convex
    combination. Returns (blend weight, combined vector). The shared bias ``b``
    cancels exactly in the logit difference, so the subtracted form is used."""
    del b
    t = float((x_cf - x_bar) @ w)
    a = float(_stable_sigmoid(np.asarray([t]))[0])
    return a, a * x_cf + (1.0 - a) * x_bar


def forward(user: EntityFeatures, item: EntityFeatures, params: SainParams,
            config: ModelConfig, mode: str = "eval",
            dropout_rng: np.random.Generator | None = None) -> ForwardTrace:
    """Single-pair forward pass (batch of one). entity_id on each side indexes
    the CF tables; the feature slots carry per-field local category indices."""
    layout = params.layout
    offsets = layout.offsets()

    def packed_for(entity, fields):
        index, mask, counts = [], [], []
        for fi, fname in enumerate(fields):
            vals = np.asarray(entity.slots[fi], dtype=np.int64)
            if vals.size == 0 or vals.min() < 0 or vals.max() >= layout.sizes[fname]:
                raise ShapeError(f"feature index out of range for field {fname!r}")
            index.append((vals + offsets[fname])[None, :])
            mask.append(np.ones((1, vals.size)))
            counts.append(np.asarray([float(vals.size)]))
        return PackedFeatures(fields=list(fields), index=index, mask=mask,
                              counts=counts)

    packed_u = packed_for(user, layout.user_fields)
    packed_i = packed_for(item, layout.item_fields)
    trace = forward_batch(np.asarray([0], dtype=np.int64),
                          np.asarray([0], dtype=np.int64),
                          packed_u, packed_i,
                          _with_cf_rows(params, user.entity_id, item.entity_id),
                          config, mode=mode, dropout_rng=dropout_rng)
    trace.uids = np.asarray([user.entity_id], dtype=np.int64)
    trace.iids = np.asarray([item.entity_id], dtype=np.int64)
    return trace


def _with_cf_rows(params: SainParams, uid: int, iid: int) -> SainParams:
    """View of params whose CF tables hold only the requested rows."""
    if not (0 <= uid < params.layout.num_users):
        raise ShapeError(f"user index {uid} out of range")
    if not (0 <= iid < params.layout.num_items):
        raise ShapeError(f"item index {iid} out of range")
    t = dict(params.tensors)
    t["cf_user"] = params.tensors["cf_user"][uid:uid + 1]
    t["cf_item"] = params.tensors["cf_item"][iid:iid + 1]
    return SainParams(params.layout, params.config, t, params.bn_mean, params.bn_var)


def joint_loss(trace: ForwardTrace, ratings: np.ndarray,
               weights: tuple[float, float, float]):
    """Weighted sum of the three per-batch MSE terms. Returns (scalar loss,
    (mse_content, mse_preference, mse_combined))."""
    r = np.asarray(ratings, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty batch")
    if r.shape[0] != trace.batch_size:
        raise ShapeError("ratings length does not match trace batch size")
    mse_c = float(np.mean((trace.score_content - r) ** 2))
    mse_p = float(np.mean((trace.score_preference - r) ** 2))
    mse_m = float(np.mean((trace.score_combined - r) ** 2))
    w1, w2, w3 = weights
    return w1 * mse_c + w2 * mse_p + w3 * mse_m, (mse_c, mse_p, mse_m)


def backward(trace: ForwardTrace, ratings: np.ndarray, params: SainParams,
             config: ModelConfig) -> dict[str, np.ndarray]:
    """Exact gradients of joint_loss w.r.t. every learnable tensor, following
    the recorded forward pass (including the fixed top-K selection, the
    renormalization, the batch-norm mode used, and the dropout mask)."""
    r = np.asarray(ratings, dtype=np.float64)
    if r.shape[0] != trace.batch_size:
        raise ShapeError("ratings length does not match trace batch size")
    B = trace.batch_size
    m = params.layout.m
    d = config.embed_dim
    dh = config.head_dim
    w1, w2, w3 = config.loss_weights
    grads = params.zero_grads()

    gc = 2.0 * w1 * (trace.score_content - r) / B
    gp = 2.0 * w2 * (trace.score_preference - r) / B
    gm = 2.0 * w3 * (trace.score_combined - r) / B

    # combined score -> gated vectors
    d_comb_u = gm[:, None] * trace.combined_item
    d_comb_v = gm[:, None] * trace.combined_user
    # content / preference scores -> their vectors
    d_content_u = gc[:, None] * trace.content_item
    d_content_v = gc[:, None] * trace.content_user
    d_cf_u = gp[:, None] * trace.cf_item
    d_cf_v = gp[:, None] * trace.cf_user

    # gates: X = a*cf + (1-a)*content, a = sigmoid((cf - content) @ w)
    for side, d_comb, cf_vec, ct_vec, d_cf, d_ct in (
            ("user", d_comb_u, trace.cf_user, trace.content_user, d_cf_u, d_content_u),
            ("item", d_comb_v, trace.cf_item, trace.content_item, d_cf_v, d_content_v)):
        w, _, name_w, _ = params.gate(side)
        a = trace.gate_alpha[side]
        da = np.einsum("bd,bd->b", d_comb, cf_vec - ct_vec)
        dt = da * a * (1.0 - a)
        d_cf += a[:, None] * d_comb + dt[:, None] * w[None, :]
        d_ct += (1.0 - a)[:, None] * d_comb - dt[:, None] * w[None, :]
        grads[name_w] += np.einsum("b,bd->d", dt, cf_vec - ct_vec)
        # the shared-affine bias cancels in the logit difference: gradient 0

    np.add.at(grads["cf_user"], trace.uids, d_cf_u)
    np.add.at(grads["cf_item"], trace.iids, d_cf_v)

    # entity aggregation (affine, no activation)
    flat_u = trace.xbar[:, :m, :].reshape(B, -1)
    flat_i = trace.xbar[:, m:, :].reshape(B, -1)
    grads["agg_user_w"] += flat_u.T @ d_content_u
    grads["agg_user_b"] += d_content_u.sum(axis=0)
    grads["agg_item_w"] += flat_i.T @ d_content_v
    grads["agg_item_b"] += d_content_v.sum(axis=0)
    d_xbar = np.concatenate(
        [(d_content_u @ params.tensors["agg_user_w"].T).reshape(B, m, d),
         (d_content_v @ params.tensors["agg_item_w"].T).reshape(B, -1, d)], axis=1)

    # ReLU and residual
    d_resid = d_xbar * (trace.resid > 0.0)
    d_x = d_resid.copy()
    d_dropped = d_resid

    # dropout
    d_bn_out = d_dropped if trace.dropout_mask is None else d_dropped * trace.dropout_mask

    # batch norm
    gamma = params.tensors["bn_gamma"]
    flat_dy = d_bn_out.reshape(-1, d)
    flat_xhat = trace.bn_xhat.reshape(-1, d)
    grads["bn_gamma"] += np.einsum("ad,ad->d", flat_dy, flat_xhat)
    grads["bn_beta"] += flat_dy.sum(axis=0)
    d_xhat = flat_dy * gamma
    if trace.mode == "train":
        A = flat_dy.shape[0]
        d_z = (trace.bn_inv_std / A) * (A * d_xhat - d_xhat.sum(axis=0)
                                        - flat_xhat * np.einsum("ad,ad->d", d_xhat, flat_xhat))
    else:
        d_z = d_xhat * trace.bn_inv_std
    d_concat = d_z.reshape(B, -1, d)

    # attention heads
    scale = 1.0 / math.sqrt(dh)
    for h in range(config.num_heads):
        d_out = d_concat[:, :, h * dh:(h + 1) * dh]
        ahat, alpha, mask = trace.alpha_topk[h], trace.alpha_full[h], trace.topk_mask[h]
        qh, kh, vh = trace.q[h], trace.k[h], trace.v[h]
        d_ahat = np.einsum("bsh,bth->bst", d_out, vh)
        d_vh = np.einsum("bst,bsh->bth", ahat, d_out)
        if config.renormalize_topk:
            rowdot = np.einsum("bst,bst->bs", d_ahat, ahat)[:, :, None]
            d_alpha = ((d_ahat - rowdot) / trace.sel_sum[h]) * mask
        else:
            d_alpha = d_ahat * mask
        # softmax rows
        inner = np.einsum("bst,bst->bs", d_alpha, alpha)[:, :, None]
        d_logits = alpha * (d_alpha - inner)
        d_qh = np.einsum("bst,bth->bsh", d_logits, kh) * scale
        d_kh = np.einsum("bst,bsh->bth", d_logits, qh) * scale
        grads[f"attn{h}_wq"] += np.einsum("bsd,bsh->dh", trace.x, d_qh)
        grads[f"attn{h}_wk"] += np.einsum("bsd,bsh->dh", trace.x, d_kh)
        grads[f"attn{h}_wv"] += np.einsum("bsd,bsh->dh", trace.x, d_vh)
        d_x += d_qh @ params.tensors[f"attn{h}_wq"].T
        d_x += d_kh @ params.tensors[f"attn{h}_wk"].T
        d_x += d_vh @ params.tensors[f"attn{h}_wv"].T

    # embedding scatter (mean pooling weights recorded at embed time)
    d_emb = grads["embeddings"]
    for pos, (idx, w) in enumerate(trace.embed_cache):
        contrib = d_x[:, pos, :][:, None, :] * w[:, :, None]   # (B,L,d)
        np.add.at(d_emb, idx.reshape(-1), contrib.reshape(-1, d))

    return grads
