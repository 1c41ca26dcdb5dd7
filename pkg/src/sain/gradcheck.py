"""Finite-difference certification of the hand-derived gradients.

Each case builds a tiny synthetic dataset and model (two user fields, two item
fields, d=4, two heads, batch of 3), computes analytic gradients of the joint
loss, and compares every parameter tensor against the central-difference
oracle. Dropout is off and batch norm runs on stored statistics so the loss is
a smooth deterministic function of the parameters. Fixtures are redrawn when a
top-K selection margin or a ReLU pre-activation sits close enough to a
decision boundary for the +/- eps probes to land on different branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baseline import MfParams, mf_backward, mf_loss, mf_scores
from .data import EntityFeatures, FeatureVocab, FieldSpec, pack_features
from .model import (FieldLayout, ModelConfig, SainParams, backward,
                    forward_batch, joint_loss)
from .tensor import finite_diff_gradient, relative_error

TOLERANCE = 1e-4
FD_EPS = 1e-5
BOUNDARY_MARGIN = 1e-3


@dataclass
class CaseReport:
    model: str
    seed: int
    top_k: int | None
    max_rel_err: float
    worst_tensor: str


@dataclass
class SuiteReport:
    cases: list[CaseReport]

    @property
    def max_rel_err(self) -> float:
        return max(c.max_rel_err for c in self.cases)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def _toy_vocab() -> FeatureVocab:
    specs = [FieldSpec("uf0", "user", ""), FieldSpec("uf1", "user", ""),
             FieldSpec("if0", "item", ""), FieldSpec("if1", "item", "")]
    tokens = {f: {"a": 0, "b": 1} for f in ("uf0", "uf1", "if0", "if1")}
    return FeatureVocab(specs, tokens)


def _toy_entities(rng: np.random.Generator, count: int) -> list[EntityFeatures]:
    out = []
    for eid in range(count):
        single = [int(rng.integers(0, 3))]
        multi = sorted(rng.choice(3, size=int(rng.integers(1, 3)),
                                  replace=False).tolist())
        out.append(EntityFeatures(entity_id=eid, slots=[single, multi]))
    return out


@dataclass
class SainFixture:
    params: SainParams
    config: ModelConfig
    user_packed: object
    item_packed: object
    uids: np.ndarray
    iids: np.ndarray
    ratings: np.ndarray
    mode: str


def _boundary_safe(trace, k: int) -> bool:
    """Reject fixtures where an eps-perturbation could flip a top-K selection
    or a ReLU branch."""
    s = trace.x.shape[1]
    if k < s:
        for alpha in trace.alpha_full:
            srt = np.sort(alpha, axis=-1)[..., ::-1]
            if np.min(srt[..., k - 1] - srt[..., k]) < BOUNDARY_MARGIN:
                return False
    if np.min(np.abs(trace.resid)) < BOUNDARY_MARGIN:
        return False
    return True


def build_sain_fixture(seed: int, top_k: int = 3, mode: str = "eval",
                       batch: int = 3,
                       loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
                       renormalize_topk: bool = True,
                       gate_shared: bool = False) -> SainFixture:
    """Deterministic random case; redraws until the boundary-safety check
    passes (almost always on the first attempt)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 97]))
    vocab = _toy_vocab()
    num_users = num_items = 4
    layout = FieldLayout.from_vocab(vocab, num_users, num_items)
    config = ModelConfig(embed_dim=4, num_heads=2, top_k=top_k, dropout_rate=0.0,
                         loss_weights=loss_weights,
                         renormalize_topk=renormalize_topk,
                         gate_shared=gate_shared)
    for _ in range(100):
        params = SainParams.init(layout, config, rng)
        # Wider embeddings than init so attention rows are not near-uniform.
        params.tensors["embeddings"] = rng.normal(0.0, 1.0,
                                                  params.tensors["embeddings"].shape)
        params.bn_mean = rng.normal(0.0, 0.2, config.embed_dim)
        params.bn_var = rng.uniform(0.5, 1.5, config.embed_dim)
        user_packed = pack_features(_toy_entities(rng, num_users), vocab, "user")
        item_packed = pack_features(_toy_entities(rng, num_items), vocab, "item")
        uids = rng.integers(0, num_users, size=batch)
        iids = rng.integers(0, num_items, size=batch)
        ratings = rng.uniform(1.0, 5.0, size=batch)
        trace = forward_batch(uids, iids, user_packed, item_packed, params,
                              config, mode=mode)
        if _boundary_safe(trace, min(top_k, layout.seq_len)):
            return SainFixture(params, config, user_packed, item_packed,
                               uids, iids, ratings, mode)
    raise RuntimeError(f"no boundary-safe fixture found for seed {seed}")


def check_sain(seed: int, top_k: int = 3, mode: str = "eval",
               loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
               renormalize_topk: bool = True, gate_shared: bool = False,
               eps: float = FD_EPS) -> CaseReport:
    """Compare analytic and finite-difference gradients for one random case.
    Returns the worst relative error across parameter tensors."""
    fx = build_sain_fixture(seed, top_k=top_k, mode=mode,
                            loss_weights=loss_weights,
                            renormalize_topk=renormalize_topk,
                            gate_shared=gate_shared)
    trace = forward_batch(fx.uids, fx.iids, fx.user_packed, fx.item_packed,
                          fx.params, fx.config, mode=fx.mode)
    grads = backward(trace, fx.ratings, fx.params, fx.config)

    def loss_at(vec: np.ndarray) -> float:
        probe = fx.params.clone()
        probe.set_flat(vec)
        t = forward_batch(fx.uids, fx.iids, fx.user_packed, fx.item_packed,
                          probe, fx.config, mode=fx.mode)
        loss, _ = joint_loss(t, fx.ratings, fx.config.loss_weights)
        return loss

    numeric = finite_diff_gradient(loss_at, fx.params.flatten(), eps=eps)
    worst, worst_name = 0.0, ""
    pos = 0
    for name, tensor in fx.params.tensors.items():
        err = relative_error(grads[name], numeric[pos:pos + tensor.size])
        if err > worst:
            worst, worst_name = err, name
        pos += tensor.size
    return CaseReport(model="sain", seed=seed, top_k=top_k,
                      max_rel_err=worst, worst_tensor=worst_name)


def check_biasedmf(seed: int, eps: float = FD_EPS) -> CaseReport:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 131]))
    num_users, num_items, dim, batch = 5, 5, 3, 4
    params = MfParams.init(num_users, num_items, dim, mu=3.5, rng=rng)
    params.tensors["user_bias"] = rng.normal(0.0, 0.3, num_users)
    params.tensors["item_bias"] = rng.normal(0.0, 0.3, num_items)
    uids = rng.integers(0, num_users, size=batch)
    iids = rng.integers(0, num_items, size=batch)
    ratings = rng.uniform(1.0, 5.0, size=batch)
    scores = mf_scores(uids, iids, params)
    grads = mf_backward(uids, iids, scores, ratings, params)

    def loss_at(vec: np.ndarray) -> float:
        probe = params.clone()
        probe.set_flat(vec)
        return mf_loss(mf_scores(uids, iids, probe), ratings)

    numeric = finite_diff_gradient(loss_at, params.flatten(), eps=eps)
    worst, worst_name = 0.0, ""
    pos = 0
    for name, tensor in params.tensors.items():
        err = relative_error(grads[name], numeric[pos:pos + tensor.size])
        if err > worst:
            worst, worst_name = err, name
        pos += tensor.size
    return CaseReport(model="biasedmf", seed=seed, top_k=None,
                      max_rel_err=worst, worst_tensor=worst_name)


def run_suite(num_seeds: int = 20, k_values: tuple[int, ...] = (2, 3, 4)) -> SuiteReport:
    """The full certification: num_seeds random cases per model, K cycling
    through k_values on the attention model."""
    cases = []
    for seed in range(num_seeds):
        cases.append(check_sain(seed, top_k=k_values[seed % len(k_values)]))
        cases.append(check_biasedmf(seed))
    return SuiteReport(cases=cases)
