"""Matrix-factorization baseline with user/item biases: the prediction is
global mean + user bias + item bias + factor dot product, trained on MSE with
the same optimizer, schedule, and early stopping as the attention model.

The global mean is frozen at the training-set average and is not a gradient
target.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError


class MfParams:
    """Learnable tensors for the biased factor model plus the frozen mean."""

    def __init__(self, tensors: dict[str, np.ndarray], mu: float,
                 num_users: int, num_items: int, dim: int):
        self.tensors = tensors
        self.mu = float(mu)
        self.num_users = num_users
        self.num_items = num_items
        self.dim = dim

    @classmethod
    def init(cls, num_users: int, num_items: int, dim: int, mu: float,
             rng: np.random.Generator) -> "MfParams":
        if num_users < 1 or num_items < 1 or dim < 1:
            raise ShapeError("factor model needs at least one user, one item, "
                             "and a positive dimension")
        scale = 1.0 / math.sqrt(dim)
        t = {
            "user_factors": rng.uniform(-scale, scale, size=(num_users, dim)),
            "item_factors": rng.uniform(-scale, scale, size=(num_items, dim)),
            "user_bias": np.zeros(num_users),
            "item_bias": np.zeros(num_items),
        }
        return cls(t, mu=mu, num_users=num_users, num_items=num_items, dim=dim)

    def clone(self) -> "MfParams":
        return MfParams({k: v.copy() for k, v in self.tensors.items()},
                        self.mu, self.num_users, self.num_items, self.dim)

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


def mf_scores(uids: np.ndarray, iids: np.ndarray, params: MfParams) -> np.ndarray:
    """Raw (unclipped) predictions for a batch of pairs."""
    uids = np.asarray(uids, dtype=np.int64)
    iids = np.asarray(iids, dtype=np.int64)
    if uids.size and (uids.min() < 0 or uids.max() >= params.num_users):
        raise ShapeError("unknown user id")
    if iids.size and (iids.min() < 0 or iids.max() >= params.num_items):
        raise ShapeError("unknown item id")
    p = params.tensors["user_factors"][uids]
    q = params.tensors["item_factors"][iids]
    return (params.mu + params.tensors["user_bias"][uids]
            + params.tensors["item_bias"][iids] + np.einsum("bd,bd->b", p, q))


def mf_loss(scores: np.ndarray, ratings: np.ndarray) -> float:
    r = np.asarray(ratings, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty batch")
    return float(np.mean((scores - r) ** 2))


def mf_backward(uids: np.ndarray, iids: np.ndarray, scores: np.ndarray,
                ratings: np.ndarray, params: MfParams) -> dict[str, np.ndarray]:
    """Exact MSE gradients for every learnable tensor (scatter-add over the
    batch, so repeated users/items accumulate)."""
    uids = np.asarray(uids, dtype=np.int64)
    iids = np.asarray(iids, dtype=np.int64)
    r = np.asarray(ratings, dtype=np.float64)
    if r.shape != scores.shape:
        raise ShapeError("ratings length does not match scores")
    g = 2.0 * (scores - r) / r.shape[0]
    p = params.tensors["user_factors"][uids]
    q = params.tensors["item_factors"][iids]
    grads = params.zero_grads()
    np.add.at(grads["user_factors"], uids, g[:, None] * q)
    np.add.at(grads["item_factors"], iids, g[:, None] * p)
    np.add.at(grads["user_bias"], uids, g)
    np.add.at(grads["item_bias"], iids, g)
    return grads
