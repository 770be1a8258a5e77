"""Baseline recommenders: UserKNN, ItemKNN and matrix factorization trained with BPR."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .ingest import Interaction
from .metrics import RankedList

_logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

Grads = dict  # parameter name -> dense gradient array


class ModelError(RuntimeError):
    pass


@dataclass
class InteractionMatrix:
    """Binary users x items matrix of train interactions (rows/cols in ascending id order)."""

    user_ids: list
    item_ids: list
    matrix: sp.csr_matrix
    ratings: sp.csr_matrix

    def __post_init__(self):
        self.user_index = {u: n for n, u in enumerate(self.user_ids)}
        self.item_index = {i: n for n, i in enumerate(self.item_ids)}

    @classmethod
    def from_interactions(cls, rows: Iterable[Interaction], user_ids: Sequence, item_ids: Sequence) -> "InteractionMatrix":
        user_ids, item_ids = list(user_ids), list(item_ids)
        ui = {u: n for n, u in enumerate(user_ids)}
        ii = {i: n for n, i in enumerate(item_ids)}
        rows = list(rows)
        r = np.array([ui[it.user_id] for it in rows], dtype=np.int64)
        c = np.array([ii[it.item_id] for it in rows], dtype=np.int64)
        shape = (len(user_ids), len(item_ids))
        binary = sp.csr_matrix((np.ones(len(rows)), (r, c)), shape=shape)
        ratings = sp.csr_matrix((np.array([it.rating for it in rows], dtype=float), (r, c)), shape=shape)
        binary.sort_indices()
        ratings.sort_indices()
        return cls(user_ids, item_ids, binary, ratings)

    @property
    def shape(self):
        return self.matrix.shape

    def positives(self, u: int) -> np.ndarray:
        m = self.matrix
        return m.indices[m.indptr[u]: m.indptr[u + 1]]

    def is_positive(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = getattr(self, "_keys", None)
        if keys is None:
            r, c = self.pairs()
            keys = self._keys = r * self.shape[1] + c
        probe = np.asarray(users, dtype=np.int64) * self.shape[1] + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(keys, probe)
        return (pos < len(keys)) & (keys[np.minimum(pos, len(keys) - 1)] == probe)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All (user_index, item_index) positives in row-major order."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order].astype(np.int64), coo.col[order].astype(np.int64)


# --- neighborhood models ------------------------------------------------------


class KnnMode(str, enum.Enum):
    USER = "UserBased"
    ITEM = "ItemBased"


@dataclass
class KnnModel:
    mode: KnnMode
    similarity: sp.csr_matrix  # row r holds the neighborhood of entity r
    neighborhood_size: int
    train: InteractionMatrix

    @property
    def user_ids(self):
        return self.train.user_ids

    @property
    def item_ids(self):
        return self.train.item_ids

    def score_matrix(self, users: np.ndarray) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        X = self.train.matrix
        S = self.similarity
        if self.mode is KnnMode.USER:
            sims = S[users]
            num = np.asarray((sims @ X).todense())
            den = np.asarray(abs(sims).sum(axis=1)).ravel()[:, None]
        else:
            num = np.asarray((X[users] @ S.T).todense())
            den = np.asarray(abs(S).sum(axis=1)).ravel()[None, :]
        out = np.zeros_like(num)
        np.divide(num, den, out=out, where=den > 0)
        return out

    def score(self, user) -> np.ndarray:
        return self.score_matrix(np.array([_user_idx(self, user)]))[0]

    def save(self, path: str | Path) -> None:
        S, X = self.similarity, self.train.matrix
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "kind": "KnnModel",
            "mode": self.mode.value,
            "neighborhood_size": self.neighborhood_size,
            "user_ids": self.train.user_ids,
            "item_ids": self.train.item_ids,
        }
        np.savez(
            path, meta=json.dumps(meta), sim_data=S.data, sim_indices=S.indices, sim_indptr=S.indptr,
            sim_shape=S.shape, x_data=X.data, x_indices=X.indices, x_indptr=X.indptr,
            r_data=self.train.ratings.data,
        )

    @classmethod
    def load(cls, path: str | Path) -> "KnnModel":
        z = np.load(path, allow_pickle=False)
        meta = _check_meta(z, "KnnModel")
        shape = (len(meta["user_ids"]), len(meta["item_ids"]))
        X = sp.csr_matrix((z["x_data"], z["x_indices"], z["x_indptr"]), shape=shape)
        R = sp.csr_matrix((z["r_data"], z["x_indices"], z["x_indptr"]), shape=shape)
        S = sp.csr_matrix((z["sim_data"], z["sim_indices"], z["sim_indptr"]), shape=tuple(z["sim_shape"]))
        train = InteractionMatrix(meta["user_ids"], meta["item_ids"], X, R)
        return cls(KnnMode(meta["mode"]), S, meta["neighborhood_size"], train)


def cosine_similarity(X: sp.csr_matrix) -> np.ndarray:
    """Dense row-by-row cosine similarity; all-zero rows are similar to nothing."""
    X = sp.csr_matrix(X, dtype=float)
    norms = np.sqrt(np.asarray(X.multiply(X).sum(axis=1)).ravel())
    inv = np.zeros_like(norms)
    np.divide(1.0, norms, out=inv, where=norms > 0)
    Xn = sp.diags(inv) @ X
    sim = np.asarray((Xn @ Xn.T).todense())
    return np.clip(sim, -1.0, 1.0)


def _neighborhoods(sim: np.ndarray, size: int) -> sp.csr_matrix:
    n = sim.shape[0]
    sim = sim.copy()
    np.fill_diagonal(sim, -np.inf)
    size = min(size, n - 1)
    # stable sort keeps ties in ascending index order
    order = np.argsort(-sim, axis=1, kind="stable")[:, :size]
    rows = np.repeat(np.arange(n), size)
    vals = sim[rows, order.ravel()]
    keep = vals != 0
    out = sp.csr_matrix((vals[keep], (rows[keep], order.ravel()[keep])), shape=sim.shape)
    out.sort_indices()
    return out


def _check_rows_nonzero(X: sp.csr_matrix, what: str) -> None:
    empty = np.flatnonzero(np.diff(X.indptr) == 0)
    if len(empty):
        raise ModelError(f"{len(empty)} {what} have no train interactions (first index {empty[0]})")


def fit_userknn(train: InteractionMatrix, neighborhood_size: int = 50) -> KnnModel:
    _check_rows_nonzero(train.matrix, "users")
    sim = cosine_similarity(train.matrix)
    return KnnModel(KnnMode.USER, _neighborhoods(sim, neighborhood_size), neighborhood_size, train)


def knn_score(model: KnnModel, user) -> np.ndarray:
    """Neighborhood-weighted scores for every catalog item."""
    return model.score(user)


def fit_itemknn(train: InteractionMatrix, neighborhood_size: int = 50) -> KnnModel:
    sim = cosine_similarity(train.matrix.T.tocsr())
    return KnnModel(KnnMode.ITEM, _neighborhoods(sim, neighborhood_size), neighborhood_size, train)


# --- matrix factorization -------------------------------------------------------


@dataclass
class MfConfig:
    d: int = 50
    learning_rate: float = 0.01
    l2: float = 0.001
    negatives_per_positive: int = 1
    epochs: int = 50
    seed: int = 0
    batch_size: int = 256
    init_scale: float = 0.01

    def __post_init__(self):
        for name in ("d", "learning_rate", "negatives_per_positive", "batch_size", "init_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"MfConfig.{name} must be positive")
        if self.l2 < 0 or self.epochs < 0:
            raise ValueError("MfConfig.l2 and MfConfig.epochs must be non-negative")


@dataclass
class MfModel:
    """Latent factors with user/item/global biases.

    score(u, v) = global_bias + user_bias[u] + item_bias[v] + <user_factors[u], item_factors[v]>
    """

    user_factors: np.ndarray
    item_factors: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: float
    user_ids: list
    item_ids: list
    extra: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.user_factors.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        """Parameters trained by BPR (user and global biases cancel in pairwise differences)."""
        return {"user_factors": self.user_factors, "item_factors": self.item_factors, "item_bias": self.item_bias}

    def copy(self) -> "MfModel":
        return MfModel(
            self.user_factors.copy(), self.item_factors.copy(), self.user_bias.copy(), self.item_bias.copy(),
            self.global_bias, list(self.user_ids), list(self.item_ids), dict(self.extra),
        )

    def score_matrix(self, users: np.ndarray) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        return (
            self.global_bias
            + self.user_bias[users][:, None]
            + self.item_bias[None, :]
            + self.user_factors[users] @ self.item_factors.T
        )

    def score(self, user) -> np.ndarray:
        return self.score_matrix(np.array([_user_idx(self, user)]))[0]

    def score_pairs(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        return (
            self.global_bias
            + self.user_bias[users]
            + self.item_bias[items]
            + np.einsum("nd,nd->n", self.user_factors[users], self.item_factors[items])
        )

    def check_finite(self) -> None:
        for name, arr in self.params().items():
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"non-finite values in {name}")

    def save(self, path: str | Path, extra: Mapping | None = None) -> None:
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "kind": "MfModel",
            "d": self.d,
            "global_bias": self.global_bias,
            "user_ids": self.user_ids,
            "item_ids": self.item_ids,
            "extra": {**self.extra, **(extra or {})},
        }
        np.savez(
            path, meta=json.dumps(meta, sort_keys=True), user_factors=self.user_factors,
            item_factors=self.item_factors, user_bias=self.user_bias, item_bias=self.item_bias,
        )

    @classmethod
    def load(cls, path: str | Path) -> "MfModel":
        z = np.load(path, allow_pickle=False)
        meta = _check_meta(z, "MfModel")
        return cls(
            z["user_factors"], z["item_factors"], z["user_bias"], z["item_bias"], meta["global_bias"],
            meta["user_ids"], meta["item_ids"], meta.get("extra", {}),
        )


def _check_meta(z, kind: str) -> dict:
    meta = json.loads(str(z["meta"]))
    if meta.get("kind") != kind or meta.get("format_version") != CHECKPOINT_VERSION:
        raise ModelError(f"not a version-{CHECKPOINT_VERSION} {kind} checkpoint")
    return meta


def load_model(path: str | Path):
    z = np.load(path, allow_pickle=False)
    kind = json.loads(str(z["meta"])).get("kind")
    return {"MfModel": MfModel, "KnnModel": KnnModel}[kind].load(path)


def _user_idx(model, user) -> int:
    try:
        return model.user_ids.index(user)
    except ValueError:
        raise ModelError(f"unknown user {user!r}") from None


def init_mf(train: InteractionMatrix, config: MfConfig, rng: np.random.Generator) -> MfModel:
    n_users, n_items = train.shape
    s = config.init_scale
    return MfModel(
        user_factors=rng.uniform(-s, s, size=(n_users, config.d)),
        item_factors=rng.uniform(-s, s, size=(n_items, config.d)),
        user_bias=np.zeros(n_users),
        item_bias=np.zeros(n_items),
        global_bias=0.0,
        user_ids=list(train.user_ids),
        item_ids=list(train.item_ids),
    )


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(_log_sigmoid(x))


def bpr_losses(model: MfModel, u: np.ndarray, i: np.ndarray, j: np.ndarray, l2: float) -> np.ndarray:
    """Per-triple -ln sigmoid(x_uij) + l2 * squared norm of the involved parameters."""
    pu, qi, qj = model.user_factors[u], model.item_factors[i], model.item_factors[j]
    x = model.item_bias[i] - model.item_bias[j] + np.einsum("nd,nd->n", pu, qi - qj)
    reg = (pu * pu).sum(1) + (qi * qi).sum(1) + (qj * qj).sum(1) + model.item_bias[i] ** 2 + model.item_bias[j] ** 2
    return -_log_sigmoid(x) + l2 * reg


def bpr_loss_and_grad(model: MfModel, u, i, j, l2: float) -> tuple[float, np.ndarray, Grads]:
    """Mean BPR loss over a batch of triples, per-triple losses, and dense gradients."""
    u, i, j = (np.asarray(a, dtype=np.int64) for a in (u, i, j))
    n = len(u)
    pu, qi, qj = model.user_factors[u], model.item_factors[i], model.item_factors[j]
    x = model.item_bias[i] - model.item_bias[j] + np.einsum("nd,nd->n", pu, qi - qj)
    losses = bpr_losses(model, u, i, j, l2)
    # d(-ln sigmoid(x))/dx = -sigmoid(-x)
    gx = (-_sigmoid(-x) / n)[:, None]
    g_pu = gx * (qi - qj) + (2 * l2 / n) * pu
    g_qi = gx * pu + (2 * l2 / n) * qi
    g_qj = -gx * pu + (2 * l2 / n) * qj
    g_bi = gx[:, 0] + (2 * l2 / n) * model.item_bias[i]
    g_bj = -gx[:, 0] + (2 * l2 / n) * model.item_bias[j]

    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    np.add.at(grads["user_factors"], u, g_pu)
    np.add.at(grads["item_factors"], i, g_qi)
    np.add.at(grads["item_factors"], j, g_qj)
    np.add.at(grads["item_bias"], i, g_bi)
    np.add.at(grads["item_bias"], j, g_bj)
    return float(losses.mean()), losses, grads


def apply_grads(model: MfModel, grads: Grads, step: float, where: str = "") -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ModelError(f"non-finite gradient for {name}{where}")
        model.params()[name] -= step * g


def bpr_step(model: MfModel, triple: tuple[int, int, int], learning_rate: float, l2: float) -> MfModel:
    """One SGD step on a single (user, positive, negative) triple of matrix indices; updates in place."""
    u, i, j = triple
    _, _, grads = bpr_loss_and_grad(model, [u], [i], [j], l2)
    apply_grads(model, grads, learning_rate, where=f" at triple {triple}")
    return model


def sample_negatives(train: InteractionMatrix, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform negatives per user, rejecting the user's train positives."""
    n_items = train.shape[1]
    neg = rng.integers(0, n_items, size=len(users))
    pending = np.arange(len(users))
    while len(pending):
        hit = train.is_positive(users[pending], neg[pending])
        pending = pending[hit]
        if len(pending):
            neg[pending] = rng.integers(0, n_items, size=len(pending))
    return neg


def epoch_batches(train: InteractionMatrix, config: MfConfig, rng: np.random.Generator) -> Iterator[tuple]:
    """Shuffle positives, draw negatives, and yield (users, positives, negatives) batches."""
    users, items = train.pairs()
    full = np.diff(train.matrix.indptr) >= train.shape[1]
    if full.any():
        _logger.warning("skipping %d users whose every item is a positive", int(full.sum()))
        keep = ~full[users]
        users, items = users[keep], items[keep]
    order = rng.permutation(len(users))
    users = np.repeat(users[order], config.negatives_per_positive)
    items = np.repeat(items[order], config.negatives_per_positive)
    negs = sample_negatives(train, users, rng)
    for start in range(0, len(users), config.batch_size):
        sl = slice(start, start + config.batch_size)
        yield users[sl], items[sl], negs[sl]


def bpr_epoch(model: MfModel, train: InteractionMatrix, config: MfConfig, rng: np.random.Generator) -> float:
    """One pass of mini-batch SGD; the step is learning_rate per example (learning_rate * batch size on the mean)."""
    total, count = 0.0, 0
    for b, (u, i, j) in enumerate(epoch_batches(train, config, rng)):
        loss, _, grads = bpr_loss_and_grad(model, u, i, j, config.l2)
        apply_grads(model, grads, config.learning_rate * len(u), where=f" in batch {b}")
        total += loss * len(u)
        count += len(u)
    return total / max(count, 1)


def fit_mf_bpr(train: InteractionMatrix, config: MfConfig | None = None) -> MfModel:
    config = config or MfConfig()
    rng = np.random.default_rng(config.seed)
    model = init_mf(train, config, rng)
    for epoch in range(config.epochs):
        loss = bpr_epoch(model, train, config, rng)
        _logger.debug("epoch %d bpr loss %.5f", epoch, loss)
    model.extra["config"] = asdict(config)
    return model


# --- ranking -------------------------------------------------------------------


def _exclusion_mask(model, users: np.ndarray, exclusions: Sequence) -> np.ndarray:
    mask = np.zeros((len(users), len(model.item_ids)), dtype=bool)
    index = getattr(model, "_item_index", None)
    if index is None:
        index = {i: n for n, i in enumerate(model.item_ids)}
    for r, excl in enumerate(exclusions):
        cols = [index[i] for i in excl if i in index]
        mask[r, cols] = True
    return mask


def rank_users(model, user_ids: Sequence, exclusions: Mapping, k: int | None = None, chunk: int = 512) -> list[RankedList]:
    """Rank every non-excluded item per user by descending score, ties by ascending item id."""
    if k is not None and k < 1:
        raise ModelError("k must be >= 1")
    index = {u: n for n, u in enumerate(model.user_ids)}
    missing = [u for u in user_ids if u not in index]
    if missing:
        raise ModelError(f"unknown user {missing[0]!r}")
    item_ids = model.item_ids
    out = []
    for start in range(0, len(user_ids), chunk):
        block = list(user_ids[start:start + chunk])
        users = np.array([index[u] for u in block], dtype=np.int64)
        scores = model.score_matrix(users)
        mask = _exclusion_mask(model, users, [exclusions.get(u, ()) for u in block])
        n_cand = (~mask).sum(axis=1)
        scores = np.where(mask, np.inf, -scores)
        order = np.argsort(scores, axis=1, kind="stable")
        for r, u in enumerate(block):
            if n_cand[r] == 0:
                raise ModelError(f"no candidate items for user {u!r}")
            depth = n_cand[r] if k is None else min(k, n_cand[r])
            out.append(RankedList(u, tuple(item_ids[c] for c in order[r, :depth])))
    return out


def top_k(model, user, k: int, exclusions: Iterable = ()) -> RankedList:
    return rank_users(model, [user], {user: set(exclusions)}, k=k)[0]


def full_ranking(model, user, exclusions: Iterable = ()) -> RankedList:
    return rank_users(model, [user], {user: set(exclusions)}, k=None)[0]
