"""Category-aware fairness regularization for BPR matrix factorization.

The regularizer is GBS(CC) computed on soft top-k memberships: per-user scores
are standardized over the user's candidate items, a threshold is placed halfway
between the k-th and (k+1)-th standardized scores, and membership is a sigmoid
of the distance to that threshold. Thresholds and the batch's maximum BPR loss
are held constant when differentiating; ``Frozen`` carries them so that a
finite-difference check can evaluate exactly the surrogate being optimized.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import metrics
from .ingest import FEMALE, MALE, CategoryMatrix
from .recommenders import (
    Grads,
    InteractionMatrix,
    MfConfig,
    MfModel,
    ModelError,
    apply_grads,
    bpr_loss_and_grad,
    epoch_batches,
    init_mf,
    rank_users,
)

_logger = logging.getLogger(__name__)


class Regularizer(str, enum.Enum):
    GENRE_GENDER = "GenreGender"
    BEYOND_PARITY = "BeyondParity"
    NONE = "None"


@dataclass
class EarlyStoppingConfig:
    monitor_k: int = 20
    min_delta: float = 0.0005
    patience: int = 10
    max_epochs: int = 50


@dataclass
class FairTrainConfig:
    alpha: float = 0.0
    k: int = 50
    temperature: float = 0.1
    sigmoid_center: float = 0.5
    sigmoid_scale: float = 0.1
    regularizer: Regularizer = Regularizer.GENRE_GENDER
    early_stopping: EarlyStoppingConfig = field(default_factory=EarlyStoppingConfig)
    mf: MfConfig = field(default_factory=MfConfig)

    def __post_init__(self):
        self.regularizer = Regularizer(self.regularizer)
        if isinstance(self.early_stopping, Mapping):
            self.early_stopping = EarlyStoppingConfig(**self.early_stopping)
        if isinstance(self.mf, Mapping):
            self.mf = MfConfig(**self.mf)
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.temperature <= 0 or self.sigmoid_scale <= 0:
            raise ValueError("temperature and sigmoid_scale must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def seed(self) -> int:
        return self.mf.seed

    @property
    def active(self) -> bool:
        return self.alpha > 0 and self.regularizer is not Regularizer.NONE

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["regularizer"] = self.regularizer.value
        return doc


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


# --- soft top-k ----------------------------------------------------------------


@dataclass
class SoftTopK:
    membership: np.ndarray
    threshold: float
    temperature: float
    standardized: np.ndarray
    hard: bool = False


def _thresholds(z: np.ndarray, mask: np.ndarray, k: int) -> np.ndarray:
    """Midpoint of the k-th and (k+1)-th largest candidate values per row."""
    vals = np.where(mask, z, -np.inf)
    part = -np.partition(-vals, [k - 1, k], axis=1)
    return 0.5 * (part[:, k - 1] + part[:, k])


def _soft_topk_rows(S: np.ndarray, mask: np.ndarray, k: int, tau: float, thresholds=None):
    """Batched soft top-k over candidate masks.

    Returns memberships, standardized scores, per-row std, thresholds, and a
    per-row flag for rows that fell back to hard membership.
    """
    n = mask.sum(axis=1)
    safe_n = np.maximum(n, 1)
    mean = np.where(mask, S, 0.0).sum(axis=1) / safe_n
    centered = np.where(mask, S - mean[:, None], 0.0)
    sd = np.sqrt((centered ** 2).sum(axis=1) / safe_n)
    sd = np.where(sd > 0, sd, 1.0)
    z = centered / sd[:, None]
    hard = n < k + 1
    if thresholds is None:
        thresholds = np.zeros(len(S))
        soft_rows = ~hard
        if soft_rows.any():
            thresholds[soft_rows] = _thresholds(z[soft_rows], mask[soft_rows], k)
    m = _sigmoid((z - thresholds[:, None]) / tau) * mask
    if hard.any():
        _logger.warning("%d users have fewer than k+1=%d candidates; using hard membership", int(hard.sum()), k + 1)
        m[hard] = mask[hard].astype(float)
    return m, z, sd, thresholds, hard


def soft_topk_membership(scores: Sequence[float], k: int, temperature: float = 0.1,
                         standardized: bool = False) -> SoftTopK:
    """Soft top-k memberships for one user's candidate scores.

    Pass ``standardized=True`` when the scores are already zero-mean, unit-variance
    values (or any values to be thresholded as given); the standardization step is skipped.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    S = np.asarray(scores, dtype=float)[None, :]
    mask = np.ones_like(S, dtype=bool)
    if not standardized:
        m, z, _, th, hard = _soft_topk_rows(S, mask, k, temperature)
        return SoftTopK(m[0], float(th[0]), temperature, z[0], bool(hard[0]))
    if S.shape[1] < k + 1:
        _logger.warning("fewer than k+1=%d candidates; using hard membership", k + 1)
        return SoftTopK(np.ones(S.shape[1]), math.nan, temperature, S[0], True)
    th = _thresholds(S, mask, k)
    return SoftTopK(_sigmoid((S[0] - th[0]) / temperature), float(th[0]), temperature, S[0])


def soft_category_coverage(memberships: Sequence[np.ndarray], frac: np.ndarray, c: int | None = None):
    """Membership-weighted category share per user, averaged over the group.

    ``memberships`` holds one full-catalog membership vector per user; ``frac``
    is the (items x categories) fraction matrix. Returns all categories, or
    column ``c`` when given.
    """
    M_ = np.atleast_2d(np.asarray(memberships, dtype=float))
    total = M_.sum(axis=1)
    if (total <= 0).any():
        raise ValueError("a user has zero total soft membership")
    per_user = (M_ @ frac) / total[:, None]
    out = np.array([math.fsum(per_user[:, j]) / len(per_user) for j in range(per_user.shape[1])])
    return out if c is None else float(out[c])


# --- regularizer terms -----------------------------------------------------------


@dataclass
class FairLoss:
    value: float
    grads: Grads
    thresholds: np.ndarray
    users: np.ndarray
    cc_male: np.ndarray | None = None
    cc_female: np.ndarray | None = None
    active: bool = True


def _zero_grads(model: MfModel) -> Grads:
    return {k: np.zeros_like(v) for k, v in model.params().items()}


def fairness_loss_genre_gender(
    model: MfModel,
    users: np.ndarray,
    is_female: np.ndarray,
    train: InteractionMatrix,
    frac: np.ndarray,
    k: int = 50,
    temperature: float = 0.1,
    thresholds: np.ndarray | None = None,
) -> FairLoss:
    """Sum over categories of |soft CC(male) - soft CC(female)| for the given users, with gradients.

    ``users`` are matrix row indices; candidates exclude each user's train items.
    """
    users = np.asarray(users, dtype=np.int64)
    is_female = np.asarray(is_female, dtype=bool)
    grads = _zero_grads(model)
    if is_female.all() or not is_female.any():
        return FairLoss(0.0, grads, np.zeros(len(users)), users, active=False)

    S = model.score_matrix(users)
    mask = np.asarray(train.matrix[users].todense()) == 0
    m, z, sd, th, hard = _soft_topk_rows(S, mask, k, temperature, thresholds)
    total = m.sum(axis=1)
    cc_user = (m @ frac) / total[:, None]
    groups = (~is_female, is_female)
    cc_m, cc_f = (cc_user[g].mean(axis=0) for g in groups)
    diff = cc_m - cc_f
    value = float(np.abs(diff).sum())

    sign = np.sign(diff)
    g_cc = np.where(is_female[:, None], -sign / is_female.sum(), sign / (~is_female).sum())
    g_m = (g_cc @ frac.T - (g_cc * cc_user).sum(axis=1, keepdims=True)) / total[:, None]
    g_z = g_m * m * (1.0 - m) / temperature * mask
    g_z[hard] = 0.0
    n = np.maximum(mask.sum(axis=1), 1)[:, None]
    mean_g = g_z.sum(axis=1, keepdims=True) / n
    mean_gz = (g_z * z).sum(axis=1, keepdims=True) / n
    g_s = (g_z - mask * (mean_g + z * mean_gz)) / sd[:, None]

    np.add.at(grads["user_factors"], users, g_s @ model.item_factors)
    grads["item_factors"] += g_s.T @ model.user_factors[users]
    grads["item_bias"] += g_s.sum(axis=0)
    return FairLoss(value, grads, th, users, cc_m, cc_f)


def modulate_fairness_loss(raw_gbs: float, max_batch_rec_loss: float, center: float = 0.5, scale: float = 0.1) -> float:
    """max_batch_rec_loss * sigmoid((raw_gbs - center) / scale)."""
    return float(max_batch_rec_loss * _sigmoid((raw_gbs - center) / scale))


def _modulation_slope(raw_gbs: float, max_batch_rec_loss: float, center: float, scale: float) -> float:
    s = float(_sigmoid((raw_gbs - center) / scale))
    return max_batch_rec_loss * s * (1.0 - s) / scale


def combined_loss(alpha: float, fair_term: float, rec_term: float) -> float:
    return alpha * fair_term + (1.0 - alpha) * rec_term


def _uval_arrays(items: np.ndarray, preds: np.ndarray, ratings: np.ndarray, in_group: np.ndarray):
    """U_val over items seen by both groups, and its gradient w.r.t. each prediction."""
    items = np.asarray(items)
    in_group = np.asarray(in_group, dtype=bool)
    err = np.asarray(preds, dtype=float) - np.asarray(ratings, dtype=float)
    uniq, inv = np.unique(items, return_inverse=True)
    n_g = np.bincount(inv, weights=in_group, minlength=len(uniq))
    n_o = np.bincount(inv, weights=~in_group, minlength=len(uniq))
    both = (n_g > 0) & (n_o > 0)
    n = int(both.sum())
    if n == 0:
        raise ValueError("no item is rated by both groups")
    e_g = np.bincount(inv, weights=err * in_group, minlength=len(uniq)) / np.maximum(n_g, 1)
    e_o = np.bincount(inv, weights=err * ~in_group, minlength=len(uniq)) / np.maximum(n_o, 1)
    gap = (e_g - e_o) * both
    value = math.fsum(np.abs(gap[both])) / n
    sign = np.sign(gap)[inv] * both[inv]
    grad = np.where(in_group, sign / np.maximum(n_g, 1)[inv], -sign / np.maximum(n_o, 1)[inv]) / n
    return value, grad


def beyond_parity_uval(predictions: Mapping, ratings: Mapping, groups: Mapping, disadvantaged: str = FEMALE) -> float:
    """Mean absolute between-group gap in average prediction error, per item.

    ``predictions`` and ``ratings`` map (user, item) to reals; ``groups`` maps user to gender.
    Items lacking either group's ratings are skipped.
    """
    keys = sorted(ratings, key=repr)
    items = np.array([repr(k[1]) for k in keys])
    y = np.array([predictions[k] for k in keys], dtype=float)
    r = np.array([ratings[k] for k in keys], dtype=float)
    g = np.array([groups[k[0]] == disadvantaged for k in keys])
    return _uval_arrays(items, y, r, g)[0]


def beyond_parity_loss(model: MfModel, users, items, ratings, is_female) -> FairLoss:
    users, items = np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64)
    grads = _zero_grads(model)
    if np.all(is_female) or not np.any(is_female):
        return FairLoss(0.0, grads, np.zeros(0), users, active=False)
    preds = model.score_pairs(users, items)
    try:
        value, g = _uval_arrays(items, preds, ratings, is_female)
    except ValueError:
        return FairLoss(0.0, grads, np.zeros(0), users, active=False)
    np.add.at(grads["user_factors"], users, g[:, None] * model.item_factors[items])
    np.add.at(grads["item_factors"], items, g[:, None] * model.user_factors[users])
    np.add.at(grads["item_bias"], items, g)
    return FairLoss(value, grads, np.zeros(0), users)


# --- one batch ------------------------------------------------------------------


@dataclass
class Frozen:
    """Quantities treated as constants when differentiating one batch objective."""

    thresholds: np.ndarray | None = None
    max_rec_loss: float | None = None


@dataclass
class BatchTerms:
    combined: float
    rec: float
    fair_raw: float
    fair_modulated: float
    grads: Grads
    frozen: Frozen
    fair_active: bool


def batch_objective(
    model: MfModel,
    batch: tuple[np.ndarray, np.ndarray, np.ndarray],
    train: InteractionMatrix,
    is_female: np.ndarray,
    frac: np.ndarray,
    config: FairTrainConfig,
    frozen: Frozen | None = None,
) -> BatchTerms:
    """Combined objective alpha * fair + (1 - alpha) * mean BPR for one batch, with gradients.

    ``is_female`` is indexed by matrix user row.
    """
    u, i, j = batch
    rec, losses, g_rec = bpr_loss_and_grad(model, u, i, j, config.mf.l2)
    if not config.active:
        return BatchTerms(rec, rec, 0.0, 0.0, g_rec, Frozen(), False)

    frozen = frozen or Frozen()
    a = config.alpha
    if config.regularizer is Regularizer.GENRE_GENDER:
        batch_users = np.unique(u)
        fl = fairness_loss_genre_gender(
            model, batch_users, is_female[batch_users], train, frac, config.k, config.temperature, frozen.thresholds
        )
        max_loss = float(losses.max()) if frozen.max_rec_loss is None else frozen.max_rec_loss
        fair_mod = modulate_fairness_loss(fl.value, max_loss, config.sigmoid_center, config.sigmoid_scale)
        slope = _modulation_slope(fl.value, max_loss, config.sigmoid_center, config.sigmoid_scale)
        new_frozen = Frozen(fl.thresholds, max_loss)
    else:
        ratings = np.asarray(train.ratings[u, i]).ravel()
        fl = beyond_parity_loss(model, u, i, ratings, is_female[u])
        fair_mod, slope = fl.value, 1.0
        new_frozen = Frozen(None, None)

    grads = {name: (1.0 - a) * g_rec[name] + (a * slope) * fl.grads[name] for name in g_rec}
    return BatchTerms(combined_loss(a, fair_mod, rec), rec, fl.value, fair_mod, grads, new_frozen, fl.active)


# --- early stopping and the training loop ----------------------------------------


class EarlyStopping:
    """Track the best monitored value; stop after ``patience`` epochs without a gain above ``min_delta``."""

    def __init__(self, min_delta: float, patience: int):
        self.min_delta = min_delta
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.wait = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; returns True when this epoch is the new best."""
        if value > self.best + self.min_delta:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


@dataclass
class EpochLog:
    epoch: int
    rec_loss: float
    fair_loss_raw: float
    fair_loss_modulated: float
    combined_loss: float
    val_ndcg20: float
    inactive_batches: int = 0


@dataclass
class TrainingLog:
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "rec_loss", "fair_loss_raw", "fair_loss_modulated", "combined_loss", "val_ndcg20"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.rec_loss), repr(e.fair_loss_raw), repr(e.fair_loss_modulated),
                        repr(e.combined_loss), repr(e.val_ndcg20)])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs], "best_epoch": self.best_epoch,
                "stopped_early": self.stopped_early}


def validation_ndcg(model: MfModel, train: InteractionMatrix, validation: Mapping, k: int) -> float:
    users = [u for u in model.user_ids if validation.get(u)]
    if not users:
        raise ModelError("no user has validation items")
    exclusions = {u: set(train.item_ids[c] for c in train.positives(train.user_index[u])) for u in users}
    lists = rank_users(model, users, exclusions, k=k)
    return metrics.ndcg_at_k(lists, validation, k)


def train_fair(
    train: InteractionMatrix,
    validation: Mapping,
    genders: Mapping,
    cm: CategoryMatrix,
    config: FairTrainConfig,
    evaluate: Callable[[MfModel, int], float] | None = None,
) -> tuple[MfModel, TrainingLog]:
    """Train MF-BPR with the configured fairness term; return the best-validation checkpoint.

    ``validation`` maps user id to validation item ids; ``genders`` maps user id to "M"/"F".
    ``evaluate(model, epoch)`` overrides the validation NDCG@monitor_k monitor.
    """
    if list(cm.item_ids) != list(train.item_ids):
        raise ModelError("category matrix and interaction matrix disagree on item order")
    is_female = np.array([genders[u] == FEMALE for u in train.user_ids])
    if not all(genders[u] in (MALE, FEMALE) for u in train.user_ids):
        raise ModelError("every trained user needs a known gender")
    es_cfg = config.early_stopping
    if evaluate is None:
        evaluate = lambda m, _epoch: validation_ndcg(m, train, validation, es_cfg.monitor_k)  # noqa: E731

    rng = np.random.default_rng(config.mf.seed)
    model = init_mf(train, config.mf, rng)
    stopper = EarlyStopping(es_cfg.min_delta, es_cfg.patience)
    log = TrainingLog()
    best = model.copy()
    frac = cm.frac

    for epoch in range(es_cfg.max_epochs):
        sums = np.zeros(4)
        count = inactive = 0
        for b, batch in enumerate(epoch_batches(train, config.mf, rng)):
            terms = batch_objective(model, batch, train, is_female, frac, config)
            if not math.isfinite(terms.combined):
                raise ModelError(f"non-finite loss at epoch {epoch}, batch {b}")
            if config.active and not terms.fair_active:
                inactive += 1
            apply_grads(model, terms.grads, config.mf.learning_rate * len(batch[0]), where=f" at epoch {epoch}, batch {b}")
            sums += [terms.rec, terms.fair_raw, terms.fair_modulated, terms.combined]
            count += 1
        means = sums / max(count, 1)
        score = float(evaluate(model, epoch))
        log.epochs.append(EpochLog(epoch, *map(float, means), score, inactive))
        if stopper.update(epoch, score):
            best = model.copy()
        _logger.info("epoch %d rec %.4f fair %.4f val_ndcg %.4f", epoch, means[0], means[1], score)
        if stopper.should_stop:
            log.stopped_early = True
            break

    log.best_epoch = stopper.best_epoch
    best.extra["fair_config"] = config.to_json()
    best.extra["best_epoch"] = stopper.best_epoch
    return best, log


# --- gradient verification --------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[str, tuple]
    analytic: float
    numeric: float
    checked: int


def gradient_check(
    params: Mapping[str, np.ndarray],
    loss_fn: Callable[[], tuple[float, Grads]],
    epsilon: float = 1e-5,
    floor: float = 1e-7,
) -> GradCheckResult:
    """Compare analytic gradients to central differences for every parameter entry.

    ``loss_fn`` reads the arrays in ``params`` (perturbed in place) and returns
    (loss, grads). Relative error is |a - n| / max(|a|, |n|, floor).
    """
    _, analytic = loss_fn()
    analytic = {k: np.array(v, copy=True) for k, v in analytic.items()}
    worst = (0.0, ("", ()), 0.0, 0.0)
    checked = 0
    for name, arr in params.items():
        g = analytic.get(name, np.zeros_like(arr))
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + epsilon
            up = loss_fn()[0]
            arr[idx] = old - epsilon
            down = loss_fn()[0]
            arr[idx] = old
            num = (up - down) / (2 * epsilon)
            a = float(g[idx])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            if err > worst[0]:
                worst = (err, (name, idx), a, num)
    return GradCheckResult(worst[0], worst[1], worst[2], worst[3], checked)
