"""Synthetic gender-stereotyped interaction data for fast directional checks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .ingest import FEMALE, MALE, Dataset, Interaction


@dataclass
class StereotypedParams:
    n_users: int = 200
    n_items: int = 300
    n_categories: int = 2
    interactions_per_user: int = 30
    female_share: float = 0.5
    flip_strength: float = 0.8
    multi_category_share: float = 0.1
    seed: int = 0


def stereotyped_dataset(params: StereotypedParams | None = None, **overrides) -> Dataset:
    """Users of each gender favour opposite halves of the category vocabulary.

    With ``flip_strength`` s, a male user draws from the first half of the
    categories with probability s and a female user from the second half with
    probability s. Item popularity follows a Zipf-like profile so the data is
    not uniform. Ratings are 1-5, higher for preferred-category items.
    """
    p = params or StereotypedParams()
    if overrides:
        p = StereotypedParams(**{**asdict(p), **overrides})
    if p.n_categories < 2:
        raise ValueError("need at least two categories")
    rng = np.random.default_rng(p.seed)
    vocab = [f"cat{c}" for c in range(p.n_categories)]
    half = p.n_categories // 2

    primary = rng.integers(0, p.n_categories, size=p.n_items)
    items = {}
    for v in range(p.n_items):
        cats = {vocab[primary[v]]}
        if rng.random() < p.multi_category_share:
            cats.add(vocab[rng.integers(0, p.n_categories)])
        items[f"i{v:04d}"] = frozenset(cats)
    item_ids = list(items)
    popularity = 1.0 / np.arange(1, p.n_items + 1) ** 0.6
    popularity = popularity[rng.permutation(p.n_items)]
    first_half = primary < half

    users = {}
    interactions = []
    n_female = int(round(p.female_share * p.n_users))
    for n in range(p.n_users):
        uid = f"u{n:04d}"
        gender = FEMALE if n < n_female else MALE
        users[uid] = gender
        liked = first_half if gender == MALE else ~first_half
        pref = np.where(liked, p.flip_strength, 1.0 - p.flip_strength)
        w = pref * popularity
        k = min(p.interactions_per_user, p.n_items)
        chosen = rng.choice(p.n_items, size=k, replace=False, p=w / w.sum())
        for v in sorted(chosen):
            rating = float(rng.integers(3, 6) if liked[v] else rng.integers(1, 4))
            interactions.append(Interaction(uid, item_ids[v], rating, None))
    return Dataset(users=users, items=items, interactions=interactions, category_vocabulary=vocab, name="synthetic")
