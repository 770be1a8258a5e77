import random

from genrefair.ingest import Dataset, Interaction, build_category_matrix
from genrefair.metrics import RankedList


def make_cm(item_cats, vocab=None):
    vocab = vocab or sorted({c for cs in item_cats.values() for c in cs})
    ds = Dataset(
        users={"_": "M"},
        items={i: frozenset(cs) for i, cs in item_cats.items()},
        interactions=[Interaction("_", i, 1.0) for i in item_cats],
        category_vocabulary=list(vocab),
    )
    return build_category_matrix(ds)


def lists_of(*rows):
    return [RankedList(f"u{n}", tuple(items)) for n, items in enumerate(rows)]


def random_instance(rng: random.Random, max_users=10, max_items=20, max_cats=4, max_k=5, categorized=False):
    """A random catalog plus per-user top-K lists and full rankings."""
    n_items = rng.randint(2, max_items)
    n_cats = rng.randint(1, max_cats)
    vocab = [f"c{n}" for n in range(n_cats)]
    item_cats = {}
    for i in range(n_items):
        lo = 1 if categorized else 0
        item_cats[f"i{i:02d}"] = set(rng.sample(vocab, rng.randint(lo, n_cats)))
    items = sorted(item_cats)
    n_users = rng.randint(1, max_users)
    k = rng.randint(1, min(max_k, n_items))
    full = [rng.sample(items, n_items) for _ in range(n_users)]
    top = [f[:k] for f in full]
    return item_cats, vocab, top, full
