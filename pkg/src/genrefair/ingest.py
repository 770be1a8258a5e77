"""Dataset ingestion: parsers, filtering, user-based splitting, category matrix."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

_logger = logging.getLogger(__name__)

MALE = "M"
FEMALE = "F"
UNKNOWN = "unknown"
GENDERS = (MALE, FEMALE)

FORMAT_VERSION = 1

# u.item carries 19 genre flags; the leading "unknown" flag is discarded.
ML100K_GENRES = (
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Thriller", "War", "Western",
)


class IngestError(ValueError):
    """Raised for missing files, malformed rows and integrity violations."""


@dataclass(frozen=True)
class Interaction:
    user_id: Hashable
    item_id: Hashable
    rating: float
    timestamp: int | None = None


@dataclass
class Dataset:
    """Users, items, interactions and the category vocabulary.

    ``users`` maps user id to gender (``"M"``, ``"F"``, or ``"unknown"`` before
    filtering); ``items`` maps item id to its frozenset of category names.
    """

    users: dict
    items: dict
    interactions: list[Interaction]
    category_vocabulary: list[str]
    name: str = "dataset"

    def __post_init__(self):
        seen = set()
        for it in self.interactions:
            key = (it.user_id, it.item_id)
            if key in seen:
                raise IngestError(f"duplicate interaction for user {it.user_id!r}, item {it.item_id!r}")
            seen.add(key)

    @property
    def n_interactions(self) -> int:
        return len(self.interactions)

    def interactions_by_user(self) -> dict:
        out: dict = {}
        for it in self.interactions:
            out.setdefault(it.user_id, []).append(it)
        return out

    def users_of(self, gender: str) -> list:
        return [u for u, g in self.users.items() if g == gender]

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "Dataset",
            "name": self.name,
            "category_vocabulary": list(self.category_vocabulary),
            "users": [[u, g] for u, g in self.users.items()],
            "items": [[i, sorted(c)] for i, c in self.items.items()],
            "interactions": [_interaction_row(it) for it in self.interactions],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "Dataset":
        _check_version(doc, "Dataset")
        return cls(
            users={u: g for u, g in doc["users"]},
            items={i: frozenset(c) for i, c in doc["items"]},
            interactions=[Interaction(*row) for row in doc["interactions"]],
            category_vocabulary=list(doc["category_vocabulary"]),
            name=doc.get("name", "dataset"),
        )


@dataclass
class SplitDataset:
    dataset: Dataset
    train: list[Interaction]
    validation: list[Interaction]
    test: list[Interaction]
    seed: int
    ratios: tuple = (0.7, 0.1, 0.2)

    def items_of(self, part: str) -> dict:
        """Map user id to the set of item ids in one split part."""
        out: dict = {}
        for it in getattr(self, part):
            out.setdefault(it.user_id, set()).add(it.item_id)
        return out

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "SplitDataset",
            "seed": self.seed,
            "ratios": list(self.ratios),
            "dataset": self.dataset.to_json(),
            "train": [_interaction_row(it) for it in self.train],
            "validation": [_interaction_row(it) for it in self.validation],
            "test": [_interaction_row(it) for it in self.test],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "SplitDataset":
        _check_version(doc, "SplitDataset")
        return cls(
            dataset=Dataset.from_json(doc["dataset"]),
            train=[Interaction(*r) for r in doc["train"]],
            validation=[Interaction(*r) for r in doc["validation"]],
            test=[Interaction(*r) for r in doc["test"]],
            seed=doc["seed"],
            ratios=tuple(doc["ratios"]),
        )


def _interaction_row(it: Interaction) -> list:
    return [it.user_id, it.item_id, it.rating, it.timestamp]


def _check_version(doc: Mapping, kind: str) -> None:
    if doc.get("kind") != kind:
        raise IngestError(f"expected a {kind} document, got {doc.get('kind')!r}")
    if doc.get("format_version") != FORMAT_VERSION:
        raise IngestError(f"unsupported {kind} format version {doc.get('format_version')!r}")


def save_json(obj, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj.to_json(), fh, sort_keys=True)


def _require(path: Path) -> Path:
    if not path.is_file():
        raise IngestError(f"missing dataset file: {path}")
    return path


def _read_lines(path: Path, encoding: str = "latin-1") -> list[str]:
    with open(_require(path), encoding=encoding, newline="") as fh:
        return [line.rstrip("\r\n") for line in fh]


def _parse_rating_rows(path: Path, sep: str) -> list[Interaction]:
    rows = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split(sep)
        if len(parts) != 4:
            raise IngestError(f"{path.name}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            rating = float(parts[2])
            rows.append(Interaction(int(parts[0]), int(parts[1]), rating, int(parts[3])))
        except ValueError as exc:
            raise IngestError(f"{path.name}:{lineno}: malformed row ({exc})") from None
        if not math.isfinite(rating):
            raise IngestError(f"{path.name}:{lineno}: non-finite rating")
    if not rows:
        raise IngestError(f"{path.name}: no interactions")
    return rows


def parse_ml100k(data_dir: str | Path) -> Dataset:
    """Parse a MovieLens-100K directory (``u.data``, ``u.item``, ``u.user``)."""
    data_dir = Path(data_dir)
    for name in ("u.data", "u.item", "u.user"):
        _require(data_dir / name)

    users = {}
    for lineno, line in enumerate(_read_lines(data_dir / "u.user"), start=1):
        if not line.strip():
            continue
        parts = line.split("|")
        if len(parts) != 5:
            raise IngestError(f"u.user:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            uid = int(parts[0])
        except ValueError:
            raise IngestError(f"u.user:{lineno}: malformed user id {parts[0]!r}") from None
        users[uid] = parts[2] if parts[2] in GENDERS else UNKNOWN

    vocab = list(ML100K_GENRES[1:])
    items = {}
    for lineno, line in enumerate(_read_lines(data_dir / "u.item"), start=1):
        if not line.strip():
            continue
        parts = line.split("|")
        # titles never contain "|", so the row has exactly 5 + 19 fields
        if len(parts) != 24:
            raise IngestError(f"u.item:{lineno}: expected 24 fields, got {len(parts)}")
        flags = parts[-19:]
        if any(f not in ("0", "1") for f in flags):
            raise IngestError(f"u.item:{lineno}: genre flags must be 0/1")
        try:
            iid = int(parts[0])
        except ValueError:
            raise IngestError(f"u.item:{lineno}: malformed item id {parts[0]!r}") from None
        items[iid] = frozenset(g for g, f in zip(ML100K_GENRES[1:], flags[1:]) if f == "1")

    interactions = _parse_rating_rows(data_dir / "u.data", "\t")
    return _assemble(users, items, interactions, vocab, "ml-100k")


def parse_ml1m(data_dir: str | Path) -> Dataset:
    """Parse a MovieLens-1M directory (``ratings.dat``, ``movies.dat``, ``users.dat``)."""
    data_dir = Path(data_dir)
    for name in ("ratings.dat", "movies.dat", "users.dat"):
        _require(data_dir / name)

    users = {}
    for lineno, line in enumerate(_read_lines(data_dir / "users.dat"), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 5:
            raise IngestError(f"users.dat:{lineno}: expected 5 fields, got {len(parts)}")
        users[int(parts[0])] = parts[1] if parts[1] in GENDERS else UNKNOWN

    items = {}
    vocab: list[str] = []
    for lineno, line in enumerate(_read_lines(data_dir / "movies.dat"), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 3:
            raise IngestError(f"movies.dat:{lineno}: expected 3 fields, got {len(parts)}")
        genres = [g for g in parts[2].split("|") if g and g != "(no genres listed)"]
        for g in genres:
            if g not in vocab:
                vocab.append(g)
        items[int(parts[0])] = frozenset(genres)

    interactions = _parse_rating_rows(data_dir / "ratings.dat", "::")
    return _assemble(users, items, interactions, sorted(vocab), "ml-1m")


def _read_csv(path: Path, header: Sequence[str], optional: Sequence[str] = ()) -> list[dict]:
    with open(_require(path), encoding="utf-8-sig", newline="") as fh:
        reader = csv.DictReader(fh)
        fields = [f.strip() for f in (reader.fieldnames or [])]
        if fields != list(header) and fields != list(header) + list(optional):
            raise IngestError(f"{path.name}: header {fields} does not match {list(header) + list(optional)}")
        reader.fieldnames = fields
        return [(lineno, row) for lineno, row in enumerate(reader, start=2)]


def parse_generic_csv(interactions_path, users_path, categories_path, name: str = "csv") -> Dataset:
    """Parse three headered CSVs: interactions, user genders, item categories."""
    users = {}
    for lineno, row in _read_csv(Path(users_path), ("user_id", "gender")):
        g = row["gender"].strip()
        if g not in (MALE, FEMALE, UNKNOWN):
            raise IngestError(f"{Path(users_path).name}:{lineno}: gender {g!r} not in M/F/unknown")
        users[row["user_id"].strip()] = g

    cats: dict = {}
    vocab: list[str] = []
    for _, row in _read_csv(Path(categories_path), ("item_id", "category")):
        c = row["category"].strip()
        cats.setdefault(row["item_id"].strip(), set()).add(c)
        if c not in vocab:
            vocab.append(c)

    interactions = []
    p = Path(interactions_path)
    for lineno, row in _read_csv(p, ("user_id", "item_id", "rating"), ("timestamp",)):
        uid, iid = row["user_id"].strip(), row["item_id"].strip()
        if uid not in users:
            raise IngestError(f"{p.name}:{lineno}: user {uid!r} not present in users file")
        try:
            rating = float(row["rating"])
            ts = row.get("timestamp")
            ts = int(ts) if ts not in (None, "") else None
        except ValueError as exc:
            raise IngestError(f"{p.name}:{lineno}: malformed row ({exc})") from None
        if not math.isfinite(rating):
            raise IngestError(f"{p.name}:{lineno}: non-finite rating")
        interactions.append(Interaction(uid, iid, rating, ts))
    if not interactions:
        raise IngestError(f"{p.name}: no interactions")

    item_ids = dict.fromkeys(it.item_id for it in interactions)
    items = {i: frozenset(cats.get(i, ())) for i in sorted(set(item_ids) | set(cats))}
    return _assemble(users, items, interactions, sorted(vocab), name)


def _assemble(users, items, interactions, vocab, name) -> Dataset:
    for it in interactions:
        if it.user_id not in users:
            raise IngestError(f"interaction references unknown user {it.user_id!r}")
        if it.item_id not in items:
            raise IngestError(f"interaction references unknown item {it.item_id!r}")
    return Dataset(users=users, items=items, interactions=interactions, category_vocabulary=vocab, name=name)


def filter_dataset(raw: Dataset, min_interactions: int = 5) -> Dataset:
    """Drop unknown-gender users, then sparse items, then sparse users (one pass)."""
    users = {u: g for u, g in raw.users.items() if g in GENDERS}
    inter = [it for it in raw.interactions if it.user_id in users]

    item_counts: dict = {}
    for it in inter:
        item_counts[it.item_id] = item_counts.get(it.item_id, 0) + 1
    inter = [it for it in inter if item_counts[it.item_id] >= min_interactions]

    user_counts: dict = {}
    for it in inter:
        user_counts[it.user_id] = user_counts.get(it.user_id, 0) + 1
    inter = [it for it in inter if user_counts[it.user_id] >= min_interactions]

    if not inter:
        raise IngestError("dataset empty after filtering")
    kept_users = {it.user_id for it in inter}
    kept_items = {it.item_id for it in inter}
    return Dataset(
        users={u: g for u, g in users.items() if u in kept_users},
        items={i: c for i, c in raw.items.items() if i in kept_items},
        interactions=inter,
        category_vocabulary=list(raw.category_vocabulary),
        name=raw.name,
    )


def _user_rng(seed: int, user_id) -> np.random.Generator:
    # per-user streams make the split independent of user iteration order
    key = [ord(ch) for ch in repr(user_id)]
    return np.random.default_rng([seed & 0xFFFFFFFF, *key])


def split_dataset(ds: Dataset, ratios: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0) -> SplitDataset:
    """Per-user random split: ceil(r_train*n) train, ceil(r_val*n) validation, rest test.

    Users whose test share would be empty keep all their interactions in train.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise IngestError(f"split ratios must be three values summing to 1, got {tuple(ratios)}")
    train, val, test = [], [], []
    for uid, rows in ds.interactions_by_user().items():
        rows = sorted(rows, key=lambda it: (repr(it.item_id)))
        order = _user_rng(seed, uid).permutation(len(rows))
        rows = [rows[i] for i in order]
        n = len(rows)
        n_train = math.ceil(ratios[0] * n - 1e-9)
        n_val = min(math.ceil(ratios[1] * n - 1e-9), n - n_train)
        if n - n_train - n_val <= 0:
            train.extend(rows)
            continue
        train.extend(rows[:n_train])
        val.extend(rows[n_train:n_train + n_val])
        test.extend(rows[n_train + n_val:])
    return SplitDataset(dataset=ds, train=train, validation=val, test=test, seed=seed, ratios=tuple(ratios))


@dataclass
class CategoryMatrix:
    """Fractional item-category weights and per-category catalog mass.

    ``frac[j, c] = 1/|C_j|`` when item ``j`` carries category ``c``.
    Rows follow ``item_ids`` (ascending id order), columns follow ``categories``.
    """

    item_ids: list
    categories: list[str]
    frac: np.ndarray
    catalog_mass: np.ndarray
    item_index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.item_index:
            self.item_index = {i: n for n, i in enumerate(self.item_ids)}

    def category_index(self, c: str) -> int:
        try:
            return self.categories.index(c)
        except ValueError:
            raise KeyError(f"unknown category {c!r}") from None

    def frac_of(self, item_id, c: str) -> float:
        return float(self.frac[self.item_index[item_id], self.category_index(c)])

    def mass(self, c: str) -> float:
        return float(self.catalog_mass[self.category_index(c)])


def build_category_matrix(ds: Dataset) -> CategoryMatrix:
    item_ids = sorted(ds.items)
    cats = list(ds.category_vocabulary)
    col = {c: n for n, c in enumerate(cats)}
    frac = np.zeros((len(item_ids), len(cats)))
    for j, iid in enumerate(item_ids):
        cs = ds.items[iid]
        for c in cs:
            frac[j, col[c]] = 1.0 / len(cs)
    mass = np.array([math.fsum(frac[:, c]) for c in range(len(cats))])
    return CategoryMatrix(item_ids=item_ids, categories=cats, frac=frac, catalog_mass=mass)


def load_dataset(fmt: str, paths: Mapping, name: str | None = None) -> Dataset:
    """Dispatch to a parser by format name (``ml100k``, ``ml1m``, ``csv``)."""
    if fmt == "ml100k":
        return parse_ml100k(paths["data_dir"])
    if fmt == "ml1m":
        return parse_ml1m(paths["data_dir"])
    if fmt == "csv":
        return parse_generic_csv(paths["interactions"], paths["users"], paths["categories"], name=name or "csv")
    raise IngestError(f"unknown dataset format {fmt!r}")


def summarize(ds: Dataset) -> dict:
    return {
        "name": ds.name,
        "users": len(ds.users),
        "items": len(ds.items),
        "interactions": ds.n_interactions,
        "categories": len(ds.category_vocabulary),
        "male": len(ds.users_of(MALE)),
        "female": len(ds.users_of(FEMALE)),
    }


def iter_user_items(rows: Iterable[Interaction]) -> dict:
    out: dict = {}
    for it in rows:
        out.setdefault(it.user_id, set()).add(it.item_id)
    return out
