"""Category-aware gender-bias metrics, Gender Balance Score, and top-k accuracy metrics.

All category metrics share one representation: each ranked list is turned into
a (users x positions x categories) array of fractional category weights, so the
per-position terms of every metric are plain array arithmetic. Averages over
users use ``math.fsum`` so reductions do not depend on summation order.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .ingest import CategoryMatrix

_logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1


class MetricError(ValueError):
    pass


class UndefinedMetric(MetricError):
    """The metric has no value for this category (zero catalog mass)."""


class MetricId(str, enum.Enum):
    CC = "CC"
    RCR = "RCR"
    CMAP = "CMAP"
    CDCG = "CDCG"
    CMRR = "CMRR"
    CRP = "CRP"


@dataclass(frozen=True)
class RankedList:
    user_id: Hashable
    items: tuple

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if len(set(self.items)) != len(self.items):
            raise MetricError(f"ranked list for user {self.user_id!r} contains duplicate items")

    def __len__(self):
        return len(self.items)


def check_exclusions(lists: Iterable[RankedList], excluded: Mapping) -> None:
    """Assert no list recommends an item from the user's excluded set."""
    for lst in lists:
        bad = excluded.get(lst.user_id, set()).intersection(lst.items)
        if bad:
            raise MetricError(f"user {lst.user_id!r} was recommended excluded items {sorted(bad, key=repr)[:5]}")


def _position_fracs(lists: Sequence[RankedList], cm: CategoryMatrix, depth: int | None = None):
    """Return (fracs[U, K, C], lengths[U]) with zero padding beyond each list's end."""
    lists = list(lists)
    if not lists:
        raise MetricError("no ranked lists given")
    lengths = np.array([len(l) if depth is None else min(len(l), depth) for l in lists], dtype=int)
    if depth is None and (lengths == 0).any():
        empty = lists[int(np.argmin(lengths))].user_id
        raise MetricError(f"empty ranked list for user {empty!r}")
    width = max(int(lengths.max()), 1)
    idx = np.full((len(lists), width), len(cm.item_ids), dtype=int)
    for u, lst in enumerate(lists):
        try:
            idx[u, : lengths[u]] = [cm.item_index[i] for i in lst.items[: lengths[u]]]
        except KeyError as exc:
            raise MetricError(f"user {lst.user_id!r}: item {exc.args[0]!r} not in category matrix") from None
    padded = np.vstack([cm.frac, np.zeros((1, cm.frac.shape[1]))])
    return padded[idx], lengths


def _user_mean(values: np.ndarray) -> np.ndarray:
    """Mean over axis 0 with compensated summation, per column."""
    n = values.shape[0]
    return np.array([math.fsum(values[:, c]) / n for c in range(values.shape[1])])


def _ranks(width: int) -> np.ndarray:
    return np.arange(1, width + 1, dtype=float)


def _masses(cm: CategoryMatrix) -> np.ndarray:
    return np.asarray(cm.catalog_mass, dtype=float)


def _floor_mass(mass: np.ndarray) -> np.ndarray:
    # guard against R_c = 2.9999999999 from floating accumulation
    return np.floor(mass + 1e-9).astype(int)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.full(num.shape, np.nan)
    np.divide(num, den, out=out, where=den > 0)
    return out


def cc_all(lists, cm) -> np.ndarray:
    F, lengths = _position_fracs(lists, cm)
    return _user_mean(F.sum(axis=1) / lengths[:, None])


def rcr_all(lists, cm) -> np.ndarray:
    F, _ = _position_fracs(lists, cm)
    return _safe_div(_user_mean(F.sum(axis=1)), _masses(cm))


def cmap_all(lists, cm) -> np.ndarray:
    F, _ = _position_fracs(lists, cm)
    precision = np.cumsum(F, axis=1) / _ranks(F.shape[1])[None, :, None]
    return _safe_div(_user_mean((precision * F).sum(axis=1)), _masses(cm))


def cdcg_all(lists, cm) -> np.ndarray:
    F, lengths = _position_fracs(lists, cm)
    disc = np.log2(_ranks(F.shape[1]) + 1.0)
    return _user_mean((F / disc[None, :, None]).sum(axis=1) / lengths[:, None])


def cmrr_all(lists, cm) -> np.ndarray:
    F, lengths = _position_fracs(lists, cm)
    return _user_mean((F / _ranks(F.shape[1])[None, :, None]).sum(axis=1) / lengths[:, None])


def crp_all(full_rankings, cm) -> np.ndarray:
    """R-precision at depth floor(R_c); short rankings keep the floor(R_c) denominator."""
    cutoff = _floor_mass(_masses(cm))
    depth = max(int(cutoff.max()), 1)
    F, _ = _position_fracs(full_rankings, cm, depth=depth)
    positions = _ranks(F.shape[1])[None, :, None]
    inside = positions <= cutoff[None, None, :]
    return _safe_div(_user_mean((F * inside).sum(axis=1)), cutoff.astype(float))


_ALL = {
    MetricId.CC: cc_all,
    MetricId.RCR: rcr_all,
    MetricId.CMAP: cmap_all,
    MetricId.CDCG: cdcg_all,
    MetricId.CMRR: cmrr_all,
    MetricId.CRP: crp_all,
}


def metric_all(metric: MetricId | str, lists, cm) -> np.ndarray:
    """Evaluate one metric for every category; NaN marks undefined categories."""
    return _ALL[MetricId(metric)](lists, cm)


def _single(metric: MetricId, lists, cm, c: str) -> float:
    col = cm.category_index(c)
    value = metric_all(metric, lists, cm)[col]
    if math.isnan(value):
        raise UndefinedMetric(f"{metric.value} undefined for category {c!r} (catalog mass {cm.mass(c):g})")
    return float(value)


def category_coverage(lists, cm, c) -> float:
    return _single(MetricId.CC, lists, cm, c)


def relative_category_representation(lists, cm, c) -> float:
    return _single(MetricId.RCR, lists, cm, c)


def cmap(lists, cm, c) -> float:
    return _single(MetricId.CMAP, lists, cm, c)


def cdcg(lists, cm, c) -> float:
    return _single(MetricId.CDCG, lists, cm, c)


def cmrr(lists, cm, c) -> float:
    return _single(MetricId.CMRR, lists, cm, c)


def crp(full_rankings, cm, c) -> float:
    return _single(MetricId.CRP, full_rankings, cm, c)


@dataclass
class MetricCell:
    metric: str
    category: str
    male: float | None
    female: float | None
    delta: float | None

    @property
    def undefined(self) -> bool:
        return self.delta is None


@dataclass
class GbsResult:
    metric: str
    cells: list[MetricCell]
    gbs: float
    undefined: list[str]


def gbs(metric: MetricId | str, lists_male, lists_female, cm: CategoryMatrix, categories: Sequence[str] | None = None) -> GbsResult:
    """Per-category |M(c, male) - M(c, female)| and their sum over defined categories.

    For CRP, pass full (deeper than K) rankings as the list collections.
    """
    metric = MetricId(metric)
    for name, group in (("male", lists_male), ("female", lists_female)):
        if not list(group):
            raise MetricError(f"{name} group has no users")
    cats = list(cm.categories) if categories is None else list(categories)
    vm = metric_all(metric, lists_male, cm)
    vf = metric_all(metric, lists_female, cm)
    cells, deltas, undefined = [], [], []
    for c in cats:
        col = cm.category_index(c)
        if math.isnan(vm[col]) or math.isnan(vf[col]):
            undefined.append(c)
            cells.append(MetricCell(metric.value, c, None, None, None))
            continue
        d = abs(float(vm[col]) - float(vf[col]))
        deltas.append(d)
        cells.append(MetricCell(metric.value, c, float(vm[col]), float(vf[col]), d))
    if undefined:
        _logger.warning("%s undefined for categories %s; excluded from GBS", metric.value, undefined)
    return GbsResult(metric.value, cells, math.fsum(deltas), undefined)


# --- accuracy metrics -------------------------------------------------------


def _scored_users(lists, test_interactions: Mapping):
    rows = [(lst, test_interactions.get(lst.user_id, set())) for lst in lists]
    rows = [(lst, set(t)) for lst, t in rows if t]
    if not rows:
        raise MetricError("no user has test items")
    return rows


def hit_ratio_at_k(lists, test_interactions: Mapping, k: int) -> float:
    rows = _scored_users(lists, test_interactions)
    return math.fsum(1.0 if t.intersection(lst.items[:k]) else 0.0 for lst, t in rows) / len(rows)


def _ndcg_user(items: Sequence, test: set, k: int) -> float:
    dcg = math.fsum(1.0 / math.log2(j + 2) for j, v in enumerate(items[:k]) if v in test)
    idcg = math.fsum(1.0 / math.log2(j + 2) for j in range(min(k, len(test))))
    return dcg / idcg


def ndcg_at_k(lists, test_interactions: Mapping, k: int) -> float:
    rows = _scored_users(lists, test_interactions)
    return math.fsum(_ndcg_user(lst.items, t, k) for lst, t in rows) / len(rows)


def precision_at_k(lists, test_interactions: Mapping, k: int) -> float:
    rows = _scored_users(lists, test_interactions)
    return math.fsum(len(t.intersection(lst.items[:k])) / k for lst, t in rows) / len(rows)


# --- report -----------------------------------------------------------------


@dataclass
class FairnessReport:
    """Per-(metric, category) group values, deltas and per-metric GBS."""

    results: dict[str, GbsResult]
    metadata: dict = field(default_factory=dict)

    @property
    def gbs(self) -> dict[str, float]:
        return {m: r.gbs for m, r in self.results.items()}

    def cell(self, metric: str, category: str) -> MetricCell:
        for cell in self.results[MetricId(metric).value].cells:
            if cell.category == category:
                return cell
        raise KeyError((metric, category))

    def to_json(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "metadata": dict(self.metadata),
            "cells": [
                {
                    "metric": c.metric,
                    "category": c.category,
                    "male": c.male,
                    "female": c.female,
                    "delta": c.delta,
                    "undefined": c.undefined,
                }
                for r in self.results.values()
                for c in r.cells
            ],
            "gbs": {m: r.gbs for m, r in self.results.items()},
            "undefined": {m: r.undefined for m, r in self.results.items()},
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "FairnessReport":
        if doc.get("format_version") != REPORT_FORMAT_VERSION:
            raise MetricError(f"unsupported report format version {doc.get('format_version')!r}")
        results = {}
        for m, value in doc["gbs"].items():
            cells = [
                MetricCell(c["metric"], c["category"], c["male"], c["female"], c["delta"])
                for c in doc["cells"]
                if c["metric"] == m
            ]
            results[m] = GbsResult(m, cells, value, list(doc["undefined"].get(m, [])))
        return cls(results=results, metadata=dict(doc.get("metadata", {})))

    def cells_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "category", "male", "female", "delta"])
        for r in self.results.values():
            for c in r.cells:
                w.writerow([c.metric, c.category] + ["undefined" if v is None else repr(v) for v in (c.male, c.female, c.delta)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "gbs"])
        for m, r in self.results.items():
            w.writerow([m, repr(r.gbs)])
        return buf.getvalue()


def fairness_report(
    top_male,
    top_female,
    cm: CategoryMatrix,
    full_male=None,
    full_female=None,
    categories: Sequence[str] | None = None,
    metadata: Mapping | None = None,
) -> FairnessReport:
    """All six metrics for both groups; CRP uses the full rankings when given."""
    results = {}
    for m in MetricId:
        male, female = (full_male, full_female) if m is MetricId.CRP and full_male is not None else (top_male, top_female)
        results[m.value] = gbs(m, male, female, cm, categories)
    return FairnessReport(results=results, metadata=dict(metadata or {}))
