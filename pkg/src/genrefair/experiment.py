"""End-to-end experiment driver: ingest, split, train, evaluate, report."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__, metrics
from .fair_training import FairTrainConfig, Regularizer, TrainingLog, train_fair
from .ingest import (
    FEMALE,
    MALE,
    CategoryMatrix,
    Dataset,
    SplitDataset,
    build_category_matrix,
    filter_dataset,
    load_dataset,
    split_dataset,
    summarize,
)
from .metrics import FairnessReport, RankedList
from .recommenders import InteractionMatrix, MfConfig, fit_itemknn, fit_userknn, rank_users
from .synthetic import StereotypedParams, stereotyped_dataset

_logger = logging.getLogger(__name__)

BUNDLE_FORMAT_VERSION = 1
DATA_ROOT_ENV = "GENREFAIR_DATA_ROOT"
DEFAULT_ALPHAS = tuple(round(0.1 * n, 1) for n in range(7))


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# --- configuration ------------------------------------------------------------


@dataclass
class ModelSpec:
    name: str
    type: str
    hyperparameters: dict = field(default_factory=dict)
    fair: dict | None = None

    def __post_init__(self):
        if self.type not in ("UserKNN", "ItemKNN", "MF"):
            raise ValueError(f"unknown model type {self.type!r}")
        if self.fair is not None and self.type != "MF":
            raise ValueError(f"model {self.name!r}: fairness training applies to MF only")

    def fair_config(self, seed: int) -> FairTrainConfig:
        hp = dict(self.hyperparameters)
        es = hp.pop("early_stopping", {})
        mf = MfConfig(**{**hp, "seed": hp.get("seed", seed)})
        fair = dict(self.fair or {"alpha": 0.0, "regularizer": "None"})
        return FairTrainConfig(mf=mf, early_stopping=es, **fair)


@dataclass
class ExperimentConfig:
    dataset: dict
    models: list[ModelSpec]
    split: dict = field(default_factory=lambda: {"ratios": [0.7, 0.1, 0.2], "seed": 0})
    evaluation: dict = field(default_factory=dict)
    output: dict = field(default_factory=lambda: {"directory": "results"})

    def __post_init__(self):
        self.models = [m if isinstance(m, ModelSpec) else ModelSpec(**m) for m in self.models]
        if not self.models:
            raise ValueError("configure at least one model")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ValueError("model names must be unique")
        ev = {"k_list": [10, 20, 50], "K": 50, "categories": "all", "figure1": None, **self.evaluation}
        if any(int(k) < 1 for k in ev["k_list"]) or int(ev["K"]) < 1:
            raise ValueError("k values must be >= 1")
        self.evaluation = ev

    @property
    def seed(self) -> int:
        return int(self.split.get("seed", 0))

    @classmethod
    def from_json(cls, doc: Mapping) -> "ExperimentConfig":
        return cls(
            dataset=dict(doc["dataset"]),
            models=[ModelSpec(**m) for m in doc["models"]],
            split=dict(doc.get("split", {"ratios": [0.7, 0.1, 0.2], "seed": 0})),
            evaluation=dict(doc.get("evaluation", {})),
            output=dict(doc.get("output", {"directory": "results"})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "split": self.split,
            "models": [
                {"name": m.name, "type": m.type, "hyperparameters": m.hyperparameters, "fair": m.fair}
                for m in self.models
            ],
            "evaluation": self.evaluation,
            "output": self.output,
        }

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        cfg.split["seed"] = seed
        return cfg


def _resolve(path: str) -> str:
    """Relative dataset paths that do not exist are looked up under the data root."""
    p = Path(path)
    if p.is_absolute() or p.exists():
        return str(p)
    return str(Path(os.environ.get(DATA_ROOT_ENV, "data")) / p)


# --- data preparation -----------------------------------------------------------


@dataclass
class Prepared:
    dataset: Dataset
    split: SplitDataset
    cm: CategoryMatrix
    train: InteractionMatrix
    train_items: dict
    validation: dict
    test: dict
    exclusions: dict

    @property
    def test_users(self) -> list:
        return sorted(self.test, key=_sort_key)

    def test_users_of(self, gender: str) -> list:
        return [u for u in self.test_users if self.dataset.users[u] == gender]


def _sort_key(x):
    return (isinstance(x, str), x)


def load_configured_dataset(cfg: Mapping) -> Dataset:
    fmt = cfg.get("format")
    if fmt == "synthetic":
        return stereotyped_dataset(StereotypedParams(**cfg.get("params", {})))
    paths = {k: _resolve(v) for k, v in cfg.get("paths", {}).items()}
    return load_dataset(fmt, paths, cfg.get("name"))


def prepare(config: ExperimentConfig) -> Prepared:
    try:
        raw = load_configured_dataset(config.dataset)
    except Exception as exc:
        raise ExperimentError("ingest", str(exc)) from exc
    try:
        ds = filter_dataset(raw, int(config.dataset.get("min_interactions", 5)))
    except Exception as exc:
        raise ExperimentError("filter", str(exc)) from exc
    try:
        sp = split_dataset(ds, tuple(config.split.get("ratios", (0.7, 0.1, 0.2))), config.seed)
    except Exception as exc:
        raise ExperimentError("split", str(exc)) from exc
    return prepare_split(sp)


def prepare_split(sp: SplitDataset) -> Prepared:
    ds = sp.dataset
    cm = build_category_matrix(ds)
    train = InteractionMatrix.from_interactions(sp.train, sorted(ds.users, key=_sort_key), cm.item_ids)
    tr, va, te = sp.items_of("train"), sp.items_of("validation"), sp.items_of("test")
    excl = {u: tr.get(u, set()) | va.get(u, set()) for u in ds.users}
    return Prepared(ds, sp, cm, train, tr, va, te, excl)


# --- evaluation ---------------------------------------------------------------------


def fit_model(spec: ModelSpec, prep: Prepared, seed: int):
    """Returns (model, training log or None)."""
    if spec.type == "UserKNN":
        return fit_userknn(prep.train, int(spec.hyperparameters.get("neighborhood_size", 50))), None
    if spec.type == "ItemKNN":
        return fit_itemknn(prep.train, int(spec.hyperparameters.get("neighborhood_size", 50))), None
    return train_fair(prep.train, prep.validation, prep.dataset.users, prep.cm, spec.fair_config(seed))


def _categories(config: ExperimentConfig, cm: CategoryMatrix) -> list[str]:
    cats = config.evaluation.get("categories", "all")
    return list(cm.categories) if cats == "all" else list(cats)


def evaluate_model(model, prep: Prepared, config: ExperimentConfig, name: str) -> dict:
    """Fairness report at K (CRP at floor(R_c)) plus HitRatio/NDCG at every configured k."""
    ev = config.evaluation
    K = int(ev["K"])
    ks = sorted({int(k) for k in ev["k_list"]} | {K})
    users = prep.test_users
    depth = max(max(ks), int(np.floor(prep.cm.catalog_mass.max() + 1e-9)))
    deep = rank_users(model, users, prep.exclusions, k=depth)
    metrics.check_exclusions(deep, prep.exclusions)
    top = {l.user_id: RankedList(l.user_id, l.items[:K]) for l in deep}
    full = {l.user_id: l for l in deep}
    male, female = prep.test_users_of(MALE), prep.test_users_of(FEMALE)
    report = metrics.fairness_report(
        [top[u] for u in male], [top[u] for u in female], prep.cm,
        full_male=[full[u] for u in male], full_female=[full[u] for u in female],
        categories=_categories(config, prep.cm),
        metadata={"K": K, "dataset": prep.dataset.name, "model": name, "seed": config.seed,
                  "n_male": len(male), "n_female": len(female)},
    )
    performance = {}
    for k in ks:
        lists = [RankedList(l.user_id, l.items[:k]) for l in deep]
        performance[f"HitRatio@{k}"] = metrics.hit_ratio_at_k(lists, prep.test, k)
        performance[f"NDCG@{k}"] = metrics.ndcg_at_k(lists, prep.test, k)
    return {"fairness": report.to_json(), "performance": performance}


def balanced_group_sample(male_users: Sequence, female_users: Sequence, seed: int) -> tuple[list, list]:
    """Keep the smaller group whole; draw an equal-size uniform subset of the larger one."""
    male, female = sorted(male_users, key=_sort_key), sorted(female_users, key=_sort_key)
    if not male or not female:
        raise ValueError("both gender groups must be non-empty")
    rng = np.random.default_rng(seed)
    if len(male) > len(female):
        keep = np.sort(rng.choice(len(male), size=len(female), replace=False))
        male = [male[i] for i in keep]
    elif len(female) > len(male):
        keep = np.sort(rng.choice(len(female), size=len(male), replace=False))
        female = [female[i] for i in keep]
    return male, female


def genre_proportion_analysis(model, prep: Prepared, male: Sequence, female: Sequence,
                              categories: Sequence[str] | None = None, k: int = 10) -> dict:
    """Per-gender category coverage and Precision@k over top-k lists for balanced groups."""
    cats = list(categories or prep.cm.categories)
    out: dict[str, Any] = {"k": k, "n_per_group": len(male), "categories": cats}
    for label, users in (("male", male), ("female", female)):
        lists = rank_users(model, list(users), prep.exclusions, k=k)
        cc = metrics.cc_all(lists, prep.cm)
        out[f"cc_{label}"] = {c: float(cc[prep.cm.category_index(c)]) for c in cats}
        out[f"precision_{label}"] = metrics.precision_at_k(lists, prep.test, k)
    return out


def figure1_csv(fig: Mapping) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "category", "male", "female"])
    for c in fig["categories"]:
        w.writerow(["CC", c, repr(fig["cc_male"][c]), repr(fig["cc_female"][c])])
    w.writerow([f"precision@{fig['k']}", "", repr(fig["precision_male"]), repr(fig["precision_female"])])
    return buf.getvalue()


# --- bundle -------------------------------------------------------------------------


@dataclass
class ReportBundle:
    config: dict
    dataset: dict
    models: dict
    seed: int
    sweep: list | None = None
    timings: dict = field(default_factory=dict)
    version: str = __version__

    def to_json(self, include_timings: bool = True) -> dict:
        doc = {
            "format_version": BUNDLE_FORMAT_VERSION,
            "toolkit_version": self.version,
            "seed": self.seed,
            "config": self.config,
            "dataset": self.dataset,
            "models": self.models,
            "sweep": self.sweep,
        }
        if include_timings:
            doc["timings"] = self.timings
        return doc

    def dumps(self, include_timings: bool = True) -> str:
        return json.dumps(self.to_json(include_timings), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, doc: Mapping) -> "ReportBundle":
        if doc.get("format_version") != BUNDLE_FORMAT_VERSION:
            raise ValueError(f"unsupported bundle format version {doc.get('format_version')!r}")
        return cls(config=doc["config"], dataset=doc["dataset"], models=doc["models"], seed=doc["seed"],
                   sweep=doc.get("sweep"), timings=doc.get("timings", {}), version=doc["toolkit_version"])

    def fairness(self, model: str) -> FairnessReport:
        return FairnessReport.from_json(self.models[model]["fairness"])


def _run_model(spec: ModelSpec, prep: Prepared, config: ExperimentConfig, timings: dict) -> tuple[dict, Any]:
    t0 = time.perf_counter()
    model, log = fit_model(spec, prep, config.seed)
    t1 = time.perf_counter()
    entry = {"type": spec.type, "fair": spec.fair, "hyperparameters": spec.hyperparameters}
    entry.update(evaluate_model(model, prep, config, spec.name))
    entry["training_log"] = log.to_json() if isinstance(log, TrainingLog) else None
    fig_cfg = config.evaluation.get("figure1")
    if fig_cfg:
        male, female = balanced_group_sample(prep.test_users_of(MALE), prep.test_users_of(FEMALE),
                                             int(fig_cfg.get("seed", config.seed)))
        entry["figure1"] = genre_proportion_analysis(model, prep, male, female, fig_cfg.get("categories"),
                                                     int(fig_cfg.get("k", 10)))
    timings[spec.name] = {"fit_seconds": t1 - t0, "evaluate_seconds": time.perf_counter() - t1}
    return entry, model


def run_experiment(config: ExperimentConfig, model_filter: Sequence[str] | None = None,
                   prepared: Prepared | None = None, keep_models: dict | None = None) -> ReportBundle:
    """Run every configured model; per-model failures are recorded, not raised."""
    t0 = time.perf_counter()
    prep = prepared or prepare(config)
    timings: dict = {"prepare_seconds": time.perf_counter() - t0}
    models = {}
    for spec in config.models:
        if model_filter and spec.name not in model_filter:
            continue
        try:
            models[spec.name], model = _run_model(spec, prep, config, timings)
            if keep_models is not None:
                keep_models[spec.name] = model
        except Exception as exc:  # recorded per model; the run continues
            _logger.exception("model %s failed", spec.name)
            models[spec.name] = {"type": spec.type, "failure": f"{type(exc).__name__}: {exc}"}
    timings["total_seconds"] = time.perf_counter() - t0
    return ReportBundle(config=config.to_json(), dataset=summarize(prep.dataset), models=models,
                        seed=config.seed, timings=timings)


# --- alpha sweep --------------------------------------------------------------------


def alpha_sweep(config: ExperimentConfig, model_name: str | None = None, alphas: Sequence[float] = DEFAULT_ALPHAS,
                prepared: Prepared | None = None) -> list[dict]:
    """Train one fair MF per alpha with a shared seed; record NDCG@K and GBS(CC) at K."""
    prep = prepared or prepare(config)
    mf = [m for m in config.models if m.type == "MF" and (model_name is None or m.name == model_name)]
    if not mf:
        raise ExperimentError("sweep", "no MF model configured")
    base = mf[0]
    K = int(config.evaluation["K"])
    rows = []
    for a in alphas:
        fair = dict(base.fair or {})
        fair.setdefault("regularizer", Regularizer.GENRE_GENDER.value)
        if fair["regularizer"] == Regularizer.NONE.value:
            fair["regularizer"] = Regularizer.GENRE_GENDER.value
        fair["alpha"] = float(a)
        spec = ModelSpec(f"{base.name}_alpha{a:.1f}", "MF", base.hyperparameters, fair)
        try:
            model, _ = fit_model(spec, prep, config.seed)
            res = evaluate_model(model, prep, config, spec.name)
            rows.append({"alpha": float(a), f"ndcg{K}": res["performance"][f"NDCG@{K}"],
                         "gbs_cc": res["fairness"]["gbs"]["CC"]})
        except Exception as exc:
            _logger.exception("sweep alpha=%s failed", a)
            rows.append({"alpha": float(a), "failure": f"{type(exc).__name__}: {exc}"})
    return rows


def sweep_csv(rows: Sequence[Mapping], K: int = 50) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", f"ndcg{K}", "gbs_cc"])
    for r in rows:
        if "failure" in r:
            w.writerow([repr(r["alpha"]), "failed", "failed"])
        else:
            w.writerow([repr(r["alpha"]), repr(r[f"ndcg{K}"]), repr(r["gbs_cc"])])
    return buf.getvalue()


# --- output -------------------------------------------------------------------------


def _performance_csv(perf: Mapping) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in perf.items():
        w.writerow([k, repr(v)])
    return buf.getvalue()


def _training_log_csv(log: Mapping) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["epoch", "rec_loss", "fair_loss_raw", "fair_loss_modulated", "combined_loss", "val_ndcg20"]
    w.writerow(cols)
    for e in log["epochs"]:
        w.writerow([e["epoch"]] + [repr(e[c]) for c in cols[1:]])
    return buf.getvalue()


def _safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def emit_report(bundle: ReportBundle, output_dir: str | Path, overwrite: bool = False) -> list[Path]:
    """Write the bundle JSON and per-model CSVs; refuses a non-empty directory unless ``overwrite``."""
    out = Path(output_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise ExperimentError("report", f"output directory {out} is not empty (pass overwrite to replace)")
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []

        def put(name: str, text: str):
            path = out / name
            path.write_text(text, encoding="utf-8")
            written.append(path)

        seed = bundle.seed
        put(f"bundle_seed{seed}.json", bundle.dumps())
        K = int(bundle.config.get("evaluation", {}).get("K", 50))
        for name, entry in bundle.models.items():
            stem = f"{_safe_name(name)}_seed{seed}"
            if "failure" in entry:
                put(f"{stem}_failure.txt", entry["failure"] + "\n")
                continue
            rep = FairnessReport.from_json(entry["fairness"])
            put(f"{stem}_cells.csv", rep.cells_csv())
            put(f"{stem}_gbs.csv", rep.summary_csv())
            put(f"{stem}_performance.csv", _performance_csv(entry["performance"]))
            if entry.get("training_log"):
                put(f"{stem}_training_log.csv", _training_log_csv(entry["training_log"]))
            if entry.get("figure1"):
                put(f"{stem}_figure1.csv", figure1_csv(entry["figure1"]))
        if bundle.sweep:
            put(f"sweep_seed{seed}.csv", sweep_csv(bundle.sweep, K))
    except OSError as exc:
        raise ExperimentError("report", f"{exc.filename}: {exc.strerror}") from exc
    return written
