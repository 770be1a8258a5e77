import os
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent


def find_ml100k():
    candidates = []
    if os.environ.get("GENREFAIR_DATA_ROOT"):
        candidates.append(Path(os.environ["GENREFAIR_DATA_ROOT"]) / "ml-100k")
    candidates.append(ROOT / "data" / "ml-100k")
    for c in candidates:
        if (c / "u.data").is_file():
            return c
    return None


@pytest.fixture(scope="session")
def ml100k_dir():
    path = find_ml100k()
    if path is None:
        pytest.skip("ML-100K not found; run scripts/fetch_ml100k.py")
    return path


def small_synthetic_config(**model_overrides):
    """A fast synthetic experiment: one plain MF and one fair MF, a few epochs each."""
    hp = {"d": 8, "learning_rate": 0.1, "init_scale": 0.1, "batch_size": 128,
          "early_stopping": {"max_epochs": 3}, **model_overrides}
    return {
        "dataset": {"format": "synthetic", "params": {"n_users": 60, "n_items": 80, "interactions_per_user": 15}},
        "split": {"ratios": [0.7, 0.1, 0.2], "seed": 0},
        "models": [
            {"name": "MF", "type": "MF", "hyperparameters": hp},
            {"name": "MF fair", "type": "MF", "hyperparameters": hp,
             "fair": {"alpha": 0.4, "regularizer": "GenreGender", "k": 10}},
            {"name": "ItemKNN", "type": "ItemKNN", "hyperparameters": {"neighborhood_size": 20}},
        ],
        "evaluation": {"k_list": [5, 10], "K": 10, "figure1": {"k": 5, "seed": 0}},
    }


@pytest.fixture
def small_config():
    return small_synthetic_config()
