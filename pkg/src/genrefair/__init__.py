"""Category-aware gender-bias metrics and fairness-regularized recommenders."""

__version__ = "0.1.0"
