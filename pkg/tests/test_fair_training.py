import math

import numpy as np
import pytest

from genrefair import metrics as M
from genrefair.fair_training import (
    EarlyStopping,
    FairTrainConfig,
    Frozen,
    Regularizer,
    batch_objective,
    beyond_parity_loss,
    beyond_parity_uval,
    combined_loss,
    fairness_loss_genre_gender,
    gradient_check,
    modulate_fairness_loss,
    soft_category_coverage,
    soft_topk_membership,
    train_fair,
)
from genrefair.ingest import Interaction
from genrefair.recommenders import (
    InteractionMatrix,
    MfConfig,
    MfModel,
    bpr_loss_and_grad,
    epoch_batches,
    fit_mf_bpr,
    init_mf,
    sample_negatives,
)

from helpers import lists_of, make_cm


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def empty_train(n_users, n_items):
    return InteractionMatrix.from_interactions([], [f"u{n}" for n in range(n_users)], [f"i{n}" for n in range(n_items)])


def random_train(rng, n_users, n_items, density=0.3):
    users = [f"u{n}" for n in range(n_users)]
    items = [f"i{n:02d}" for n in range(n_items)]
    X = (rng.random((n_users, n_items)) < density) | np.eye(n_users, n_items, dtype=bool)
    inter = [Interaction(users[r], items[c], float(rng.integers(1, 6))) for r, c in zip(*np.nonzero(X))]
    return InteractionMatrix.from_interactions(inter, users, items)


def random_frac(rng, n_items, n_cats):
    F = np.zeros((n_items, n_cats))
    for v in range(n_items):
        cats = rng.choice(n_cats, size=rng.integers(1, n_cats + 1), replace=False)
        F[v, cats] = 1.0 / len(cats)
    return F


def two_block_model():
    """Male u0 scores items 0,1 high; female u1 scores items 3,4 high."""
    itf = np.zeros((6, 2))
    itf[[0, 1], 0] = 10.0
    itf[[3, 4], 1] = 10.0
    return MfModel(np.eye(2), itf, np.zeros(2), np.zeros(6), 0.0, ["u0", "u1"], [f"i{n}" for n in range(6)])


# items 0-2 belong to c, items 3-5 to d
TWO_CAT_FRAC = np.repeat(np.eye(2), 3, axis=0)


class TestSoftTopK:
    def test_hand_example(self):
        res = soft_topk_membership([2, 1, 0, -1, -2], k=2, temperature=0.1, standardized=True)
        assert res.threshold == 0.5
        assert res.membership == pytest.approx([1.0, 0.9933, 0.0067, 0.0, 0.0], abs=5e-5)
        assert res.membership.sum() == pytest.approx(2.0, abs=1e-3)

    def test_standardization(self):
        raw = soft_topk_membership([3.0, 5.0, 1.0, 7.0, 4.0], k=2, temperature=0.1)
        z = raw.standardized
        assert z.mean() == pytest.approx(0.0, abs=1e-15)
        assert z.std() == pytest.approx(1.0, abs=1e-15)
        # affine changes of the raw scores leave memberships unchanged
        moved = soft_topk_membership([3.0 * 4 + 1, 5.0 * 4 + 1, 1.0 * 4 + 1, 7.0 * 4 + 1, 4.0 * 4 + 1], k=2)
        assert np.allclose(moved.membership, raw.membership, atol=1e-12)

    def test_candidate_at_threshold(self):
        res = soft_topk_membership([1.0, 0.5, 0.5, 0.0], k=2, temperature=0.1, standardized=True)
        assert res.threshold == 0.5
        assert res.membership[1] == 0.5 and res.membership[2] == 0.5

    def test_zero_temperature_limit(self):
        rng = np.random.default_rng(0)
        s = rng.normal(size=12)
        hard = np.zeros(12)
        hard[np.argsort(-s)[:4]] = 1.0
        assert np.allclose(soft_topk_membership(s, 4, 1e-6).membership, hard, atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_membership_error_nonincreasing_in_temperature(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=15)
        hard = np.zeros(15)
        hard[np.argsort(-s)[:5]] = 1.0
        err = [np.abs(soft_topk_membership(s, 5, t).membership - hard) for t in (1.0, 0.1, 0.01)]
        assert np.all(err[0] >= err[1]) and np.all(err[1] >= err[2])

    def test_soft_cc_approaches_hard_cc(self):
        rng = np.random.default_rng(7)
        s = np.linspace(2, -2, 10) + rng.normal(scale=0.01, size=10)
        frac = (rng.random(10) < 0.5).astype(float)[:, None]
        hard = np.zeros(10)
        hard[np.argsort(-s)[:3]] = 1.0
        gaps = [abs(soft_category_coverage([soft_topk_membership(s, 3, t).membership], frac, 0)
                    - soft_category_coverage([hard], frac, 0)) for t in (1.0, 0.1, 0.01, 0.001)]
        assert gaps[-1] < 1e-12
        assert gaps[0] > gaps[-1]

    def test_too_few_candidates_falls_back(self, caplog):
        res = soft_topk_membership([3.0, 1.0], k=2)
        assert res.hard
        assert res.membership.tolist() == [1.0, 1.0]
        assert "hard membership" in caplog.text

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            soft_topk_membership([1, 2, 3], 1, 0.0)


class TestSoftCategoryCoverage:
    def test_hard_memberships_reduce_to_cc(self):
        cm = make_cm({"A": {"x"}, "B": {"x", "y"}, "C": {"y"}, "D": {"z"}})
        lists = lists_of(["A", "B"], ["C", "D"], ["B", "D"])
        m = np.zeros((3, 4))
        for r, row in enumerate(lists):
            m[r, [cm.item_index[i] for i in row.items]] = 1.0
        for c in cm.categories:
            got = soft_category_coverage(m, cm.frac, cm.category_index(c))
            assert got == pytest.approx(M.category_coverage(lists, cm, c), abs=1e-12)

    def test_mass_outside_soft_set(self):
        res = soft_topk_membership([2, 1, 0, -1, -2], 2, 0.1, standardized=True)
        frac = np.array([[0.0], [0.0], [0.0], [1.0], [1.0]])
        assert soft_category_coverage([res.membership], frac, 0) == pytest.approx(0.0, abs=1e-6)

    def test_hand_example(self):
        res = soft_topk_membership([2, 1, 0, -1, -2], 2, 0.1, standardized=True)
        frac = np.array([[1.0], [0.0], [0.0], [0.0], [0.0]])
        assert soft_category_coverage([res.membership], frac, 0) == pytest.approx(0.5, abs=1e-3)

    def test_zero_membership_rejected(self):
        with pytest.raises(ValueError):
            soft_category_coverage([np.zeros(3)], np.ones((3, 1)))


class TestGenreGenderLoss:
    def test_two_unit_differences(self):
        fl = fairness_loss_genre_gender(two_block_model(), [0, 1], [False, True], empty_train(2, 6), TWO_CAT_FRAC, k=2)
        assert fl.value == pytest.approx(2.0, abs=1e-3)

    def test_identical_scores_zero(self):
        model = two_block_model()
        model.user_factors[1] = model.user_factors[0]
        fl = fairness_loss_genre_gender(model, [0, 1], [False, True], empty_train(2, 6), TWO_CAT_FRAC, k=2)
        assert fl.value == 0.0
        assert all(np.all(g == 0) for g in fl.grads.values())

    def test_label_swap(self):
        rng = np.random.default_rng(1)
        train = random_train(rng, 6, 12)
        model = init_mf(train, MfConfig(d=3, init_scale=1.0), rng)
        frac = random_frac(rng, 12, 3)
        female = np.array([True, False, True, False, False, True])
        a = fairness_loss_genre_gender(model, np.arange(6), female, train, frac, k=3)
        b = fairness_loss_genre_gender(model, np.arange(6), ~female, train, frac, k=3)
        assert a.value == pytest.approx(b.value, abs=1e-15)

    def test_single_gender_inactive(self):
        fl = fairness_loss_genre_gender(two_block_model(), [0, 1], [True, True], empty_train(2, 6), TWO_CAT_FRAC, k=2)
        assert fl.value == 0.0 and not fl.active

    def test_train_items_excluded(self):
        # u0's high-scoring items are train positives, so its soft set moves to the remaining items
        inter = [Interaction("u0", "i0", 5.0), Interaction("u0", "i1", 5.0)]
        train = InteractionMatrix.from_interactions(inter, ["u0", "u1"], [f"i{n}" for n in range(6)])
        fl = fairness_loss_genre_gender(two_block_model(), [0, 1], [False, True], train, TWO_CAT_FRAC, k=2)
        assert fl.value < 1.5


class TestModulation:
    def test_center(self):
        assert modulate_fairness_loss(0.5, 3.0) == pytest.approx(1.5, abs=1e-15)

    def test_zero_gbs(self):
        assert modulate_fairness_loss(0.0, 1.0) == pytest.approx(sigmoid(-5.0), abs=1e-15)
        assert modulate_fairness_loss(0.0, 1.0) == pytest.approx(0.0067, abs=1e-4)

    def test_zero_max_loss(self):
        assert modulate_fairness_loss(0.7, 0.0) == 0.0

    def test_increasing_and_linear(self):
        vals = [modulate_fairness_loss(g, 2.0) for g in np.linspace(0, 2, 21)]
        assert all(b > a for a, b in zip(vals, vals[1:]))
        assert modulate_fairness_loss(0.3, 6.0) == pytest.approx(3 * modulate_fairness_loss(0.3, 2.0), rel=1e-15)


class TestCombinedLoss:
    def test_alpha_zero(self):
        assert combined_loss(0.0, 123.0, 0.25) == 0.25

    def test_examples(self):
        assert combined_loss(0.5, 1.0, 1.0) == 1.0
        assert combined_loss(0.4, 2.0, 0.5) == pytest.approx(1.1, abs=1e-15)


class TestBeyondParity:
    groups = {"a": "F", "b": "M", "c": "M"}

    def test_perfect_predictions(self):
        r = {("a", 1): 4.0, ("b", 1): 2.0, ("c", 2): 5.0}
        assert beyond_parity_uval(dict(r), r, self.groups) == 0.0

    def test_opposite_errors(self):
        r = {("a", 1): 3.0, ("b", 1): 3.0}
        y = {("a", 1): 4.0, ("b", 1): 2.0}
        assert beyond_parity_uval(y, r, self.groups) == 2.0

    def test_label_swap(self):
        r = {("a", 1): 3.0, ("b", 1): 3.0, ("c", 1): 1.0, ("a", 2): 5.0, ("c", 2): 2.0}
        y = {("a", 1): 4.0, ("b", 1): 2.5, ("c", 1): 1.5, ("a", 2): 3.0, ("c", 2): 2.0}
        swapped = {u: ("M" if g == "F" else "F") for u, g in self.groups.items()}
        assert beyond_parity_uval(y, r, self.groups) == pytest.approx(beyond_parity_uval(y, r, swapped), abs=1e-15)

    def test_items_of_one_group_skipped(self):
        r = {("a", 1): 3.0, ("b", 1): 3.0, ("b", 2): 1.0}
        y = {("a", 1): 4.0, ("b", 1): 2.0, ("b", 2): 5.0}
        assert beyond_parity_uval(y, r, self.groups) == 2.0

    def test_no_shared_item(self):
        with pytest.raises(ValueError):
            beyond_parity_uval({("a", 1): 1.0, ("b", 2): 1.0}, {("a", 1): 1.0, ("b", 2): 1.0}, self.groups)


def _fair_setup(seed=0, regularizer="GenreGender", alpha=0.4, k=3):
    rng = np.random.default_rng(seed)
    train = random_train(rng, 6, 10)
    model = init_mf(train, MfConfig(d=4, init_scale=0.5), rng)
    model.item_bias[:] = rng.normal(scale=0.3, size=10)
    frac = random_frac(rng, 10, 3)
    is_female = np.array([True, False, True, False, False, True])
    u, i = train.pairs()
    batch = (u, i, sample_negatives(train, u, rng))
    cfg = FairTrainConfig(alpha=alpha, k=k, temperature=0.1, regularizer=regularizer, mf=MfConfig(d=4, l2=0.001))
    return model, batch, train, is_female, frac, cfg


class TestGradients:
    def test_constant_loss(self):
        p = {"w": np.arange(4.0)}
        res = gradient_check(p, lambda: (3.0, {"w": np.zeros(4)}))
        assert res.max_rel_error == 0.0 and res.analytic == 0.0 and res.numeric == 0.0
        assert res.checked == 4

    def test_reports_worst_entry(self):
        p = {"w": np.array([1.0, 2.0])}
        res = gradient_check(p, lambda: (float((p["w"] ** 2).sum()), {"w": np.array([2.0, 0.0])}))
        assert res.worst == ("w", (1,))
        assert res.max_rel_error == pytest.approx(1.0)

    def test_pure_bpr(self):
        model, (u, i, j), *_ = _fair_setup()

        def fn():
            loss, _, g = bpr_loss_and_grad(model, u, i, j, 0.001)
            return loss, g

        assert gradient_check(model.params(), fn).max_rel_error <= 1e-4

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_combined_genre_gender(self, seed):
        model, batch, train, is_female, frac, cfg = _fair_setup(seed)
        frozen = batch_objective(model, batch, train, is_female, frac, cfg).frozen

        def fn():
            t = batch_objective(model, batch, train, is_female, frac, cfg, frozen)
            return t.combined, t.grads

        res = gradient_check(model.params(), fn)
        assert res.max_rel_error <= 1e-3, res

    def test_genre_gender_term_alone(self):
        model, _, train, is_female, frac, _ = _fair_setup(3)
        users = np.arange(6)
        th = fairness_loss_genre_gender(model, users, is_female, train, frac, 3, 0.1).thresholds

        def fn():
            fl = fairness_loss_genre_gender(model, users, is_female, train, frac, 3, 0.1, th)
            return fl.value, fl.grads

        assert gradient_check(model.params(), fn).max_rel_error <= 1e-3

    def test_combined_beyond_parity(self):
        model, batch, train, is_female, frac, cfg = _fair_setup(4, regularizer="BeyondParity")

        def fn():
            t = batch_objective(model, batch, train, is_female, frac, cfg)
            return t.combined, t.grads

        assert gradient_check(model.params(), fn).max_rel_error <= 1e-3

    def test_beyond_parity_matches_uval(self):
        model, (u, i, _), train, is_female, *_ = _fair_setup(5)
        ratings = np.asarray(train.ratings[u, i]).ravel()
        fl = beyond_parity_loss(model, u, i, ratings, is_female[u])
        preds = model.score_pairs(u, i)
        keys = list(zip(u.tolist(), i.tolist()))
        groups = {n: ("F" if is_female[n] else "M") for n in range(6)}
        expect = beyond_parity_uval(dict(zip(keys, preds)), dict(zip(keys, ratings)), groups)
        assert fl.value == pytest.approx(expect, abs=1e-12)

    def test_alpha_zero_is_pure_bpr(self):
        model, batch, train, is_female, frac, _ = _fair_setup()
        cfg = FairTrainConfig(alpha=0.0, mf=MfConfig(d=4, l2=0.001))
        t = batch_objective(model, batch, train, is_female, frac, cfg)
        loss, _, g = bpr_loss_and_grad(model, *batch, 0.001)
        assert t.combined == loss and not t.fair_active
        assert all(np.array_equal(t.grads[n], g[n]) for n in g)

    def test_frozen_reused(self):
        model, batch, train, is_female, frac, cfg = _fair_setup()
        t = batch_objective(model, batch, train, is_female, frac, cfg)
        again = batch_objective(model, batch, train, is_female, frac, cfg, Frozen(t.frozen.thresholds, t.frozen.max_rec_loss))
        assert again.combined == t.combined


class TestConfig:
    def test_alpha_range(self):
        with pytest.raises(ValueError):
            FairTrainConfig(alpha=1.0)
        with pytest.raises(ValueError):
            FairTrainConfig(alpha=-0.1)

    def test_none_regularizer_forces_inactive(self):
        cfg = FairTrainConfig(alpha=0.4, regularizer="None")
        assert cfg.regularizer is Regularizer.NONE and not cfg.active

    def test_dict_fields(self):
        cfg = FairTrainConfig(alpha=0.2, early_stopping={"patience": 3}, mf={"d": 8})
        assert cfg.early_stopping.patience == 3 and cfg.mf.d == 8
        assert cfg.to_json()["regularizer"] == "GenreGender"


class TestEarlyStopping:
    def test_improvement_must_exceed_min_delta(self):
        es = EarlyStopping(min_delta=0.01, patience=2)
        assert es.update(0, 0.5)
        assert not es.update(1, 0.505)
        assert not es.update(2, 0.51)
        assert es.should_stop and es.best_epoch == 0

    def test_wait_resets(self):
        es = EarlyStopping(0.0, 2)
        es.update(0, 0.1)
        es.update(1, 0.1)
        es.update(2, 0.2)
        assert es.wait == 0 and not es.should_stop


def _tiny_split(seed=0):
    rng = np.random.default_rng(seed)
    train = random_train(rng, 8, 14, density=0.35)
    genders = {u: ("F" if n % 2 else "M") for n, u in enumerate(train.user_ids)}
    validation = {u: {train.item_ids[(n * 3) % 14]} - {train.item_ids[c] for c in train.positives(n)}
                  for n, u in enumerate(train.user_ids)}
    validation = {u: v for u, v in validation.items() if v}
    cm = make_cm({i: {("x", "y", "z")[n % 3]} for n, i in enumerate(train.item_ids)})
    return train, validation, genders, cm


class TestTrainFair:
    def test_runs_to_max_epochs_when_improving(self):
        train, val, genders, cm = _tiny_split()
        cfg = FairTrainConfig(alpha=0.3, k=3, mf=MfConfig(d=3, batch_size=8),
                              early_stopping={"max_epochs": 7, "patience": 2})
        _, log = train_fair(train, val, genders, cm, cfg, evaluate=lambda m, e: float(e))
        assert len(log.epochs) == 7 and log.best_epoch == 6 and not log.stopped_early

    def test_stops_after_patience_and_returns_best(self):
        train, val, genders, cm = _tiny_split()
        snapshots = []

        def evaluate(model, epoch):
            snapshots.append(model.copy())
            return [0.1, 0.3, 0.2, 0.2, 0.2, 0.9][epoch]

        cfg = FairTrainConfig(alpha=0.0, mf=MfConfig(d=3, batch_size=8), early_stopping={"patience": 3, "max_epochs": 6})
        best, log = train_fair(train, val, genders, cm, cfg, evaluate=evaluate)
        assert log.stopped_early and len(log.epochs) == 5 and log.best_epoch == 1
        assert np.array_equal(best.user_factors, snapshots[1].user_factors)
        assert best.extra["best_epoch"] == 1

    def test_alpha_zero_matches_plain_bpr(self):
        train, val, genders, cm = _tiny_split(1)
        mf = MfConfig(d=4, learning_rate=0.05, batch_size=8, seed=11)
        best, log = train_fair(train, val, genders, cm, FairTrainConfig(alpha=0.0, mf=mf, early_stopping={"max_epochs": 12, "patience": 4}))
        plain = fit_mf_bpr(train, MfConfig(**{**mf.__dict__, "epochs": log.best_epoch + 1}))
        for name in plain.params():
            assert np.array_equal(best.params()[name], plain.params()[name])

    def test_none_regularizer_matches_alpha_zero(self):
        train, val, genders, cm = _tiny_split(2)
        mf = MfConfig(d=4, batch_size=8)
        es = {"max_epochs": 4}
        a, _ = train_fair(train, val, genders, cm, FairTrainConfig(alpha=0.0, mf=mf, early_stopping=es))
        b, _ = train_fair(train, val, genders, cm, FairTrainConfig(alpha=0.5, regularizer="None", mf=mf, early_stopping=es))
        assert np.array_equal(a.item_factors, b.item_factors)

    def test_log_columns(self):
        train, val, genders, cm = _tiny_split()
        cfg = FairTrainConfig(alpha=0.3, k=3, mf=MfConfig(d=3, batch_size=8), early_stopping={"max_epochs": 2})
        _, log = train_fair(train, val, genders, cm, cfg)
        head, *rows = log.to_csv().splitlines()
        assert head == "epoch,rec_loss,fair_loss_raw,fair_loss_modulated,combined_loss,val_ndcg20"
        assert len(rows) == 2
        assert all(e.fair_loss_raw > 0 for e in log.epochs)

    def test_single_gender_batches_counted(self):
        train, val, genders, cm = _tiny_split()
        cfg = FairTrainConfig(alpha=0.3, k=3, mf=MfConfig(d=3, batch_size=1), early_stopping={"max_epochs": 1})
        _, log = train_fair(train, val, genders, cm, cfg)
        # one triple per batch means one user, so every batch lacks a gender
        assert log.epochs[0].inactive_batches == train.matrix.nnz

    def test_deterministic(self):
        train, val, genders, cm = _tiny_split()
        cfg = FairTrainConfig(alpha=0.3, k=3, mf=MfConfig(d=3, batch_size=8), early_stopping={"max_epochs": 3})
        a, la = train_fair(train, val, genders, cm, cfg)
        b, lb = train_fair(train, val, genders, cm, cfg)
        assert np.array_equal(a.user_factors, b.user_factors) and la.to_csv() == lb.to_csv()

    def test_unknown_gender_rejected(self):
        train, val, genders, cm = _tiny_split()
        genders["u0"] = "unknown"
        with pytest.raises(Exception, match="gender"):
            train_fair(train, val, genders, cm, FairTrainConfig(alpha=0.3, mf=MfConfig(d=3)))

    def test_batches_shared_with_plain_bpr(self):
        # the fair loop draws batches from the same generator as plain BPR
        train, *_ = _tiny_split()
        cfg = MfConfig(d=3, batch_size=8)
        a = list(epoch_batches(train, cfg, np.random.default_rng(0)))
        b = list(epoch_batches(train, cfg, np.random.default_rng(0)))
        assert all(np.array_equal(x, y) for p, q in zip(a, b) for x, y in zip(p, q))
