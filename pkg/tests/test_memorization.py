"""Estimator mechanics on hand-countable and miniature planted datasets."""

import numpy as np
import pytest

from batlab.errors import ContractError
from batlab.memorization import (
    EstimatorTrainerConfig,
    InfluenceTable,
    MemEstimate,
    SplitThresholds,
    estimate_influence,
    estimate_memorization,
    load_influence_table,
    load_mem_estimate,
    partition_splits,
    predictability,
    run_trials,
    save_influence_table,
    save_mem_estimate,
    SubsampleTrials,
)
from batlab.synthdata import LabeledDataset


FAST_TRAINER = EstimatorTrainerConfig(hidden_dims=(64,), epochs=150,
                                      batch_size=32, learning_rate=0.02,
                                      momentum=0.9, weight_decay=0.0,
                                      decay_epochs=(110, 135),
                                      input_center=0.5, input_gain=20.0)


def _mini_planted_dataset(seed=0, n_main=20):
    """Two well-separated main blobs plus one singleton planted next to the
    wrong class: the singleton is classified correctly iff it was trained on."""
    rng = np.random.default_rng(seed)
    d = 6
    c0 = np.full(d, 0.25)
    c1 = np.full(d, 0.75)
    blob0 = np.clip(c0 + 0.02 * rng.normal(size=(n_main, d)), 0, 1)
    blob1 = np.clip(c1 + 0.02 * rng.normal(size=(n_main, d)), 0, 1)
    singleton = np.clip(c1 + 0.03 * rng.normal(size=(1, d)), 0, 1)  # labeled 0
    feats = np.concatenate([blob0, blob1, singleton])
    labels = np.concatenate([np.zeros(n_main, int), np.ones(n_main, int), [0]])
    n = len(labels)
    train = LabeledDataset(feats, labels, np.zeros(n, int),
                           np.array(["main"] * (n - 1) + ["atypical_poisoning"]),
                           split="train")
    test_feats = np.clip(np.concatenate([
        c0 + 0.02 * rng.normal(size=(8, d)),
        c1 + 0.02 * rng.normal(size=(8, d)),
        singleton + 0.01 * rng.normal(size=(1, d)),
    ]), 0, 1)
    test_labels = np.concatenate([np.zeros(8, int), np.ones(8, int), [0]])
    test = LabeledDataset(test_feats, test_labels, np.zeros(17, int),
                          np.array(["main"] * 16 + ["atypical_poisoning"]),
                          split="test")
    return train, test


def _synthetic_trials(inclusion, train_correct, test_correct):
    return SubsampleTrials(
        inclusion=np.asarray(inclusion, bool),
        train_correct=np.asarray(train_correct, bool),
        test_correct=np.asarray(test_correct, bool),
        base_seed=0, inclusion_rate=0.5, trainer=FAST_TRAINER)


class TestEstimatorArithmetic:
    def test_two_trials_hand_countable(self):
        """One inclusion and one exclusion trial per sample: mem must equal
        correct_in - correct_out by direct counting."""
        trials = _synthetic_trials(
            inclusion=[[True, False], [False, True]],
            train_correct=[[True, False], [False, True]],
            test_correct=np.zeros((2, 0)),
        )
        est = estimate_memorization(trials, min_trials_per_side=1)
        np.testing.assert_allclose(est.mem, [1.0, 1.0])
        trials2 = _synthetic_trials(
            inclusion=[[True, False], [False, True]],
            train_correct=[[True, True], [True, True]],
            test_correct=np.zeros((2, 0)),
        )
        est2 = estimate_memorization(trials2, min_trials_per_side=1)
        np.testing.assert_allclose(est2.mem, [0.0, 0.0])

    def test_equal_rates_give_zero_influence(self):
        trials = _synthetic_trials(
            inclusion=[[True], [False], [True], [False]],
            train_correct=[[True]] * 4,
            test_correct=[[True], [True], [False], [False]],
        )
        table = estimate_influence(trials, report_floor=0.0,
                                   min_trials_per_side=1)
        assert table.get(0, 0) == 0.0

    def test_low_confidence_flagged_not_crashed(self):
        # Sample 0 is never excluded; sample 1 has two trials on each side.
        trials = _synthetic_trials(
            inclusion=[[True, True], [True, False], [True, True], [True, False]],
            train_correct=[[True, True]] * 4,
            test_correct=np.zeros((4, 0)),
        )
        est = estimate_memorization(trials, min_trials_per_side=2)
        assert bool(est.low_confidence[0])       # zero exclusion trials
        assert est.mem[0] == 0.0
        assert not bool(est.low_confidence[1])
        assert est.included_trials[0] + est.excluded_trials[0] == trials.trials

    def test_values_stay_in_range(self):
        rng = np.random.default_rng(0)
        trials = _synthetic_trials(
            inclusion=rng.random((20, 15)) < 0.5,
            train_correct=rng.random((20, 15)) < 0.6,
            test_correct=rng.random((20, 9)) < 0.5,
        )
        est = estimate_memorization(trials, min_trials_per_side=1)
        assert est.mem.min() >= -1.0 and est.mem.max() <= 1.0
        table = estimate_influence(trials, report_floor=0.0,
                                   min_trials_per_side=1)
        values = np.array(list(table.pairs.values()))
        assert values.min() >= -1.0 and values.max() <= 1.0

    def test_report_floor_prunes_small_entries(self):
        trials = _synthetic_trials(
            inclusion=[[True], [False], [True], [False]],
            train_correct=[[True]] * 4,
            test_correct=[[True], [False], [True], [False]],
        )
        table = estimate_influence(trials, report_floor=0.01,
                                   min_trials_per_side=1)
        assert table.get(0, 0) == 1.0
        dense = estimate_influence(trials, report_floor=2.0,
                                   min_trials_per_side=1)
        assert len(dense.pairs) == 0


class TestPlantedOracle:
    def test_singleton_memorized_iff_included(self):
        train, test = _mini_planted_dataset()
        trials = run_trials(train, test, FAST_TRAINER, trials=40,
                            inclusion_rate=0.7, base_seed=11)
        est = estimate_memorization(trials)
        singleton = len(train) - 1
        assert est.mem[singleton] >= 0.5
        main_mem = np.delete(est.mem, singleton)
        assert np.abs(main_mem).max() <= 0.1

    def test_estimator_approaches_one_with_many_trials(self):
        train, test = _mini_planted_dataset(seed=3)
        trials = run_trials(train, test, FAST_TRAINER, trials=100,
                            inclusion_rate=0.7, base_seed=5)
        est = estimate_memorization(trials)
        assert est.mem[len(train) - 1] >= 0.8

    def test_influence_pairs_planted_twin(self):
        train, test = _mini_planted_dataset(seed=1)
        trials = run_trials(train, test, FAST_TRAINER, trials=40,
                            inclusion_rate=0.7, base_seed=2)
        table = estimate_influence(trials)
        twin = len(test) - 1
        singleton = len(train) - 1
        assert table.get(singleton, twin) >= 0.5
        main_tests = range(16)
        for j in main_tests:
            assert abs(table.get(singleton, j)) <= 0.1

    def test_predictability_high_on_main_blobs(self):
        train, test = _mini_planted_dataset(seed=2)
        trials = run_trials(train, test, FAST_TRAINER, trials=12,
                            inclusion_rate=0.7, base_seed=3)
        pred = predictability(trials)
        assert pred[:16].min() >= 0.9

    def test_parallel_equals_serial(self):
        train, test = _mini_planted_dataset(seed=4, n_main=10)
        kwargs = dict(trainer=FAST_TRAINER, trials=6, inclusion_rate=0.7,
                      base_seed=9)
        serial = run_trials(train, test, jobs=1, **kwargs)
        parallel = run_trials(train, test, jobs=3, **kwargs)
        assert np.array_equal(serial.inclusion, parallel.inclusion)
        assert np.array_equal(serial.train_correct, parallel.train_correct)
        assert np.array_equal(serial.test_correct, parallel.test_correct)

    def test_run_trials_validates_arguments(self):
        train, test = _mini_planted_dataset(n_main=4)
        with pytest.raises(ContractError):
            run_trials(train, test, FAST_TRAINER, trials=1,
                       inclusion_rate=0.7, base_seed=0)
        with pytest.raises(ContractError):
            run_trials(train, test, FAST_TRAINER, trials=4,
                       inclusion_rate=1.5, base_seed=0)


class TestPartition:
    def _mem(self, values, low=None):
        values = np.asarray(values, float)
        n = len(values)
        low = np.zeros(n, bool) if low is None else np.asarray(low, bool)
        return MemEstimate(mem=values, included_trials=np.full(n, 10),
                           excluded_trials=np.full(n, 10), low_confidence=low,
                           trials=20, inclusion_rate=0.5, base_seed=0,
                           min_trials_per_side=5)

    def _table(self, pairs, n_train, n_test):
        return InfluenceTable(pairs=pairs, report_floor=0.01, n_train=n_train,
                              n_test=n_test, trials=20, min_trials_per_side=5)

    def test_strict_boundary_atypical(self):
        mem = self._mem([0.15, 0.150001, 0.02, 0.019])
        table = self._table({}, 4, 0)
        splits = partition_splits(mem, table, np.zeros(0), SplitThresholds())
        assert list(splits.train_atypical) == [1]
        assert list(splits.train_typical) == [3]

    def test_low_confidence_in_neither(self):
        mem = self._mem([0.5, 0.0], low=[True, False])
        splits = partition_splits(mem, self._table({}, 2, 0), np.zeros(0),
                                  SplitThresholds())
        assert list(splits.train_unassigned) == [0]
        assert 0 not in splits.train_atypical
        assert list(splits.train_typical) == [1]

    def test_test_partition_rules(self):
        mem = self._mem([0.5, 0.0])
        # train 0 is atypical; influences test 0 strongly, test 1 negligibly.
        table = self._table({(0, 0): 0.5, (0, 1): 0.015}, 2, 3)
        pred = np.array([0.9, 0.9, 0.79])
        splits = partition_splits(mem, table, pred, SplitThresholds())
        assert list(splits.test_atypical) == [0]
        # test 0 excluded (influence), test 2 excluded (predictability 0.79)
        assert list(splits.test_typical) == [1]

    def test_influence_boundary_strict(self):
        mem = self._mem([0.5])
        table = self._table({(0, 0): 0.15, (0, 1): 0.02}, 1, 2)
        splits = partition_splits(mem, table, np.array([1.0, 1.0]),
                                  SplitThresholds())
        assert len(splits.test_atypical) == 0     # 0.15 is not > 0.15
        # influence 0.15 still exceeds the typical cutoff 0.02, so test 0 is
        # excluded from typical; 0.02 exactly is not > 0.02 and test 1 stays.
        assert list(splits.test_typical) == [1]

    def test_threshold_ordering_enforced(self):
        with pytest.raises(ContractError):
            SplitThresholds(sigma_atypical=0.02, sigma_typical=0.15)


class TestPersistence:
    def test_mem_round_trip(self, tmp_path):
        est = MemEstimate(mem=np.array([0.25, -0.5]),
                          included_trials=np.array([12, 9]),
                          excluded_trials=np.array([8, 11]),
                          low_confidence=np.array([False, True]),
                          trials=20, inclusion_rate=0.7, base_seed=42,
                          min_trials_per_side=5)
        path = tmp_path / "mem.json"
        save_mem_estimate(est, path, manifest_hash="abc123")
        back = load_mem_estimate(path)
        np.testing.assert_array_equal(back.mem, est.mem)
        np.testing.assert_array_equal(back.low_confidence, est.low_confidence)
        assert back.base_seed == 42

    def test_influence_round_trip(self, tmp_path):
        table = InfluenceTable(pairs={(0, 1): 0.5, (3, 2): -0.25},
                               report_floor=0.01, n_train=4, n_test=3,
                               trials=20, min_trials_per_side=5)
        path = tmp_path / "influence.json"
        save_influence_table(table, path, manifest_hash="abc123")
        back = load_influence_table(path)
        assert back.pairs == table.pairs
        assert back.n_train == 4
