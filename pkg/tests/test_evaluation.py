import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dimnet.config import TrainConfig
from dimnet.data import gen_synthetic_tkg
from dimnet.evaluation import (
    EvaluationError,
    RankRecord,
    compute_metrics,
    evaluate_split,
    oracle_rank,
    rank_of_gold,
    time_aware_filter,
)
from dimnet.params import Ablation
from dimnet.training import new_train_state


def filtered(scores, gold, truth):
    return rank_of_gold(time_aware_filter(np.asarray(scores, float), gold, truth), gold)


def records(ranks, raw=None):
    raw = raw or ranks
    return [RankRecord(0, 0, i % 2, 0, r0, r) for i, (r, r0) in enumerate(zip(ranks, raw))]


class TestFilter:
    def test_example(self):
        scores = np.array([0.1, 0.2, 0.3, 0.9])
        assert rank_of_gold(scores, 2) == 2
        masked = time_aware_filter(scores, 2, {2, 3})
        assert np.isnan(masked[3]) and masked[2] == 0.3
        assert rank_of_gold(masked, 2) == 1

    def test_no_other_true_facts(self):
        scores = np.array([0.4, 0.1, 0.8])
        assert filtered(scores, 1, {1}) == rank_of_gold(scores, 1) == 3

    def test_all_others_true(self):
        assert filtered([0.9, 0.1, 0.8], 1, {0, 1, 2}) == 1

    def test_gold_missing(self):
        with pytest.raises(EvaluationError):
            time_aware_filter(np.array([0.1, 0.2]), 0, {1})

    def test_input_untouched(self):
        scores = np.array([0.1, 0.2])
        time_aware_filter(scores, 0, {0, 1})
        assert not np.isnan(scores).any()


class TestRankOfGold:
    def test_highest(self):
        assert rank_of_gold(np.array([0.1, 0.9, 0.3]), 1) == 1

    def test_tied_top(self):
        assert rank_of_gold(np.array([0.9, 0.9, 0.3]), 1) == 1.5

    def test_lowest(self):
        assert rank_of_gold(np.array([0.5, 0.9, 0.3, 0.2]), 3) == 4

    def test_masked_gold(self):
        with pytest.raises(EvaluationError):
            rank_of_gold(np.array([np.nan, 0.2]), 0)


class TestOracle:
    def test_single_candidate(self):
        assert oracle_rank([0.3], 0, {0}) == 1

    @pytest.mark.parametrize("n", [1, 2, 5, 50])
    def test_all_equal(self, n):
        assert oracle_rank([0.5] * n, n - 1, {n - 1}) == (n + 1) / 2

    def test_filtered_example(self):
        assert oracle_rank([0.1, 0.2, 0.3, 0.9], 2, {2, 3}) == 1

    @given(
        st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=1, max_size=12),
        st.data(),
    )
    def test_agrees_with_rank_of_gold(self, scores, data):
        n = len(scores)
        gold = data.draw(st.integers(0, n - 1))
        truth = data.draw(st.sets(st.integers(0, n - 1))) | {gold}
        assert filtered(scores, gold, truth) == oracle_rank(scores, gold, truth)


class TestRankProperties:
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=15), st.data())
    def test_filtering_never_lowers_reciprocal_rank(self, scores, data):
        n = len(scores)
        gold = data.draw(st.integers(0, n - 1))
        truth = data.draw(st.sets(st.integers(0, n - 1))) | {gold}
        assert 1 / filtered(scores, gold, truth) >= 1 / rank_of_gold(np.asarray(scores), gold)

    @given(st.lists(st.integers(-30, 30), min_size=1, max_size=15), st.data())
    def test_increasing_transform_invariance(self, scores, data):
        # integer scores keep the transform strictly increasing in floating point
        n = len(scores)
        gold = data.draw(st.integers(0, n - 1))
        truth = data.draw(st.sets(st.integers(0, n - 1))) | {gold}
        s = np.asarray(scores, dtype=float)
        assert filtered(s, gold, truth) == filtered(np.exp(s / 10) * 3 + 1, gold, truth)


class TestMetrics:
    def test_example(self):
        report = compute_metrics(records([1, 2, 4]))
        assert report.mrr == pytest.approx(0.5833333333, abs=1e-9)
        assert report.hits == {1: pytest.approx(1 / 3), 3: pytest.approx(2 / 3), 10: 1.0}
        assert report.num_queries == 3

    def test_all_first(self):
        report = compute_metrics(records([1, 1, 1]))
        assert report.mrr == 1 and all(v == 1 for v in report.hits.values())

    def test_fractional_rank(self):
        report = compute_metrics(records([1.5]))
        assert report.hits[1] == 0 and report.hits[3] == 1

    def test_empty(self):
        with pytest.raises(EvaluationError):
            compute_metrics([])

    def test_per_timestamp_rows(self):
        report = compute_metrics(records([1, 2, 4, 1]))
        assert [r["time_index"] for r in report.per_timestamp] == [0, 1]
        assert report.per_timestamp[0]["mrr"] == pytest.approx((1 + 1 / 4) / 2)

    @given(st.lists(st.floats(1, 100), min_size=1, max_size=30))
    def test_bounds_and_monotone_hits(self, ranks):
        report = compute_metrics(records(ranks))
        assert 0 < report.mrr <= 1
        assert report.hits[1] <= report.hits[3] <= report.hits[10] <= 1

    def test_serialization(self, tmp_path):
        report = compute_metrics(records([1, 2, 4]))
        report.write_json(tmp_path / "m.json")
        report.write_csv(tmp_path / "m.csv")
        doc = json.loads((tmp_path / "m.json").read_text())
        assert set(doc) == {"mrr", "hits", "num_queries", "per_timestamp"}
        assert set(doc["hits"]) == {"1", "3", "10"}
        rows = list(csv.DictReader(open(tmp_path / "m.csv")))
        assert len(rows) == 2 and float(rows[0]["mrr"]) == pytest.approx(0.625)


@pytest.fixture(scope="module")
def synth():
    return gen_synthetic_tkg(10, 2, 2, 20, seed=0)


def small_config(**kw):
    return TrainConfig(**{**dict(d=8, m=2, layers=1, heads=1, k=3, seed=1), **kw}).validate()


class TestEvaluateSplit:
    def test_zero_model_hits_all_ties_baseline(self, synth):
        config = small_config()
        model = new_train_state(config, synth, init="zeros").model
        report = evaluate_split(model, synth, "test", config.m, config.k)
        expected = []
        for t in synth.split_times("test"):
            truth = synth.true_objects(t)
            for s, r, o in synth.snapshots[t].edges:
                survivors = synth.num_entities - (len(truth[(s, r)]) - 1)
                expected.append(2 / (survivors + 1))
        assert report.mrr == pytest.approx(np.mean(expected), abs=1e-12)

    def test_counts_inverse_queries(self, synth):
        config = small_config()
        report = evaluate_split(new_train_state(config, synth).model, synth, "test", config.m, config.k)
        raw = sum(1 for t in synth.split_times("test") for e in synth.snapshots[t].edges if e[1] < 2)
        assert report.num_queries == 2 * raw

    def test_deterministic(self, synth):
        config = small_config()
        model = new_train_state(config, synth).model
        a = evaluate_split(model, synth, "valid", config.m, config.k).to_json()
        b = evaluate_split(model, synth, "valid", config.m, config.k).to_json()
        assert a == b

    def test_splits_disjoint(self, synth):
        config = small_config()
        model = new_train_state(config, synth).model
        valid = evaluate_split(model, synth, "valid", config.m, config.k)
        test = evaluate_split(model, synth, "test", config.m, config.k)
        assert not {r["time_index"] for r in valid.per_timestamp} & {r["time_index"] for r in test.per_timestamp}

    def test_static_filter_is_at_least_as_lenient(self, synth):
        config = small_config()
        model = new_train_state(config, synth).model
        aware = evaluate_split(model, synth, "test", config.m, config.k)
        static = evaluate_split(model, synth, "test", config.m, config.k, time_aware=False)
        assert static.mrr >= aware.mrr

    def test_first_pass_only_variant(self, synth):
        config = small_config()
        model = new_train_state(config, synth).model
        report = evaluate_split(model, synth, "test", config.m, config.k, Ablation(virtual_graph=False))
        assert 0 < report.mrr <= 1
