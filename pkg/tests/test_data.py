import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dimnet.data import (
    ContractViolation,
    DataError,
    Quadruple,
    augment_inverse,
    build_snapshots,
    gen_synthetic_tkg,
    history_indices,
    history_windows,
    inverse_triple,
    load_dataset,
    normalize_timestamps,
    parse_quadruple_file,
    write_dataset,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestParse:
    def test_single_line(self, tmp_path):
        assert parse_quadruple_file(write(tmp_path / "a.txt", "0\t1\t2\t0\n")) == [(0, 1, 2, 0)]

    def test_fifth_column_ignored(self, tmp_path):
        assert parse_quadruple_file(write(tmp_path / "a.txt", "3\t0\t3\t24\t9\n")) == [(3, 0, 3, 24)]

    def test_empty_file(self, tmp_path):
        assert parse_quadruple_file(write(tmp_path / "a.txt", "")) == []

    @pytest.mark.parametrize("text", ["0\t1\t2\n", "0\tx\t2\t0\n", "0\t1\t-2\t0\n"])
    def test_malformed(self, tmp_path, text):
        with pytest.raises(DataError, match="line 1"):
            parse_quadruple_file(write(tmp_path / "a.txt", text))


class TestNormalize:
    def test_dense_ranks(self):
        quads, T = normalize_timestamps([(0, 0, 1, 24), (1, 0, 2, 0), (2, 0, 0, 48)])
        assert [q.time for q in quads] == [1, 0, 2] and T == 3

    def test_single_timestamp(self):
        quads, T = normalize_timestamps([(0, 0, 1, 7), (1, 0, 0, 7)])
        assert [q.time for q in quads] == [0, 0] and T == 1

    def test_empty(self):
        with pytest.raises(ContractViolation):
            normalize_timestamps([])

    @given(st.lists(st.integers(0, 10_000), min_size=1, max_size=40))
    def test_order_preserving_and_dense(self, times):
        quads, T = normalize_timestamps([(0, 0, 1, t) for t in times])
        ranks = [q.time for q in quads]
        assert sorted(set(ranks)) == list(range(T))
        for (a, ra), (b, rb) in zip(zip(times, ranks), zip(times[1:], ranks[1:])):
            assert (a < b) == (ra < rb) and (a == b) == (ra == rb)


class TestInverse:
    def test_example(self):
        assert augment_inverse([Quadruple(0, 1, 2, 5)], 3) == [(0, 1, 2, 5), (2, 4, 0, 5)]

    def test_empty(self):
        assert augment_inverse([], 3) == []

    def test_relation_out_of_range(self):
        with pytest.raises(ContractViolation):
            augment_inverse([Quadruple(0, 3, 1, 0)], 3)

    @given(st.integers(0, 50), st.integers(0, 9), st.integers(0, 50), st.integers(1, 10))
    def test_inverse_is_involution(self, s, r, o, nr):
        r = r % nr
        inv = inverse_triple((s, r, o), nr)
        assert inv[1] >= nr
        assert inverse_triple(inv, nr) == (s, r, o)

    @given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 2), st.integers(0, 9), st.integers(0, 4)), max_size=30))
    def test_augmented_set_closed_under_inverse(self, raw):
        out = augment_inverse([Quadruple(*q) for q in raw], 3)
        assert len(out) == 2 * len(raw)
        keyed = {(q.subject, q.relation, q.object, q.time) for q in out}
        for s, r, o, t in keyed:
            assert (*inverse_triple((s, r, o), 3), t) in keyed


class TestSnapshots:
    def test_buckets_preserve_order(self):
        snaps = build_snapshots([Quadruple(0, 0, 1, 0), Quadruple(1, 0, 2, 0)], 1)
        assert snaps[0].edges == ((0, 0, 1), (1, 0, 2))

    def test_empty_timestamp_gives_empty_snapshot(self):
        assert build_snapshots([Quadruple(0, 0, 1, 1)], 2)[0].edges == ()

    def test_time_out_of_range(self):
        with pytest.raises(ContractViolation):
            build_snapshots([Quadruple(0, 0, 1, 3)], 3)

    @given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 3), st.integers(0, 9), st.integers(0, 5)), max_size=40))
    def test_round_trip(self, raw):
        quads = [Quadruple(*q) for q in raw]
        snaps = build_snapshots(quads, 6)
        back = sorted((s, r, o, g.time_index) for g in snaps for s, r, o in g.edges)
        assert back == sorted(raw)

    def test_in_degree(self):
        snap = build_snapshots([Quadruple(0, 0, 2, 0), Quadruple(1, 0, 2, 0)], 1)[0]
        assert snap.in_degree(3).tolist() == [0, 0, 2]


class TestHistory:
    @pytest.mark.parametrize(
        "t,m,expected", [(5, 3, [2, 3, 4]), (1, 10, [0]), (0, 5, []), (3, 3, [0, 1, 2])]
    )
    def test_indices(self, t, m, expected):
        assert history_indices(t, m) == expected

    def test_windows_skip_empty_history_and_use_truth(self):
        ds = gen_synthetic_tkg(6, 2, 2, 10, seed=0)
        windows = list(history_windows(ds, 3, "train"))
        assert windows[0].query_time == 1
        last_valid = list(history_windows(ds, 3, "valid"))[0]
        assert [g.time_index for g in last_valid.history] == [5, 6, 7]
        assert last_valid.queries == ds.snapshots[8].edges

    def test_m_zero(self):
        ds = gen_synthetic_tkg(6, 2, 2, 10, seed=0)
        with pytest.raises(ContractViolation):
            list(history_windows(ds, 0, "train"))


class TestSynthetic:
    def test_reference_instance(self):
        ds = gen_synthetic_tkg(20, 2, 2, 200, seed=1)
        assert ds.num_timestamps == 200
        assert ds.split_boundaries == (160, 180)
        assert all(len(g) == 40 for g in ds.snapshots)

    @pytest.mark.parametrize("period", [1, 2, 3])
    def test_periodic(self, period):
        ds = gen_synthetic_tkg(8, 3, period, 12, seed=4)
        for t in range(period, 12):
            assert set(ds.snapshots[t].edges) == set(ds.snapshots[t - period].edges)

    def test_no_self_facts(self):
        ds = gen_synthetic_tkg(5, 1, 3, 9, seed=2)
        assert all(s != o for g in ds.snapshots for s, _, o in g.edges)

    def test_seeded(self):
        a = gen_synthetic_tkg(10, 2, 2, 10, seed=3)
        b = gen_synthetic_tkg(10, 2, 2, 10, seed=3)
        c = gen_synthetic_tkg(10, 2, 2, 10, seed=4)
        assert a == b and a != c

    @pytest.mark.parametrize("args", [(10, 2, 0, 10), (10, 2, 5, 10), (1, 2, 1, 10)])
    def test_invalid(self, args):
        with pytest.raises(ContractViolation):
            gen_synthetic_tkg(*args, seed=0)


class TestLoad:
    def test_round_trip_through_files(self, tmp_path):
        ds = gen_synthetic_tkg(6, 2, 2, 10, seed=0)
        write_dataset(ds, tmp_path / "d")
        loaded = load_dataset(tmp_path / "d")
        assert loaded.snapshots == ds.snapshots
        assert loaded.split_boundaries == ds.split_boundaries
        assert (loaded.num_entities, loaded.num_raw_relations) == (6, 2)
        assert len(loaded.fingerprint) == 64

    def test_sparse_raw_timestamps(self, tmp_path):
        d = tmp_path / "d"
        d.mkdir()
        write(d / "train.txt", "0\t0\t1\t0\n1\t0\t2\t24\n")
        write(d / "valid.txt", "2\t0\t0\t48\n")
        write(d / "test.txt", "0\t0\t2\t72\n")
        ds = load_dataset(d)
        assert ds.num_timestamps == 4 and ds.split_boundaries == (2, 3)
        assert ds.snapshots[1].edges == ((1, 0, 2), (2, 1, 1))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="missing"):
            load_dataset(tmp_path)

    def test_overlapping_splits(self, tmp_path):
        d = tmp_path / "d"
        d.mkdir()
        write(d / "train.txt", "0\t0\t1\t5\n")
        write(d / "valid.txt", "0\t0\t1\t3\n")
        write(d / "test.txt", "")
        with pytest.raises(DataError):
            load_dataset(d)

    def test_true_objects(self):
        ds = gen_synthetic_tkg(6, 2, 1, 5, seed=0)
        table = ds.true_objects(0)
        for s, r, o in ds.snapshots[0].edges:
            assert o in table[(s, r)]
        assert np.sum([len(v) for v in table.values()]) == len(ds.snapshots[0])
