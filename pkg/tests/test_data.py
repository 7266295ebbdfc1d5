import numpy as np
import pytest

from higen import data as dt
from higen.errors import DataError


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines))


def sample_rows(n=10):
    return [dt.DatasetRow(f"u{i % 3}", f"tok{i} q", ((f"it{i:02d}", "click"),
                                                     (f"it{(i + 1) % n:02d}", "pay")),
                          f"it{i:02d}", 1, i % 2, 100.0 * i) for i in range(n)]


class TestLoadDataset:
    def test_empty_file_gives_zero_rows(self, tmp_path):
        path = tmp_path / "rows.jsonl"
        path.write_text("")
        result = dt.load_dataset(path)
        assert result.rows == [] and result.page_views == []

    def test_non_binary_label_rejected_and_counted(self, tmp_path):
        path = tmp_path / "rows.jsonl"
        good = ('{"user_id": "u", "query": "q", "context": [], "target_item_id": "i", '
                '"relevance": 1, "click": 1, "timestamp": 0}')
        rows = [good] * 200
        rows.append(good.replace('"click": 1', '"click": 2'))
        write_lines(path, rows)
        result = dt.load_dataset(path)
        assert result.malformed == 1
        assert len(result.rows) == 200

    def test_malformed_over_one_percent_aborts(self, tmp_path):
        path = tmp_path / "rows.jsonl"
        good = ('{"user_id": "u", "query": "q", "context": [], "target_item_id": "i", '
                '"relevance": 1, "click": 1, "timestamp": 0}')
        write_lines(path, [good] * 50 + ["{not json}"])
        with pytest.raises(DataError, match="1%"):
            dt.load_dataset(path)

    @pytest.mark.parametrize("schema", ["jsonl", "tsv"])
    def test_hundred_row_roundtrip(self, tmp_path, schema):
        rows = sample_rows(100)
        path = tmp_path / f"rows.{schema}"
        dt.save_dataset(path, rows, schema)
        result = dt.load_dataset(path, schema)
        assert result.rows == rows

    def test_unknown_target_item_listed(self, tmp_path):
        rows = sample_rows(3)
        path = tmp_path / "rows.jsonl"
        dt.save_dataset(path, rows)
        catalog = [dt.Item("it00", (1,), ("a",), (0.1,), 0.5)]
        with pytest.raises(DataError, match="it01"):
            dt.load_dataset(path, catalog=catalog)

    def test_missing_file_is_data_error(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            dt.load_dataset(tmp_path / "nope.jsonl")

    def test_unknown_schema(self, tmp_path):
        with pytest.raises(DataError):
            dt.load_dataset(tmp_path / "x", schema="csv")


class TestPageViews:
    def test_grouped_by_user_query_bucket(self):
        rows = [
            dt.DatasetRow("u1", "q", (), "a", 1, 1, 0.0),
            dt.DatasetRow("u1", "q", (), "b", 1, 0, 10.0),
            dt.DatasetRow("u1", "q", (), "c", 0, 0, 700.0),   # next bucket
            dt.DatasetRow("u2", "q", (), "d", 1, 1, 0.0),     # other user
        ]
        pvs = dt.group_page_views(rows, bucket_seconds=600.0)
        assert len(pvs) == 3
        first = pvs[0]
        assert first.entries == (("a", 1), ("b", 0))

    def test_entries_keep_row_order(self):
        rows = [dt.DatasetRow("u", "q", (), f"i{j}", 1, j % 2, 1.0) for j in range(4)]
        pvs = dt.group_page_views(rows)
        assert [e[0] for e in pvs[0].entries] == ["i0", "i1", "i2", "i3"]


class TestZeroShotSplit:
    def test_disjoint_removes_nothing(self):
        train = sample_rows(5)
        test = [dt.DatasetRow("u", "new query", (), "x", 1, 1, 0.0)]
        retained, removed = dt.zero_shot_split(train, test)
        assert retained == test and removed == 0.0

    def test_subset_removes_everything(self):
        train = sample_rows(5)
        retained, removed = dt.zero_shot_split(train, train[:3])
        assert retained == [] and removed == 1.0

    def test_constructed_65_percent_overlap_exact(self):
        train = sample_rows(200)
        test = train[:130] + [dt.DatasetRow("u", f"fresh {i}", (), "x", 1, 1, 0.0)
                              for i in range(70)]
        retained, removed = dt.zero_shot_split(train, test)
        assert removed == 0.65
        assert len(retained) == 70

    def test_idempotent(self):
        train = sample_rows(50)
        test = train[:20] + [dt.DatasetRow("u", f"fresh {i}", (), "x", 1, 1, 0.0)
                             for i in range(30)]
        once, _ = dt.zero_shot_split(train, test)
        twice, removed_again = dt.zero_shot_split(train, once)
        assert twice == once and removed_again == 0.0

    def test_empty_inputs_rejected(self):
        with pytest.raises(DataError):
            dt.zero_shot_split([], sample_rows(1))
        with pytest.raises(DataError):
            dt.zero_shot_split(sample_rows(1), [])


class TestCategoryTree:
    def test_paths_walk_to_root(self, tmp_path):
        path = tmp_path / "tree.jsonl"
        dt.save_category_tree(path, [
            {"category_id": 1, "parent_id": None, "name": "root"},
            {"category_id": 2, "parent_id": 1, "name": "mid"},
            {"category_id": 3, "parent_id": 2, "name": "leaf"},
        ])
        paths = dt.load_category_tree(path)
        assert paths[3] == (1, 2, 3)
        assert paths[1] == (1,)

    def test_unknown_parent_rejected(self, tmp_path):
        path = tmp_path / "tree.jsonl"
        dt.save_category_tree(path, [{"category_id": 2, "parent_id": 99, "name": "x"}])
        with pytest.raises(DataError, match="unknown parent"):
            dt.load_category_tree(path)

    def test_cycle_rejected(self, tmp_path):
        path = tmp_path / "tree.jsonl"
        dt.save_category_tree(path, [
            {"category_id": 1, "parent_id": 2, "name": "a"},
            {"category_id": 2, "parent_id": 1, "name": "b"},
        ])
        with pytest.raises(DataError, match="cycle"):
            dt.load_category_tree(path)


class TestUrlToCategory:
    def test_first_two_host_labels(self):
        assert dt.url_to_category("http://www.spiritplay.org/page") == "www.spiritplay"

    def test_configurable_parts(self):
        assert dt.url_to_category("sub.example.co.uk", parts=3) == "sub.example.co"


class TestSynthetic:
    def test_deterministic(self):
        a = dt.generate_synthetic(n_items=40, n_categories=4, n_train_queries=20,
                                  n_test_queries=10, seed=3)
        b = dt.generate_synthetic(n_items=40, n_categories=4, n_train_queries=20,
                                  n_test_queries=10, seed=3)
        assert a.catalog == b.catalog
        assert a.train_rows == b.train_rows
        assert a.test_rows == b.test_rows

    def test_structure(self):
        c = dt.generate_synthetic(n_items=40, n_categories=4, n_train_queries=20,
                                  n_test_queries=10, seed=0)
        ids = {it.item_id for it in c.catalog}
        assert len(ids) == 40
        for row in c.train_rows + c.test_rows:
            assert row.target_item_id in ids
            assert row.relevance in (0, 1) and row.click in (0, 1)
        clicked = [r for r in c.train_rows if r.click == 1]
        assert len(clicked) == 20
        # every PV carries both label classes, so triplets are mineable
        pvs = dt.group_page_views(c.train_rows)
        assert all({y for _i, y in pv.entries} == {0, 1} for pv in pvs)

    def test_catalog_roundtrip(self, tmp_path):
        c = dt.generate_synthetic(n_items=12, n_categories=3, n_train_queries=6,
                                  n_test_queries=3, seed=1)
        path = tmp_path / "catalog.jsonl"
        dt.save_catalog(path, c.catalog)
        assert dt.load_catalog(path) == c.catalog

    def test_oracle_roundtrip(self, tmp_path):
        c = dt.generate_synthetic(n_items=12, n_categories=6, n_train_queries=6,
                                  n_test_queries=3, seed=1)
        path = tmp_path / "oracle.jsonl"
        dt.write_oracle_jsonl(path, c.oracle_pairs)
        assert dt.read_oracle_jsonl(path) == c.oracle_pairs

    def test_duplicate_catalog_ids_rejected(self, tmp_path):
        path = tmp_path / "catalog.jsonl"
        item = dt.Item("dup", (1,), ("a",), (0.1,), 0.5)
        dt.save_catalog(path, [item, item])
        with pytest.raises(DataError, match="duplicate"):
            dt.load_catalog(path)
