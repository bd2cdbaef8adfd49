import csv
import io
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from synthehr.schema import (
    DataTable, FeatureSpec, SchemaError, TableError, TableSchema, format_schema, format_table, label_vector,
    load_schema, load_table, parse_row, parse_schema, read_table, select_features, split, summarize,
)
from synthehr.simulate import eicu_shaped_schema

from conftest import gaussian_schema, make_table

DATA = Path(__file__).resolve().parents[1] / "src" / "synthehr" / "data"


def test_packaged_schema_has_83_features_and_death_label():
    schema = load_schema(DATA / "eicu_shaped.schema")
    assert len(schema) == 83
    assert schema.label.name == "death"
    assert schema == eicu_shaped_schema()


def test_single_label_schema_is_valid():
    schema = parse_schema("death, binary, label, values=0|1\n")
    assert len(schema) == 1


def test_two_labels_rejected():
    with pytest.raises(SchemaError):
        parse_schema("a, binary, label, values=0|1\nb, binary, label, values=0|1\n")


@pytest.mark.parametrize("text", [
    "x, continuous\n",  # missing role
    "x, continuous, covariate, range=5:1\ny, binary, label, values=0|1\n",
    "x, categorical, covariate\ny, binary, label, values=0|1\n",
    "x, continuous, covariate\nx, continuous, covariate\ny, binary, label, values=0|1\n",
    "x, widget, covariate\ny, binary, label, values=0|1\n",
])
def test_malformed_schemas(text):
    with pytest.raises(SchemaError):
        parse_schema(text)


def test_schema_text_round_trip():
    schema = eicu_shaped_schema()
    assert parse_schema(format_schema(schema)) == schema


def test_load_table_hundred_rows(tmp_path, rng):
    schema = gaussian_schema(9)
    cols = {f"x{i}": rng.normal(size=100) for i in range(1, 10)}
    cols["y"] = rng.choice(["0", "1"], 100)
    path = tmp_path / "t.csv"
    path.write_text(format_table(make_table(schema, **cols)))
    t = load_table(path, schema)
    assert t.n_rows == 100 and len(t.schema) == 10


def test_missing_mask_matches_independent_count():
    text = "x1,x2,x3,y\n1,,3,0\n,,,1\n4,5,6,\n7,8,,0\n"
    # independent count of empty cells straight from the csv module
    expected = sum(cell == "" for row in list(csv.reader(io.StringIO(text)))[1:] for cell in row)
    t = read_table(text, gaussian_schema(3))
    assert expected == 6
    assert summarize(t).missing_total == expected
    assert t.missing("x2").tolist() == [True, True, False, False]


def test_header_order_is_irrelevant():
    t = read_table("y,x3,x2,x1\n1,3,2,1\n", gaussian_schema(3))
    assert t.columns["x1"][0] == 1.0 and list(t.schema.names) == ["x1", "x2", "x3", "y"]


def test_unparseable_cell_names_row_and_column():
    with pytest.raises(TableError) as exc:
        read_table("x1,x2,x3,y\n1,2,3,0\n1,abc,3,0\n", gaussian_schema(3))
    assert "x2" in str(exc.value) and "row" in str(exc.value)


@pytest.mark.parametrize("text", ["x1,x2,y\n1,2,0\n", "x1,x2,x3,y\n1,2,0\n"])
def test_header_and_row_length_errors(text):
    with pytest.raises(TableError):
        read_table(text, gaussian_schema(3))


def test_parse_row_reports_every_violation():
    schema = TableSchema((FeatureSpec("age", "continuous", range=(0, 120)),
                          FeatureSpec("sex", "categorical", allowed_values=("F", "M")),
                          FeatureSpec("y", "binary", "label", ("0", "1"))))
    _, problems = parse_row(schema, {"age": "130", "sex": "X", "y": "1.0"})
    assert [(p.feature, p.code) for p in problems] == [("age", "out_of_range"), ("sex", "not_allowed")]


def test_positive_rate_two_of_twenty_three():
    schema = gaussian_schema(1)
    y = ["1", "1"] + ["0"] * 21
    s = summarize(make_table(schema, x1=np.arange(23.0), y=y))
    assert s.positive_label_rate == pytest.approx(0.0870, abs=1e-4)


def test_all_negative_rate_and_group_counts():
    schema = gaussian_schema(1, group=True)
    t = make_table(schema, sex=["F"] * 40 + ["M"] * 60, x1=np.zeros(100), y=["0"] * 100)
    s = summarize(t)
    assert s.positive_label_rate == 0.0
    assert s.per_group_counts == {"sex": {"F": 40, "M": 60}}


def test_empty_table_summary():
    s = summarize(make_table(gaussian_schema(1), x1=[], y=[]))
    assert (s.n_rows, s.positive_label_rate, s.missing_total) == (0, 0.0, 0)


def test_split_sizes_stratified_and_deterministic(linear_table):
    t = linear_table.take(np.arange(1000))
    a = split(t, 0.8, 7)
    b = split(t, 0.8, 7)
    assert (a.train.n_rows, a.test.n_rows) == (800, 200)
    assert a.stratified
    assert a.train.equals(b.train) and a.test.equals(b.test)
    r1, r2 = np.nanmean(label_vector(a.train)), np.nanmean(label_vector(a.test))
    assert abs(r1 - r2) < 0.02


def test_split_small_table_falls_back():
    t = make_table(gaussian_schema(1), x1=[1.0, 2.0, 3.0], y=["0", "1", "0"])
    with pytest.warns(UserWarning):
        s = split(t, 0.5, 0)
    assert not s.stratified
    assert s.train.n_rows + s.test.n_rows == 3


def test_select_features_order_and_label_last():
    t = make_table(gaussian_schema(3), x1=[1.0], x2=[2.0], x3=[3.0], y=["1"])
    sub = select_features(t, ["x3", "y", "x1"])
    assert list(sub.schema.names) == ["x3", "x1", "y"]
    with pytest.raises(KeyError):
        select_features(t, ["nope"])


def test_top_ten_of_83_gives_11_columns(cohort):
    names = [f.name for f in cohort.schema.covariates][:10]
    assert len(select_features(cohort, names).schema) == 11


@given(st.lists(st.tuples(st.one_of(st.none(), st.floats(-1e6, 1e6, allow_nan=False)),
                          st.sampled_from(["0", "1", ""])), min_size=0, max_size=30))
def test_csv_round_trip_preserves_values_and_missingness(rows):
    schema = gaussian_schema(1)
    t = make_table(schema, x1=[r[0] for r in rows], y=[r[1] for r in rows])
    back = read_table(format_table(t), schema)
    assert back.equals(t)
    assert np.array_equal(back.missing_mask, t.missing_mask)


@given(st.integers(4, 200), st.floats(0.05, 0.95), st.integers(0, 2 ** 31 - 1))
def test_split_is_a_partition(n, fraction, seed):
    rng = np.random.default_rng(seed)
    t = make_table(gaussian_schema(1), x1=np.arange(n, dtype=float), y=rng.choice(["0", "1"], n))
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = split(t, fraction, seed)
    a, b = set(s.train.columns["x1"]), set(s.test.columns["x1"])
    assert not a & b and len(a | b) == n
    assert s.train.n_rows == int(round(fraction * n))


def test_table_rejects_out_of_range_values():
    schema = TableSchema((FeatureSpec("a", "continuous", range=(0, 1)), FeatureSpec("y", "binary", "label",
                                                                                     ("0", "1"))))
    with pytest.raises(TableError):
        DataTable.from_columns(schema, {"a": [2.0], "y": ["0"]})
