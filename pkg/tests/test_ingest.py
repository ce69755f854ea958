import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tt2vfin.errors import IngestionError, UsageError
from tt2vfin.ingest import (CSV_HEADER, align_group, chronological_split, fill_missing,
                            forward_fill, load_csv, parse_csv, write_csv)
from tt2vfin.synthetic import business_days, series_from_closes

HEADER = ",".join(CSV_HEADER)


def csv_text(*rows):
    return "\n".join([HEADER, *rows]) + "\n"


ROW1 = "2020-01-02,10,11,9,10.5,10.4,1000"
ROW2 = "2020-01-03,10.5,12,10,11.5,11.4,1200"


def test_two_row_file():
    s = parse_csv(csv_text(ROW1, ROW2), "X")
    assert len(s) == 2
    assert s.column("close").tolist() == [10.5, 11.5]
    assert s.column("adj_close").tolist() == [10.4, 11.4]


def test_out_of_order_rows_are_sorted():
    assert parse_csv(csv_text(ROW2, ROW1), "X") == parse_csv(csv_text(ROW1, ROW2), "X")


def test_duplicate_date_cites_date_and_row():
    with pytest.raises(IngestionError, match="2020-01-02") as exc:
        parse_csv(csv_text(ROW1, ROW2, ROW1), "X")
    assert exc.value.row == 4 and exc.value.field == "Date"


def test_missing_column():
    with pytest.raises(IngestionError, match="Adj Close") as exc:
        parse_csv("Date,Open,High,Low,Close,Volume\n2020-01-02,1,1,1,1,1\n")
    assert exc.value.row == 1


def test_unparsable_number_names_row_and_field():
    with pytest.raises(IngestionError) as exc:
        parse_csv(csv_text(ROW1, "2020-01-03,1,1,1,abc,1,1"))
    assert (exc.value.row, exc.value.field) == (3, "Close")
    assert "row 3" in str(exc.value) and "Close" in str(exc.value)


def test_nonpositive_close_rejected():
    with pytest.raises(IngestionError, match="positive"):
        parse_csv(csv_text("2020-01-02,1,1,1,0,1,1"))


def test_empty_field_is_nan():
    s = parse_csv(csv_text(ROW1, "2020-01-03,,,,,,"))
    assert np.isnan(s.column("close")[1])


def test_file_round_trip(tmp_path):
    s = parse_csv(csv_text(ROW1, ROW2), "X")
    path = tmp_path / "X.csv"
    write_csv(s, path)
    assert load_csv(path) == s


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(alphabet="0123456789-,.\nabc", max_size=30), max_size=5))
def test_parsing_is_total(rows):
    try:
        s = parse_csv(io.StringIO(csv_text(*rows)))
    except IngestionError:
        return
    assert len(s) >= 1
    assert np.all(np.diff(s.dates).astype(int) > 0)


# -- alignment ---------------------------------------------------------------

def test_single_series_alignment_is_identity():
    s = series_from_closes("A", [1.0, 2.0, 3.0])
    g = align_group([s])
    assert g.closes.shape == (3, 1) and not np.isnan(g.closes).any()
    np.testing.assert_array_equal(g.dates, s.dates)


def test_disjoint_dates_union():
    d = business_days(6)
    a = series_from_closes("A", [1.0, 2.0, 3.0], d[:3])
    b = series_from_closes("B", [4.0, 5.0, 6.0], d[3:])
    g = align_group([a, b])
    np.testing.assert_array_equal(g.dates, d)
    assert np.isnan(g.column("A")).sum() == 3 and np.isnan(g.column("B")).sum() == 3


def test_younger_partner_leads_with_nan():
    # long history vs a partner that starts later: leading NaNs = dates before the partner's start
    d = business_days(500)
    old = series_from_closes("OLD", np.linspace(10, 20, 500), d)
    young = series_from_closes("NEW", np.linspace(5, 6, 120), d[380:])
    g = fill_missing(align_group([old, young]))
    expected = int(np.sum(d < young.dates[0]))
    col = g.column("NEW")
    assert expected == 380
    assert np.isnan(col[:expected]).all() and not np.isnan(col[expected:]).any()
    assert g.first_valid("NEW") == expected


def test_empty_and_duplicate_groups_rejected():
    with pytest.raises(UsageError):
        align_group([])
    s = series_from_closes("A", [1.0])
    with pytest.raises(UsageError):
        align_group([s, s])


# -- fill --------------------------------------------------------------------

@pytest.mark.parametrize("col,expected", [
    ([1, np.nan, np.nan, 2], [1, 1, 1, 2]),
    ([1, 2, 3], [1, 2, 3]),
    ([np.nan, 3, np.nan], [np.nan, 3, 3]),
    ([np.nan, np.nan], [np.nan, np.nan]),
])
def test_forward_fill(col, expected):
    np.testing.assert_array_equal(forward_fill(np.array(col, float)), expected)


def test_fill_is_idempotent():
    r = np.random.default_rng(0)
    d = business_days(200)
    a = series_from_closes("A", r.uniform(1, 2, 150), np.sort(r.choice(d, 150, replace=False)))
    b = series_from_closes("B", r.uniform(1, 2, 100), np.sort(r.choice(d[50:], 100, replace=False)))
    once = fill_missing(align_group([a, b]))
    twice = fill_missing(once)
    np.testing.assert_array_equal(once.closes, twice.closes)
    for t in ("A", "B"):
        col = once.column(t)
        assert not np.isnan(col[once.first_valid(t):]).any()


# -- split -------------------------------------------------------------------

@pytest.mark.parametrize("n,expected", [
    (10, ((0, 8), (8, 9), (9, 10))),
    (100, ((0, 80), (80, 90), (90, 100))),
    (101, ((0, 80), (80, 90), (90, 101))),
])
def test_split_examples(n, expected):
    assert tuple((r.start, r.stop) for r in chronological_split(n)) == expected


def test_split_floor_formula_without_float_drift():
    # 0.8 * 1000 and 0.9 * 1000 are exact under the floor rule
    tr, va, te = chronological_split(1000)
    assert (tr.stop, va.stop) == (800, 900)


@settings(max_examples=200, deadline=None)
@given(st.integers(10, 100_000))
def test_split_partitions_in_order(n):
    tr, va, te = chronological_split(n)
    assert tr.start == 0 and tr.stop == va.start and va.stop == te.start and te.stop == n
    assert tr.stop == (8 * n) // 10 and va.stop == (9 * n) // 10


def test_split_rejects_small_or_bad_ratios():
    with pytest.raises(UsageError):
        chronological_split(9)
    with pytest.raises(UsageError):
        chronological_split(100, (0.5, 0.2, 0.2))
