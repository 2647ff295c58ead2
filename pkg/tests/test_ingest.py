import io
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longmix.exceptions import (
    CrossedGroups,
    EmptyInput,
    EmptyStratum,
    InconsistentWeather,
    InvalidBorough,
    MissingColumn,
    NonNumeric,
    NotEnoughCompletePairs,
    OutOfRange,
    UnbalancedPanel,
)
from longmix.ingest import (
    BOROUGHS,
    CANONICAL_COLUMNS,
    WEATHER_COLUMNS,
    Panel,
    aggregate_monthly,
    classify_season,
    iter_strata,
    monthly_weather_summary,
    parse_dataset,
    read_dataset,
    run_pipeline,
    sample_pairs,
    serialize_dataset,
    stratify,
    write_dataset,
)
from longmix.simulate import simulate_raw_od, simulate_weather


def _csv_bytes(frame):
    return frame.to_csv(index=False).encode()


def _canonical(panel):
    return panel.to_frame().loc[:, list(CANONICAL_COLUMNS)]


# -- parse_dataset ----------------------------------------------------------

def test_parse_fifty_pairs(panel):
    parsed = parse_dataset(serialize_dataset(panel).encode())
    assert parsed.n_subjects == 50
    assert len(parsed) == 600


def test_parse_accepts_any_column_order_and_streams(panel):
    frame = _canonical(panel)
    shuffled = frame[list(reversed(frame.columns))]
    a = parse_dataset(io.BytesIO(_csv_bytes(shuffled)))
    b = parse_dataset(io.StringIO(shuffled.to_csv(index=False)))
    assert a.equals(parse_dataset(_csv_bytes(frame)))
    assert a.equals(b)


def test_manhattan_indicators(panel):
    frame = panel.to_frame()
    row = frame[frame["origin_borough"] == "M"].iloc[0]
    assert (row["M"], row["N"], row["Bk"], row["Bx"], row["Q"], row["manhattan_origin"]) == \
        (1, 0, 0, 0, 0, 1)


def test_december_indicator(panel):
    frame = panel.to_frame()
    assert set(frame.loc[frame["month"] == 12, "december"]) == {1}
    assert set(frame.loc[frame["month"] == 7, "december"]) == {0}


def test_indicator_algebra(panel):
    f = panel.to_frame()
    assert np.all(f["M"] + f["Bk"] + f["Bx"] + f["Q"] == 1)
    assert np.all(f["N"] == 1 - f["M"])


def test_pair_id_and_sort_order(panel):
    f = panel.to_frame()
    assert np.all(f["pair_id"] == f["origin_id"] + "_" + f["destination_id"])
    keys = list(zip(f["pair_id"], f["month"]))
    assert keys == sorted(keys)


def test_missing_column(panel):
    frame = _canonical(panel).drop(columns="max_gust")
    with pytest.raises(MissingColumn) as err:
        parse_dataset(_csv_bytes(frame))
    assert err.value.name == "max_gust"


def test_non_numeric_reports_row_and_column(panel):
    frame = _canonical(panel).astype({"avg_wind": object})
    frame.loc[4, "avg_wind"] = "calm"
    with pytest.raises(NonNumeric) as err:
        parse_dataset(_csv_bytes(frame))
    assert (err.value.row, err.value.column) == (6, "avg_wind")


def test_invalid_borough(panel):
    frame = _canonical(panel)
    frame.loc[0, "destination_borough"] = "SI"
    with pytest.raises(InvalidBorough) as err:
        parse_dataset(_csv_bytes(frame))
    assert err.value.value == "SI"


def test_unbalanced_lists_pairs(panel):
    frame = _canonical(panel)
    first = frame["origin_id"].iloc[0] + "_" + frame["destination_id"].iloc[0]
    with pytest.raises(UnbalancedPanel) as err:
        parse_dataset(_csv_bytes(frame.iloc[1:]))
    assert err.value.pair_ids == [first]


def test_duplicate_month_is_unbalanced(panel):
    frame = _canonical(panel)
    frame.loc[1, "month"] = frame.loc[0, "month"]
    with pytest.raises(UnbalancedPanel):
        parse_dataset(_csv_bytes(frame))


def test_empty_file_rejected():
    header = ",".join(CANONICAL_COLUMNS) + "\n"
    with pytest.raises(EmptyInput):
        parse_dataset(header.encode())


def test_extra_column_warns_and_is_dropped(panel):
    frame = _canonical(panel).assign(comment="x")
    with pytest.warns(UserWarning, match="non-canonical"):
        parsed = parse_dataset(_csv_bytes(frame))
    assert "comment" not in parsed.columns


def test_quoted_station_names(panel):
    frame = _canonical(panel)
    frame["origin_name"] = "Times Sq-42 St, Manhattan"
    parsed = parse_dataset(_csv_bytes(frame))
    assert parsed.to_frame()["origin_name"].iloc[0] == "Times Sq-42 St, Manhattan"


def test_round_trip(panel, tmp_path):
    path = tmp_path / "panel.csv"
    write_dataset(panel, path)
    again = read_dataset(path)
    assert again.equals(panel)
    assert serialize_dataset(again) == path.read_text()


def test_panel_is_not_mutated_through_copies(panel):
    frame = panel.to_frame()
    frame.loc[0, "avg_ridership"] = -1.0
    assert panel.to_frame()["avg_ridership"].iloc[0] >= 0


def test_crossed_pair_rejected(panel):
    frame = panel.to_frame()
    pid = frame["pair_id"].iloc[0]
    rows = frame.index[frame["pair_id"] == pid]
    other = next(b for b in BOROUGHS if b != frame.loc[rows[0], "origin_borough"])
    frame.loc[rows[0], "origin_borough"] = other
    with pytest.raises(CrossedGroups):
        Panel(frame)


# -- aggregation --------------------------------------------------------------

def test_aggregate_mean_of_two():
    out = aggregate_monthly([("A", "B", 1, 7, 2.0), ("A", "B", 1, 8, 4.0)])
    assert out["avg_ridership"].tolist() == [3.0]


def test_aggregate_single_row():
    out = aggregate_monthly([("A", "B", 3, 17, 5.5)])
    assert out.loc[0, ["origin_id", "destination_id", "month", "avg_ridership"]].tolist() == \
        ["A", "B", 3, 5.5]


def test_aggregate_constant_hours():
    c = 0.1
    out = aggregate_monthly([("A", "B", 2, h, c) for h in range(24)])
    assert out["avg_ridership"].iloc[0] == c


def test_aggregate_empty():
    with pytest.raises(EmptyInput):
        aggregate_monthly([])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("ABC"), st.sampled_from("XY"),
                          st.integers(1, 12), st.integers(0, 23),
                          st.floats(0, 1e4, allow_nan=False)), min_size=1, max_size=40),
       st.randoms(use_true_random=False))
def test_aggregate_order_invariant(rows, rnd):
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    pd.testing.assert_frame_equal(aggregate_monthly(rows), aggregate_monthly(shuffled))


# -- sampling -----------------------------------------------------------------

def _monthly(n_complete, n_partial=0):
    rows = []
    for i in range(n_complete + n_partial):
        months = range(1, 13) if i < n_complete else range(1, 12)
        rows += [(f"o{i}", f"d{i}", m, 0, float(i)) for m in months]
    return aggregate_monthly(rows)


def test_sample_deterministic():
    monthly = _monthly(60)
    a, b = sample_pairs(monthly, 50, 7), sample_pairs(monthly, 50, 7)
    pd.testing.assert_frame_equal(a, b)
    assert a.groupby(["origin_id", "destination_id"]).ngroups == 50
    assert (a.groupby(["origin_id", "destination_id"]).size() == 12).all()


def test_sample_forced_when_n_equals_eligible():
    monthly = _monthly(3, n_partial=2)
    pairs = {tuple(x) for x in sample_pairs(monthly, 3, 1)[["origin_id", "destination_id"]].values}
    for seed in range(5):
        got = {tuple(x) for x in sample_pairs(monthly, 3, seed)[["origin_id", "destination_id"]].values}
        assert got == pairs == {("o0", "d0"), ("o1", "d1"), ("o2", "d2")}


def test_incomplete_pair_never_sampled():
    monthly = _monthly(10, n_partial=1)
    for seed in range(20):
        assert "o10" not in set(sample_pairs(monthly, 10, seed)["origin_id"])


def test_not_enough_pairs():
    with pytest.raises(NotEnoughCompletePairs) as err:
        sample_pairs(_monthly(4, 1), 5, 0)
    assert (err.value.available, err.value.requested) == (4, 5)


def test_sampling_roughly_uniform():
    monthly = _monthly(6)
    counts = pd.Series(0, index=[f"o{i}" for i in range(6)])
    for seed in range(600):
        for o in sample_pairs(monthly, 2, seed)["origin_id"].unique():
            counts[o] += 1
    # each pair is chosen with probability 1/3; 200 expected, sd about 11.5
    assert counts.between(150, 250).all()


def test_pipeline_deterministic():
    raw, stations = simulate_raw_od(30, 3, seed=2)
    weather = simulate_weather(2)
    a = run_pipeline(raw, weather, 25, seed=7, stations=stations)
    b = run_pipeline(raw.sample(frac=1.0, random_state=1), weather, 25, seed=7, stations=stations)
    assert len(a) == 300 and a.n_subjects == 25
    assert a.equals(b)


# -- seasons, summaries, strata -------------------------------------------------

@pytest.mark.parametrize("month,season", [(1, "winter"), (7, "summer"), (11, "fall"),
                                          (12, "winter"), (3, "spring")])
def test_classify_season(month, season):
    assert classify_season(month) == season


@pytest.mark.parametrize("bad", [0, 13, -1])
def test_classify_season_out_of_range(bad):
    with pytest.raises(OutOfRange):
        classify_season(bad)


def test_weather_summary_shape_and_order(panel):
    s = monthly_weather_summary(panel)
    assert s.shape == (12, 11)
    assert list(s.index) == list(range(1, 13))
    assert tuple(s.columns) == WEATHER_COLUMNS


def test_weather_summary_matches_observations(panel):
    s = monthly_weather_summary(panel)
    f = panel.to_frame()
    for _, row in f.sample(20, random_state=0).iterrows():
        assert np.array_equal(s.loc[row["month"]].to_numpy(),
                              row[list(WEATHER_COLUMNS)].to_numpy(dtype=float))


def test_inconsistent_weather(panel):
    f = panel.to_frame()
    idx = f.index[f["month"] == 3][5]
    f.loc[idx, "max_wind"] += 1.0
    with pytest.raises(InconsistentWeather) as err:
        monthly_weather_summary(Panel(f))
    assert err.value.month == 3


def test_strata_partition(panel):
    parts = [stratify(panel, b) for b in BOROUGHS if b in set(panel.column("origin_borough"))]
    assert sum(len(p) for p in parts) == len(panel) == 600
    ids = [set(p.subjects) for p in parts]
    assert set().union(*ids) == set(panel.subjects)
    assert sum(len(s) for s in ids) == panel.n_subjects
    assert set(stratify(panel, "M").column("manhattan_origin")) == {1}
    assert [b for b, _ in iter_strata(panel)] == [b for b in BOROUGHS
                                                  if b in set(panel.column("origin_borough"))]


def test_empty_stratum(panel):
    f = panel.to_frame()
    f = f[f["origin_borough"] != "Bx"]
    with pytest.raises(EmptyStratum):
        stratify(Panel(f), "Bx")


def test_ordering_violation_warns(panel):
    frame = _canonical(panel)
    frame["min_temp"] = frame["max_temp"] + 1
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        parse_dataset(_csv_bytes(frame))
    assert any("min_temp > avg_temp" in str(w.message) for w in rec)
