"""Reading, validating and deriving the ridership-weather panel.

The canonical file has one row per origin-destination pair and month with
city-level weather merged by month.  A :class:`Panel` wraps the parsed table
together with the derived indicator columns used by the model registry.
"""
from __future__ import annotations

import io
import logging
import os
import warnings
from dataclasses import dataclass
from typing import IO, Iterable, Union

import numpy as np
import pandas as pd

from .exceptions import (
    CrossedGroups,
    EmptyInput,
    EmptyStratum,
    InconsistentWeather,
    InvalidBorough,
    InvalidValue,
    MissingColumn,
    NonNumeric,
    NotEnoughCompletePairs,
    OutOfRange,
    UnbalancedPanel,
)

logger = logging.getLogger(__name__)

BOROUGHS = ("M", "Bk", "Bx", "Q")
N_MONTHS = 12

WEATHER_COLUMNS = (
    "max_temp",
    "avg_temp",
    "min_temp",
    "max_dew_point",
    "avg_dew_point",
    "min_dew_point",
    "total_precip",
    "max_wind",
    "avg_wind",
    "max_gust",
    "avg_gust",
)

CANONICAL_COLUMNS = (
    "origin_id",
    "destination_id",
    "month",
    "avg_ridership",
    "origin_borough",
    "destination_borough",
    "origin_name",
    "destination_name",
    *WEATHER_COLUMNS,
    "season",
)

INDICATOR_COLUMNS = ("M", "N", "Bk", "Bx", "Q", "december", "manhattan_origin")

SEASONS = {
    12: "winter", 1: "winter", 2: "winter",
    3: "spring", 4: "spring", 5: "spring",
    6: "summer", 7: "summer", 8: "summer",
    9: "fall", 10: "fall", 11: "fall",
}

# (lower, upper) pairs that must satisfy lower <= upper in every row
_ORDERED_PAIRS = (
    ("min_temp", "avg_temp"),
    ("avg_temp", "max_temp"),
    ("min_dew_point", "avg_dew_point"),
    ("avg_dew_point", "max_dew_point"),
    ("avg_wind", "max_wind"),
    ("avg_gust", "max_gust"),
)

Source = Union[str, os.PathLike, bytes, IO]


def classify_season(month):
    """Meteorological season of a calendar month (Dec-Feb is winter)."""
    try:
        return SEASONS[int(month)]
    except (KeyError, TypeError, ValueError):
        raise OutOfRange(f"month must be an integer in 1..12, got {month!r}") from None


def _read_csv(source: Source) -> pd.DataFrame:
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(bytes(source))
    return pd.read_csv(source, dtype=str, keep_default_na=False, skipinitialspace=True,
                       encoding="utf-8")


def _to_numeric(frame, column, integer=False):
    values = frame[column].str.strip()
    out = pd.to_numeric(values, errors="coerce")
    bad = out.isna()
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise NonNumeric(i + 2, column, frame[column].iloc[i])  # +2: header, 1-based
    if integer:
        if not np.all(np.equal(np.mod(out, 1), 0)):
            i = int(np.flatnonzero(np.mod(out, 1) != 0)[0])
            raise NonNumeric(i + 2, column, frame[column].iloc[i])
        return out.astype(np.int64)
    # pandas' fast parser can be off by an ulp; float() rounds correctly
    return values.map(float).astype(np.float64)


def derive_indicators(frame: pd.DataFrame) -> pd.DataFrame:
    """Add pair_id and the 0/1 indicator columns used by the models."""
    out = frame.copy()
    out["pair_id"] = out["origin_id"].astype(str) + "_" + out["destination_id"].astype(str)
    borough = out["origin_borough"]
    for b in BOROUGHS:
        out[b] = (borough == b).astype(np.int64)
    out["N"] = 1 - out["M"]
    out["manhattan_origin"] = out["M"].copy()
    out["december"] = (out["month"] == 12).astype(np.int64)
    return out


def check_observations(frame: pd.DataFrame) -> list[str]:
    """List violations of the per-row ordering invariants on weather fields."""
    problems = []
    for lo, hi in _ORDERED_PAIRS:
        if lo in frame and hi in frame:
            bad = frame[lo].to_numpy() > frame[hi].to_numpy()
            if bad.any():
                problems.append(f"{lo} > {hi} in {int(bad.sum())} rows")
    return problems


def _unbalanced_pairs(frame):
    counts = frame.groupby("pair_id")["month"].agg(["size", "nunique"])
    bad = counts[(counts["size"] != N_MONTHS) | (counts["nunique"] != N_MONTHS)]
    return sorted(bad.index.tolist())


@dataclass(frozen=True, eq=False)
class Panel:
    """Balanced longitudinal panel: every pair observed in each of the 12 months.

    Rows are kept sorted by ``(pair_id, month)``.  The wrapped frame is
    private; :meth:`to_frame` hands out copies so a panel never changes after
    construction.
    """

    _frame: pd.DataFrame

    def __post_init__(self):
        frame = self._frame
        if len(frame) == 0:
            raise EmptyInput("panel has no rows")
        bad = _unbalanced_pairs(frame)
        if bad:
            raise UnbalancedPanel(bad)
        per_pair = frame.groupby("pair_id")["origin_borough"].nunique()
        if (per_pair > 1).any():
            raise CrossedGroups(sorted(per_pair[per_pair > 1].index))
        frame = frame.sort_values(["pair_id", "month"], kind="mergesort").reset_index(drop=True)
        object.__setattr__(self, "_frame", frame)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "Panel":
        """Build a panel from a frame holding at least the canonical columns."""
        missing = [c for c in CANONICAL_COLUMNS if c not in frame.columns]
        for c in missing:
            if c != "season":
                raise MissingColumn(c)
        frame = frame.copy()
        if "season" not in frame.columns:
            frame["season"] = [classify_season(m) for m in frame["month"]]
        if "pair_id" not in frame.columns or not set(INDICATOR_COLUMNS) <= set(frame.columns):
            frame = derive_indicators(frame)
        return cls(frame)

    def to_frame(self) -> pd.DataFrame:
        return self._frame.copy()

    def column(self, name) -> np.ndarray:
        return self._frame[name].to_numpy()

    @property
    def columns(self) -> tuple:
        return tuple(self._frame.columns)

    @property
    def subjects(self) -> list:
        return list(pd.unique(self._frame["pair_id"]))

    @property
    def n_subjects(self) -> int:
        return self._frame["pair_id"].nunique()

    def __len__(self):
        return len(self._frame)

    def with_columns(self, **columns) -> "Panel":
        frame = self.to_frame()
        for name, values in columns.items():
            frame[name] = values
        return Panel(frame)

    def equals(self, other: "Panel") -> bool:
        return isinstance(other, Panel) and self._frame.equals(other._frame)


def parse_dataset(source: Source) -> Panel:
    """Parse the canonical 20-column CSV into a :class:`Panel`.

    ``source`` may be a path, raw bytes or an open (text or binary) stream.
    Columns not in the canonical set are dropped with a warning.
    """
    raw = _read_csv(source)
    raw.columns = [c.strip() for c in raw.columns]
    for col in CANONICAL_COLUMNS:
        if col not in raw.columns:
            raise MissingColumn(col)
    extra = [c for c in raw.columns if c not in CANONICAL_COLUMNS]
    if extra:
        warnings.warn(f"ignoring non-canonical columns: {extra}", stacklevel=2)
    frame = raw[list(CANONICAL_COLUMNS)].copy()
    if len(frame) == 0:
        raise EmptyInput("dataset has no data rows")
    for col in ("origin_id", "destination_id", "origin_borough", "destination_borough",
                "origin_name", "destination_name", "season"):
        frame[col] = frame[col].str.strip()
    frame["month"] = _to_numeric(frame, "month", integer=True)
    for col in ("avg_ridership", *WEATHER_COLUMNS):
        frame[col] = _to_numeric(frame, col)
    for col in ("origin_borough", "destination_borough"):
        bad = ~frame[col].isin(BOROUGHS)
        if bad.any():
            raise InvalidBorough(frame[col][bad].iloc[0])
    months = frame["month"]
    if ((months < 1) | (months > N_MONTHS)).any():
        raise InvalidValue(f"month outside 1..12: {months[(months < 1) | (months > 12)].iloc[0]}")
    if (frame["avg_ridership"] < 0).any():
        raise InvalidValue("avg_ridership must be nonnegative")
    if (frame["total_precip"] < 0).any():
        raise InvalidValue("total_precip must be nonnegative")
    for problem in check_observations(frame):
        warnings.warn(f"weather ordering invariant violated: {problem}", stacklevel=2)
    return Panel(derive_indicators(frame))


def read_dataset(path) -> Panel:
    with open(path, "rb") as fh:
        return parse_dataset(fh)


def serialize_dataset(panel_or_frame) -> str:
    """Canonical CSV text (20 columns, canonical order, full float precision)."""
    frame = panel_or_frame.to_frame() if isinstance(panel_or_frame, Panel) else panel_or_frame
    out = io.StringIO()
    # default float formatting is the shortest repr, which round-trips exactly
    frame.loc[:, list(CANONICAL_COLUMNS)].to_csv(out, index=False, lineterminator="\n")
    return out.getvalue()


def write_dataset(panel_or_frame, path) -> None:
    text = serialize_dataset(panel_or_frame)
    _atomic_write(path, text)


def _atomic_write(path, text):
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


# -- file-based aggregation pipeline -------------------------------------

RAW_COLUMNS = ("origin_id", "destination_id", "month", "hour", "estimated_ridership")


def aggregate_monthly(raw_rows) -> pd.DataFrame:
    """Average hourly OD ridership to one row per (origin, destination, month).

    Accepts a DataFrame or an iterable of 5-tuples.  Extra columns on a
    DataFrame that are constant per key (station names, boroughs) are
    carried through.  The result does not depend on input row order.
    """
    if isinstance(raw_rows, pd.DataFrame):
        frame = raw_rows.copy()
    else:
        frame = pd.DataFrame(list(raw_rows), columns=list(RAW_COLUMNS))
    if len(frame) == 0:
        raise EmptyInput("no raw ridership rows")
    for col in RAW_COLUMNS:
        if col not in frame.columns:
            raise MissingColumn(col)
    frame["origin_id"] = frame["origin_id"].astype(str).str.strip()
    frame["destination_id"] = frame["destination_id"].astype(str).str.strip()
    if frame["month"].dtype == object:
        frame["month"] = _to_numeric(frame, "month", integer=True)
    if frame["estimated_ridership"].dtype == object:
        frame["estimated_ridership"] = _to_numeric(frame, "estimated_ridership")
    frame["month"] = frame["month"].astype(np.int64)
    frame["estimated_ridership"] = frame["estimated_ridership"].astype(np.float64)
    if (frame["estimated_ridership"] < 0).any():
        raise InvalidValue("estimated_ridership must be nonnegative")
    keys = ["origin_id", "destination_id", "month"]
    # sorting values within each key fixes the summation order
    frame = frame.sort_values(keys + ["estimated_ridership"], kind="mergesort")
    extra = [c for c in frame.columns if c not in RAW_COLUMNS]
    grouped = frame.groupby(keys, sort=True)
    # shifting by the group minimum keeps the mean of a constant exact
    lo = grouped["estimated_ridership"].transform("min")
    shifted = (frame["estimated_ridership"] - lo).groupby([frame[k] for k in keys], sort=True)
    out = grouped[extra].first() if extra else grouped.size().to_frame("_n").iloc[:, :0]
    out["avg_ridership"] = grouped["estimated_ridership"].min() + shifted.mean()
    out = out.reset_index()
    return out.loc[:, keys + ["avg_ridership"] + extra]


def complete_pairs(monthly: pd.DataFrame) -> list:
    months = monthly.groupby(["origin_id", "destination_id"])["month"].nunique()
    return sorted(months[months == N_MONTHS].index.tolist())


def sample_pairs(monthly: pd.DataFrame, n: int, seed: int) -> pd.DataFrame:
    """Uniformly sample ``n`` complete pairs without replacement."""
    eligible = complete_pairs(monthly)
    if n > len(eligible):
        raise NotEnoughCompletePairs(len(eligible), n)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(eligible), size=n, replace=False)
    keep = pd.MultiIndex.from_tuples([eligible[i] for i in sorted(chosen)])
    idx = pd.MultiIndex.from_frame(monthly[["origin_id", "destination_id"]])
    out = monthly[idx.isin(keep)]
    return out.sort_values(["origin_id", "destination_id", "month"]).reset_index(drop=True)


def merge_weather(monthly: pd.DataFrame, weather: pd.DataFrame) -> pd.DataFrame:
    """Attach city-level monthly weather and the season label."""
    missing = [c for c in ("month", *WEATHER_COLUMNS) if c not in weather.columns]
    if missing:
        raise MissingColumn(missing[0])
    weather = weather.loc[:, ["month", *WEATHER_COLUMNS]].copy()
    weather["month"] = weather["month"].astype(np.int64)
    if weather["month"].duplicated().any():
        raise InconsistentWeather(int(weather["month"][weather["month"].duplicated()].iloc[0]))
    out = monthly.merge(weather, on="month", how="left", validate="many_to_one")
    if out[list(WEATHER_COLUMNS)].isna().any().any():
        month = int(out.loc[out[list(WEATHER_COLUMNS)].isna().any(axis=1), "month"].iloc[0])
        raise InvalidValue(f"no weather record for month {month}")
    out["season"] = [classify_season(m) for m in out["month"]]
    return out


def attach_stations(monthly: pd.DataFrame, stations: pd.DataFrame) -> pd.DataFrame:
    """Add station names and boroughs from a (station_id, station_name, borough) table."""
    for col in ("station_id", "station_name", "borough"):
        if col not in stations.columns:
            raise MissingColumn(col)
    st = stations.assign(station_id=stations["station_id"].astype(str).str.strip())
    st = st.set_index("station_id")
    out = monthly.copy()
    for side in ("origin", "destination"):
        ids = out[f"{side}_id"]
        unknown = sorted(set(ids) - set(st.index))
        if unknown:
            raise InvalidValue(f"unknown {side} station ids: {unknown[:5]}")
        out[f"{side}_name"] = ids.map(st["station_name"]).to_numpy()
        out[f"{side}_borough"] = ids.map(st["borough"]).to_numpy()
    return out


def run_pipeline(raw: pd.DataFrame, weather: pd.DataFrame, n: int, seed: int,
                 stations: pd.DataFrame | None = None) -> Panel:
    """Raw hourly OD rows -> monthly means -> sampled complete pairs -> canonical panel."""
    monthly = aggregate_monthly(raw)
    if stations is not None:
        monthly = attach_stations(monthly, stations)
    for col in ("origin_name", "destination_name", "origin_borough", "destination_borough"):
        if col not in monthly.columns:
            raise MissingColumn(col)
    sampled = sample_pairs(monthly, n, seed)
    merged = merge_weather(sampled, weather)
    for col in ("origin_borough", "destination_borough"):
        bad = ~merged[col].isin(BOROUGHS)
        if bad.any():
            raise InvalidBorough(merged[col][bad].iloc[0])
    logger.info("pipeline: %d rows, %d pairs", len(merged), n)
    return Panel(derive_indicators(merged.loc[:, list(CANONICAL_COLUMNS)]))


def monthly_weather_summary(panel: Panel) -> pd.DataFrame:
    """12 x 11 table of the weather covariates, one row per month (ascending)."""
    frame = panel.to_frame()
    cols = list(WEATHER_COLUMNS)
    for month, block in frame.groupby("month", sort=True):
        values = block[cols].to_numpy()
        differs = (values != values[0]).any(axis=0)
        if differs.any():
            raise InconsistentWeather(int(month), cols[int(np.flatnonzero(differs)[0])])
    out = frame.groupby("month", sort=True)[cols].first()
    return out


def stratify(panel: Panel, borough: str) -> Panel:
    """Restrict the panel to pairs originating in ``borough``."""
    if borough not in BOROUGHS:
        raise InvalidBorough(borough)
    frame = panel.to_frame()
    sub = frame[frame["origin_borough"] == borough]
    if len(sub) == 0:
        raise EmptyStratum(f"no pairs originate in borough {borough!r}")
    return Panel(sub)


def iter_strata(panel: Panel) -> Iterable[tuple[str, Panel]]:
    present = set(panel.column("origin_borough"))
    for b in BOROUGHS:
        if b in present:
            yield b, stratify(panel, b)
