"""Synthetic panels with the layout of the canonical ridership-weather file.

Used for demos, CLI smoke runs and the statistical recovery checks.  Nothing
here reproduces the real 2023 data.
"""
from __future__ import annotations

import numpy as np
import pandas as pd

from .covariance import VarianceParams
from .design import BOROUGH_LEVEL, PAIR_LEVEL, DesignBundle
from .ingest import BOROUGHS, CANONICAL_COLUMNS, Panel, classify_season, derive_indicators

# rough NYC monthly climatology: (max_temp, avg_temp, min_temp, dew max/avg/min,
# precip, max_wind, avg_wind, max_gust, avg_gust)
_CLIMATE = np.array([
    [58, 43, 28, 45, 30, 8, 3.9, 30, 12, 45, 22],
    [62, 41, 18, 44, 25, 0, 2.8, 33, 13, 48, 24],
    [70, 46, 30, 48, 28, 10, 3.4, 32, 13, 50, 24],
    [88, 56, 38, 60, 38, 20, 5.3, 29, 12, 44, 21],
    [85, 64, 47, 62, 46, 30, 2.0, 26, 11, 40, 19],
    [90, 71, 56, 68, 55, 42, 3.1, 25, 10, 38, 18],
    [95, 80, 68, 76, 66, 56, 5.5, 24, 9, 41, 17],
    [91, 77, 64, 74, 64, 52, 5.0, 23, 9, 37, 17],
    [92, 72, 55, 73, 60, 45, 6.9, 26, 10, 42, 18],
    [80, 60, 43, 64, 47, 30, 2.6, 28, 11, 43, 20],
    [68, 47, 32, 52, 32, 15, 1.9, 31, 12, 47, 22],
    [62, 44, 28, 55, 33, 12, 7.0, 36, 13, 55, 23],
], dtype=float)

WEATHER_ORDER = ("max_temp", "avg_temp", "min_temp", "max_dew_point", "avg_dew_point",
                 "min_dew_point", "total_precip", "max_wind", "avg_wind", "max_gust", "avg_gust")


def simulate_weather(seed=0, noise=1.0):
    """Monthly city weather (12 rows) satisfying the min <= avg <= max orderings."""
    rng = np.random.default_rng(seed)
    w = _CLIMATE + noise * rng.normal(0.0, [2, 1, 2, 2, 1, 2, 0.5, 2, 1, 3, 1], size=_CLIMATE.shape)
    w[:, 6] = np.abs(w[:, 6])
    for lo, mid, hi in ((2, 1, 0), (5, 4, 3)):
        trip = np.sort(w[:, [lo, mid, hi]], axis=1)
        w[:, lo], w[:, mid], w[:, hi] = trip[:, 0], trip[:, 1], trip[:, 2]
    for avg, mx in ((8, 7), (10, 9)):
        pair = np.sort(w[:, [avg, mx]], axis=1)
        w[:, avg], w[:, mx] = pair[:, 0], pair[:, 1]
    frame = pd.DataFrame(np.round(w, 2), columns=list(WEATHER_ORDER))
    frame.insert(0, "month", np.arange(1, 13))
    return frame


def simulate_panel(n_pairs=50, seed=0, borough_weights=(0.4, 0.2, 0.1, 0.3),
                   gust_effect=(-0.02, -0.004, -0.004, -0.004)):
    """Draw a balanced 12-month panel of OD pairs.

    Ridership follows a borough-specific random intercept/slope model with
    compound-symmetric noise plus a per-borough max_gust effect, truncated
    at zero.
    """
    rng = np.random.default_rng(seed)
    weather = simulate_weather(seed)
    boroughs = rng.choice(BOROUGHS, size=n_pairs, p=np.asarray(borough_weights))
    dest = rng.choice(BOROUGHS, size=n_pairs)
    base = {"M": 5.0, "Bk": 1.0, "Bx": 0.9, "Q": 0.9}
    sd = {"M": 3.0, "Bk": 0.8, "Bx": 0.8, "Q": 0.8}
    gust = dict(zip(BOROUGHS, gust_effect))
    months = np.arange(1, 13)
    rows = []
    ids = rng.choice(np.arange(100, 999), size=2 * n_pairs, replace=False)
    for i in range(n_pairs):
        b = boroughs[i]
        b0 = base[b] + sd[b] * rng.normal()
        b1 = -0.015 + 0.02 * rng.normal()
        shared = 0.15 * rng.normal()
        noise = shared + 0.35 * rng.normal(size=12)
        y = b0 + b1 * months + gust[b] * weather["max_gust"].to_numpy() + noise
        y = np.maximum(np.round(y, 4), 0.0)
        for j, mth in enumerate(months):
            row = {
                "origin_id": str(ids[2 * i]), "destination_id": str(ids[2 * i + 1]),
                "month": int(mth), "avg_ridership": float(y[j]),
                "origin_borough": b, "destination_borough": dest[i],
                "origin_name": f"Station {ids[2 * i]}", "destination_name": f"Station {ids[2 * i + 1]}",
                "season": classify_season(mth),
            }
            row.update({c: float(weather[c].iloc[j]) for c in WEATHER_ORDER})
            rows.append(row)
    frame = pd.DataFrame(rows).loc[:, list(CANONICAL_COLUMNS)]
    return Panel(derive_indicators(frame))


def simulate_raw_od(n_pairs=60, n_incomplete=5, seed=0, hours=(7, 8, 17, 18)):
    """Hourly OD rows plus a station table, for exercising the pipeline path."""
    rng = np.random.default_rng(seed)
    n_st = 2 * (n_pairs + n_incomplete)
    station_ids = np.arange(1, n_st + 1)
    stations = pd.DataFrame({
        "station_id": station_ids.astype(str),
        "station_name": [f"Station {s}" for s in station_ids],
        "borough": rng.choice(BOROUGHS, size=n_st),
    })
    rows = []
    for i in range(n_pairs + n_incomplete):
        o, d = station_ids[2 * i], station_ids[2 * i + 1]
        months = range(1, 13) if i < n_pairs else range(1, 12)
        level = rng.gamma(2.0, 2.0)
        for mth in months:
            for h in hours:
                rows.append((str(o), str(d), mth, h, float(np.round(rng.gamma(4.0, level / 4.0), 3))))
    raw = pd.DataFrame(rows, columns=["origin_id", "destination_id", "month", "hour",
                                      "estimated_ridership"])
    return raw, stations


def simulate_response(bundle: DesignBundle, beta, params: VarianceParams, rng):
    """Draw y from the marginal model implied by ``bundle`` at fixed parameters.

    Returns the response in original row order.
    """
    beta = np.asarray(beta, dtype=float)
    D = params.D.get(PAIR_LEVEL, np.zeros((0, 0)))
    out = np.empty(bundle.n_obs)
    outer_draw = {}
    if bundle.nested:
        D1 = params.D[BOROUGH_LEVEL]
        for key in bundle.outer_keys:
            outer_draw[key] = rng.multivariate_normal(np.zeros(len(D1)), D1)
    for g in bundle.groups:
        m = len(g.y)
        mu = g.X @ beta
        b = rng.multivariate_normal(np.zeros(len(D)), D) if len(D) else np.zeros(0)
        e = rng.multivariate_normal(np.zeros(m), params.residual_cov(m))
        yi = mu + g.Z @ b + e
        if bundle.nested:
            yi = yi + g.Z_outer @ outer_draw[g.outer]
        out[g.rows] = yi
    return out
