"""``longmix`` command-line interface.

Exit codes: 0 success, 2 usage or data error, 3 model non-convergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .exceptions import LongmixError
from .ingest import _atomic_write, read_dataset, run_pipeline, write_dataset
from .registry import REGISTRY, fit_entry

EXIT_OK, EXIT_DATA, EXIT_NOCONV = 0, 2, 3
HIGHLIGHTED_WEATHER = ("total_precip", "max_wind", "avg_wind", "max_gust", "avg_gust")
T_CRIT = 1.96


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_DATA)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=False, default=_json_default, allow_nan=True) + "\n"


def _read_table(path):
    return pd.read_csv(path, dtype=str, keep_default_na=False)


# -- commands ---------------------------------------------------------------

def cmd_pipeline(args):
    raw = _read_table(args.raw)
    weather = _read_table(args.weather)
    stations = _read_table(args.stations) if args.stations else None
    panel = run_pipeline(raw, weather, n=args.n, seed=args.seed, stations=stations)
    write_dataset(panel, args.out)
    print(f"wrote {len(panel)} rows, {panel.n_subjects} pairs to {args.out}")
    return EXIT_OK


def cmd_fit(args):
    if args.model not in REGISTRY:
        print(f"unknown model id {args.model!r}; known ids:", file=sys.stderr)
        for mid, e in REGISTRY.items():
            print(f"  {mid:20s} {e.description}", file=sys.stderr)
        return EXIT_DATA
    panel = read_dataset(args.data)
    res = fit_entry(args.model, panel)
    sys.stdout.write(_dumps(res.to_dict()) if args.json else res.to_text())
    return EXIT_OK if res.converged else EXIT_NOCONV


def _december_check(results):
    out = {"threshold": T_CRIT}
    for key, mid in (("without_max_gust", "m255_december_base"), ("with_max_gust", "m255_december")):
        r = results.get(mid)
        out[key] = r.tvalue("december") if r is not None and r.converged else None
    a, b = out["without_max_gust"], out["with_max_gust"]
    out["december_loses_significance"] = (
        None if a is None or b is None else bool(abs(a) >= T_CRIT and abs(b) < T_CRIT))
    return out


def _suite_summary(results, errors):
    ranking = []
    for mid, r in results.items():
        if r.converged:
            ranking.append({"model_id": mid, "aic": r.aic, "bic": r.bic, "loglik": r.loglik,
                            "k": r.n_params, "n_obs": r.n_obs})
    # full-panel models share a response; strata are ranked separately
    ranking.sort(key=lambda d: (d["n_obs"] != max((x["n_obs"] for x in ranking), default=0),
                                d["aic"]))
    r251, r258 = results.get("m251"), results.get("m258")
    pair = None
    if r251 is not None and r258 is not None and r251.converged and r258.converged:
        pair = {"aic_m258": r258.aic, "aic_m251": r251.aic, "m258_better": bool(r258.aic < r251.aic)}
    return {
        "n_models": len(REGISTRY),
        "models": {mid: {"converged": bool(results[mid].converged)} if mid in results
                   else {"converged": False, "error": errors[mid]} for mid in REGISTRY},
        "aic_ranking": ranking,
        "m258_vs_m251": pair,
        "december_check": _december_check(results),
        "note": "AIC uses the REML log-likelihood; models with different fixed effects "
                "are compared under that convention",
    }


def cmd_suite(args):
    panel = read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .pca import weather_pca

    pca = weather_pca(panel)
    results, errors = {}, {}
    for mid in REGISTRY:
        try:
            r = fit_entry(mid, panel, pca_result=pca)
        except LongmixError as exc:
            errors[mid] = f"{type(exc).__name__}: {exc}"
            _atomic_write(out / f"{mid}.json", _dumps({"model_id": mid, "converged": False,
                                                       "error": errors[mid]}))
            print(f"{mid}: error {errors[mid]}")
            continue
        results[mid] = r
        _atomic_write(out / f"{mid}.json", _dumps(r.to_dict()))
        status = f"AIC {r.aic:.3f}" if r.converged else "did not converge"
        print(f"{mid}: {status}")
    _atomic_write(out / "summary.json", _dumps(_suite_summary(results, errors)))
    print(f"wrote {len(REGISTRY)} model reports and summary.json to {out}")
    return EXIT_OK


def cmd_pca(args):
    from .pca import weather_pca
    from .report import pca_text

    res = weather_pca(read_dataset(args.data))
    sys.stdout.write(_dumps(res.to_dict(k=3)) if args.json else pca_text(res, k=3))
    return EXIT_OK


def _plot_frame(kind, panel):
    frame = panel.to_frame()
    if kind == "spaghetti":
        return frame.loc[:, ["pair_id", "month", "avg_ridership", "origin_borough"]]
    if kind == "mean_profile":
        g = frame.groupby(["origin_borough", "month"], sort=True)["avg_ridership"]
        return g.agg(mean="mean", sd="std", n="size").reset_index()
    if kind == "weather":
        return frame.groupby("month", sort=True)[list(HIGHLIGHTED_WEATHER)].mean().reset_index()
    if kind == "residuals":
        res = fit_entry("m221", panel)
        if not res.converged:
            raise _NoFit(res)
        r = res.residuals
        return pd.DataFrame({"row": r.index.to_numpy(), "pair_id": r["pair_id"].to_numpy(),
                             "fitted": r["fitted"].to_numpy(),
                             "normalized": r["normalized"].to_numpy()})
    raise ValueError(kind)


class _NoFit(Exception):
    def __init__(self, res):
        self.res = res


def cmd_plotdata(args):
    panel = read_dataset(args.data)
    try:
        frame = _plot_frame(args.kind, panel)
    except _NoFit as exc:
        sys.stderr.write(exc.res.to_text())
        return EXIT_NOCONV
    _atomic_write(args.out, frame.to_csv(index=False, lineterminator="\n"))
    print(f"wrote {len(frame)} rows to {args.out}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser():
    p = _Parser(prog="longmix", description="Mixed models for monthly OD ridership panels.")
    p.add_argument("--version", action="version", version=f"longmix {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pipeline", help="build the canonical CSV from raw OD and weather files")
    s.add_argument("--raw", required=True)
    s.add_argument("--weather", required=True)
    s.add_argument("--stations", help="station table (station_id, station_name, borough)")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("fit", help="fit one registry model")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("suite", help="fit every registry model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_suite)

    s = sub.add_parser("pca", help="weather PCA loadings and cumulative variance")
    s.add_argument("--data", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_pca)

    s = sub.add_parser("plotdata", help="write plot-ready CSV data")
    s.add_argument("--data", required=True)
    s.add_argument("--kind", required=True,
                   choices=("spaghetti", "mean_profile", "weather", "residuals"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        return args.func(args)
    except (LongmixError, OSError, pd.errors.ParserError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
