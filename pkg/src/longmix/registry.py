"""Named model specifications for the ridership analysis."""
from __future__ import annotations

from dataclasses import dataclass, field

from .design import BOROUGH_LEVEL, PAIR_LEVEL, ModelSpec, Term

C = Term.column
I = Term.interaction  # noqa: E741
INTERCEPT = Term.intercept()
RESPONSE = "avg_ridership"


@dataclass(frozen=True)
class ModelRegistryEntry:
    id: str
    description: str
    spec: ModelSpec
    stratum: str | None = None
    needs_pca: bool = False
    expected_artifacts: tuple = field(default_factory=tuple)


def _cs(fixed, random, d_structure="general"):
    return ModelSpec(RESPONSE, fixed, {PAIR_LEVEL: random}, suppress_global_intercept=True,
                     d_structure=d_structure, residual="compound_symmetry")


def _ri(fixed):
    """Global intercept + ``fixed`` with a random intercept per pair."""
    return ModelSpec(RESPONSE, fixed, {PAIR_LEVEL: [INTERCEPT]})


def _nested(fixed):
    """Random intercepts for pairs nested in origin boroughs."""
    return ModelSpec(RESPONSE, fixed, {BOROUGH_LEVEL: [INTERCEPT], PAIR_LEVEL: [INTERCEPT]},
                     grouping="nested")


_MN = [C("M"), C("N"), I("M", "month"), I("N", "month")]
_BOROUGH4 = [C("M"), C("Bk"), C("Bx"), C("Q"),
             I("M", "month"), I("Bk", "month"), I("Bx", "month"), I("Q", "month")]

_ENTRIES = [
    ModelRegistryEntry(
        "m221", "Manhattan vs rest intercepts and month slopes; random M, N, month; "
        "general D; compound-symmetric residuals",
        _cs(_MN, [C("M"), C("N"), C("month")]), expected_artifacts=("table_m221",)),
    ModelRegistryEntry(
        "m221_diag", "m221 with a diagonal D",
        _cs(_MN, [C("M"), C("N"), C("month")], d_structure="diagonal")),
    ModelRegistryEntry(
        "m222", "Borough-specific intercepts and slopes; random intercept and month slope",
        _cs(_BOROUGH4, [INTERCEPT, C("month")])),
    ModelRegistryEntry(
        "m223", "Borough-specific intercepts and slopes; random borough intercepts and month",
        _cs(_BOROUGH4, [C("M"), C("Bk"), C("Bx"), C("Q"), C("month")])),
    ModelRegistryEntry(
        "m251", "Precipitation, max wind and max gust with random pair intercepts",
        _ri([C("total_precip"), C("max_wind"), C("max_gust")]),
        expected_artifacts=("table_m251", "var_m251", "aic_m251")),
    ModelRegistryEntry(
        "m251_boroughs", "Max gust and month plus origin and destination borough factors",
        _ri([C("max_gust"), C("month"), Term.factor("origin_borough"),
             Term.factor("destination_borough")])),
    ModelRegistryEntry(
        "m252", "Max gust and month; random intercepts for pairs within origin boroughs",
        _nested([C("max_gust"), C("month")]), expected_artifacts=("table_m252", "var_m252")),
    *[
        ModelRegistryEntry(
            f"m253_{b}", f"Max gust with random pair intercepts, origin borough {b} only",
            _ri([C("max_gust")]), stratum=b,
            expected_artifacts=("table_m253_M", "var_m253_M") if b == "M" else ())
        for b in ("M", "Q", "Bx", "Bk")
    ],
    ModelRegistryEntry(
        "m254", "Precipitation, max gust, Manhattan indicator and gust x Manhattan",
        _ri([C("total_precip"), C("max_gust"), C("manhattan_origin"),
             I("max_gust", "manhattan_origin")]), expected_artifacts=("table_m254",)),
    ModelRegistryEntry(
        "m255_monthfactor", "Month as a factor (January baseline); nested random intercepts",
        _nested([Term.factor("month", 1)])),
    ModelRegistryEntry(
        "m255_december_base", "December indicator alone; nested random intercepts",
        _nested([C("december")])),
    ModelRegistryEntry(
        "m255_december", "December indicator and max gust; nested random intercepts",
        _nested([C("december"), C("max_gust")])),
    ModelRegistryEntry(
        "m256", "m221 plus month x PC1..PC3 interactions",
        _cs(_MN + [I("month", "PC1"), I("month", "PC2"), I("month", "PC3")],
            [C("M"), C("N"), C("month")]),
        needs_pca=True, expected_artifacts=("table_m256",)),
    ModelRegistryEntry(
        "aux_gusts", "Max and average gust with random pair intercepts",
        _ri([C("max_gust"), C("avg_gust")])),
    ModelRegistryEntry(
        "aux_bk_dew", "Max dew point with random pair intercepts, Brooklyn origins only",
        _ri([C("max_dew_point")]), stratum="Bk"),
    ModelRegistryEntry(
        "m258", "Month and max gust; nested random intercepts",
        _nested([C("month"), C("max_gust")]), expected_artifacts=("aic_m258",)),
    ModelRegistryEntry(
        "m258_interact", "Month, max gust and month x max gust; nested random intercepts",
        _nested([C("month"), C("max_gust"), I("month", "max_gust")])),
]

REGISTRY = {e.id: e for e in _ENTRIES}
assert len(REGISTRY) == len(_ENTRIES), "duplicate registry ids"


def get(model_id) -> ModelRegistryEntry:
    try:
        return REGISTRY[model_id]
    except KeyError:
        raise KeyError(f"unknown model id {model_id!r}; known: {', '.join(REGISTRY)}") from None


def prepare_panel(entry: ModelRegistryEntry, panel, pca_result=None):
    """Apply the entry's stratum and, when needed, merge PC1..PC3 scores."""
    from .ingest import stratify
    from .pca import merge_scores, weather_pca

    if entry.needs_pca:
        # scores come from the full panel's monthly weather, before any stratum
        pca_result = weather_pca(panel) if pca_result is None else pca_result
        panel = merge_scores(panel, pca_result, k=3)
    if entry.stratum is not None:
        panel = stratify(panel, entry.stratum)
    return panel


def fit_entry(model_id, panel, pca_result=None, **kwargs):
    """Fit a registry model on ``panel``; returns a fit or a ConvergenceFailure."""
    from .lmm import fit_model

    entry = get(model_id)
    return fit_model(entry.spec, prepare_panel(entry, panel, pca_result),
                     model_id=entry.id, **kwargs)
