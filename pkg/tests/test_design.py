import numpy as np
import pytest

from longmix.design import (
    ModelSpec,
    Term,
    build_design,
    bundle_from_arrays,
    nested_grouping,
)
from longmix.exceptions import (
    CrossedGroups,
    DesignError,
    EmptyTermList,
    RankDeficientFixed,
    UnknownColumn,
)
from longmix.ingest import Panel, stratify
from longmix.registry import REGISTRY, get

CATALOGUE_IDS = {
    "m221", "m221_diag", "m222", "m223", "m251", "m251_boroughs", "m252",
    "m253_M", "m253_Q", "m253_Bx", "m253_Bk", "m254", "m255_monthfactor", "m255_december",
    "m256", "aux_gusts", "aux_bk_dew", "m258", "m258_interact",
}


def _row(bundle, frame, borough, month):
    key = frame.loc[(frame["origin_borough"] == borough) & (frame["month"] == month),
                    "pair_id"].iloc[0]
    g = next(g for g in bundle.groups if g.key == key)
    return g.X[list(g.time).index(month)], g.Z[list(g.time).index(month)]


def test_m221_columns_and_rows(panel):
    b = build_design(panel, REGISTRY["m221"].spec)
    assert b.x_names == ("M", "N", "M:month", "N:month")
    assert b.z_names == ("M", "N", "month")
    f = panel.to_frame()
    x, z = _row(b, f, "M", 3)
    assert x.tolist() == [1, 0, 3, 0]
    assert z.tolist() == [1, 0, 3]
    x, _ = _row(b, f, "Q", 3)
    assert x.tolist() == [0, 1, 0, 3]


def test_m221_partition_and_counts(panel):
    b = build_design(panel, REGISTRY["m221"].spec)
    _, X, _ = b.stacked()
    assert np.all(X[:, 0] + X[:, 1] == 1)
    assert sum(len(g.y) for g in b.groups) == len(panel) == b.n_obs


def test_month_factor_expansion(panel):
    spec = ModelSpec("avg_ridership", [Term.factor("month", 1)], {"pair_id": [Term.intercept()]})
    b = build_design(panel, spec)
    dummies = [f"month[T.{m}]" for m in range(2, 13)]
    assert list(b.x_names) == ["(Intercept)"] + dummies
    for g in b.groups:
        jan = g.X[list(g.time).index(1)]
        assert np.all(jan[1:] == 0)
        assert np.all(g.X[:, 1:].sum(axis=1) == (g.time != 1))


def test_pc_interaction_product(panel):
    pc1 = np.where(panel.column("month") == 2, -1.5, 0.25)
    p = panel.with_columns(PC1=pc1)
    spec = ModelSpec("avg_ridership", [Term.interaction("month", "PC1")], {"pair_id": [Term.intercept()]})
    b = build_design(p, spec)
    g = b.groups[0]
    assert g.X[list(g.time).index(2), 1] == -3.0


def test_design_is_pure_and_ordered(panel):
    spec = REGISTRY["m254"].spec
    a, b = build_design(panel, spec), build_design(panel, spec)
    assert a.x_names == b.x_names
    for ga, gb in zip(a.groups, b.groups):
        assert ga.key == gb.key
        assert np.array_equal(ga.X, gb.X) and np.array_equal(ga.y, gb.y)
    assert [g.key for g in a.groups] == sorted(g.key for g in a.groups)


def test_unknown_column(panel):
    spec = ModelSpec("avg_ridership", [Term.column("snowfall")], {"pair_id": [Term.intercept()]})
    with pytest.raises(UnknownColumn):
        build_design(panel, spec)


def test_rank_deficient_reports_columns(panel):
    spec = ModelSpec("avg_ridership", [Term.column("M"), Term.column("N")],
                     {"pair_id": [Term.intercept()]})
    with pytest.raises(RankDeficientFixed) as err:
        build_design(panel, spec)
    assert err.value.columns == ["N"]


def test_empty_term_list():
    with pytest.raises(EmptyTermList):
        ModelSpec("avg_ridership", [], {"pair_id": [Term.intercept()]},
                  suppress_global_intercept=True)


def test_cs_needs_distinct_times():
    with pytest.raises(DesignError):
        bundle_from_arrays(np.zeros(4), np.ones((4, 1)), np.zeros(4), time=[1, 1, 2, 3],
                           residual="compound_symmetry")


def test_nested_grouping_partition(panel):
    groups = nested_grouping(panel)
    assert set(groups) <= {"M", "Bk", "Bx", "Q"}
    pairs = [p for ps in groups.values() for p in ps]
    assert sorted(pairs) == sorted(panel.subjects)
    assert len(nested_grouping(stratify(panel, "M"))) == 1


def test_nested_grouping_crossed(panel):
    f = panel.to_frame()
    pid = f["pair_id"].iloc[0]
    i = f.index[f["pair_id"] == pid][3]
    f.loc[i, "origin_borough"] = "Q" if f.loc[i, "origin_borough"] != "Q" else "M"
    with pytest.raises(CrossedGroups):
        nested_grouping(f)


def test_nested_bundle_blocks(panel):
    b = build_design(panel, REGISTRY["m252"].spec)
    assert b.nested
    outers = [g.outer for g in b.groups]
    assert outers == sorted(outers)
    assert b.outer_keys == tuple(sorted(set(outers)))


def test_registry_covers_models():
    assert CATALOGUE_IDS <= set(REGISTRY)
    assert len(REGISTRY) == len({e.id for e in REGISTRY.values()})
    with pytest.raises(KeyError):
        get("m999")


@pytest.mark.parametrize("mid", sorted(REGISTRY))
def test_spec_json_round_trip(mid):
    spec = REGISTRY[mid].spec
    assert ModelSpec.from_json(spec.to_json()) == spec


@pytest.mark.parametrize("mid", sorted(REGISTRY))
def test_every_registry_model_builds(mid, panel):
    from longmix.registry import prepare_panel

    b = build_design(prepare_panel(REGISTRY[mid], panel), REGISTRY[mid].spec)
    assert b.n_obs > 0 and b.n_fixed >= 1


def test_invalid_term_kind():
    with pytest.raises(DesignError):
        Term("spline", "month")
    with pytest.raises(DesignError):
        Term.interaction("month", None)


def test_panel_helper_accepts_frame(panel):
    spec = REGISTRY["m251"].spec
    a = build_design(panel, spec)
    b = build_design(panel.to_frame(), spec)
    assert a.x_names == b.x_names and a.n_obs == b.n_obs
    assert isinstance(panel, Panel)
