"""Model specifications and their translation into per-group design matrices."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .exceptions import (
    CrossedGroups,
    DesignError,
    EmptyTermList,
    RankDeficientFixed,
    UnknownColumn,
)

TERM_KINDS = (
    "intercept",
    "column",
    "interaction",
    "factor",
    "indicator_scaled_intercept",
    "indicator_scaled_slope",
)
GROUPINGS = ("flat", "nested")
D_STRUCTURES = ("general", "diagonal")
RESIDUALS = ("independent", "compound_symmetry")
METHODS = ("REML", "ML")

PAIR_LEVEL = "pair_id"
BOROUGH_LEVEL = "origin_borough"
INTERCEPT_NAME = "(Intercept)"


@dataclass(frozen=True)
class Term:
    """One regressor (or a block of factor dummies) of a design matrix.

    ``name`` is the primary column; ``other`` holds the second column of an
    interaction, the time column of a scaled slope, or a factor's baseline
    level.
    """

    kind: str
    name: str | None = None
    other: object = None
    center: bool = False

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise DesignError(f"unknown term kind {self.kind!r}")
        if self.kind != "intercept" and not self.name:
            raise DesignError(f"{self.kind} term needs a column name")
        if self.kind in ("interaction", "indicator_scaled_slope") and not self.other:
            raise DesignError(f"{self.kind} term needs a second column")

    @classmethod
    def intercept(cls):
        return cls("intercept")

    @classmethod
    def column(cls, name, center=False):
        return cls("column", name, center=center)

    @classmethod
    def interaction(cls, a, b):
        return cls("interaction", a, b)

    @classmethod
    def factor(cls, name, baseline=None):
        return cls("factor", name, baseline)

    @classmethod
    def indicator_scaled_intercept(cls, name):
        return cls("indicator_scaled_intercept", name)

    @classmethod
    def indicator_scaled_slope(cls, name, time_column="month"):
        return cls("indicator_scaled_slope", name, time_column)

    def columns_used(self):
        if self.kind == "intercept":
            return ()
        if self.kind in ("interaction", "indicator_scaled_slope"):
            return (self.name, self.other)
        return (self.name,)

    def materialize(self, frame: pd.DataFrame):
        """Return ``(names, matrix)`` for this term evaluated on ``frame``."""
        n = len(frame)
        for col in self.columns_used():
            if col not in frame.columns:
                raise UnknownColumn(col)
        if self.kind == "intercept":
            return [INTERCEPT_NAME], np.ones((n, 1))
        if self.kind == "factor":
            values = frame[self.name].to_numpy()
            levels = sorted(pd.unique(values).tolist())
            baseline = levels[0] if self.other is None else self.other
            if baseline not in levels:
                raise DesignError(f"baseline {baseline!r} is not a level of {self.name!r}")
            kept = [lv for lv in levels if lv != baseline]
            mat = np.column_stack([(values == lv).astype(float) for lv in kept]) if kept \
                else np.empty((n, 0))
            return [f"{self.name}[T.{lv}]" for lv in kept], mat
        a = _numeric(frame, self.name)
        if self.kind == "indicator_scaled_intercept":
            if not np.isin(a, (0.0, 1.0)).all():
                raise DesignError(f"{self.name!r} is not a 0/1 indicator")
            return [self.name], a[:, None]
        if self.kind == "column":
            if self.center:
                a = a - a.mean()
            return [self.name], a[:, None]
        b = _numeric(frame, self.other)
        if self.kind == "indicator_scaled_slope" and not np.isin(a, (0.0, 1.0)).all():
            raise DesignError(f"{self.name!r} is not a 0/1 indicator")
        return [f"{self.name}:{self.other}"], (a * b)[:, None]

    def to_dict(self):
        out = {"kind": self.kind}
        if self.name is not None:
            out["name"] = self.name
        if self.other is not None:
            out["other"] = self.other
        if self.center:
            out["center"] = True
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("name"), d.get("other"), bool(d.get("center", False)))


def _numeric(frame, name):
    try:
        return frame[name].to_numpy(dtype=float)
    except (TypeError, ValueError):
        raise DesignError(f"column {name!r} is not numeric") from None


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of a linear mixed model.

    ``random`` maps a grouping level (``"pair_id"`` or ``"origin_borough"``)
    to its ordered random-effect terms.  A nested grouping puts pairs inside
    their origin borough.
    """

    response: str
    fixed: tuple
    random: Mapping[str, tuple] = field(default_factory=dict)
    suppress_global_intercept: bool = False
    grouping: str = "flat"
    d_structure: str = "general"
    residual: str = "independent"
    method: str = "REML"

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "random", {k: tuple(v) for k, v in dict(self.random).items()})
        for attr, allowed in (("grouping", GROUPINGS), ("d_structure", D_STRUCTURES),
                              ("residual", RESIDUALS), ("method", METHODS)):
            if getattr(self, attr) not in allowed:
                raise DesignError(f"{attr} must be one of {allowed}, got {getattr(self, attr)!r}")
        if not self.fixed and self.suppress_global_intercept:
            raise EmptyTermList("model has no fixed-effect terms")
        allowed_levels = {PAIR_LEVEL} if self.grouping == "flat" else {PAIR_LEVEL, BOROUGH_LEVEL}
        unknown = set(self.random) - allowed_levels
        if unknown:
            raise DesignError(f"random terms for unknown grouping levels {sorted(unknown)}")

    @property
    def levels(self):
        """Grouping levels, outermost first."""
        return (BOROUGH_LEVEL, PAIR_LEVEL) if self.grouping == "nested" else (PAIR_LEVEL,)

    def columns_used(self):
        cols = {self.response}
        for t in self.fixed:
            cols.update(t.columns_used())
        for terms in self.random.values():
            for t in terms:
                cols.update(t.columns_used())
        return cols

    def to_dict(self):
        return {
            "response": self.response,
            "fixed": [t.to_dict() for t in self.fixed],
            "suppress_global_intercept": self.suppress_global_intercept,
            "random": {k: [t.to_dict() for t in v] for k, v in self.random.items()},
            "grouping": self.grouping,
            "d_structure": self.d_structure,
            "residual": self.residual,
            "method": self.method,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            response=d["response"],
            fixed=[Term.from_dict(t) for t in d["fixed"]],
            random={k: [Term.from_dict(t) for t in v] for k, v in d.get("random", {}).items()},
            suppress_global_intercept=bool(d.get("suppress_global_intercept", False)),
            grouping=d.get("grouping", "flat"),
            d_structure=d.get("d_structure", "general"),
            residual=d.get("residual", "independent"),
            method=d.get("method", "REML"),
        )

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class GroupDesign:
    """Design pieces for one subject (pair).

    ``Z`` holds the pair-level random-effect columns, ``Z_outer`` the columns
    for the enclosing outer group (empty when grouping is flat).
    """

    key: object
    outer: object
    rows: np.ndarray
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    Z_outer: np.ndarray
    time: np.ndarray


@dataclass(frozen=True, eq=False)
class DesignBundle:
    groups: tuple
    x_names: tuple
    z_names: tuple
    z_outer_names: tuple = ()
    outer_keys: tuple = (None,)
    residual: str = "independent"
    response: str = "y"

    @property
    def n_obs(self):
        return sum(len(g.y) for g in self.groups)

    @property
    def n_fixed(self):
        return len(self.x_names)

    @property
    def nested(self):
        return len(self.z_outer_names) > 0

    @property
    def max_occasions(self):
        return max(len(g.y) for g in self.groups)

    def stacked(self):
        """(y, X, rows) stacked in group order."""
        y = np.concatenate([g.y for g in self.groups])
        X = np.vstack([g.X for g in self.groups])
        rows = np.concatenate([g.rows for g in self.groups])
        return y, X, rows

    def response_in_row_order(self):
        y, _, rows = self.stacked()
        out = np.empty_like(y)
        out[rows] = y
        return out


def bundle_from_arrays(y, X, groups, Z=None, time=None, outer_groups=None, Z_outer=None,
                       x_names=None, z_names=None, z_outer_names=None,
                       residual="independent", response="y") -> DesignBundle:
    """Split stacked arrays into per-group blocks in canonical (sorted-key) order."""
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    n = len(y)
    if X.ndim != 2 or X.shape[0] != n:
        raise DesignError("X must be 2-D with one row per observation")
    groups = np.asarray(groups)
    if groups.shape != (n,):
        raise DesignError("groups must have one entry per observation")
    Z = np.zeros((n, 0)) if Z is None else np.asarray(Z, dtype=float).reshape(n, -1)
    time = np.arange(n, dtype=float) if time is None else np.asarray(time, dtype=float)
    if Z_outer is not None and outer_groups is None:
        raise DesignError("Z_outer requires outer_groups")
    Zo = np.zeros((n, 0)) if Z_outer is None else np.asarray(Z_outer, dtype=float).reshape(n, -1)
    outer = np.full(n, None, dtype=object) if outer_groups is None else np.asarray(outer_groups)
    if outer.shape != (n,):
        raise DesignError("outer_groups must have one entry per observation")

    keys = pd.unique(groups)
    blocks = []
    for key in sorted(keys.tolist()):
        rows = np.flatnonzero(groups == key)
        rows = rows[np.argsort(time[rows], kind="stable")]
        okeys = pd.unique(outer[rows])
        if len(okeys) > 1:
            raise CrossedGroups([str(key)])
        blocks.append(GroupDesign(
            key=key, outer=okeys[0], rows=rows, y=y[rows], X=X[rows], Z=Z[rows],
            Z_outer=Zo[rows], time=time[rows],
        ))
    if outer_groups is not None:
        blocks.sort(key=lambda g: (g.outer, g.key))
        outer_keys = tuple(sorted(pd.unique(outer).tolist()))
    else:
        outer_keys = (None,)
    if residual == "compound_symmetry":
        for g in blocks:
            if len(np.unique(g.time)) != len(g.time):
                raise DesignError(f"repeated time points within group {g.key!r}")
    p = X.shape[1]
    return DesignBundle(
        groups=tuple(blocks),
        x_names=tuple(x_names) if x_names is not None else tuple(f"x{i}" for i in range(p)),
        z_names=tuple(z_names) if z_names is not None else tuple(f"z{i}" for i in range(Z.shape[1])),
        z_outer_names=tuple(z_outer_names) if z_outer_names is not None
        else tuple(f"zo{i}" for i in range(Zo.shape[1])),
        outer_keys=outer_keys,
        residual=residual,
        response=response,
    )


def _materialize(terms: Sequence[Term], frame):
    names, mats = [], []
    for t in terms:
        nm, mat = t.materialize(frame)
        names.extend(nm)
        mats.append(mat)
    if not mats:
        return [], np.zeros((len(frame), 0))
    return names, np.hstack(mats)


def dependent_columns(X, names):
    """Columns of ``X`` that are linear combinations of the preceding ones."""
    scale = np.sqrt((X ** 2).sum(axis=0))
    scale[scale == 0] = 1.0
    Xs = X / scale
    kept, bad = [], []
    for j in range(X.shape[1]):
        trial = Xs[:, kept + [j]]
        if np.linalg.matrix_rank(trial) < len(kept) + 1:
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def fixed_design(spec: ModelSpec, frame: pd.DataFrame):
    terms = list(spec.fixed)
    if not spec.suppress_global_intercept:
        terms = [Term.intercept()] + [t for t in terms if t.kind != "intercept"]
    if not terms:
        raise EmptyTermList("model has no fixed-effect terms")
    names, X = _materialize(terms, frame)
    if len(set(names)) != len(names):
        raise DesignError(f"duplicate fixed-effect columns in {names}")
    return names, X


def build_design(panel, spec: ModelSpec) -> DesignBundle:
    """Materialize y, X and Z for every pair according to ``spec``."""
    frame = panel.to_frame() if hasattr(panel, "to_frame") else panel
    for col in spec.columns_used() | {PAIR_LEVEL, "month"}:
        if col not in frame.columns:
            raise UnknownColumn(col)
    x_names, X = fixed_design(spec, frame)
    bad = dependent_columns(X, x_names)
    if bad:
        raise RankDeficientFixed(bad)
    z_names, Z = _materialize(spec.random.get(PAIR_LEVEL, ()), frame)
    outer = None
    zo_names, Zo = [], None
    if spec.grouping == "nested":
        nested_grouping(frame)
        outer = frame[BOROUGH_LEVEL].to_numpy()
        zo_names, Zo = _materialize(spec.random.get(BOROUGH_LEVEL, ()), frame)
    return bundle_from_arrays(
        y=_numeric(frame, spec.response), X=X, groups=frame[PAIR_LEVEL].to_numpy(), Z=Z,
        time=_numeric(frame, "month"), outer_groups=outer, Z_outer=Zo,
        x_names=x_names, z_names=z_names, z_outer_names=zo_names,
        residual=spec.residual, response=spec.response,
    )


def nested_grouping(panel) -> dict:
    """Map each origin borough to the sorted pair ids it contains."""
    frame = panel.to_frame() if hasattr(panel, "to_frame") else panel
    per_pair = frame.groupby(PAIR_LEVEL)[BOROUGH_LEVEL].nunique()
    crossed = per_pair[per_pair > 1]
    if len(crossed):
        raise CrossedGroups(sorted(crossed.index))
    pairs = frame.drop_duplicates(PAIR_LEVEL)
    return {b: tuple(sorted(block[PAIR_LEVEL])) for b, block in pairs.groupby(BOROUGH_LEVEL)}
