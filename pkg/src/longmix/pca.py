"""Correlation-matrix PCA of the monthly weather covariates."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConstantColumn, KOutOfRange, MissingMonthScore
from .ingest import WEATHER_COLUMNS, Panel, monthly_weather_summary

EIGEN_FLOOR = 1e-12


class RankCollapseWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class PCAResult:
    loadings: np.ndarray      # p x p, columns are components
    eigenvalues: np.ndarray   # descending
    scores: np.ndarray        # n x p
    centers: np.ndarray
    scales: np.ndarray
    columns: tuple
    index: tuple = ()

    @property
    def proportion(self):
        return self.eigenvalues / self.eigenvalues.sum()

    @property
    def cumvar(self):
        return np.cumsum(self.proportion)

    def loadings_frame(self, k=None):
        k = len(self.eigenvalues) if k is None else k
        return pd.DataFrame(self.loadings[:, :k], index=list(self.columns),
                            columns=[f"PC{i + 1}" for i in range(k)])

    def scores_frame(self, k=None):
        k = len(self.eigenvalues) if k is None else k
        idx = list(self.index) if self.index else None
        return pd.DataFrame(self.scores[:, :k], index=idx,
                            columns=[f"PC{i + 1}" for i in range(k)])

    def to_dict(self, k=3):
        return {
            "columns": list(self.columns),
            "loadings": self.loadings[:, :k].tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "proportion": self.proportion.tolist(),
            "cumulative": self.cumvar.tolist(),
            "index": [int(i) if isinstance(i, (int, np.integer)) else i for i in self.index],
            "scores": self.scores[:, :k].tolist(),
        }


def normalize_signs(loadings):
    """Flip each column so its largest-magnitude entry is positive."""
    loadings = np.array(loadings, dtype=float)
    idx = np.argmax(np.abs(loadings), axis=0)
    signs = np.sign(loadings[idx, np.arange(loadings.shape[1])])
    signs[signs == 0] = 1.0
    return loadings * signs, signs


def pca_fit(data, columns=None) -> PCAResult:
    """PCA on the correlation matrix of ``data`` (rows = observations).

    Columns are standardized with the n-1 denominator, all components are
    retained, and signs follow :func:`normalize_signs`.
    """
    index = tuple(data.index) if isinstance(data, pd.DataFrame) else ()
    if columns is None:
        columns = tuple(data.columns) if isinstance(data, pd.DataFrame) else \
            tuple(f"x{i}" for i in range(np.shape(data)[1]))
    X = check_array(np.asarray(data, dtype=float), ensure_min_samples=2)
    centers = X.mean(axis=0)
    scales = X.std(axis=0, ddof=1)
    for j, s in enumerate(scales):
        if not s > 0:
            raise ConstantColumn(columns[j])
    Xs = (X - centers) / scales
    corr = Xs.T @ Xs / (X.shape[0] - 1)
    corr = 0.5 * (corr + corr.T)
    evals, evecs = np.linalg.eigh(corr)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    small = int(np.sum(evals < EIGEN_FLOOR))
    # with n - 1 < p centred rows the trailing p - (n - 1) eigenvalues are zero by construction
    structural = max(0, X.shape[1] - (X.shape[0] - 1))
    if small > structural:
        warnings.warn(f"{small} eigenvalue(s) below {EIGEN_FLOOR}; clamped to zero",
                      RankCollapseWarning, stacklevel=2)
    evals = np.where(evals < EIGEN_FLOOR, np.maximum(evals, 0.0), evals)
    loadings, _ = normalize_signs(evecs)
    return PCAResult(loadings=loadings, eigenvalues=evals, scores=Xs @ loadings,
                     centers=centers, scales=scales, columns=tuple(columns), index=index)


def variance_explained(result: PCAResult, k: int) -> float:
    """Share of total variance carried by the first ``k`` components."""
    p = len(result.eigenvalues)
    if not 1 <= k <= p:
        raise KOutOfRange(f"k must be in 1..{p}, got {k}")
    # the eigenvalue total equals p up to rounding; dividing by it makes k = p exactly 1
    return float(result.eigenvalues[:k].sum() / result.eigenvalues.sum())


def weather_pca(panel: Panel) -> PCAResult:
    """PCA of the 12 x 11 monthly weather summary of ``panel``."""
    return pca_fit(monthly_weather_summary(panel), columns=WEATHER_COLUMNS)


def merge_scores(panel: Panel, result: PCAResult, k=3) -> Panel:
    """Attach PC1..PCk to every observation by month."""
    scores = result.scores_frame(k)
    months = panel.column("month")
    missing = sorted(set(months) - set(scores.index))
    if missing:
        raise MissingMonthScore(int(missing[0]))
    cols = {name: scores[name].reindex(months).to_numpy() for name in scores.columns}
    return panel.with_columns(**cols)


class CorrelationPCA(TransformerMixin, BaseEstimator):
    """Scikit-learn transformer wrapper around :func:`pca_fit`.

    Parameters
    ----------
    n_components : int or None
        Number of leading components returned by ``transform``.
    """

    def __init__(self, n_components=None):
        self.n_components = n_components

    def fit(self, X, y=None):
        self.result_ = pca_fit(X)
        p = len(self.result_.eigenvalues)
        k = p if self.n_components is None else self.n_components
        if not 1 <= k <= p:
            raise KOutOfRange(f"n_components must be in 1..{p}, got {k}")
        self.n_components_ = k
        self.components_ = self.result_.loadings[:, :k].T
        self.explained_variance_ = self.result_.eigenvalues[:k]
        self.explained_variance_ratio_ = self.result_.proportion[:k]
        self.mean_ = self.result_.centers
        self.scale_ = self.result_.scales
        self.n_features_in_ = p
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(np.asarray(X, dtype=float))
        return ((X - self.mean_) / self.scale_) @ self.components_.T

    def inverse_transform(self, scores):
        check_is_fitted(self, "components_")
        return np.asarray(scores) @ self.components_ * self.scale_ + self.mean_
