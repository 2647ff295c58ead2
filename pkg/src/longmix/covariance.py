"""Variance-parameter containers, their unconstrained encoding, and V_i assembly."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .exceptions import DecodeFailure, DimensionMismatch, NonPositiveSigma, RhoOutOfRange

RHO_EPS = 1e-6


def rho_bounds(m):
    """Open interval of compound-symmetry correlations giving a PD m x m block."""
    lo = -1.0 if m <= 1 else -1.0 / (m - 1)
    return lo, 1.0


def cs_block(sigma2, rho, m):
    """Compound-symmetry covariance sigma2 * ((1 - rho) I + rho J)."""
    m = int(m)
    if m < 1:
        raise DimensionMismatch("need at least one occasion")
    if not sigma2 > 0:
        raise NonPositiveSigma(f"sigma2 must be positive, got {sigma2}")
    lo, hi = rho_bounds(m)
    if not lo < rho < hi:
        raise RhoOutOfRange(f"rho={rho} outside ({lo:.6g}, {hi}) for m={m}")
    return sigma2 * ((1.0 - rho) * np.eye(m) + rho * np.ones((m, m)))


@dataclass(frozen=True, eq=False)
class VarianceParams:
    """Random-effect covariances per grouping level plus residual parameters.

    ``D`` maps a level name to its q x q covariance (outer level first when
    the grouping is nested).  ``rho`` is None for independent residuals.
    """

    D: dict
    sigma2: float
    rho: float | None = None
    cholesky: dict = field(default_factory=dict, repr=False)

    def residual_cov(self, m):
        if self.rho is None:
            if not self.sigma2 > 0:
                raise NonPositiveSigma(f"sigma2 must be positive, got {self.sigma2}")
            return self.sigma2 * np.eye(m)
        return cs_block(self.sigma2, self.rho, m)

    def to_dict(self):
        out = {
            "D": {k: np.asarray(v).tolist() for k, v in self.D.items()},
            "sigma2": float(self.sigma2),
        }
        if self.rho is not None:
            out["rho"] = float(self.rho)
        return out


def marginal_cov(Z, params: VarianceParams, level="pair_id", m=None):
    """V_i = Z_i D Z_i' + R_i for a single-level group."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    D = np.asarray(params.D.get(level, np.zeros((0, 0))))
    if Z.shape[1] != D.shape[0]:
        raise DimensionMismatch(f"Z has {Z.shape[1]} columns but D is {D.shape[0]}x{D.shape[1]}")
    m = Z.shape[0] if m is None else m
    return Z @ D @ Z.T + params.residual_cov(m)


class ThetaMap:
    """Unconstrained encoding of :class:`VarianceParams`.

    Layout: for each level (outer first) the log-Cholesky entries of D taken
    row-wise from the lower triangle (diagonals on the log scale), or only
    the log diagonal for a diagonal D; then log sigma2; then the scaled logit
    of rho when residuals are compound symmetric.
    """

    def __init__(self, levels, structure="general", residual="independent", m=12):
        self.levels = [(name, int(q)) for name, q in levels]
        self.structure = structure
        self.residual = residual
        self.m = int(m)
        lo, hi = rho_bounds(self.m)
        self.rho_lo, self.rho_hi = lo + RHO_EPS, hi - RHO_EPS
        self._slices = {}
        self._fill = {}
        self.labels = []
        self.diag_indices = []
        pos = 0
        for name, q in self.levels:
            if structure == "general":
                idx = [(i, j) for i in range(q) for j in range(i + 1)]
            else:
                idx = [(i, i) for i in range(q)]
            self._slices[name] = (slice(pos, pos + len(idx)), idx)
            rows, cols = (np.array(v, dtype=int) for v in zip(*idx)) if idx else \
                (np.zeros(0, int), np.zeros(0, int))
            self._fill[name] = (rows, cols, rows == cols)
            self.diag_indices += [pos + k for k, (i, j) in enumerate(idx) if i == j]
            self.labels += [f"{name}:L[{i},{j}]" for i, j in idx]
            pos += len(idx)
        self.sigma_index = pos
        self.labels.append("log_sigma2")
        pos += 1
        if residual == "compound_symmetry":
            self.rho_index = pos
            self.labels.append("logit_rho")
            pos += 1
        else:
            self.rho_index = None
        self.size = pos

    def n_d_params(self):
        return self.sigma_index

    def decode(self, theta) -> VarianceParams:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise DecodeFailure(f"theta has shape {theta.shape}, expected ({self.size},)")
        if not np.all(np.isfinite(theta)):
            raise DecodeFailure("theta has non-finite entries")
        D, chol = {}, {}
        for name, q in self.levels:
            sl, _ = self._slices[name]
            rows, cols, diag = self._fill[name]
            vals = theta[sl]
            L = np.zeros((q, q))
            L[rows, cols] = np.where(diag, np.exp(vals), vals)
            chol[name] = L
            D[name] = L @ L.T
        sigma2 = float(np.exp(theta[self.sigma_index]))
        if not (np.isfinite(sigma2) and sigma2 > 0):
            raise DecodeFailure("sigma2 underflow/overflow")
        rho = None
        if self.rho_index is not None:
            rho = float(self.rho_lo + (self.rho_hi - self.rho_lo) * expit(theta[self.rho_index]))
        return VarianceParams(D=D, sigma2=sigma2, rho=rho, cholesky=chol)

    def encode(self, params: VarianceParams):
        theta = np.empty(self.size)
        for name, q in self.levels:
            sl, idx = self._slices[name]
            D = np.asarray(params.D[name], dtype=float)
            if self.structure == "general":
                L = np.linalg.cholesky(D)
            else:
                L = np.diag(np.sqrt(np.diag(D)))
            theta[sl] = [np.log(L[i, j]) if i == j else L[i, j] for i, j in idx]
        theta[self.sigma_index] = np.log(params.sigma2)
        if self.rho_index is not None:
            rho = 0.0 if params.rho is None else params.rho
            u = (rho - self.rho_lo) / (self.rho_hi - self.rho_lo)
            if not 0 < u < 1:
                raise RhoOutOfRange(f"rho={rho} outside the encodable interval")
            theta[self.rho_index] = logit(u)
        return theta
