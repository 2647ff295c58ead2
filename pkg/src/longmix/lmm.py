"""REML/ML estimation of linear mixed-effects models.

The marginal model for subject (pair) ``i`` is

    y_i ~ N(X_i beta, Z_i D Z_i' + R_i)

with R_i either sigma2 * I or a compound-symmetry block.  With nested
grouping, pairs inside an outer group k additionally share
``Z_outer D_outer Z_outer'`` and the marginal blocks are per outer group.
Fixed effects are profiled out by GLS; variance parameters are optimized on
an unconstrained scale (see :class:`~longmix.covariance.ThetaMap`).
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize, stats
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.linalg.lapack import dpotrf, dtrtrs
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .covariance import ThetaMap, VarianceParams, cs_block, marginal_cov  # noqa: F401
from .design import (
    BOROUGH_LEVEL,
    INTERCEPT_NAME,
    PAIR_LEVEL,
    DesignBundle,
    ModelSpec,
    build_design,
    bundle_from_arrays,
)
from .exceptions import (
    DecodeFailure,
    DimensionMismatch,
    IncomparableFits,
    NotConverged,
    NumericalBreakdown,
    SingularInformation,
)

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
REL_IMPROVEMENT_TOL = 1e-10
STEP_TOL = 1e-8
GRAD_TOL = 1e-4


def theta_map_for(bundle: DesignBundle, d_structure="general") -> ThetaMap:
    levels = []
    if bundle.nested:
        levels.append((BOROUGH_LEVEL, len(bundle.z_outer_names)))
    levels.append((PAIR_LEVEL, len(bundle.z_names)))
    return ThetaMap(levels, d_structure, bundle.residual, bundle.max_occasions)


def _cholesky(a):
    c, info = dpotrf(a, lower=1, clean=1)
    if info != 0:
        raise NumericalBreakdown("covariance block is not positive definite")
    return c


def _tri_solve(c, b):
    x, info = dtrtrs(c, b, lower=1)
    if info != 0:
        raise NumericalBreakdown("singular triangular factor")
    return x


class _Engine:
    """Fast likelihood evaluation for one design bundle.

    Pairs whose random-effect design rows are identical share a marginal
    block, so each distinct ``Z_i`` is factorized once per evaluation and
    applied to the stacked ``[X_i, y_i, Z_outer_i]`` of all its pairs.
    Per-pair cross products land in canonical pair order before any sum is
    taken, which keeps the reduction order fixed.
    """

    def __init__(self, bundle: DesignBundle, theta_map: ThetaMap):
        self.bundle = bundle
        self.tmap = theta_map
        groups = bundle.groups
        self.p = bundle.n_fixed
        self.q1 = len(bundle.z_outer_names)
        self.k = self.p + 1 + self.q1
        self.n_obs = bundle.n_obs
        self.n_units = len(groups)
        buckets = {}
        for i, g in enumerate(groups):
            buckets.setdefault((len(g.y), g.Z.tobytes()), []).append(i)
        self.patterns = []
        for (m, _), members in buckets.items():
            U = np.stack([np.column_stack([groups[i].X, groups[i].y, groups[i].Z_outer])
                          for i in members])
            flat = np.ascontiguousarray(U.transpose(1, 0, 2).reshape(m, -1))
            self.patterns.append((m, groups[members[0]].Z, np.asarray(members), flat))
        self._eye = {m: np.eye(m) for m, *_ in self.patterns}
        outer = [g.outer for g in groups]
        self.outer_slices = []
        if self.q1:
            start = 0
            for i in range(1, self.n_units + 1):
                if i == self.n_units or outer[i] != outer[start]:
                    self.outer_slices.append(slice(start, i))
                    start = i

    def _residual(self, params, m):
        eye = self._eye[m]
        if params.rho is None:
            return params.sigma2 * eye
        return params.sigma2 * ((1.0 - params.rho) * eye + params.rho)

    def cross_products(self, params):
        """Return (S, logdetV) where S = [X y]' V^-1 [X y] summed over blocks."""
        D = params.D[PAIR_LEVEL]
        p1 = self.p + 1
        grams = np.empty((self.n_units, self.k, self.k))
        logdet = np.empty(self.n_units)
        for m, Z, members, flat in self.patterns:
            A = Z @ D @ Z.T + self._residual(params, m)
            C = _cholesky(A)
            W = _tri_solve(C, flat).reshape(m, len(members), self.k).transpose(1, 0, 2)
            grams[members] = W.transpose(0, 2, 1) @ W
            logdet[members] = 2.0 * np.log(np.diag(C)).sum()
        if not self.q1:
            return grams.sum(axis=0), logdet.sum()
        L1 = params.cholesky[BOROUGH_LEVEL]
        eye = np.eye(self.q1)
        S = np.zeros((p1, p1))
        total = 0.0
        for sl in self.outer_slices:
            G = grams[sl].sum(axis=0)
            M = eye + L1.T @ G[p1:, p1:] @ L1
            H = _cholesky(M)
            Q = _tri_solve(H, L1.T @ G[p1:, :p1])
            S += G[:p1, :p1] - Q.T @ Q
            total += logdet[sl].sum() + 2.0 * np.log(np.diag(H)).sum()
        return S, total

    def evaluate(self, theta, method="REML"):
        """Log-likelihood plus the profiled GLS pieces at ``theta``."""
        params = self.tmap.decode(theta)
        S, logdet = self.cross_products(params)
        p = self.p
        LS, info = dpotrf(S, lower=1, clean=1)
        if info != 0:
            raise SingularInformation(np.linalg.cond(S[:p, :p]))
        quad = LS[p, p] ** 2
        if method == "REML":
            logdet_info = 2.0 * np.log(np.diag(LS)[:p]).sum()
            ll = -0.5 * (logdet + logdet_info + quad) - 0.5 * (self.n_obs - p) * LOG_2PI
        else:
            ll = -0.5 * (logdet + quad) - 0.5 * self.n_obs * LOG_2PI
        return ll, S, params

    def loglik(self, theta, method="REML"):
        return self.evaluate(theta, method)[0]


def reml_loglik(theta, bundle: DesignBundle, d_structure="general"):
    """Restricted log-likelihood including the -(N-p)/2 log(2 pi) constant."""
    return _Engine(bundle, theta_map_for(bundle, d_structure)).loglik(theta, "REML")


def ml_loglik(theta, bundle: DesignBundle, d_structure="general"):
    return _Engine(bundle, theta_map_for(bundle, d_structure)).loglik(theta, "ML")


# -- dense per-block algebra (used at the optimum and by gls_beta) --------

def marginal_blocks(bundle: DesignBundle, params: VarianceParams):
    """Dense marginal covariance per independent block.

    Returns a list of ``(unit_indices, V)``: one entry per pair for flat
    grouping, one per outer group for nested grouping.
    """
    D = params.D.get(PAIR_LEVEL, np.zeros((0, 0)))
    units = bundle.groups
    if not bundle.nested:
        return [([i], marginal_cov(g.Z, params)) for i, g in enumerate(units)]
    D1 = params.D[BOROUGH_LEVEL]
    out = []
    for key in bundle.outer_keys:
        idx = [i for i, g in enumerate(units) if g.outer == key]
        sizes = [len(units[i].y) for i in idx]
        n = sum(sizes)
        V = np.zeros((n, n))
        Zo = np.vstack([units[i].Z_outer for i in idx])
        pos = 0
        for i, m in zip(idx, sizes):
            g = units[i]
            V[pos:pos + m, pos:pos + m] = g.Z @ D @ g.Z.T + params.residual_cov(m)
            pos += m
        V += Zo @ D1 @ Zo.T
        out.append((idx, V))
    return out


def gls_beta(bundle: DesignBundle, V_blocks):
    """GLS fixed effects given the marginal covariance of every block.

    ``V_blocks`` is either the output of :func:`marginal_blocks` or a plain
    list of matrices in the same block order.
    """
    blocks = marginal_blocks_layout(bundle)
    if len(V_blocks) != len(blocks):
        raise DimensionMismatch(f"expected {len(blocks)} covariance blocks, got {len(V_blocks)}")
    p = bundle.n_fixed
    info = np.zeros((p, p))
    score = np.zeros(p)
    for idx, V in zip(blocks, V_blocks):
        if isinstance(V, tuple):
            V = V[1]
        X = np.vstack([bundle.groups[i].X for i in idx])
        y = np.concatenate([bundle.groups[i].y for i in idx])
        if V.shape != (len(y), len(y)):
            raise DimensionMismatch("covariance block does not match group size")
        try:
            cf = cho_factor(V, lower=True, check_finite=False)
        except LinAlgError:
            raise NumericalBreakdown("covariance block is not positive definite") from None
        info += X.T @ cho_solve(cf, X, check_finite=False)
        score += X.T @ cho_solve(cf, y, check_finite=False)
    try:
        cf = cho_factor(info, lower=True)
    except LinAlgError:
        raise SingularInformation(np.linalg.cond(info)) from None
    beta = cho_solve(cf, score)
    cov = cho_solve(cf, np.eye(p))
    return beta, cov


def marginal_blocks_layout(bundle):
    if not bundle.nested:
        return [[i] for i in range(len(bundle.groups))]
    return [[i for i, g in enumerate(bundle.groups) if g.outer == key]
            for key in bundle.outer_keys]


def random_effects(bundle, params, beta):
    """BLUPs at given variance parameters and fixed effects.

    Returns ``(inner, outer)``: dicts mapping pair keys (and, when nested,
    outer keys) to their predicted random-effect vectors.
    """
    D = params.D.get(PAIR_LEVEL, np.zeros((0, 0)))
    D1 = params.D.get(BOROUGH_LEVEL)
    inner, outer = {}, {}
    for idx, V in marginal_blocks(bundle, params):
        units = [bundle.groups[i] for i in idx]
        r = np.concatenate([g.y - g.X @ beta for g in units])
        w = cho_solve(cho_factor(V, lower=True, check_finite=False), r, check_finite=False)
        pos = 0
        for g in units:
            m = len(g.y)
            inner[g.key] = D @ g.Z.T @ w[pos:pos + m]
            pos += m
        if bundle.nested:
            Zo = np.vstack([g.Z_outer for g in units])
            outer[units[0].outer] = D1 @ Zo.T @ w
    return inner, outer


def blup(fit, bundle: DesignBundle):
    """Empirical BLUPs ``D Z_i' V_i^-1 (y_i - X_i beta)`` for each level."""
    if not getattr(fit, "converged", False):
        raise NotConverged("BLUPs need a converged fit")
    inner, outer = random_effects(bundle, fit.variance, fit.beta)
    out = {PAIR_LEVEL: inner}
    if bundle.nested:
        out[BOROUGH_LEVEL] = outer
    return out


def _conditional_residuals(bundle, params, beta, inner, outer):
    raw, cond, norm = [], [], []
    for g in bundle.groups:
        r = g.y - g.X @ beta
        e = r - g.Z @ inner[g.key]
        if bundle.nested:
            e = e - g.Z_outer @ outer[g.outer]
        L = np.linalg.cholesky(params.residual_cov(len(g.y)))
        raw.append(r)
        cond.append(e)
        norm.append(solve_triangular(L, e, lower=True))
    return np.concatenate(raw), np.concatenate(cond), np.concatenate(norm)


def normalized_residuals(fit, bundle: DesignBundle):
    """Conditional residuals whitened by the Cholesky factor of R_i, in row order."""
    if not getattr(fit, "converged", False):
        raise NotConverged("normalized residuals need a converged fit")
    inner, outer = random_effects(bundle, fit.variance, fit.beta)
    _, _, norm = _conditional_residuals(bundle, fit.variance, fit.beta, inner, outer)
    _, _, rows = bundle.stacked()
    out = np.empty_like(norm)
    out[rows] = norm
    return out


# -- inference helpers ------------------------------------------------------

def containment_df(bundle: DesignBundle):
    """Denominator df per fixed coefficient.

    Columns that vary within some pair (and the global intercept) get
    N - n_pairs - p_within; columns constant within every pair get
    n_pairs - p_between.
    """
    within = []
    for j, name in enumerate(bundle.x_names):
        varies = any(np.ptp(g.X[:, j]) > 0 for g in bundle.groups)
        within.append(varies or name == INTERCEPT_NAME)
    within = np.array(within)
    n_units = len(bundle.groups)
    df_within = bundle.n_obs - n_units - within.sum()
    df_between = n_units - (~within).sum()
    return np.where(within, df_within, df_between).astype(float), within


def identifiability_warnings(bundle: DesignBundle, d_structure="general"):
    """Structural reasons some variance parameters are not identified."""
    notes = []
    names = bundle.z_names
    if d_structure == "general" and len(names) > 1:
        support = np.array([[np.any(g.Z[:, j] != 0) for j in range(len(names))]
                            for g in bundle.groups])
        for a in range(len(names)):
            for b in range(a):
                if not np.any(support[:, a] & support[:, b]):
                    notes.append(f"cov({names[b]}, {names[a]}) never enters the likelihood")
    if bundle.residual == "compound_symmetry" and names:
        ones_in_span = True
        for g in bundle.groups:
            coef, *_ = np.linalg.lstsq(g.Z, np.ones(len(g.y)), rcond=None)
            if not np.allclose(g.Z @ coef, 1.0):
                ones_in_span = False
                break
        if ones_in_span:
            notes.append("random intercepts and compound-symmetry covariance sigma2*rho "
                         "are confounded; only their sum is identified")
    return notes


# -- optimizer ------------------------------------------------------------------

def _central_gradient(f, x, rel_step=1e-5):
    g = np.empty_like(x)
    for j in range(len(x)):
        h = rel_step * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def _gradient_4pt(f, x, rel_step=1e-3):
    """Fourth-order central differences; truncation error O(h^4)."""
    g = np.empty_like(x)
    for j in range(len(x)):
        h = rel_step * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x - 2 * e) - 8 * f(x - e) + 8 * f(x + e) - f(x + 2 * e)) / (12.0 * h)
    return g


def _central_hessian(f, x, rel_step=1e-4):
    n = len(x)
    h = rel_step * np.maximum(1.0, np.abs(x))
    H = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i], ej[j] = h[i], h[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej)
                                 + f(x - ei - ej)) / (4.0 * h[i] * h[j])
    return H


def _newton_refine(f, x, fx, max_iter=4, max_step=1e-2):
    """Finite-difference Newton steps from a point already near the optimum.

    Only small steps on a positive-definite Hessian are taken, so boundary
    solutions (flat directions) are left as they are.
    """
    for _ in range(max_iter):
        H = _central_hessian(f, x)
        if not np.all(np.isfinite(H)):
            break
        try:
            c = cho_factor(H)
        except LinAlgError:
            break
        step = cho_solve(c, _gradient_4pt(f, x))
        size = float(np.max(np.abs(step)))
        if not np.isfinite(size) or size > max_step:
            break
        x_new = x - step
        f_new = f(x_new)
        if not f_new <= fx + 1e-13 * (1.0 + abs(fx)):
            break
        x, fx = x_new, min(f_new, fx)
        if size < 1e-11:
            break
    return x, fx


def _initial_theta(bundle, tmap: ThetaMap):
    y, X, _ = bundle.stacked()
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    v = float(np.var(y - X @ beta, ddof=0))
    v = v if v > 0 else 1.0
    q_total = sum(q for _, q in tmap.levels)
    d0 = 0.5 * v / max(q_total, 1)
    params = VarianceParams(
        D={name: d0 * np.eye(q) for name, q in tmap.levels},
        sigma2=0.5 * v,
        rho=0.0 if tmap.rho_index is not None else None,
    )
    return tmap.encode(params)


def optimize_theta(objective, theta0, n_restarts=5, random_state=0, max_cycles=10,
                   simplex_step=0.5):
    """Nelder-Mead with jittered restarts, then quasi-Newton polish cycles.

    Restarts alternate between wide jitter around ``theta0`` and narrow
    jitter around the incumbent optimum, stopping early once two
    consecutive restarts return to the incumbent.  Returns ``(theta, report)``.
    Convergence requires a polish cycle whose relative objective
    improvement is below 1e-10 and whose accepted parameter step is below
    1e-8 in max-norm, plus a small finite-difference gradient.
    """
    rng = np.random.default_rng(random_state)
    theta0 = np.asarray(theta0, dtype=float)
    n = len(theta0)
    nfev = 0

    def f(x):
        nonlocal nfev
        nfev += 1
        try:
            with np.errstate(all="ignore"):
                val = objective(x)
        except (NumericalBreakdown, SingularInformation, DecodeFailure):
            return np.inf
        return val if np.isfinite(val) else np.inf

    best_x, best_f = theta0, f(theta0)
    restarts_used = agree = 0
    for i in range(n_restarts + 1):
        if i == 0:
            x0 = theta0
        elif i % 2:
            x0 = theta0 + rng.normal(0.0, 1.0, size=n)
        else:
            x0 = best_x + rng.normal(0.0, 0.25, size=n)
        if not np.isfinite(f(x0)):
            continue
        simplex = np.vstack([x0, x0 + simplex_step * np.eye(n)])
        res = optimize.minimize(f, x0, method="Nelder-Mead", options={
            "xatol": 1e-3, "fatol": 1e-6, "maxfev": 200 * n, "adaptive": n >= 4,
            "initial_simplex": simplex})
        restarts_used += i > 0
        # two restarts in a row landing back on the incumbent end the search
        agree = agree + 1 if i > 0 and abs(res.fun - best_f) <= 1e-5 * (1.0 + abs(best_f)) else 0
        if res.fun < best_f:
            best_x, best_f = res.x, res.fun
        if agree >= 2:
            break
    if not np.isfinite(best_f):
        return best_x, {"converged": False, "message": "objective is not finite at any start",
                        "iterations": nfev, "cycles": 0, "restarts_used": restarts_used,
                        "final_theta": best_x.tolist(), "gradient_norm": float("nan")}

    converged = False
    cycles = 0
    last_step, last_rel = np.inf, np.inf
    for cycles in range(1, max_cycles + 1):
        gtol = 1e-7 * (1.0 + abs(best_f))
        res = optimize.minimize(f, best_x, method="BFGS",
                                jac=lambda x: _central_gradient(f, x),
                                options={"gtol": gtol, "maxiter": 200 * n})
        if np.isfinite(res.fun) and res.fun < best_f:
            last_rel = (best_f - res.fun) / max(1.0, abs(best_f))
            last_step = float(np.max(np.abs(res.x - best_x)))
            best_x, best_f = res.x, res.fun
        else:
            last_rel, last_step = 0.0, 0.0
        if last_rel < REL_IMPROVEMENT_TOL and last_step < STEP_TOL:
            converged = True
            break
    if converged:
        best_x, best_f = _newton_refine(f, best_x, best_f)
    grad = _central_gradient(f, best_x)
    grad_norm = float(np.linalg.norm(grad))
    grad_ok = np.isfinite(grad_norm) and grad_norm <= GRAD_TOL * (1.0 + abs(best_f))
    if converged and not grad_ok:
        message = f"gradient norm {grad_norm:.3g} too large at the optimum"
    elif converged:
        message = "converged"
    else:
        message = (f"no stationary point after {max_cycles} polish cycles "
                   f"(last relative improvement {last_rel:.3g}, step {last_step:.3g})")
    report = {
        "converged": bool(converged and grad_ok),
        "message": message,
        "iterations": nfev,
        "cycles": cycles,
        "restarts_used": restarts_used,
        "final_theta": best_x.tolist(),
        "gradient_norm": grad_norm,
        "objective": float(best_f),
    }
    return best_x, report


# -- results ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of a converged mixed-model fit.

    ``residuals`` is indexed by panel row and holds the fitted marginal
    mean, the marginal residual, the conditional residual and the
    normalized residual.
    """

    x_names: tuple
    beta: np.ndarray
    cov_beta: np.ndarray
    df: np.ndarray
    variance: VarianceParams
    theta: np.ndarray
    theta_labels: tuple
    blups: dict
    loglik: float
    method: str
    n_obs: int
    n_groups: int
    d_structure: str
    residual_structure: str
    residuals: pd.DataFrame
    convergence: dict
    response_digest: str = ""
    model_id: str | None = None
    spec: ModelSpec | None = None
    notes: tuple = ()
    converged: bool = field(default=True)

    @property
    def n_fixed(self):
        return len(self.beta)

    @property
    def n_variance_params(self):
        return len(self.theta)

    @property
    def n_params(self):
        return self.n_fixed + self.n_variance_params

    @property
    def aic(self):
        return -2.0 * self.loglik + 2.0 * self.n_params

    @property
    def bic(self):
        return -2.0 * self.loglik + np.log(self.n_obs) * self.n_params

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov_beta))

    def t_table(self) -> pd.DataFrame:
        return t_table(self)

    def coef(self, name):
        return float(self.beta[self.x_names.index(name)])

    def tvalue(self, name):
        i = self.x_names.index(name)
        return float(self.beta[i] / self.se[i])

    def max_fixed_correlation(self):
        """Largest absolute off-diagonal correlation between fixed-effect estimates."""
        if self.n_fixed < 2:
            return 0.0
        s = self.se
        corr = self.cov_beta / np.outer(s, s)
        off = np.abs(corr[~np.eye(len(s), dtype=bool)])
        return float(off.max())

    def variance_components(self):
        """Flat name -> value map of the estimated variance parameters."""
        out = {}
        for level, D in self.variance.D.items():
            names = list(self.blups[level].columns)
            for i, a in enumerate(names):
                out[f"{level}:var({a})"] = float(D[i, i])
                for j in range(i):
                    out[f"{level}:cov({names[j]},{a})"] = float(D[i, j])
        out["residual:sigma2"] = float(self.variance.sigma2)
        if self.variance.rho is not None:
            out["residual:rho"] = float(self.variance.rho)
        return out

    def to_dict(self):
        table = self.t_table()
        return {
            "model_id": self.model_id,
            "converged": True,
            "method": self.method,
            "n_obs": self.n_obs,
            "n_groups": self.n_groups,
            "d_structure": self.d_structure,
            "residual_structure": self.residual_structure,
            "coefficients": [
                {"effect": name, "estimate": float(row.estimate), "se": float(row.se),
                 "t": float(row.t), "df": float(row.df), "p": float(row.p)}
                for name, row in table.iterrows()
            ],
            "variance_components": self.variance_components(),
            "variance": self.variance.to_dict(),
            "loglik": float(self.loglik),
            "aic": float(self.aic),
            "bic": float(self.bic),
            "k": self.n_params,
            "max_fixed_correlation": self.max_fixed_correlation(),
            "df_convention": "containment: within-pair terms N - pairs - p_within, "
                             "between-pair terms pairs - p_between",
            "convergence": self.convergence,
            "notes": list(self.notes),
            "spec": self.spec.to_dict() if self.spec is not None else None,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    def to_text(self):
        from .report import fit_text

        return fit_text(self.to_dict())


@dataclass(frozen=True, eq=False)
class ConvergenceFailure:
    """Returned instead of a fit when the optimizer reports non-convergence."""

    report: dict
    model_id: str | None = None
    spec: ModelSpec | None = None
    notes: tuple = ()
    converged: bool = field(default=False)

    def to_dict(self):
        return {
            "model_id": self.model_id,
            "converged": False,
            "convergence": self.report,
            "notes": list(self.notes),
            "spec": self.spec.to_dict() if self.spec is not None else None,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    def to_text(self):
        from .report import fit_text

        return fit_text(self.to_dict())


def t_table(fit) -> pd.DataFrame:
    """Estimate, SE, t, df and two-sided Student-t p value per coefficient."""
    if not getattr(fit, "converged", False):
        raise NotConverged("inference table needs a converged fit")
    se = fit.se
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(fit.beta == 0, 0.0, fit.beta / se)
    p = 2.0 * stats.t.sf(np.abs(t), fit.df)
    return pd.DataFrame({"estimate": fit.beta, "se": se, "t": t, "df": fit.df, "p": p},
                        index=pd.Index(fit.x_names, name="effect"))


def aic(fit):
    return fit.aic


def compare(fits, names=None) -> pd.DataFrame:
    """Rank fits by AIC (ascending, ties keep input order).

    Fits must describe the same observations.  ``comparable`` is False when
    REML fits with different fixed-effect columns are mixed, since their
    restricted likelihoods refer to different error contrasts.
    """
    fits = list(fits)
    names = list(names) if names is not None else [f.model_id or str(i) for i, f in enumerate(fits)]
    if not fits:
        return pd.DataFrame(columns=["model", "aic", "bic", "loglik", "k", "comparable"])
    digests = {f.response_digest for f in fits}
    if len(digests) > 1:
        raise IncomparableFits("fits were estimated on different responses/observations")
    reml = any(f.method == "REML" for f in fits)
    same_fixed = len({tuple(f.x_names) for f in fits}) == 1
    same_method = len({f.method for f in fits}) == 1
    comparable = same_method and (same_fixed or not reml)
    rows = [{"model": n, "aic": f.aic, "bic": f.bic, "loglik": f.loglik, "k": f.n_params,
             "comparable": comparable, "order": i} for i, (n, f) in enumerate(zip(names, fits))]
    out = pd.DataFrame(rows).sort_values(["aic", "order"], kind="mergesort")
    return out.drop(columns="order").reset_index(drop=True)


def _digest(bundle):
    import hashlib

    # canonical group order, so a row permutation of the same data hashes alike
    h = hashlib.sha1()
    for g in sorted(bundle.groups, key=lambda g: g.key):
        h.update(repr(g.key).encode())
        h.update(np.ascontiguousarray(g.y).tobytes())
    return h.hexdigest()


# -- estimator -------------------------------------------------------------

class MixedLM(RegressorMixin, BaseEstimator):
    """Linear mixed-effects regressor with a scikit-learn interface.

    Parameters
    ----------
    d_structure : {"general", "diagonal"}
        Structure of each random-effects covariance matrix.
    residual : {"independent", "compound_symmetry"}
        Within-pair residual correlation.
    method : {"REML", "ML"}
    n_restarts : int
        Jittered Nelder-Mead restarts before the quasi-Newton polish.
    random_state : int
        Seed for the restart jitter.
    max_cycles : int
        Maximum number of polish cycles.

    Attributes
    ----------
    coef_ : ndarray of fixed-effect estimates.
    result_ : FitResult or ConvergenceFailure
    converged_ : bool
    """

    def __init__(self, d_structure="general", residual="independent", method="REML",
                 n_restarts=5, random_state=0, max_cycles=10):
        self.d_structure = d_structure
        self.residual = residual
        self.method = method
        self.n_restarts = n_restarts
        self.random_state = random_state
        self.max_cycles = max_cycles

    def fit(self, X, y, groups, Z=None, time=None, outer_groups=None, Z_outer=None):
        """Fit from stacked arrays.

        ``groups`` labels the subject of every row; ``Z`` holds its
        random-effect columns.  ``outer_groups``/``Z_outer`` add a second,
        enclosing grouping level.
        """
        x_names = list(X.columns) if hasattr(X, "columns") else None
        z_names = list(Z.columns) if hasattr(Z, "columns") else None
        zo_names = list(Z_outer.columns) if hasattr(Z_outer, "columns") else None
        X = check_array(X, dtype=float)
        y = check_array(np.asarray(y, dtype=float).reshape(-1, 1), dtype=float).ravel()
        check_consistent_length(X, y, groups)
        if Z is not None:
            Z = check_array(np.asarray(Z, dtype=float).reshape(len(y), -1), dtype=float,
                            ensure_min_features=0)
        if Z_outer is not None:
            Z_outer = check_array(np.asarray(Z_outer, dtype=float).reshape(len(y), -1),
                                  dtype=float, ensure_min_features=0)
        bundle = bundle_from_arrays(y, X, groups, Z=Z, time=time, outer_groups=outer_groups,
                                    Z_outer=Z_outer, x_names=x_names, z_names=z_names,
                                    z_outer_names=zo_names, residual=self.residual)
        return self.fit_bundle(bundle)

    def fit_bundle(self, bundle: DesignBundle, spec=None, model_id=None):
        self.result_ = _fit_bundle(bundle, self.d_structure, self.method, self.n_restarts,
                                   self.random_state, self.max_cycles, spec, model_id)
        self.converged_ = self.result_.converged
        self.n_features_in_ = bundle.n_fixed
        if self.converged_:
            self.coef_ = self.result_.beta
            self.variance_ = self.result_.variance
        else:
            for attr in ("coef_", "variance_"):
                self.__dict__.pop(attr, None)
            warnings.warn(self.result_.report["message"], ConvergenceWarning, stacklevel=2)
        return self

    def predict(self, X, groups=None, Z=None):
        """Marginal prediction X beta; adds pair BLUPs when ``groups`` and ``Z`` are given."""
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        pred = X @ self.coef_
        if groups is not None and Z is not None:
            Z = np.asarray(Z, dtype=float).reshape(len(pred), -1)
            table = self.result_.blups[PAIR_LEVEL]
            for i, key in enumerate(np.asarray(groups)):
                if key in table.index:
                    pred[i] += Z[i] @ table.loc[key].to_numpy()
        return pred


def _fit_bundle(bundle, d_structure="general", method="REML", n_restarts=5, random_state=0,
                max_cycles=10, spec=None, model_id=None):
    tmap = theta_map_for(bundle, d_structure)
    engine = _Engine(bundle, tmap)
    notes = tuple(identifiability_warnings(bundle, d_structure))
    theta0 = _initial_theta(bundle, tmap)
    theta, report = optimize_theta(lambda th: -engine.loglik(th, method), theta0,
                                   n_restarts=n_restarts, random_state=random_state,
                                   max_cycles=max_cycles)
    report["theta_labels"] = list(tmap.labels)
    if not report["converged"]:
        logger.warning("model %s did not converge: %s", model_id, report["message"])
        return ConvergenceFailure(report=report, model_id=model_id, spec=spec, notes=notes)
    ll, S, params = engine.evaluate(theta, method)
    beta, cov_beta = gls_beta(bundle, [V for _, V in marginal_blocks(bundle, params)])
    report["loglik"] = float(ll)
    # a log standard deviation this small means the component collapsed to zero
    report["boundary"] = [tmap.labels[i] for i in tmap.diag_indices if theta[i] < -15.0]
    df, _ = containment_df(bundle)

    inner, outer = random_effects(bundle, params, beta)
    blups = {PAIR_LEVEL: pd.DataFrame(
        np.array([inner[g.key] for g in bundle.groups]).reshape(len(bundle.groups), -1),
        index=pd.Index([g.key for g in bundle.groups], name=PAIR_LEVEL),
        columns=list(bundle.z_names))}
    if bundle.nested:
        blups[BOROUGH_LEVEL] = pd.DataFrame(
            np.array([outer[k] for k in bundle.outer_keys]).reshape(len(bundle.outer_keys), -1),
            index=pd.Index(list(bundle.outer_keys), name=BOROUGH_LEVEL),
            columns=list(bundle.z_outer_names))
    raw, cond, norm = _conditional_residuals(bundle, params, beta, inner, outer)
    y, X, rows = bundle.stacked()
    order = np.argsort(rows, kind="stable")
    resid = pd.DataFrame({
        "pair_id": np.concatenate([[g.key] * len(g.y) for g in bundle.groups])[order],
        "fitted": (X @ beta)[order],
        "marginal": raw[order],
        "conditional": cond[order],
        "normalized": norm[order],
    }, index=pd.Index(rows[order], name="row"))
    return FitResult(
        x_names=tuple(bundle.x_names), beta=beta, cov_beta=cov_beta, df=df, variance=params,
        theta=theta, theta_labels=tuple(tmap.labels), blups=blups, loglik=float(ll),
        method=method, n_obs=bundle.n_obs, n_groups=len(bundle.groups),
        d_structure=d_structure, residual_structure=bundle.residual, residuals=resid,
        convergence=report, response_digest=_digest(bundle), model_id=model_id, spec=spec,
        notes=notes,
    )


def fit_model(spec: ModelSpec, panel, n_restarts=5, random_state=0, max_cycles=10,
              model_id=None):
    """Build the design for ``spec`` on ``panel`` and estimate it.

    Returns a :class:`FitResult`, or a :class:`ConvergenceFailure` carrying
    the optimizer report when no stationary point was found.
    """
    bundle = build_design(panel, spec)
    return _fit_bundle(bundle, spec.d_structure, spec.method, n_restarts, random_state,
                       max_cycles, spec, model_id)


fit = fit_model
