"""Dense brute-force references for the mixed-model engine.

Everything here works on the stacked N x N problem with explicit inverses,
row by row, and never touches the per-group fast path being tested.
"""
import numpy as np
from scipy.linalg import null_space
from scipy.stats import multivariate_normal

from longmix.design import BOROUGH_LEVEL, PAIR_LEVEL


def dense_V(groups, Z, params, outer=None, Zo=None):
    """Element-wise assembly of the stacked marginal covariance."""
    n = len(groups)
    D = params.D.get(PAIR_LEVEL, np.zeros((0, 0)))
    V = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if groups[i] == groups[j]:
                V[i, j] += Z[i] @ D @ Z[j]
                if i == j:
                    V[i, j] += params.sigma2
                elif params.rho is not None:
                    V[i, j] += params.sigma2 * params.rho
            if outer is not None and outer[i] == outer[j]:
                V[i, j] += Zo[i] @ params.D[BOROUGH_LEVEL] @ Zo[j]
    return V


def gls(X, y, V):
    Vi = np.linalg.inv(V)
    info = X.T @ Vi @ X
    return np.linalg.solve(info, X.T @ Vi @ y), np.linalg.inv(info)


def reml_error_contrast(X, y, V):
    """REML log-likelihood from the density of K'y, K an orthonormal basis of null(X').

    With orthonormal K the error-contrast density exceeds the usual REML
    expression by 0.5 log|X'X|, which is removed here.
    """
    K = null_space(X.T)
    ll = multivariate_normal(mean=np.zeros(K.shape[1]), cov=K.T @ V @ K).logpdf(K.T @ y)
    return ll - 0.5 * np.linalg.slogdet(X.T @ X)[1]


def ml_profiled(X, y, V):
    beta, _ = gls(X, y, V)
    return multivariate_normal(mean=X @ beta, cov=V).logpdf(y)


def henderson(X, y, groups, Z, params, outer=None, Zo=None):
    """Joint solve of the mixed-model equations for (beta, u).

    Returns beta and dicts of random effects per pair and per outer key.
    """
    n = len(y)
    D = params.D.get(PAIR_LEVEL, np.zeros((0, 0)))
    keys = sorted(set(groups.tolist()))
    q = D.shape[0]
    blocks, cov_blocks, index = [], [], {}
    for k in keys:
        Zk = np.zeros((n, q))
        rows = groups == k
        Zk[rows] = Z[rows]
        index[("inner", k)] = sum(b.shape[1] for b in blocks)
        blocks.append(Zk)
        cov_blocks.append(D)
    okeys = []
    if outer is not None:
        D1 = params.D[BOROUGH_LEVEL]
        okeys = sorted(set(outer.tolist()))
        for k in okeys:
            Zk = np.zeros((n, D1.shape[0]))
            rows = outer == k
            Zk[rows] = Zo[rows]
            index[("outer", k)] = sum(b.shape[1] for b in blocks)
            blocks.append(Zk)
            cov_blocks.append(D1)
    Zbig = np.hstack(blocks)
    G = np.zeros((Zbig.shape[1], Zbig.shape[1]))
    pos = 0
    for C in cov_blocks:
        G[pos:pos + len(C), pos:pos + len(C)] = C
        pos += len(C)
    R = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if groups[i] == groups[j]:
                R[i, j] = params.sigma2 if i == j else params.sigma2 * (params.rho or 0.0)
    Ri = np.linalg.inv(R)
    p = X.shape[1]
    lhs = np.block([[X.T @ Ri @ X, X.T @ Ri @ Zbig],
                    [Zbig.T @ Ri @ X, Zbig.T @ Ri @ Zbig + np.linalg.inv(G)]])
    rhs = np.concatenate([X.T @ Ri @ y, Zbig.T @ Ri @ y])
    sol = np.linalg.solve(lhs, rhs)
    beta, u = sol[:p], sol[p:]
    inner = {k: u[index[("inner", k)]:index[("inner", k)] + q] for k in keys}
    outer_u = {}
    if outer is not None:
        q1 = params.D[BOROUGH_LEVEL].shape[0]
        outer_u = {k: u[index[("outer", k)]:index[("outer", k)] + q1] for k in okeys}
    return beta, inner, outer_u


def random_instance(rng, nested=None, residual=None, max_groups=4, max_occ=4, max_q=2):
    """Small random mixed-model problem in stacked form (rows shuffled)."""
    G = int(rng.integers(1, max_groups + 1))
    if nested is None:
        nested = bool(rng.integers(0, 2)) and G >= 2
    if residual is None:
        residual = ("independent", "compound_symmetry")[int(rng.integers(0, 2))]
    sizes = rng.integers(2, max_occ + 1, size=G)
    groups = np.repeat(np.arange(G), sizes)
    time = np.concatenate([rng.permutation(np.arange(1.0, max_occ + 1))[:m] for m in sizes])
    n = len(groups)
    p = int(min(rng.integers(1, 4), n - 1))
    X = np.column_stack([np.ones(n)] + [rng.normal(size=n) for _ in range(p - 1)])
    q = int(rng.integers(0, max_q + 1))
    Z = np.column_stack([np.ones(n), time][:q]) if q else np.zeros((n, 0))
    outer = Zo = None
    if nested:
        outer = np.array(["a", "b"])[(np.arange(G) % 2)][groups]
        Zo = np.ones((n, 1))
    y = rng.normal(size=n) * 2.0 + X @ rng.normal(size=p)
    perm = rng.permutation(n)
    out = dict(y=y[perm], X=X[perm], groups=groups[perm], Z=Z[perm], time=time[perm],
               residual=residual)
    if nested:
        out.update(outer_groups=outer[perm], Z_outer=Zo[perm])
    return out
