"""Wasserstein distances, entropies and pushforwards on discrete measures.

Exact optimal transport is an LP (HiGHS) with a dual certificate; larger
instances get a certified entropic bracket whose lower end is a feasible LP
dual value and whose upper end is the cost of a rounded feasible plan, so the
exact value always lies inside.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.special import logsumexp

from .errors import GridMismatch, OutOfDomain, UseSinkhorn

EXACT_ATOM_LIMIT = 512


@dataclass
class EmpiricalMeasure:
    atoms: np.ndarray  # (n, d) points, or an (n, ...) array of path nodes
    weights: np.ndarray

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.atoms) < 1:
            raise ValueError("need at least one atom")
        if (self.weights < 0).any() or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, atoms):
        atoms = np.asarray(atoms, dtype=float)
        n = len(atoms)
        return cls(atoms, np.full(n, 1.0 / n))


@dataclass
class TransportPlan:
    matrix: np.ndarray  # (n, m) nonnegative
    row_residual: float
    col_residual: float

    def check(self, mu, nu, tol=1e-9):
        return max(self.row_residual, self.col_residual) <= tol


def sup_metric(a, b):
    """Uniform (max over nodes) distance of two path samples."""
    if a.grid != b.grid:
        raise GridMismatch("paths live on different time grids")
    return float(np.linalg.norm(a.states - b.states, axis=1).max())


def euclidean_cost(x, y):
    return np.linalg.norm(x[:, None, :] - y[None, :, :], axis=2)


def path_sup_cost(states_a, states_b, block=64):
    """Pairwise sup-metric matrix between two path arrays (n, k+1, d)."""
    n, m = len(states_a), len(states_b)
    out = np.zeros((n, m))
    for lo in range(0, states_a.shape[1], block):
        da = states_a[:, lo : lo + block]
        db = states_b[:, lo : lo + block]
        dist = np.linalg.norm(da[:, None] - db[None, :], axis=3).max(axis=2)
        np.maximum(out, dist, out=out)
    return out


def _cost_matrix(mu, nu, metric):
    if metric is None:
        return euclidean_cost(mu.atoms, nu.atoms)
    if callable(metric):
        n, m = len(mu.atoms), len(nu.atoms)
        out = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                out[i, j] = metric(mu.atoms[i], nu.atoms[j])
        return out
    return np.asarray(metric, dtype=float)


def exact_wp(mu, nu, p=2.0, metric=None, dual_tol=1e-7):
    """Exact discrete W_p via LP; returns (value, plan).

    ``metric`` may be None (Euclidean), a callable ``(x, y) -> float`` or a
    precomputed cost matrix.  The optimal plan carries marginal residuals;
    dual feasibility and the duality gap are checked to ``dual_tol``.
    """
    n, m = len(mu.atoms), len(nu.atoms)
    if n > EXACT_ATOM_LIMIT or m > EXACT_ATOM_LIMIT:
        raise UseSinkhorn(f"instance {n}x{m} exceeds {EXACT_ATOM_LIMIT} atoms")
    rho = _cost_matrix(mu, nu, metric)
    cost = rho**p
    rows = sparse.kron(sparse.eye(n), np.ones((1, m)), format="csr")
    cols = sparse.kron(np.ones((1, n)), sparse.eye(m), format="csr")
    A = sparse.vstack([rows, cols]).tocsc()
    rhs = np.concatenate([mu.weights, nu.weights])
    res = linprog(cost.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    pi = res.x.reshape(n, m)
    duals = np.asarray(res.eqlin.marginals)
    f, g = duals[:n], duals[:m + n][n:]
    slack = (f[:, None] + g[None, :]) - cost
    gap = abs(float(cost.ravel() @ res.x) - float(rhs @ duals))
    if slack.max() > dual_tol or gap > dual_tol * max(1.0, abs(res.fun)):
        raise RuntimeError("dual certificate violated beyond tolerance")
    plan = TransportPlan(
        pi,
        float(np.abs(pi.sum(axis=1) - mu.weights).max()),
        float(np.abs(pi.sum(axis=0) - nu.weights).max()),
    )
    total = max(float(res.fun), 0.0)
    return total ** (1.0 / max(p, 1.0)), plan


def brute_force_wp(mu, nu, p=2.0, metric=None):
    """Permutation-coupling minimum for uniform equal-size measures (oracle)."""
    from itertools import permutations

    n = len(mu.atoms)
    if n != len(nu.atoms):
        raise ValueError("oracle needs equal atom counts")
    cost = _cost_matrix(mu, nu, metric) ** p
    best = np.inf
    for perm in permutations(range(n)):
        best = min(best, sum(cost[i, perm[i]] for i in range(n)) / n)
    return best ** (1.0 / max(p, 1.0))


def _round_plan(pi, mu_w, nu_w):
    # Rescale rows then columns to the target marginals, dump the residual
    # into a rank-one correction; the result is exactly feasible.
    r = pi.sum(axis=1)
    scale = np.minimum(1.0, mu_w / np.maximum(r, 1e-300))
    pi = pi * scale[:, None]
    c = pi.sum(axis=0)
    scale = np.minimum(1.0, nu_w / np.maximum(c, 1e-300))
    pi = pi * scale[None, :]
    er = mu_w - pi.sum(axis=1)
    ec = nu_w - pi.sum(axis=0)
    mass = er.sum()
    if mass > 0:
        pi = pi + np.outer(er, ec) / mass
    return pi


def sinkhorn_wp(mu, nu, p=2.0, eps=0.05, iters=2000, metric=None, tol=1e-10):
    """Entropic surrogate returning certified (lower, upper) bounds on W_p.

    Lower: value of an LP-dual-feasible pair obtained by a tight c-transform
    of the Sinkhorn potential.  Upper: cost of the rounded feasible plan.
    """
    rho = _cost_matrix(mu, nu, metric)
    cost = rho**p
    log_mu = np.log(np.maximum(mu.weights, 1e-300))
    log_nu = np.log(np.maximum(nu.weights, 1e-300))
    f = np.zeros(len(mu.weights))
    g = np.zeros(len(nu.weights))
    converged = False
    for it in range(iters):
        f_prev = f
        g = -eps * logsumexp((-(cost - f[:, None]) / eps) + log_mu[:, None], axis=0)
        f = -eps * logsumexp((-(cost - g[None, :]) / eps) + log_nu[None, :], axis=1)
        if np.abs(f - f_prev).max() < tol:
            converged = True
            break
    log_pi = (f[:, None] + g[None, :] - cost) / eps + log_mu[:, None] + log_nu[None, :]
    pi = _round_plan(np.exp(log_pi), mu.weights, nu.weights)
    upper_cost = float((pi * cost).sum())
    g_tight = (cost - f[:, None]).min(axis=0)
    lower_cost = max(float(f @ mu.weights + g_tight @ nu.weights), 0.0)
    root = 1.0 / max(p, 1.0)
    return SinkhornBracket(
        lower=lower_cost**root,
        upper=max(upper_cost, 0.0) ** root,
        converged=converged,
        eps=eps,
    )


@dataclass
class SinkhornBracket:
    lower: float
    upper: float
    converged: bool
    eps: float


def pushforward(mu, mapping):
    """Image measure: atoms mapped, weights unchanged."""
    mapped = np.asarray([mapping(a) for a in mu.atoms], dtype=float)
    if not np.isfinite(mapped).all():
        raise OutOfDomain("pushforward map produced non-finite atoms")
    return EmpiricalMeasure(mapped, mu.weights.copy())


def relative_entropy_discrete(nu, mu):
    """Sum nu_i log(nu_i / mu_i) over a shared atom index; +inf if nu !<< mu."""
    nw = np.asarray(nu.weights, dtype=float)
    mw = np.asarray(mu.weights, dtype=float)
    if nw.shape != mw.shape:
        raise ValueError("measures must share an atom index")
    charged = nw > 0
    if (mw[charged] == 0).any():
        return float("inf")
    return float(np.sum(nw[charged] * np.log(nw[charged] / mw[charged])))


def girsanov_entropy(shift, sigma_fn, states, grid):
    """Path-space relative entropy of a drift-perturbed law.

    For laws differing by a drift shift ``h``, H(Q|P) equals one half the
    Q-expectation of the time integral of |sigma^{-1} h|^2.  ``states`` is a
    Q-ensemble array (n, k+1, d); returns (estimate, stderr).
    """
    nodes = grid.nodes
    n, k1, d = states.shape
    vals = np.empty((n, k1))
    for j, t in enumerate(nodes):
        x = states[:, j, :]
        hv = shift(t, x)
        sig = sigma_fn(t, x)
        z = np.linalg.solve(sig, hv[..., None])[..., 0]
        vals[:, j] = np.einsum("nd,nd->n", z, z)
    per_path = 0.5 * np.trapezoid(vals, nodes, axis=1)
    est = float(per_path.mean())
    stderr = float(per_path.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return est, stderr


def plan_to_csv(plan, path, threshold=0.0):
    """Sparse triplet export of a coupling matrix."""
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["i", "j", "mass"])
        nz = np.argwhere(plan.matrix > threshold)
        for i, j in nz:
            writer.writerow([int(i), int(j), repr(float(plan.matrix[i, j]))])
