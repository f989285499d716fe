"""Norm-constrained least squares over ReLU features of harvested candidates.

Features of a point ``x`` are ``relu(<w_j, x> - b_j)`` for every candidate, then
the coordinates of ``x``, then a constant 1. The fitted coefficients become a
network whose output layer carries the candidate coefficients and whose affine
tail is ``<v_x, x> - (-v_1)``.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import BudgetError, InputError, NumericalError, StageError
from .extraction import CandidateSet, ExtractionParams, get_neurons, schedule
from .network import Network, relu
from .oracle import Oracle

log = logging.getLogger(__name__)

MAX_BISECTION = 200


class FeatureSample(NamedTuple):
    z: np.ndarray
    y: float


def featurize_batch(candidates: CandidateSet, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != candidates.dim:
        raise InputError(f"points have dimension {X.shape[1]}, candidates {candidates.dim}")
    hidden = relu((X[:, None, :] * candidates.weights[None]).sum(-1) - candidates.biases)
    return np.hstack([hidden, X, np.ones((len(X), 1))])


def featurize(candidates: CandidateSet, x, y: float = math.nan) -> FeatureSample:
    x = np.asarray(x, dtype=float)
    if x.shape != (candidates.dim,):
        raise InputError(f"x must have dimension {candidates.dim}")
    return FeatureSample(featurize_batch(candidates, x[None])[0], float(y))


@dataclass
class Dataset:
    X: np.ndarray
    Z: np.ndarray
    y: np.ndarray
    acceptance_rate: float

    def __len__(self):
        return len(self.y)

    @property
    def samples(self) -> list:
        return [FeatureSample(z, float(y)) for z, y in zip(self.Z, self.y)]


def truncated_gaussian(rng, n: int, d: int, M_bound: float):
    """``n`` standard Gaussian points with norm at most ``M_bound``, plus the acceptance rate."""
    out, drawn, accepted, kept = [], 0, 0, 0
    while kept < n:
        want = max(int(1.2 * (n - kept)) + 16, 64)
        X = rng.standard_normal((want, d))
        X = X[np.linalg.norm(X, axis=1) <= M_bound]
        drawn += want
        accepted += len(X)
        out.append(X[: n - kept])
        kept += len(out[-1])
        if drawn > 1000 * n + 10_000 and kept == 0:
            raise InputError(f"M_bound = {M_bound} rejects every draw")
    return np.vstack(out), accepted / drawn


def draw_dataset(oracle: Oracle, candidates: CandidateSet, n: int, M_bound: float = math.inf,
                 seed=None) -> Dataset:
    """Query ``F`` on truncated Gaussian inputs; rejected draws are never queried."""
    if n < 1:
        raise InputError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    X, rate = truncated_gaussian(rng, n, oracle.dim, M_bound)
    if rate < 0.5:
        warnings.warn(f"truncation radius {M_bound:.3g} accepts only {rate:.1%} of draws; "
                      "M_bound is probably too small", RuntimeWarning, stacklevel=2)
    y = oracle.query_batch(X)
    return Dataset(X, featurize_batch(candidates, X), y, rate)


class LstsqSolution(NamedTuple):
    v: np.ndarray
    lam: float
    objective: float
    iterations: int


def constrained_least_squares(Z, y, W_bound: float, tol: float = 1e-10,
                              max_iter: int = MAX_BISECTION) -> LstsqSolution:
    """``argmin_{||v|| <= W_bound} sum_i (<v, z_i> - y_i)^2`` along the ridge path.

    One SVD of ``Z`` serves every ridge parameter. If the minimum-norm
    unconstrained solution is feasible it is returned with ``lam = 0``; otherwise
    ``lam`` is bisected (geometrically) until ``||v(lam)||`` lies in
    ``[W_bound (1 - tol), W_bound]``.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if Z.shape[0] != y.size or Z.shape[0] < 1:
        raise InputError("need at least one sample and matching Z, y")
    if not W_bound > 0:
        raise InputError("W_bound must be positive")
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    uty = U.T @ y
    cutoff = s[0] * max(Z.shape) * np.finfo(float).eps if s.size else 0.0
    nz = s > cutoff

    def solve(lam):
        safe = np.where(nz, s, 1.0)
        f = np.where(nz, safe / (safe * safe + lam), 0.0)
        return Vt.T @ (f * uty)

    def objective(v):
        r = Z @ v - y
        return float(r @ r)

    v = solve(0.0)
    if np.linalg.norm(v) <= W_bound:
        return LstsqSolution(v, 0.0, objective(v), 0)

    def feasible(lam):
        return np.linalg.norm(solve(lam)) <= W_bound

    # ||v(lam)|| decreases in lam: bracket [lo infeasible, hi feasible], then bisect geometrically
    hi = float(s[0] ** 2)
    it = 0
    while not feasible(hi):
        hi *= 10.0
        it += 1
    lo = hi
    while feasible(lo):
        lo /= 10.0
        it += 1
    while it < max_iter:
        it += 1
        mid = math.sqrt(lo * hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
        vh = solve(hi)
        if np.linalg.norm(vh) >= W_bound * (1 - tol):
            return LstsqSolution(vh, hi, objective(vh), it)
    raise NumericalError(f"ridge bisection did not converge in {max_iter} iterations "
                         f"(lam in [{lo:.3g}, {hi:.3g}], ||v(hi)|| = "
                         f"{np.linalg.norm(solve(hi)):.6g}, W = {W_bound:.6g})")


def assemble(candidates: CandidateSet, v) -> Network:
    """Hypothesis network whose features reproduce ``<v, featurize(x)>``."""
    d = candidates.dim
    v = np.asarray(v, dtype=float).reshape(-1)
    n = len(candidates)
    if v.size != n + d + 1:
        raise InputError(f"coefficient vector must have length {n + d + 1}, got {v.size}")
    return Network(candidates.weights if n else None, candidates.biases if n else None,
                   v[:n] if n else None, affine_w=v[n:n + d], affine_b=-v[-1], dim=d)


@dataclass
class RegressionConfig:
    """Unset fields take the schedule-derived defaults in :func:`learn_from_queries`."""

    n_samples: Optional[int] = None
    W_bound: Optional[float] = None
    M_bound: Optional[float] = None
    solver_tol: float = 1e-10

    def resolve(self, p: ExtractionParams, d: int, n_candidates: int, remaining=None):
        sched = schedule(p, d)
        W = self.W_bound or math.sqrt(sched.tau / sched.r) + p.k * (p.R + p.B)
        M = self.M_bound or math.sqrt(d) + 2 * math.sqrt(math.log(1 / p.delta))
        n = self.n_samples or max(10 * (n_candidates + d + 1), 10_000)
        if remaining is not None:
            n = min(n, remaining)
        if n < 1:
            raise BudgetError("no queries left for the regression stage")
        return int(n), float(W), float(M)


@dataclass
class LearnReport:
    queries: int
    harvest_queries: int
    regression_queries: int
    n_candidates: int
    n_samples: int
    acceptance_rate: float
    W_bound: float
    M_bound: float
    coef_norm: float
    ridge_lambda: float
    train_loss: float
    m: int
    r: float
    tau: float
    Delta: float
    alpha_fd: float
    seconds_harvest: float
    seconds_regression: float


def learn_from_queries(oracle: Oracle, p: ExtractionParams, cfg: Optional[RegressionConfig] = None,
                       seed=None):
    """Harvest candidates, regress on their features and return ``(network, report, candidates)``."""
    cfg = cfg or RegressionConfig()
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    harvest_seed, data_seed = ss.spawn(2)
    q0 = oracle.query_count
    try:
        cands, hrep = get_neurons(oracle, p, harvest_seed)
    except Exception as exc:
        raise StageError("get_neurons", exc) from exc
    partial = {"candidates": cands, "harvest": hrep}
    t0 = time.perf_counter()
    try:
        n, W, M = cfg.resolve(p, oracle.dim, len(cands), oracle.log.remaining)
        data = draw_dataset(oracle, cands, n, M, np.random.default_rng(data_seed))
    except Exception as exc:
        raise StageError("draw_dataset", exc, partial) from exc
    try:
        sol = constrained_least_squares(data.Z, data.y, W, cfg.solver_tol)
    except Exception as exc:
        raise StageError("constrained_least_squares", exc, partial) from exc
    net = assemble(cands, sol.v)
    report = LearnReport(
        queries=oracle.query_count - q0, harvest_queries=hrep.queries,
        regression_queries=len(data), n_candidates=len(cands), n_samples=len(data),
        acceptance_rate=data.acceptance_rate, W_bound=W, M_bound=M,
        coef_norm=float(np.linalg.norm(sol.v)), ridge_lambda=sol.lam,
        train_loss=sol.objective / len(data), m=hrep.m, r=hrep.r, tau=hrep.tau,
        Delta=hrep.Delta, alpha_fd=hrep.alpha_fd, seconds_harvest=hrep.seconds,
        seconds_regression=time.perf_counter() - t0)
    log.info("learned network from %d candidates, train loss %.3g", len(cands), report.train_loss)
    return net, report, cands
