"""Query-driven neuron harvesting along a random line.

The line ``x0 + t v`` is cut into ``m`` intervals of length ``r`` covering
``[-tau, tau]``. At every interval midpoint the gradient is recovered by finite
differences and the line intercept from a secant; each interval lying inside a
linear piece of ``F`` thereby yields the affine function ``<g, x> - c`` of that
piece. Differences of two pieces are candidate neurons: crossing the kink of
neuron ``i`` changes ``(g, c)`` by exactly ``+-(w_i, b_i)``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import InputError, NumericalError, ResourceError
from .network import GaussianLine
from .oracle import Oracle

log = logging.getLogger(__name__)

# conditioning limit for the finite-difference system
MAX_COND = 1e12
GRADIENT_RETRIES = 3
# midpoint-vs-secant residual that marks an interval as straddling a kink
STRADDLE_RTOL = 1e-9
# secant slope vs <grad, v> disagreement that marks a gradient probe as polluted
SLOPE_RTOL = 1e-6

# Hidden constants of the grid length and the search radius. Calibrated so that
# eps=0.05, delta=0.1, d=8, k=4 gives r ~ 0.002 and tau ~ 200 (m ~ 2e5 intervals).
DEFAULT_C_R = 2e8
DEFAULT_C_TAU = 0.015


@dataclass
class ExtractionParams:
    """Accuracy targets, a-priori network bounds and the unnamed constants of the schedule."""

    epsilon: float
    delta: float
    k: int
    R: float
    B: float
    poly_const: float = 1.0
    c_r: float = DEFAULT_C_R
    c_tau: float = DEFAULT_C_TAU
    c_alpha: float = 1.0
    c_bias: float = 1.0
    w_min: Optional[float] = None
    m_cap: int = 2_000_000
    n_lines: int = 1
    dedup_tol: float = 1e-9

    def __post_init__(self):
        for name in ("epsilon", "delta", "R", "B", "poly_const", "c_r", "c_tau", "c_alpha",
                     "c_bias"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if not self.delta < 1:
            raise InputError("delta must be below 1")
        if int(self.k) < 1:
            raise InputError("k must be >= 1")
        if self.n_lines < 1:
            raise InputError("n_lines must be >= 1")
        self.k = int(self.k)

    def replace(self, **changes) -> "ExtractionParams":
        d = asdict(self)
        d.update(changes)
        return ExtractionParams(**d)


class Schedule(NamedTuple):
    Delta: float
    r: float
    tau: float
    alpha_fd: float
    m: int


def schedule(p: ExtractionParams, d: int) -> Schedule:
    """Grid resolution, search radius and finite-difference step, in dependency order."""
    if d < 1:
        raise InputError("dimension must be >= 1")
    k, eps, dl = p.k, p.epsilon, p.delta
    sqd = math.sqrt(d)
    lk = math.sqrt(math.log(k / dl))
    l1 = math.sqrt(math.log(1 / dl))
    Delta = (eps / p.poly_const) ** 4.5
    r = p.c_r * Delta * dl ** 2 / (k ** 4 * (sqd + lk))
    w_min = p.w_min if p.w_min is not None else eps / (k * p.poly_const)
    spread = k * (sqd + l1)
    tau = k * r + p.c_tau * (spread / (dl * w_min) + spread * lk)
    alpha_fd = dl * r / (p.c_alpha * k * (sqd + lk))
    m = math.ceil(2 * tau / r)
    if m > p.m_cap:
        binding = "tau (c_tau, w_min)" if tau / r > 10 * p.m_cap * r else "r (epsilon, poly_const, c_r)"
        raise ResourceError(f"schedule needs m = {m} intervals (cap {p.m_cap}); "
                            f"r = {r:.3g}, tau = {tau:.3g}; binding parameter: {binding}")
    return Schedule(Delta, r, tau, alpha_fd, m)


def candidate_bounds(p: ExtractionParams, Delta: float):
    """Norm limits a kept candidate ``(w, b)`` must respect: ``(||w|| max, |b| max)``."""
    wmax = p.k * p.R
    bmax = p.c_bias * Delta * p.k ** 2 * p.R * math.sqrt(math.log(p.k / p.delta)) + p.k * p.B
    return wmax, bmax


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_gaussian_line(d: int, seed=None) -> GaussianLine:
    """``x0 ~ N(0, I)`` and ``v`` uniform on the unit sphere."""
    if d < 1:
        raise InputError("dimension must be >= 1")
    rng = _rng(seed)
    x0 = rng.standard_normal(d)
    g = rng.standard_normal(d)
    while not np.any(g):
        g = rng.standard_normal(d)
    v = g / np.linalg.norm(g)
    return GaussianLine(x0, v, seed if isinstance(seed, (int, np.integer)) else None)


def random_directions(rng, d: int, how: str = "orthonormal") -> np.ndarray:
    """``d`` random unit vectors as rows.

    ``"orthonormal"`` returns the rows of a Haar-random orthogonal matrix (each row
    is uniform on the sphere); ``"independent"`` draws them independently.
    """
    G = rng.standard_normal((d, d))
    if how == "independent":
        return G / np.linalg.norm(G, axis=1, keepdims=True)
    if how != "orthonormal":
        raise InputError(f"unknown direction scheme {how!r}")
    Q, Rm = np.linalg.qr(G)
    Q = Q * np.where(np.diag(Rm) < 0, -1.0, 1.0)
    return Q.T


def _fd_system(rng, x, alpha, directions):
    d = x.size
    for _ in range(GRADIENT_RETRIES + 1):
        Z = random_directions(rng, d, directions)
        P = x + alpha * Z
        H = P - x  # the steps actually taken in floating point
        if np.linalg.cond(H) <= MAX_COND:
            return P, H
    raise NumericalError(f"finite-difference system stayed singular after {GRADIENT_RETRIES} retries")


def get_gradient(oracle: Oracle, x, alpha_fd: float, seed=None, fx: Optional[float] = None,
                 directions: str = "orthonormal") -> np.ndarray:
    """Gradient of ``F`` at ``x`` from ``d`` directional difference quotients of step ``alpha_fd``.

    Exact when every activation boundary is farther than ``alpha_fd ||w_i||`` from
    ``x``. Uses ``d + 1`` queries, or ``d`` when ``fx = F(x)`` is supplied.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (oracle.dim,):
        raise InputError(f"x must have dimension {oracle.dim}")
    if not alpha_fd > 0:
        raise InputError("alpha_fd must be positive")
    P, H = _fd_system(_rng(seed), x, alpha_fd, directions)
    if fx is None:
        vals = oracle.query_batch(np.vstack([x, P]))
        fx, fp = vals[0], vals[1:]
    else:
        fp = oracle.query_batch(P)
    return np.linalg.solve(H, fp - fx)


class BiasEstimate(NamedTuple):
    intercept: float
    valid: bool
    slope: float
    f_mid: float


def _secant(fa, fb, fm, lo, hi):
    tm = 0.5 * (lo + hi)
    slope = (fb - fa) / (hi - lo)
    resid = abs(fm - 0.5 * (fa + fb))
    valid = resid <= STRADDLE_RTOL * (1.0 + abs(fm))
    return fm - slope * tm, valid, slope


def get_bias(oracle: Oracle, line: GaussianLine, interval, f_mid: Optional[float] = None) -> BiasEstimate:
    """Line intercept ``F|_L(t_mid) - slope * t_mid`` of the piece containing ``interval``.

    ``valid`` is False when the midpoint value departs from the secant, i.e. the
    interval straddles a kink.
    """
    lo, hi = float(interval[0]), float(interval[1])
    if not hi > lo:
        raise InputError(f"degenerate interval [{lo}, {hi}]")
    tm = 0.5 * (lo + hi)
    if f_mid is None:
        fa, fb, f_mid = oracle.query_batch(line.point(np.array([lo, hi, tm])))
    else:
        fa, fb = oracle.query_batch(line.point(np.array([lo, hi])))
    intercept, valid, slope = _secant(fa, fb, f_mid, lo, hi)
    return BiasEstimate(float(intercept), bool(valid), float(slope), float(f_mid))


@dataclass
class IntervalProbe:
    """Gradient and intercepts recovered for one interval of the grid.

    ``intercept`` is the value at ``t = 0`` of the piece restricted to the line;
    ``offset`` is the constant of the same piece in ambient coordinates, so that
    ``F(x) = <grad, x> - offset`` on it.
    """

    index: int
    lo: float
    hi: float
    grad: np.ndarray
    intercept: float
    offset: float
    valid: bool

    @property
    def t_mid(self) -> float:
        return 0.5 * (self.lo + self.hi)


def probe_line(oracle: Oracle, line: GaussianLine, sched: Schedule, seed=None,
               chunk: int = 4096, directions: str = "orthonormal") -> list:
    """Probe every interval of ``[-tau, tau]``; ``m (d + 3)`` queries in total."""
    rng = _rng(seed)
    d = oracle.dim
    probes = []
    for start in range(0, sched.m, chunk):
        idx = np.arange(start, min(start + chunk, sched.m))
        lo = -sched.tau + idx * sched.r
        hi = lo + sched.r
        tm = 0.5 * (lo + hi)
        mids = line.point(tm)
        systems = [_fd_system(rng, x, sched.alpha_fd, directions) for x in mids]
        # per interval: midpoint, d perturbed points, two endpoints
        Q = np.concatenate([np.concatenate([x[None], P, line.point(np.array([a, b]))])
                            for x, (P, _), a, b in zip(mids, systems, lo, hi)])
        vals = oracle.query_batch(Q).reshape(len(idx), d + 3)
        for j, i in enumerate(idx):
            fm, fp, fa, fb = vals[j, 0], vals[j, 1:d + 1], vals[j, d + 1], vals[j, d + 2]
            grad = np.linalg.solve(systems[j][1], fp - fm)
            intercept, valid, slope = _secant(fa, fb, fm, lo[j], hi[j])
            gv = float(grad @ line.v)
            if abs(gv - slope) > SLOPE_RTOL * (1.0 + abs(slope)):
                valid = False
            offset = float(grad @ line.x0) - intercept
            probes.append(IntervalProbe(int(i), float(lo[j]), float(hi[j]), grad,
                                        float(intercept), offset, bool(valid)))
    return probes


@dataclass
class CandidateSet:
    """Harvested neurons ``(w, b)`` with the probe pair ``(i, j)`` each came from."""

    weights: np.ndarray
    biases: np.ndarray
    provenance: list = field(default_factory=list)

    def __len__(self):
        return len(self.biases)

    def __iter__(self):
        return iter(zip(self.weights, self.biases, self.provenance))

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def empty(cls, d: int) -> "CandidateSet":
        return cls(np.zeros((0, d)), np.zeros(0), [])

    def to_dict(self) -> dict:
        return {"format": "relu-candidates", "version": 1, "dim": self.dim,
                "entries": [{"w": [float(v) for v in w], "b": float(b), "from": list(p)}
                            for w, b, p in self]}

    @classmethod
    def from_dict(cls, doc: dict) -> "CandidateSet":
        d = int(doc["dim"])
        entries = doc.get("entries", [])
        if not entries:
            return cls.empty(d)
        return cls(np.array([e["w"] for e in entries], dtype=float).reshape(-1, d),
                   np.array([e["b"] for e in entries], dtype=float),
                   [tuple(e.get("from", ())) for e in entries])

    def contains(self, w, b, rtol: float = 1e-6, either_sign: bool = True) -> bool:
        """Whether some entry matches ``(w, b)`` (or its negation) to relative error ``rtol``."""
        return self.match_error(w, b, either_sign) <= rtol

    def match_error(self, w, b, either_sign: bool = True) -> float:
        if len(self) == 0:
            return math.inf
        target = np.append(np.asarray(w, dtype=float), float(b))
        cands = np.column_stack([self.weights, self.biases])
        scale = np.linalg.norm(target)
        err = np.linalg.norm(cands - target, axis=1)
        if either_sign:
            err = np.minimum(err, np.linalg.norm(cands + target, axis=1))
        return float(err.min() / scale)

    def union(self, other: "CandidateSet", tol: float) -> "CandidateSet":
        W = np.vstack([self.weights, other.weights])
        b = np.concatenate([self.biases, other.biases])
        keep = _dedup_rows(np.column_stack([W, b]), tol)
        prov = list(self.provenance) + list(other.provenance)
        return CandidateSet(W[keep], b[keep], [prov[i] for i in keep])


def _dedup_rows(rows: np.ndarray, tol: float) -> list:
    """Indices of the first row of each cluster of rows equal within ``tol`` (scaled max-norm)."""
    keep: list = []
    reps = np.zeros((0, rows.shape[1]))
    for i, row in enumerate(rows):
        if len(reps):
            lim = tol * np.maximum(1.0, np.maximum(np.abs(reps), np.abs(row)))
            if np.any(np.all(np.abs(reps - row) <= lim, axis=1)):
                continue
        keep.append(i)
        reps = np.vstack([reps, row])
    return keep


def group_probes(probes: list, tol: float) -> list:
    """Cluster valid probes by their affine piece ``(grad, offset)``.

    Returns one representative per piece: the member probe closest to the line's
    base point, whose values carry the least extrapolation error. Probes are
    compared with a tolerance growing with ``|t_mid|``, matching how the offset
    error scales along the line.
    """
    groups: list = []  # (representative probe, key vector)
    keys = None
    for pr in probes:
        if not pr.valid:
            continue
        key = np.append(pr.grad, pr.offset)
        lim = tol * (1.0 + abs(pr.t_mid)) * np.maximum(1.0, np.abs(key))
        if keys is not None:
            hit = np.flatnonzero(np.all(np.abs(keys - key) <= lim, axis=1))
            if hit.size:
                g = int(hit[0])
                if abs(pr.t_mid) < abs(groups[g].t_mid):
                    groups[g] = pr
                    keys[g] = key
                continue
        groups.append(pr)
        keys = key[None] if keys is None else np.vstack([keys, key])
    return groups


def harvest(probes: list, p: ExtractionParams, sched: Schedule) -> CandidateSet:
    """Pairwise differences of distinct pieces that pass the candidate norm bounds."""
    d = probes[0].grad.size if probes else 0
    reps = sorted(group_probes(probes, p.dedup_tol), key=lambda pr: pr.index)
    wmax, bmax = candidate_bounds(p, sched.Delta)
    W, b, prov = [], [], []
    for pi in reps:
        for pj in reps:
            if pi is pj:
                continue
            w = pi.grad - pj.grad
            c = pi.offset - pj.offset
            nw = float(np.linalg.norm(w))
            # constant features duplicate the regression intercept
            if nw <= p.dedup_tol * max(1.0, float(np.linalg.norm(pi.grad))):
                continue
            if nw <= wmax and abs(c) <= bmax:
                W.append(w)
                b.append(c)
                prov.append((pi.index, pj.index))
    if not W:
        return CandidateSet.empty(d)
    W, b = np.array(W), np.array(b)
    keep = _dedup_rows(np.column_stack([W, b]), p.dedup_tol)
    return CandidateSet(W[keep], b[keep], [prov[i] for i in keep])


@dataclass
class HarvestReport:
    m: int
    r: float
    tau: float
    Delta: float
    alpha_fd: float
    queries: int
    lines: int
    valid_probes: int
    pieces: int
    candidates: int
    seconds: float


def get_neurons(oracle: Oracle, p: ExtractionParams, seed=None):
    """Sample a line, probe its grid and return ``(CandidateSet, HarvestReport)``."""
    t0 = time.perf_counter()
    q0 = oracle.query_count
    d = oracle.dim
    sched = schedule(p, d)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    cands = CandidateSet.empty(d)
    valid = pieces = 0
    for child in ss.spawn(p.n_lines):
        line_seed, probe_seed = child.spawn(2)
        line = sample_gaussian_line(d, np.random.default_rng(line_seed))
        probes = probe_line(oracle, line, sched, np.random.default_rng(probe_seed))
        valid += sum(pr.valid for pr in probes)
        pieces += len(group_probes(probes, p.dedup_tol))
        cands = cands.union(harvest(probes, p, sched), p.dedup_tol)
    report = HarvestReport(sched.m, sched.r, sched.tau, sched.Delta, sched.alpha_fd,
                           oracle.query_count - q0, p.n_lines, valid, pieces, len(cands),
                           time.perf_counter() - t0)
    log.info("harvested %d candidates from %d pieces (m=%d, %d queries)",
             len(cands), pieces, sched.m, report.queries)
    return cands, report
