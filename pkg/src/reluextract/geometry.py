"""Closeness calculus for neurons treated as directions in (weight, bias) space.

Two neurons ``(v, b)`` and ``(v', b')`` are (delta, alpha)-close when

    |sin angle(v, v')| <= delta   and   ||b v' - b' v|| <= alpha ||v|| ||v'||.

Pairwise-close clusters split into two anti-correlated halves (``orientation``),
signed neurons on one side of a reference direction fold into a multiple of that
reference (``merge``), and a clump therefore collapses to at most two neurons
(``collapse_clump``) or, when its signed sum nearly cancels, to an affine map
(``corner_case_affine``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import reduce
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InconsistencyError, InputError
from .network import Network

# relative slack when re-checking coefficient bounds after floating-point folds
BOUND_RTOL = 1e-12


@dataclass(frozen=True)
class ClosenessParams:
    delta: float
    alpha: float

    def __post_init__(self):
        if not 0 <= self.delta < 1:
            raise InputError("delta must lie in [0, 1)")
        if self.alpha < 0:
            raise InputError("alpha must be nonnegative")


class Orientation(NamedTuple):
    S1: tuple
    S2: tuple


class SignedNeuron(NamedTuple):
    s: int
    v: np.ndarray
    b: float


class Collapsed(NamedTuple):
    a_plus: float
    a_minus: float
    network: Network


@dataclass(frozen=True)
class AffineMap:
    """``x -> <w, x> - b``."""

    w: np.ndarray
    b: float

    def __call__(self, X):
        return np.asarray(X, dtype=float) @ self.w - self.b

    def as_network(self) -> Network:
        return Network(affine_w=self.w, affine_b=self.b, dim=self.w.size)


def _vec(v, name="v"):
    v = np.asarray(v, dtype=float).reshape(-1)
    if not np.any(v):
        raise InputError(f"{name} must be nonzero")
    return v


def sin_angle(u, v) -> float:
    """|sin| of the angle between ``u`` and ``v``.

    Kahan's half-angle form; folding the angle into [0, pi/2] makes it return
    exactly 0 for parallel and anti-parallel inputs alike.
    """
    u, v = _vec(u, "u"), _vec(v, "v")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    a = np.linalg.norm(nv * u - nu * v)
    c = np.linalg.norm(nv * u + nu * v)
    return math.sin(2.0 * math.atan2(min(a, c), max(a, c)))


def _exact(v):
    return [Fraction(float(x)) for x in v]


def _dot(u, v):
    return sum((a * b for a, b in zip(u, v)), Fraction(0))


def is_close(n1, n2, p: ClosenessParams) -> bool:
    """(delta, alpha)-closeness of ``n1 = (v, b)`` and ``n2 = (v', b')``.

    Both conditions are squared (the sine through Lagrange's identity) and
    decided in rational arithmetic on the given floats, so there is no rounding.
    """
    v, b = _vec(n1[0]), float(n1[1])
    v2, b2 = _vec(n2[0], "v'"), float(n2[1])
    if v.shape != v2.shape:
        raise InputError("neurons have different dimensions")
    qv, qv2 = _exact(v), _exact(v2)
    nn = _dot(qv, qv) * _dot(qv2, qv2)
    dl, al = Fraction(p.delta), Fraction(p.alpha)
    if nn - _dot(qv, qv2) ** 2 > dl * dl * nn:
        return False
    qb, qb2 = Fraction(b), Fraction(b2)
    r = [qb * x - qb2 * y for x, y in zip(qv2, qv)]
    return _dot(r, r) <= al * al * nn


def pairwise_close(neurons: Sequence, p: ClosenessParams) -> bool:
    return all(is_close(neurons[i], neurons[j], p)
               for i in range(len(neurons)) for j in range(i + 1, len(neurons)))


def check_orientation(weights, part: Orientation) -> bool:
    """All four polarization sign conditions, checked on every pair."""
    S1, S2 = set(part.S1), set(part.S2)
    G = np.asarray(weights) @ np.asarray(weights).T
    n = len(G)
    if S1 | S2 != set(range(n)) or S1 & S2:
        return False
    for i in range(n):
        for j in range(n):
            same = (i in S1) == (j in S1)
            if same and G[i, j] < 0:
                return False
            if not same and G[i, j] >= 0:
                return False
    return True


def orientation(neurons: Sequence, p: ClosenessParams) -> Orientation:
    """Split a pairwise-close cluster by the sign of its inner product with the first weight."""
    if not neurons:
        return Orientation((), ())
    if p.delta >= math.sqrt(2) / 2:
        raise InputError("orientation requires delta < sqrt(2)/2")
    if not pairwise_close(neurons, p):
        raise InputError("orientation requires pairwise (delta, alpha)-close neurons")
    W = np.array([_vec(n[0]) for n in neurons])
    ip = W @ W[0]
    part = Orientation(tuple(int(i) for i in np.flatnonzero(ip >= 0)),
                       tuple(int(i) for i in np.flatnonzero(ip < 0)))
    if not check_orientation(W, part):
        raise InconsistencyError("orientation sign conditions fail; cluster is not polarized")
    return part


def projection_coefficient(v, ref_v) -> float:
    ref_v = _vec(ref_v, "reference weight")
    return float(np.asarray(v, dtype=float) @ ref_v / (ref_v @ ref_v))


def merge(t1, t2, ref) -> SignedNeuron:
    """Fold two signed neurons on the nonnegative side of ``ref = (v, b)`` into one multiple of it.

    With ``g_j = <v_j, ref_v> / ||ref_v||^2`` and ``m = s1 g1 + s2 g2`` the result is
    ``(sign(m), |m| ref_v, |m| ref_b)``; ``sign(0)`` is +1.
    """
    ref_v, ref_b = _vec(ref[0], "reference weight"), float(ref[1])
    gs = []
    for t in (t1, t2):
        s, v = int(t[0]), np.asarray(t[1], dtype=float)
        if s not in (1, -1):
            raise InputError("sign must be +1 or -1")
        ip = float(v @ ref_v)
        if ip < 0:
            raise InputError("merge operands must satisfy <v, ref_v> >= 0")
        gs.append(s * ip / float(ref_v @ ref_v))
    m = gs[0] + gs[1]
    return SignedNeuron(1 if m >= 0 else -1, abs(m) * ref_v, abs(m) * ref_b)


def merge_all(triples: Sequence, ref) -> SignedNeuron:
    """Left fold of ``merge`` over ``triples``; a single triple is re-expressed along ``ref``."""
    if not triples:
        raise InputError("need at least one triple")
    first = triples[0]
    start = merge(first, (1, np.zeros_like(np.asarray(first[1], dtype=float)), 0.0), ref)
    return reduce(lambda acc, t: merge(acc, t, ref), triples[1:], start)


def signed_fold_value(triples: Sequence, ref) -> float:
    """``sum_i s_i g_i``, the signed coefficient a fold along ``ref`` must reproduce."""
    return sum(int(s) * projection_coefficient(v, ref[0]) for s, v, _ in triples)


def collapse_clump(neurons: Sequence, ref, p: ClosenessParams) -> Collapsed:
    """Replace a clump of signed neurons close to ``ref = (v*, b*)`` by
    ``a_plus relu(<v*, x> - b*) + a_minus relu(-<v*, x> + b*)``.

    Each side of ``v*`` is folded with :func:`merge`; the side with
    ``<v*, w_i> < 0`` is folded along ``(-v*, -b*)``.
    """
    ref_v, ref_b = _vec(ref[0], "reference weight"), float(ref[1])
    triples = [SignedNeuron(int(s), np.asarray(w, dtype=float), float(b)) for s, w, b in neurons]
    for t in triples:
        if not is_close((t.v, t.b), (ref_v, ref_b), p):
            raise InputError("every clump neuron must be (delta, alpha)-close to the reference")
    plus = [t for t in triples if t.v @ ref_v >= 0]
    minus = [t for t in triples if t.v @ ref_v < 0]
    a_plus = a_minus = 0.0
    if plus:
        r = merge_all(plus, (ref_v, ref_b))
        a_plus = r.s * projection_coefficient(r.v, ref_v)
    if minus:
        r = merge_all(minus, (-ref_v, -ref_b))
        a_minus = r.s * projection_coefficient(r.v, -ref_v)
    if not clump_bounds_hold(triples, ref_v, ref_b, a_plus, a_minus, p.alpha):
        raise InconsistencyError("collapsed coefficients violate their norm bounds")
    net = Network([ref_v, -ref_v], [ref_b, -ref_b], [a_plus, a_minus])
    return Collapsed(a_plus, a_minus, net)


def clump_bounds_hold(triples, ref_v, ref_b, a_plus, a_minus, alpha) -> bool:
    """``|a| ||v*|| <= sum ||w_i||`` and ``|a b*| <= alpha sum ||w_i|| + sum |b_i|`` for both coefficients."""
    wsum = sum(float(np.linalg.norm(t[1])) for t in triples)
    bsum = sum(abs(float(t[2])) for t in triples)
    nv = float(np.linalg.norm(ref_v))
    slack = 1 + BOUND_RTOL
    return all(abs(a) * nv <= wsum * slack and abs(a * ref_b) <= (alpha * wsum + bsum) * slack
               for a in (a_plus, a_minus))


def signed_sum(neurons: Sequence):
    """``(sum s_i v_i, sum s_i b_i)``."""
    v = sum(int(s) * np.asarray(w, dtype=float) for s, w, _ in neurons)
    b = sum(int(s) * float(bb) for s, _, bb in neurons)
    return np.asarray(v, dtype=float), float(b)


def oriented_combination(neurons: Sequence, part: Orientation) -> np.ndarray:
    """``sum_{S1} s_i v_i - sum_{S2} s_i v_i``."""
    d = np.asarray(neurons[0][1]).size
    out = np.zeros(d)
    for i in part.S1:
        out += neurons[i][0] * np.asarray(neurons[i][1], dtype=float)
    for i in part.S2:
        out -= neurons[i][0] * np.asarray(neurons[i][1], dtype=float)
    return out


def corner_case_affine(neurons: Sequence, p: ClosenessParams) -> AffineMap:
    """Affine stand-in for a pairwise-close clump whose oriented signed sum is tiny.

    Requires ``||sum_{S1} s_i v_i - sum_{S2} s_i v_i|| <= (delta R)^(2/9)`` with
    ``R = max ||v_i||``; returns ``<sum_{S1} s_i v_i, x> - sum_{S1} s_i b_i``.
    """
    if not neurons:
        raise InputError("need at least one neuron")
    triples = [SignedNeuron(int(s), np.asarray(v, dtype=float), float(b)) for s, v, b in neurons]
    part = orientation([(t.v, t.b) for t in triples], p)
    R = max(float(np.linalg.norm(t.v)) for t in triples)
    omega = float(np.linalg.norm(oriented_combination(triples, part)))
    if omega > (p.delta * R) ** (2 / 9):
        raise InputError(f"oriented combination has norm {omega:.3g} > (delta R)^(2/9)")
    w, b = signed_sum([triples[i] for i in part.S1]) if part.S1 else (np.zeros(triples[0].v.size), 0.0)
    wsum = sum(float(np.linalg.norm(t.v)) for t in triples)
    bsum = sum(abs(t.b) for t in triples)
    if np.linalg.norm(w) > wsum * (1 + BOUND_RTOL) or abs(b) > bsum * (1 + BOUND_RTOL):
        raise InconsistencyError("affine approximation violates its norm bounds")
    return AffineMap(w, b)


def clump_network(neurons: Sequence) -> Network:
    """Signed-neuron list as a :class:`Network`."""
    return Network([np.asarray(v, dtype=float) for _, v, _ in neurons],
                   [float(b) for _, _, b in neurons], [int(s) for s, _, _ in neurons])
