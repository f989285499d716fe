"""One-hidden-layer ReLU networks: evaluation, line restrictions, critical points,
Gaussian L2 distances and the on-disk model format.

A network computes

    F(x) = sum_i c_i * relu(<w_i, x> - b_i) + <w_aff, x> - b_aff

where the output coefficient ``c_i`` is the neuron's sign ``s_i`` for ground-truth
networks and an arbitrary real for fitted hypotheses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import InputError

FORMAT_NAME = "relu-network"
FORMAT_VERSION = 1

# critical points are skipped when |<w, v>| <= PERP_TOL * ||w||
PERP_TOL = 1e-14
EVAL_CHUNK = 1024


def relu(z):
    return np.maximum(z, 0.0)


@dataclass(frozen=True)
class Neuron:
    """A single hidden unit ``s * relu(<w, x> - b)``."""

    w: np.ndarray
    b: float
    s: int = 1

    def __post_init__(self):
        w = np.array(self.w, dtype=float).reshape(-1)
        if w.size < 1:
            raise InputError("neuron weight must have dimension >= 1")
        if not np.all(np.isfinite(w)):
            raise InputError("neuron weight has non-finite entries")
        if self.s not in (1, -1):
            raise InputError(f"neuron sign must be +1 or -1, got {self.s!r}")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "s", int(self.s))


class Network:
    """Dense storage of a one-hidden-layer ReLU network.

    Parameters
    ----------
    weights : (k, d) array
    biases : (k,) array
    coefs : (k,) array, optional
        Output-layer coefficients. Defaults to all ones.
    affine_w, affine_b : optional affine tail ``<affine_w, x> - affine_b``.
    dim : int, optional
        Required when ``k == 0`` and no affine tail is given.
    """

    def __init__(self, weights=None, biases=None, coefs=None, affine_w=None,
                 affine_b=None, dim: Optional[int] = None):
        if weights is None or len(weights) == 0:
            if dim is None:
                if affine_w is None:
                    raise InputError("dim is required for a network without neurons")
                dim = len(affine_w)
            weights = np.zeros((0, int(dim)))
        weights = np.array(weights, dtype=float)
        if weights.ndim != 2:
            raise InputError("weights must be a (k, d) array")
        k, d = weights.shape
        if dim is not None and int(dim) != d:
            raise InputError(f"weights have dimension {d}, expected {dim}")
        if d < 1:
            raise InputError("network dimension must be >= 1")
        biases = np.zeros(k) if biases is None else np.array(biases, dtype=float).reshape(-1)
        coefs = np.ones(k) if coefs is None else np.array(coefs, dtype=float).reshape(-1)
        if biases.shape != (k,) or coefs.shape != (k,):
            raise InputError("biases and coefs must have one entry per neuron")
        if affine_w is not None:
            affine_w = np.array(affine_w, dtype=float).reshape(-1)
            if affine_w.shape != (d,):
                raise InputError("affine_w has the wrong dimension")
        if affine_b is not None:
            affine_b = float(affine_b)
        for arr in (weights, biases, coefs):
            if not np.all(np.isfinite(arr)):
                raise InputError("network parameters must be finite")
        self.weights = weights
        self.biases = biases
        self.coefs = coefs
        self.affine_w = affine_w
        self.affine_b = affine_b
        for arr in (self.weights, self.biases, self.coefs):
            arr.setflags(write=False)

    @classmethod
    def from_neurons(cls, neurons: Sequence[Neuron], dim: Optional[int] = None,
                     affine_w=None, affine_b=None) -> "Network":
        neurons = list(neurons)
        if neurons:
            dims = {n.w.size for n in neurons}
            if len(dims) != 1 or (dim is not None and dims != {dim}):
                raise InputError("all neurons must share the network dimension")
            return cls(np.stack([n.w for n in neurons]), [n.b for n in neurons],
                       [n.s for n in neurons], affine_w, affine_b)
        return cls(None, None, None, affine_w, affine_b, dim=dim)

    @classmethod
    def zero(cls, dim: int) -> "Network":
        return cls(dim=dim)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def signs(self) -> np.ndarray:
        return np.where(self.coefs < 0, -1, 1)

    @property
    def neurons(self) -> list:
        return [Neuron(w, b, s) for w, b, s in zip(self.weights, self.biases, self.signs)]

    @property
    def R(self) -> float:
        return float(np.max(np.linalg.norm(self.weights, axis=1))) if self.k else 0.0

    @property
    def B(self) -> float:
        return float(np.max(np.abs(self.biases))) if self.k else 0.0

    def preactivations(self, X):
        X = np.asarray(X, dtype=float)
        return X @ self.weights.T - self.biases

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        if X2.shape[-1] != self.dim:
            raise InputError(f"input has dimension {X2.shape[-1]}, network expects {self.dim}")
        out = np.empty(len(X2))
        # row-wise reductions: a point's value must not depend on the batch it arrives in
        for s in range(0, len(X2), EVAL_CHUNK):
            Xc = X2[s:s + EVAL_CHUNK]
            pre = (Xc[:, None, :] * self.weights[None]).sum(-1) - self.biases
            val = (relu(pre) * self.coefs).sum(-1)
            if self.affine_w is not None:
                val = val + (Xc * self.affine_w).sum(-1)
            if self.affine_b is not None:
                val = val - self.affine_b
            out[s:s + EVAL_CHUNK] = val
        return float(out[0]) if single else out

    def gradient(self, x) -> np.ndarray:
        """Analytic gradient at a point off every activation boundary."""
        x = np.asarray(x, dtype=float)
        active = self.preactivations(x) > 0
        g = self.coefs[active] @ self.weights[active]
        if self.affine_w is not None:
            g = g + self.affine_w
        return np.asarray(g, dtype=float).reshape(self.dim)

    def scaled(self, factor: float) -> "Network":
        aw = None if self.affine_w is None else factor * self.affine_w
        ab = None if self.affine_b is None else factor * self.affine_b
        return Network(self.weights, self.biases, factor * self.coefs, aw, ab, dim=self.dim)

    def to_dict(self) -> dict:
        neurons = []
        for w, b, c in zip(self.weights, self.biases, self.coefs):
            entry = {"s": 1 if c >= 0 else -1, "w": [float(v) for v in w], "b": float(b)}
            if abs(c) != 1.0:
                entry["c"] = float(c)
            neurons.append(entry)
        affine = None
        if self.affine_w is not None or self.affine_b is not None:
            affine = {
                "w": [float(v) for v in (self.affine_w if self.affine_w is not None
                                         else np.zeros(self.dim))],
                "b": float(self.affine_b or 0.0),
            }
        return {"format": FORMAT_NAME, "version": FORMAT_VERSION, "dim": self.dim,
                "neurons": neurons, "affine": affine}

    @classmethod
    def from_dict(cls, doc: dict) -> "Network":
        if doc.get("format", FORMAT_NAME) != FORMAT_NAME:
            raise InputError(f"not a {FORMAT_NAME} document")
        if int(doc.get("version", FORMAT_VERSION)) > FORMAT_VERSION:
            raise InputError(f"unsupported network format version {doc['version']}")
        dim = int(doc["dim"])
        neurons = doc.get("neurons") or []
        coefs = []
        for n in neurons:
            s = int(n.get("s", 1))
            if s not in (1, -1):
                raise InputError("neuron sign must be +1 or -1")
            coefs.append(float(n["c"]) if "c" in n else float(s))
        affine = doc.get("affine")
        aw = ab = None
        if affine is not None:
            aw, ab = affine.get("w"), affine.get("b")
        return cls([n["w"] for n in neurons] if neurons else None,
                   [n["b"] for n in neurons] if neurons else None,
                   coefs if neurons else None, aw, ab, dim=dim)

    def __eq__(self, other):
        # structural equality of the serialized form; used for reproducibility checks only
        return isinstance(other, Network) and self.to_dict() == other.to_dict()

    def __repr__(self):
        tail = "" if self.affine_w is None else ", affine"
        return f"Network(dim={self.dim}, k={self.k}{tail})"


def save_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=1) + "\n")


def load_network(path) -> Network:
    return Network.from_dict(json.loads(Path(path).read_text()))


def evaluate(net: Network, x) -> float:
    """Value of ``net`` at a single point ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (net.dim,):
        raise InputError(f"expected a vector of dimension {net.dim}, got shape {x.shape}")
    return net(x)


@dataclass(frozen=True)
class GaussianLine:
    """The line ``t -> x0 + t * v`` with unit direction ``v``."""

    x0: np.ndarray
    v: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        x0 = np.array(self.x0, dtype=float).reshape(-1)
        v = np.array(self.v, dtype=float).reshape(-1)
        if x0.shape != v.shape:
            raise InputError("x0 and v must have the same dimension")
        if abs(np.linalg.norm(v) - 1.0) > 1e-12:
            raise InputError("line direction must be a unit vector")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "v", v)

    @property
    def dim(self) -> int:
        return self.x0.size

    def point(self, t):
        t = np.asarray(t, dtype=float)
        return self.x0 + t[..., None] * self.v if t.ndim else self.x0 + float(t) * self.v


@dataclass
class Restriction:
    """``F|_L(t)`` in closed form: sum_i c_i relu(offset_i + t * rate_i) + const + t * drift."""

    offsets: np.ndarray
    rates: np.ndarray
    coefs: np.ndarray
    const: float = 0.0
    drift: float = 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        pre = self.offsets + t[..., None] * self.rates
        out = relu(pre) @ self.coefs + self.const + t * self.drift
        return float(out) if out.ndim == 0 else out

    def slope(self, t):
        """Right-derivative of the restriction."""
        t = np.asarray(t, dtype=float)
        pre = self.offsets + t[..., None] * self.rates
        active = (pre > 0) | ((pre == 0) & (self.rates > 0))
        out = active @ (self.coefs * self.rates) + self.drift
        return float(out) if out.ndim == 0 else out


def restrict(net: Network, line: GaussianLine) -> Restriction:
    if line.dim != net.dim:
        raise InputError(f"line has dimension {line.dim}, network expects {net.dim}")
    const = drift = 0.0
    if net.affine_w is not None:
        const += float(net.affine_w @ line.x0)
        drift += float(net.affine_w @ line.v)
    if net.affine_b is not None:
        const -= net.affine_b
    return Restriction(net.weights @ line.x0 - net.biases, net.weights @ line.v,
                       np.array(net.coefs), const, drift)


class CriticalPoint(NamedTuple):
    t: float
    neuron_index: int


def critical_points(net: Network, line: GaussianLine):
    """Kinks of ``F|_L``, one per neuron not (numerically) parallel to the line.

    Returns ``(points, skipped)``: points sorted by ``t`` and the indices of neurons
    with ``|<w_i, v>| <= 1e-14 ||w_i||``.
    """
    if line.dim != net.dim:
        raise InputError(f"line has dimension {line.dim}, network expects {net.dim}")
    offsets = net.weights @ line.x0 - net.biases
    rates = net.weights @ line.v
    norms = np.linalg.norm(net.weights, axis=1)
    points, skipped = [], []
    for i in range(net.k):
        if abs(rates[i]) <= PERP_TOL * norms[i]:
            skipped.append(i)
        else:
            points.append(CriticalPoint(float(-offsets[i] / rates[i]), i))
    points.sort()
    return points, skipped


def _sample_chunks(rng, n, d, chunk=1 << 15):
    done = 0
    while done < n:
        m = min(chunk, n - done)
        yield rng.standard_normal((m, d))
        done += m


def l2_distance_mc(net_a: Network, net_b: Network, n_samples: int = 100_000, seed=None):
    """Monte-Carlo estimate of ``E[(F_a(x) - F_b(x))^2]`` over ``x ~ N(0, I)``.

    Returns ``(estimate, std_error)``. Deterministic for a fixed ``seed``.
    """
    if net_a.dim != net_b.dim:
        raise InputError("networks have different dimensions")
    if n_samples < 2:
        raise InputError("need at least two samples")
    rng = np.random.default_rng(seed)
    total = total_sq = 0.0
    for X in _sample_chunks(rng, n_samples, net_a.dim):
        sq = (net_a(X) - net_b(X)) ** 2
        total += float(sq.sum())
        total_sq += float((sq * sq).sum())
    mean = total / n_samples
    var = max(total_sq / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
    return mean, math.sqrt(var / n_samples)


def gaussian_norm_mc(net: Network, n_samples: int = 100_000, seed=None):
    """``E[F(x)^2]`` with its standard error."""
    return l2_distance_mc(net, Network.zero(net.dim), n_samples, seed)


def angle(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise InputError("angle undefined for a zero vector")
    return math.acos(float(np.clip(u @ v / (nu * nv), -1.0, 1.0)))


def relu_correlation(v, v2) -> float:
    """Closed form of ``E[relu(<v, x>) relu(<v2, x>)]`` for ``x ~ N(0, I)``."""
    th = angle(v, v2)
    scale = float(np.linalg.norm(v) * np.linalg.norm(v2))
    return scale * (math.sin(th) + (math.pi - th) * math.cos(th)) / (2 * math.pi)
