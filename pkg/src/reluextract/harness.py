"""Experiment orchestration: target generation, end-to-end runs, sweeps and reports.

Only this module sees the ground-truth network. The learner is handed an oracle
(in-process, or a socket client talking to a local server) and nothing else.

Config schema (JSON)::

    {
      "target": {"kind": "random-separated", "d": 8, "k": 4, "R": 2, "B": 2,
                 "seed": 0, "params": {}},           # or {"kind": "file", "path": ...}
      "extraction": {"epsilon": 0.05, "delta": 0.1, ...},   # k, R, B default to the target's
      "regression": {"n_samples": null, "W_bound": null, "M_bound": null, "solver_tol": 1e-10},
      "seed": 0,                  # learner seed
      "oracle": "in-process",     # or "wire"
      "budget": null,
      "mc_samples": 100000, "mc_seed": 12345,
      "holdout_samples": null,    # defaults to the training sample count
      "threshold": null,          # acceptance loss, defaults to epsilon
      "out_dir": null             # where reports and artifacts go
    }
"""

from __future__ import annotations

import concurrent.futures
import copy
import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InputError, StageError
from .extraction import CandidateSet, ExtractionParams
from .geometry import ClosenessParams, is_close, sin_angle
from .network import Network, l2_distance_mc, load_network, save_network
from .oracle import InProcessOracle, WireOracle, serve
from .regression import RegressionConfig, learn_from_queries, truncated_gaussian

log = logging.getLogger(__name__)

TARGET_KINDS = ("random-separated", "random-clumped", "bump", "cancelling-pair", "file")
MIN_SEPARATION = 0.2
MAX_REJECTIONS = 10_000


# ---------------------------------------------------------------------------
# targets

def _unit(rng, d):
    g = rng.standard_normal(d)
    return g / np.linalg.norm(g)


def bump_network(a: float = 0.0, delta_bump: float = 1.0, d: int = 1) -> Network:
    """``relu(x1 - a) + relu(x1 - a - delta) - relu(2 x1 - 2a - delta)``: a tent of
    height ``delta / 2`` supported on ``[a, a + delta]``."""
    if not delta_bump > 0:
        raise InputError("delta_bump must be positive")
    e1 = np.zeros(d)
    e1[0] = 1.0
    return Network([e1, e1, 2 * e1], [a, a + delta_bump, 2 * a + delta_bump], [1, 1, -1])


def separated_ok(weights, min_sin: float = MIN_SEPARATION) -> bool:
    """Every pair of weights has ``|sin angle| >= min_sin``."""
    return all(sin_angle(weights[i], weights[j]) >= min_sin
               for i in range(len(weights)) for j in range(i + 1, len(weights)))


def random_separated(rng, d, k, R, B, min_sin: float = MIN_SEPARATION) -> Network:
    if k > 1 and d == 1:
        raise InputError("d = 1 admits no two separated directions")
    W = []
    tries = 0
    while len(W) < k:
        tries += 1
        if tries > MAX_REJECTIONS:
            raise InputError(f"could not place {k} directions with |sin| >= {min_sin} in d = {d}")
        u = _unit(rng, d)
        if all(sin_angle(u, w) >= min_sin for w in W):
            W.append(u * rng.uniform(R / 2, R))
    b = rng.uniform(-B, B, k)
    s = rng.choice([-1.0, 1.0], k)
    return Network(np.array(W).reshape(k, d), b, s)


def perturb_neuron(rng, v, b, Delta: float, alpha: float, scale=(0.5, 1.0)):
    """A random neuron that is (Delta, alpha)-close to ``(v, b)`` with norm ``scale * ||v||``."""
    v = np.asarray(v, dtype=float)
    nv = float(np.linalg.norm(v))
    vh, beta = v / nv, b / nv
    p = ClosenessParams(Delta, alpha)
    for _ in range(MAX_REJECTIONS):
        q = rng.standard_normal(v.size)
        q -= (q @ vh) * vh
        nq = np.linalg.norm(q)
        s = rng.uniform(0, Delta) if nq > 0 else 0.0
        u = math.sqrt(1 - s * s) * vh + (s * q / nq if nq > 0 else 0.0)
        lam = rng.uniform(*scale) * nv
        w = lam * u
        bb = lam * (beta + rng.uniform(-alpha, alpha) / 2)
        if is_close((w, bb), (v, b), p):
            return w, bb
    # parallel copy is always close
    lam = rng.uniform(*scale) * nv
    return lam * vh, lam * beta


def random_clump(rng, k, d, R, B, Delta: float, alpha: float, flip: float = 0.5):
    """``k`` signed neurons each (Delta, alpha)-close to a random reference ``(v*, b*)``.

    A fraction ``flip`` of them is reflected to ``(-w, -b)``, which keeps closeness.
    Returns ``(neurons, ref)`` with neurons as ``(s, w, b)``.
    """
    v = _unit(rng, d) * rng.uniform(R / 2, R)
    b = rng.uniform(-B / 2, B / 2)
    out = []
    for _ in range(k):
        w, bb = perturb_neuron(rng, v, b, Delta, alpha)
        if rng.random() < flip:
            w, bb = -w, -bb
        out.append((int(rng.choice([-1, 1])), w, float(bb)))
    return out, (v, b)


def random_clumped(rng, d, k, R, B, n_clusters=None, clump_delta=1e-3, clump_alpha=1e-3) -> Network:
    n_clusters = int(n_clusters or max(1, (k + 1) // 2))
    sizes = [k // n_clusters + (i < k % n_clusters) for i in range(n_clusters)]
    W, b, s = [], [], []
    for size in sizes:
        if size == 0:
            continue
        neurons, _ = random_clump(rng, size, d, R, B, clump_delta, clump_alpha)
        for si, wi, bi in neurons:
            W.append(wi)
            b.append(bi)
            s.append(si)
    return Network(np.array(W).reshape(len(W), d), b, s)


def cancelling_pair(rng, d, k, R, B) -> Network:
    """``k // 2`` pairs ``(+1, w, b), (-1, w, b)``: the zero function written with neurons."""
    pairs = max(1, k // 2)
    W, b, s = [], [], []
    for _ in range(pairs):
        w = _unit(rng, d) * rng.uniform(R / 2, R)
        bb = rng.uniform(-B, B)
        W += [w, w]
        b += [bb, bb]
        s += [1, -1]
    return Network(np.array(W), b, s)


def generate_target(kind: str, d: int = 1, k: int = 1, R: float = 1.0, B: float = 1.0,
                    seed=None, **params) -> Network:
    """Ground-truth network of the given ``kind``.

    ``bump`` takes ``a`` and ``delta_bump`` and ignores ``k, R, B``;
    ``random-clumped`` takes ``n_clusters``, ``clump_delta``, ``clump_alpha``;
    ``file`` takes ``path``.
    """
    if kind == "file":
        return load_network(params["path"])
    if int(d) < 1 or int(k) < 1 or not R > 0 or not B > 0:
        raise InputError("d, k, R, B must be positive")
    rng = np.random.default_rng(seed)
    if kind == "random-separated":
        return random_separated(rng, int(d), int(k), R, B, params.get("min_sin", MIN_SEPARATION))
    if kind == "random-clumped":
        return random_clumped(rng, int(d), int(k), R, B, **params)
    if kind == "bump":
        return bump_network(params.get("a", 0.0), params.get("delta_bump", 1.0), int(d))
    if kind == "cancelling-pair":
        return cancelling_pair(rng, int(d), int(k), R, B)
    raise InputError(f"unknown target kind {kind!r}; expected one of {TARGET_KINDS}")


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TargetSpec:
    kind: str = "random-separated"
    d: int = 8
    k: int = 4
    R: float = 2.0
    B: float = 2.0
    seed: int = 0
    params: dict = field(default_factory=dict)
    path: Optional[str] = None

    def build(self) -> Network:
        extra = dict(self.params)
        if self.kind == "file":
            if not self.path:
                raise InputError("file targets need a path")
            extra["path"] = self.path
        return generate_target(self.kind, self.d, self.k, self.R, self.B, self.seed, **extra)


@dataclass
class ExperimentConfig:
    target: TargetSpec = field(default_factory=TargetSpec)
    extraction: dict = field(default_factory=lambda: {"epsilon": 0.05, "delta": 0.1})
    regression: dict = field(default_factory=dict)
    seed: int = 0
    oracle: str = "in-process"
    budget: Optional[int] = None
    mc_samples: int = 100_000
    mc_seed: int = 12345
    holdout_samples: Optional[int] = None
    threshold: Optional[float] = None
    out_dir: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.target, dict):
            self.target = TargetSpec(**self.target)
        if self.oracle not in ("in-process", "wire"):
            raise InputError(f"oracle must be 'in-process' or 'wire', got {self.oracle!r}")
        if self.mc_samples < 2:
            raise InputError("mc_samples must be >= 2")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InputError(f"unknown config fields: {sorted(unknown)}")
        return cls(**copy.deepcopy(doc))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def override(self, dotted: str, value) -> "ExperimentConfig":
        """Copy with ``a.b = value`` set; ``extraction`` and ``regression`` accept any key."""
        doc = self.to_dict()
        keys = dotted.split(".")
        node = doc
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                raise InputError(f"cannot set {dotted!r}")
            node = node[key]
        node[keys[-1]] = value
        return ExperimentConfig.from_dict(doc)

    def extraction_params(self) -> ExtractionParams:
        doc = {"k": self.target.k, "R": self.target.R, "B": self.target.B}
        doc.update(self.extraction)
        return ExtractionParams(**doc)

    def regression_config(self) -> RegressionConfig:
        return RegressionConfig(**self.regression)

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("out_dir", None)
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def parse_value(text: str):
    """Command-line override value: JSON when it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# ---------------------------------------------------------------------------
# runs

@dataclass
class RunReport:
    config_hash: str
    status: str  # "ok" or "stage-error"
    passed: Optional[bool]
    threshold: float
    query_count: int
    n_candidates: Optional[int] = None
    m: Optional[int] = None
    r: Optional[float] = None
    tau: Optional[float] = None
    Delta: Optional[float] = None
    alpha_fd: Optional[float] = None
    n_train: Optional[int] = None
    train_loss: Optional[float] = None
    n_holdout: Optional[int] = None
    holdout_loss: Optional[float] = None
    holdout_stderr: Optional[float] = None
    mc_samples: int = 0
    mc_loss: Optional[float] = None
    mc_stderr: Optional[float] = None
    target_norm2: Optional[float] = None
    target_norm2_stderr: Optional[float] = None
    recovery_errors: list = field(default_factory=list)
    seconds: dict = field(default_factory=dict)
    knobs: dict = field(default_factory=dict)
    error_stage: Optional[str] = None
    error: Optional[str] = None
    artifacts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunReport":
        return cls(**doc)

    def without_times(self) -> dict:
        doc = self.to_dict()
        doc.pop("seconds")
        doc.pop("artifacts")
        return doc


def recovery_errors(target: Network, cands: CandidateSet) -> list:
    """Relative distance from each target neuron to its best candidate (either sign)."""
    return [cands.match_error(w, b) for w, b in zip(target.weights, target.biases)]


def holdout_loss(target: Network, model: Network, n: int, M_bound: float, seed):
    """Mean squared error on fresh draws from the training distribution; no oracle queries."""
    X, _ = truncated_gaussian(np.random.default_rng(seed), n, target.dim, M_bound)
    sq = (target(X) - model(X)) ** 2
    se = float(sq.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return float(sq.mean()), se


def _knobs(p: ExtractionParams) -> dict:
    return {k: v for k, v in asdict(p).items()
            if k in ("poly_const", "c_r", "c_tau", "c_alpha", "c_bias", "w_min", "n_lines")}


def _open_oracle(cfg: ExperimentConfig, target: Network):
    if cfg.oracle == "in-process":
        return InProcessOracle(target, cfg.budget), None
    server = serve(target, budget=cfg.budget)
    return WireOracle(server.address, budget=None), server


def run_experiment(cfg: ExperimentConfig, target: Optional[Network] = None, write: bool = True):
    """Run one configuration end to end. Returns ``(RunReport, model or None, candidates or None)``.

    Stage failures are recorded in the report rather than raised.
    """
    t0 = time.perf_counter()
    target = target if target is not None else cfg.target.build()
    p = cfg.extraction_params()
    threshold = cfg.threshold if cfg.threshold is not None else p.epsilon
    chash = cfg.config_hash()
    oracle, server = _open_oracle(cfg, target)
    model = cands = None
    try:
        model, lrep, cands = learn_from_queries(oracle, p, cfg.regression_config(), cfg.seed)
        queries = oracle.query_count
        error = None
    except StageError as exc:
        error = exc
        queries = oracle.query_count
        cands = exc.partial.get("candidates")
        lrep = None
    finally:
        if server is not None:
            oracle.close()
            server.close()
    t_learn = time.perf_counter() - t0
    rep = RunReport(chash, "ok" if error is None else "stage-error", None, threshold, queries,
                    knobs=_knobs(p), mc_samples=cfg.mc_samples)
    if cands is not None:
        rep.n_candidates = len(cands)
        rep.recovery_errors = recovery_errors(target, cands)
    if error is not None:
        rep.error_stage, rep.error = error.stage, str(error)
        rep.passed = False
        rep.seconds = {"learn": t_learn}
    else:
        t1 = time.perf_counter()
        nh = cfg.holdout_samples or lrep.n_samples
        rep.n_holdout = nh
        rep.holdout_loss, rep.holdout_stderr = holdout_loss(target, model, nh, lrep.M_bound,
                                                            cfg.mc_seed + 1)
        rep.mc_loss, rep.mc_stderr = l2_distance_mc(target, model, cfg.mc_samples, cfg.mc_seed)
        rep.target_norm2, rep.target_norm2_stderr = l2_distance_mc(
            target, Network.zero(target.dim), cfg.mc_samples, cfg.mc_seed)
        rep.passed = bool(rep.mc_loss <= threshold)
        for name in ("m", "r", "tau", "Delta", "alpha_fd", "train_loss"):
            setattr(rep, name, getattr(lrep, name))
        rep.n_train = lrep.n_samples
        rep.seconds = {"harvest": lrep.seconds_harvest, "regression": lrep.seconds_regression,
                       "learn": t_learn, "evaluate": time.perf_counter() - t1}
    if write and cfg.out_dir:
        write_artifacts(cfg, rep, target, model, cands)
    return rep, model, cands


def write_artifacts(cfg: ExperimentConfig, rep: RunReport, target, model, cands) -> None:
    """Store whatever the run produced, then append the report line."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{rep.config_hash}"
    cfg.dump(out / f"{stem}.config.json")
    save_network(target, out / f"{stem}.target.json")
    rep.artifacts["target"] = str(out / f"{stem}.target.json")
    if cands is not None:
        path = out / f"{stem}.candidates.json"
        path.write_text(json.dumps(cands.to_dict()) + "\n")
        rep.artifacts["candidates"] = str(path)
    if model is not None:
        save_network(model, out / f"{stem}.model.json")
        rep.artifacts["model"] = str(out / f"{stem}.model.json")
    append_report(out / f"{stem}.reports.jsonl", rep)


def append_report(path, rep: RunReport) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")


def read_reports(path) -> list:
    """Every report stored under ``path`` (a ``.jsonl`` file or a directory of them)."""
    path = Path(path)
    files = sorted(path.glob("*.reports.jsonl")) if path.is_dir() else [path]
    out = []
    for f in files:
        for line in f.read_text().splitlines():
            if line.strip():
                out.append(RunReport.from_dict(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# sweeps and tables

def _sweep_one(args):
    cfg, target = args
    return run_experiment(cfg, target)[0]


def sweep(cfg: ExperimentConfig, knob: str, values, workers: int = 1) -> list:
    """One run per ``values`` entry with ``knob`` overridden; target and seeds are shared.

    ``knob`` is a dotted config path; a bare name means ``extraction.<name>``.
    """
    path = knob if "." in knob else f"extraction.{knob}"
    target = cfg.target.build()
    jobs = [(cfg.override(path, v), target) for v in values]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(workers) as ex:
            return list(ex.map(_sweep_one, jobs))
    return [_sweep_one(j) for j in jobs]


TABLE_COLUMNS = ("config_hash", "status", "passed", "query_count", "n_candidates", "m", "r",
                 "tau", "train_loss", "holdout_loss", "mc_loss", "mc_stderr", "mc_samples")


def report_table(reports, knob: Optional[str] = None, values=None) -> str:
    """CSV table of the given reports, with a leading knob column when ``knob`` is set."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(TABLE_COLUMNS)
    w.writerow(([knob] if knob else []) + cols)
    for i, rep in enumerate(reports):
        doc = rep.to_dict()
        row = [doc[c] for c in cols]
        if knob:
            if values is not None:
                kv = values[i]
            else:
                kv = doc["knobs"].get(knob.split(".")[-1], "")
            row = [kv] + row
        w.writerow(row)
    return buf.getvalue()
