"""Command-line entry point: ``reluextract <command> ...``.

Exit codes: 0 success, 1 bad input, 2 acceptance threshold missed, 3 stage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from . import harness
from .errors import ReluExtractError, StageError
from .extraction import ExtractionParams, get_neurons
from .network import l2_distance_mc, load_network, save_network
from .oracle import InProcessOracle, WireOracle, parse_address, serve
from .regression import RegressionConfig, learn_from_queries

EXIT_OK, EXIT_INPUT, EXIT_THRESHOLD, EXIT_STAGE = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _pairs(items, what):
    out = {}
    for item in items or []:
        name, sep, val = item.partition("=")
        if not sep:
            raise ReluExtractError(f"{what} must look like NAME=VALUE, got {item!r}")
        out[name] = harness.parse_value(val)
    return out


def open_oracle(spec: str, budget=None):
    """``file:PATH`` wraps a saved network in-process; ``tcp:HOST:PORT`` connects to a server."""
    kind, _, rest = spec.partition(":")
    if kind == "file":
        return InProcessOracle(load_network(rest), budget)
    if kind == "tcp":
        return WireOracle(parse_address(rest), budget)
    raise ReluExtractError(f"oracle must be file:PATH or tcp:HOST:PORT, got {spec!r}")


def _params(a) -> ExtractionParams:
    doc = dict(epsilon=a.epsilon, delta=a.delta, k=a.k, R=a.R, B=a.B, n_lines=a.lines)
    doc.update(_pairs(a.knob, "--knob"))
    return ExtractionParams(**doc)


def _emit(doc, path=None):
    text = json.dumps(doc, indent=2, default=float)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_serve(a):
    server = serve(load_network(a.model), parse_address(a.listen), a.budget)
    host, port = server.address
    print(f"serving on {host}:{port}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return EXIT_OK


def cmd_extract(a):
    oracle = open_oracle(a.oracle, a.budget)
    t0 = time.perf_counter()
    cands, rep = get_neurons(oracle, _params(a), a.seed)
    with open(a.out, "w") as fh:
        json.dump(cands.to_dict(), fh)
        fh.write("\n")
    doc = {"m": rep.m, "r": rep.r, "tau": rep.tau, "Delta": rep.Delta, "alpha_fd": rep.alpha_fd,
           "queries": rep.queries, "candidates": len(cands), "pieces": rep.pieces,
           "seconds": time.perf_counter() - t0}
    _emit(doc, a.report)
    return EXIT_OK


def cmd_learn(a):
    oracle = open_oracle(a.oracle, a.budget)
    cfg = RegressionConfig(n_samples=a.n, W_bound=a.W, M_bound=a.M)
    net, rep, cands = learn_from_queries(oracle, _params(a), cfg, a.seed)
    save_network(net, a.out)
    if a.candidates:
        with open(a.candidates, "w") as fh:
            json.dump(cands.to_dict(), fh)
            fh.write("\n")
    _emit(vars(rep), a.report)
    return EXIT_OK


def cmd_evaluate(a):
    if len(a.model) != 2:
        raise ReluExtractError("evaluate needs exactly two --model arguments")
    na, nb = (load_network(p) for p in a.model)
    est, se = l2_distance_mc(na, nb, a.samples, a.seed)
    print(f"{est:.6g} +- {se:.3g} (n = {a.samples})")
    if a.threshold is not None and est > a.threshold:
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_gen(a):
    net = harness.generate_target(a.kind, a.d, a.k, a.R, a.B, a.seed, **_pairs(a.param, "--param"))
    save_network(net, a.out)
    return EXIT_OK


def _config(a) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(a.config) if a.config else harness.ExperimentConfig()
    for path, val in _pairs(a.set, "--set").items():
        cfg = cfg.override(path, val)
    if getattr(a, "out_dir", None):
        cfg = cfg.override("out_dir", a.out_dir)
    return cfg


def cmd_run(a):
    rep, _, _ = harness.run_experiment(_config(a))
    _emit(rep.to_dict())
    if rep.status != "ok":
        return EXIT_STAGE
    return EXIT_OK if rep.passed else EXIT_THRESHOLD


def cmd_sweep(a):
    cfg = _config(a)
    values = [harness.parse_value(v) for v in a.values.split(",")]
    # each run appends its own report to cfg.out_dir
    reps = harness.sweep(cfg, a.knob, values, a.workers)
    table = harness.report_table(reps, a.knob, values)
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(table)
    else:
        sys.stdout.write(table)
    if any(r.status != "ok" for r in reps):
        return EXIT_STAGE
    return EXIT_OK if all(r.passed for r in reps) else EXIT_THRESHOLD


def cmd_report(a):
    sys.stdout.write(harness.report_table(harness.read_reports(a.path)))
    return EXIT_OK


def _add_learner_args(p):
    p.add_argument("--oracle", required=True, help="file:PATH or tcp:HOST:PORT")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--R", type=float, required=True)
    p.add_argument("--B", type=float, required=True)
    p.add_argument("--knob", action="append", metavar="NAME=VAL",
                   help="override an extraction constant, e.g. c_r=1e9 (repeatable)")
    p.add_argument("--lines", type=int, default=1, help="number of Gaussian lines (union of candidates)")
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write the run report here instead of stdout")


def _add_config_args(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", action="append", metavar="PATH=VAL",
                   help="override a config field, e.g. extraction.epsilon=0.1 (repeatable)")
    p.add_argument("--out-dir", help="directory for reports and artifacts")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="reluextract", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("serve", help="answer queries to a saved network over TCP")
    p.add_argument("--model", required=True)
    p.add_argument("--listen", default="127.0.0.1:0", help="HOST:PORT (port 0 picks a free one)")
    p.add_argument("--budget", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("extract", help="harvest candidate neurons from an oracle")
    _add_learner_args(p)
    p.add_argument("--out", required=True, help="candidate set file")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("learn", help="harvest candidates and fit a network")
    _add_learner_args(p)
    p.add_argument("--n", type=int, help="regression samples")
    p.add_argument("--W", type=float, help="coefficient norm bound")
    p.add_argument("--M", type=float, help="input truncation radius")
    p.add_argument("--candidates", help="also save the candidate set here")
    p.add_argument("--out", required=True, help="model file")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("evaluate", help="Monte-Carlo squared L2 distance of two networks")
    p.add_argument("--model", action="append", required=True)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, help="exit 2 when the loss exceeds this")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gen", help="generate a target network")
    p.add_argument("--kind", required=True, choices=harness.TARGET_KINDS[:-1])
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--R", type=float, default=1.0)
    p.add_argument("--B", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--param", action="append", metavar="NAME=VAL",
                   help="kind-specific parameter, e.g. delta_bump=0.5")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run one experiment config end to end")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="rerun a config across values of one knob")
    _add_config_args(p)
    p.add_argument("--knob", required=True, help="e.g. c_r or regression.n_samples")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="CSV output file")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="tabulate stored run reports")
    p.add_argument("path", help="a .reports.jsonl file or a directory of them")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ReluExtractError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
