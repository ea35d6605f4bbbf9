"""Command-line front end.

Exit codes: 0 safe/robust, 1 unsafe/not robust, 2 unknown, 3 usage or input error.
Flags can be preset through ``PEREGRINE_<FLAG>`` environment variables, for
example ``PEREGRINE_TIMEOUT=60``; an explicit flag wins over the environment.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import lp as lpmod
from .encoder import encode
from .errors import VerifierError
from .interval import symbolic_analysis
from .nn import Network, forward, load_network_file
from .oracle import exhaustive_check, random_instance
from .properties import (ClosedLoopSpec, RobustnessSpec, RobustnessStatus, check_robustness,
                         load_property, queries_for, verdict_summary)
from .search import Verdict, VerdictStatus, VerifierConfig, validate_witness, verify, verify_many

SCHEMA_VERSION = 1
EXIT_SAFE, EXIT_UNSAFE, EXIT_UNKNOWN, EXIT_USAGE = 0, 1, 2, 3
ENV_PREFIX = "PEREGRINE_"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _env(name: str, cast, default):
    raw = os.environ.get(ENV_PREFIX + name.upper())
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError as exc:
        raise UsageError(f"bad value for {ENV_PREFIX}{name.upper()}: {raw!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    defaults = VerifierConfig()
    p = _Parser(prog="peregrinn", description="Exact verification of ReLU networks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("verify", help="verify a property file against a network")
    v.add_argument("--network", required=True, help="network file (.json or .nnet)")
    v.add_argument("--property", required=True, help="property JSON file")
    v.add_argument("--timeout", type=float, default=_env("timeout", float, defaults.timeout),
                   help="seconds per query")
    v.add_argument("--seed", type=int, default=_env("seed", int, defaults.seed))
    v.add_argument("--volume-samples", type=int,
                   default=_env("volume_samples", int, defaults.volume_samples))
    v.add_argument("--lp-tol", type=float, default=_env("lp_tol", float, defaults.lp_tol))
    v.add_argument("--lp-backend", choices=("simplex", "highs"),
                   default=_env("lp_backend", str, defaults.lp_backend))
    v.add_argument("--branching", choices=("volume", "random"),
                   default=_env("branching", str, defaults.branching))
    v.add_argument("--jobs", type=int, default=_env("jobs", int, 1),
                   help="worker processes across queries")
    v.add_argument("--output", choices=("json", "text"), default=_env("output", str, "json"))
    v.add_argument("--report", help="write the report here instead of stdout")
    v.add_argument("--trace", help="write per-iteration JSON lines here")
    v.add_argument("--no-timestamps", action="store_true",
                   default=bool(_env("no_timestamps", int, 0)),
                   help="omit wall-clock times so reports are reproducible")
    v.add_argument("--dump-lp", metavar="DIR", help="write each query's root LP in LP text format")
    v.add_argument("--dump-bounds", metavar="PATH", help="write root interval bounds as JSON")

    e = sub.add_parser("eval", help="evaluate the network on one input")
    e.add_argument("--network", required=True)
    e.add_argument("--input", required=True, help='comma-separated values, e.g. "0.1,-2"')
    e.add_argument("--output", choices=("json", "text"), default=_env("output", str, "text"))

    o = sub.add_parser("oracle-suite", help="compare verify with the exhaustive oracle")
    o.add_argument("--count", type=int, default=_env("count", int, 200))
    o.add_argument("--max-layers", type=int, default=3)
    o.add_argument("--max-width", type=int, default=6)
    o.add_argument("--dim", type=int, default=3, help="maximum input dimension")
    o.add_argument("--seed", type=int, default=_env("seed", int, 0))
    o.add_argument("--timeout", type=float, default=_env("timeout", float, 60.0))
    o.add_argument("--fixtures-dir", default="oracle_mismatches",
                   help="where mismatching instances are saved")
    o.add_argument("--inject-mismatch", type=int, metavar="K", default=None,
                   help="harness self-test: flip the verdict of instance K")
    return p


# --------------------------------------------------------------------------- verify

def _config(args) -> VerifierConfig:
    try:
        return VerifierConfig(timeout=args.timeout, volume_samples=args.volume_samples,
                              lp_tol=args.lp_tol, seed=args.seed, branching=args.branching,
                              lp_backend=args.lp_backend)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _record(idx: int, net: Network, query, v: Verdict, timestamps: bool) -> dict:
    rec = {"id": idx}
    rec.update(v.to_dict(timestamps))
    if v.status is VerdictStatus.UNSAFE:
        rec["witness"]["valid"] = validate_witness(net, query, v.witness_input)
    return rec


def _overall(prop, verdicts) -> tuple:
    statuses = [v.status for v in verdicts]
    if isinstance(prop, RobustnessSpec):
        if VerdictStatus.UNSAFE in statuses:
            return RobustnessStatus.NOT_ROBUST.value, EXIT_UNSAFE
        if all(s is VerdictStatus.SAFE for s in statuses):
            return RobustnessStatus.ROBUST.value, EXIT_SAFE
        return RobustnessStatus.UNKNOWN.value, EXIT_UNKNOWN
    if VerdictStatus.UNSAFE in statuses:
        return VerdictStatus.UNSAFE.value, EXIT_UNSAFE
    if all(s is VerdictStatus.SAFE for s in statuses):
        return VerdictStatus.SAFE.value, EXIT_SAFE
    return VerdictStatus.UNKNOWN.value, EXIT_UNKNOWN


def _run_queries(net, prop, queries, cfg, jobs, trace_path):
    if trace_path is None and jobs > 1:
        if isinstance(prop, RobustnessSpec):
            res = check_robustness(net, prop, cfg, jobs)
            return [res.verdicts[m] for m in sorted(res.verdicts)]
        return verify_many(net, queries, cfg, jobs)
    # sequential: needed for tracing, and lets robustness stop at the first counterexample
    verdicts = []
    fh = open(trace_path, "w", encoding="utf-8") if trace_path else None
    try:
        for idx, q in enumerate(queries):
            def trace(rec, idx=idx):
                fh.write(json.dumps({"query": idx, **rec}, sort_keys=True) + "\n")
            verdicts.append(verify(net, q, cfg, trace if fh else None))
            if isinstance(prop, RobustnessSpec) and verdicts[-1].status is VerdictStatus.UNSAFE:
                break
    finally:
        if fh:
            fh.close()
    return verdicts


def _dump_debug(args, net, queries):
    if args.dump_lp:
        out = Path(args.dump_lp)
        out.mkdir(parents=True, exist_ok=True)
        for idx, q in enumerate(queries):
            (out / f"query_{idx}.lp").write_text(lpmod.to_lp_text(encode(net, q).lp))
    if args.dump_bounds:
        dump = []
        for idx, q in enumerate(queries):
            eff = net.with_input_map(q.input_map)
            dump.append({"id": idx, **symbolic_analysis(eff, q.input_box()).to_dict()})
        Path(args.dump_bounds).write_text(json.dumps(dump, indent=2))


def _text_report(report: dict) -> str:
    lines = []
    for rec in report["queries"]:
        line = f"query {rec['id']}: {rec['verdict']}"
        if rec["reason"]:
            line += f" ({rec['reason']})"
        line += f"  lp_solves={rec['lp_solves']} backtracks={rec['backtracks']}"
        if rec["wall_time_s"] is not None:
            line += f" time={rec['wall_time_s']:.3f}s"
        lines.append(line)
        if rec["witness"] is not None:
            lines.append(f"  witness input:  {rec['witness']['input']}")
            lines.append(f"  witness output: {rec['witness']['output']}")
    agg = report["aggregate"]
    lines.append(f"result: {report['result']}  "
                 f"(total {agg['total']}, safe {agg['safe']}, unsafe {agg['unsafe']}, "
                 f"unknown {agg['unknown']})")
    return "\n".join(lines)


def cmd_verify(args) -> int:
    net = load_network_file(args.network)
    prop = load_property(args.property, net)
    cfg = _config(args)
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    queries = queries_for(prop)
    _dump_debug(args, net, queries)

    t0 = time.perf_counter()
    verdicts = _run_queries(net, prop, queries, cfg, args.jobs, args.trace)
    elapsed = time.perf_counter() - t0
    stamps = not args.no_timestamps
    result, code = _overall(prop, verdicts)
    kind = ("robustness" if isinstance(prop, RobustnessSpec)
            else "closed_loop" if isinstance(prop, ClosedLoopSpec) else "raw")
    aggregate = verdict_summary(verdicts)
    aggregate["total_time_s"] = round(elapsed, 6) if stamps else None
    report = {"schema": SCHEMA_VERSION, "property_type": kind, "result": result,
              "queries": [_record(i, net, q, v, stamps)
                          for i, (q, v) in enumerate(zip(queries, verdicts))],
              "aggregate": aggregate}
    if kind == "closed_loop":
        n_obs = len(prop.obstacles)
        for rec in report["queries"]:
            rec["region"], rec["obstacle"] = divmod(rec["id"], n_obs)

    text = (json.dumps(report, indent=2, sort_keys=True) if args.output == "json"
            else _text_report(report))
    if args.report:
        Path(args.report).write_text(text + "\n")
    else:
        print(text)
    return code


# --------------------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    net = load_network_file(args.network)
    try:
        x = np.array([float(v) for v in args.input.split(",") if v.strip()])
    except ValueError as exc:
        raise UsageError(f"cannot parse --input: {exc}") from exc
    if x.shape != (net.input_dim,):
        raise UsageError(f"input has {x.shape[0]} values, network expects {net.input_dim}")
    z, _, _ = forward(net, x)
    cls = int(np.argmax(z))
    if args.output == "json":
        print(json.dumps({"output": z.tolist(), "argmax": cls}))
    else:
        print("output: " + " ".join(f"{v:.10g}" for v in z))
        print(f"argmax: {cls}")
    return 0


# --------------------------------------------------------------------------- oracle suite

def cmd_oracle_suite(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    cfg = VerifierConfig(timeout=args.timeout)
    mismatches, agree, checks, violations = [], 0, 0, 0
    t0 = time.perf_counter()
    for k in range(args.count):
        inst = random_instance(args.seed + k, max_layers=args.max_layers,
                               max_width=args.max_width, max_dim=args.dim)
        v = verify(inst.net, inst.query, cfg)
        o = exhaustive_check(inst.net, inst.query)
        claimed_unsafe = v.status is VerdictStatus.UNSAFE
        if args.inject_mismatch == k:
            claimed_unsafe = not claimed_unsafe
        checks += v.stats.post_conditioning_checks
        violations += v.stats.depth_violations
        ok = v.status is not VerdictStatus.UNKNOWN and claimed_unsafe == o.unsafe
        if v.status is VerdictStatus.UNSAFE and not validate_witness(inst.net, inst.query,
                                                                     v.witness_input):
            ok = False
        if ok:
            agree += 1
            continue
        out = Path(args.fixtures_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"mismatch_seed{inst.seed}.json"
        path.write_text(json.dumps({**inst.to_dict(), "verify": v.to_dict(False),
                                    "oracle_unsafe": o.unsafe}, indent=2))
        mismatches.append(str(path))
    elapsed = time.perf_counter() - t0
    rate = agree / args.count if args.count else 1.0
    print(f"instances: {args.count}  agreement: {agree}/{args.count} ({100 * rate:.1f}%)  "
          f"time: {elapsed:.1f}s")
    print(f"depth checks: {checks}  shallower-indeterminate events: {violations}")
    for path in mismatches:
        print(f"mismatch fixture: {path}")
    return 0 if not mismatches else 1


COMMANDS = {"verify": cmd_verify, "eval": cmd_eval, "oracle-suite": cmd_oracle_suite}


def _attach_values(argv: list) -> list:
    # "--input -0.3,1" would otherwise be read as an unknown option
    out = []
    for tok in argv:
        if out and out[-1] == "--input" and tok.startswith("-"):
            out[-1] = f"--input={tok}"
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    argv = _attach_values(list(sys.argv[1:] if argv is None else argv))
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse: --help exits 0, bad usage exits 3
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (OSError, VerifierError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
