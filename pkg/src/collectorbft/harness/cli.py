"""Command line: run, sweep and replay.

Exit codes: 0 success, 1 oracle violation or failed assertion, 2 usage or
configuration error. ``COLLECTORBFT_LOG`` sets log verbosity
(debug, info, warning; default warning).
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

from ..simnet.sim import run as simulate
from ..simnet.trace import TRACE_VERSION, read_trace
from .metrics import evaluate, write_rows
from .scenario import Scenario, ScenarioError, bundled_scenarios, load_scenario

log = logging.getLogger("collectorbft")


def run_scenario(scenario: Scenario):
    """Simulate one scenario; returns (row, report, failures, trace)."""
    result = simulate(scenario.sim, scenario.cluster, scenario.workload)
    row, report, failures = evaluate(scenario, result.trace)
    return row, report, failures, result.trace


def _run_point(scenario: Scenario):
    row, _, failures, _ = run_scenario(scenario)
    return row, failures


# -- argument helpers ---------------------------------------------------------

def parse_vary(spec: str) -> tuple[str, list]:
    """'n=4,13,25' | 'seeds=1..100' | 'variant=linear_pbft,pbft_all_to_all'."""
    if "=" not in spec:
        raise ValueError(f"--vary expects key=values, got {spec!r}")
    key, values = spec.split("=", 1)
    key = key.strip()
    if key in ("seed", "seeds"):
        key = "seed"
    if key not in ("n", "seed", "variant"):
        raise ValueError(f"cannot vary {key!r}; choose n, seeds or variant")
    out = []
    for part in values.split(","):
        part = part.strip()
        if key == "variant":
            out.append(part)
        elif ".." in part:
            lo, hi = part.split("..", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError(f"--vary {key} has no values")
    return key, out


def expand_points(base: Scenario, varies: list[tuple[str, list]]) -> list[Scenario]:
    keys = [k for k, _ in varies]
    points = []
    for combo in itertools.product(*[v for _, v in varies]):
        kw = dict(zip(keys, combo))
        points.append(base.with_overrides(seed=kw.get("seed"), variant=kw.get("variant"),
                                          n=kw.get("n")))
    return points


# -- commands -----------------------------------------------------------------

def cmd_run(args) -> int:
    sc = load_scenario(args.scenario).with_overrides(seed=args.seed, variant=args.variant)
    row, report, failures, trace = run_scenario(sc)
    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        trace.write(out_dir / (sc.outputs.trace or f"{sc.name}.trace.ndjson"))
        write_rows(out_dir / (sc.outputs.csv or f"{sc.name}.csv"), [row])
    write_rows(sys.stdout, [row])
    for msg in failures:
        print(f"FAIL {sc.name}: {msg}", file=sys.stderr)
    log.info("%s seed=%s trace=%s", sc.name, sc.sim.seed, row.trace_hash)
    return 1 if failures else 0


def cmd_sweep(args) -> int:
    base = load_scenario(args.scenario)
    if args.variant:
        base = base.with_overrides(variant=args.variant)
    varies = [parse_vary(v) for v in args.vary]
    points = expand_points(base, varies)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    bad = 0
    done = 0
    try:
        write_rows(out, [], header=True)
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                futures = {pool.submit(_run_point, p): i for i, p in enumerate(points)}
                for fut in as_completed(futures):
                    row, failures = fut.result()
                    bad += bool(failures)
                    write_rows(out, [row], header=False)
                    out.flush()
                    done += 1
        else:
            for p in points:
                row, failures = _run_point(p)
                bad += bool(failures)
                for msg in failures:
                    print(f"FAIL {p.name} seed={p.sim.seed} n={p.n}: {msg}", file=sys.stderr)
                write_rows(out, [row], header=False)
                out.flush()
                done += 1
    except KeyboardInterrupt:
        print(f"interrupted after {done} of {len(points)} points; partial results kept",
              file=sys.stderr)
        return 130
    finally:
        if out is not sys.stdout:
            out.close()
    return 1 if bad else 0


def format_event(event) -> str:
    time, kind, node, fields = event
    body = " ".join(json.dumps(f, separators=(",", ":")) for f in fields)
    return f"{time:>12} {kind:<14} {node:>8} {body}".rstrip()


def _matches(event, replica, seq, kinds) -> bool:
    _, kind, node, fields = event
    if replica is not None and node != replica:
        return False
    if kinds and kind not in kinds and not (kind == "send" and fields and fields[1] in kinds):
        return False
    if seq is not None:
        if kind == "send":
            return len(fields) > 2 and fields[2] == seq
        if kind in ("commit", "execute", "install", "conflict", "ls", "drop"):
            s = fields[2] if kind == "drop" else fields[0]
            return s == seq
        if kind == "complete":
            return fields[2] == seq
        return False
    return True


def cmd_replay(args) -> int:
    trace = read_trace(args.trace)
    if args.raw:
        sys.stdout.write(json.dumps({"version": TRACE_VERSION, "level": trace.level, "meta": trace.meta},
                                    sort_keys=True, separators=(",", ":")) + "\n")
        for ev in trace.events:
            if _matches(ev, args.replica, args.seq, args.kind):
                sys.stdout.write(trace.render(ev) + "\n")
        return 0
    print(f"# trace level={trace.level} events={len(trace.events)} hash={trace.digest()}")
    print("# " + json.dumps(trace.meta, sort_keys=True))
    for ev in trace.events:
        if _matches(ev, args.replica, args.seq, args.kind):
            print(format_event(ev))
    return 0


def cmd_list(args) -> int:
    for name in bundled_scenarios():
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="collectorbft", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one scenario and print a CSV metrics row")
    r.add_argument("scenario", help="scenario file, or the name of a bundled scenario")
    r.add_argument("--seed", type=int)
    r.add_argument("--variant")
    r.add_argument("--out", help="directory for the trace and CSV")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("sweep", help="run a scenario over several n, seeds or variants")
    s.add_argument("scenario")
    s.add_argument("--vary", action="append", required=True,
                   help="n=4,13,25 | seeds=1..100 | variant=a,b (repeatable: cartesian product)")
    s.add_argument("--variant")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", help="CSV file (default stdout)")
    s.set_defaults(func=cmd_sweep)
    y = sub.add_parser("replay", help="pretty-print a saved trace")
    y.add_argument("trace")
    y.add_argument("--replica", type=int, help="only events at this node id")
    y.add_argument("--seq", type=int, help="only events about this sequence number")
    y.add_argument("--kind", action="append", default=[], help="event or message kind (repeatable)")
    y.add_argument("--raw", action="store_true", help="re-emit matching events as NDJSON")
    y.set_defaults(func=cmd_replay)
    ls = sub.add_parser("list", help="list bundled scenarios")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv=None) -> int:
    level = os.environ.get("COLLECTORBFT_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0
    except (ScenarioError, ValueError, OSError) as exc:  # TraceFormatError is a ValueError
        print(f"error: {exc}", file=sys.stderr)
        return 2
