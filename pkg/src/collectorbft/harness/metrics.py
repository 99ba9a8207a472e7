"""Per-run metrics rows and assertion checks."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import asdict, dataclass, fields

from ..replica import CLIENT_BASE
from ..simnet.oracle import Report, oracle_check
from ..simnet.stats import BLOCK_KINDS, message_stats
from ..simnet.trace import Trace
from .scenario import Scenario


@dataclass
class MetricsRow:
    scenario: str
    seed: int
    variant: str
    mode: str
    n: int
    f: int
    c: int
    committed_blocks: int
    ops: int
    completed: int
    failed: int
    latency_mean: float
    latency_median: float
    latency_p99: float
    msgs_per_block: float
    bytes_per_block: float
    view_changes: int
    fast_path_fraction: float
    prepares: int
    violations: int
    trace_hash: str
    # mean messages per committed block, one column per kind
    pre_prepare: float = 0.0
    sign_share: float = 0.0
    full_commit_proof: float = 0.0
    prepare: float = 0.0
    commit: float = 0.0
    full_commit_proof_slow: float = 0.0
    sign_state: float = 0.0
    full_execute_proof: float = 0.0
    execute_ack: float = 0.0
    reply: float = 0.0
    fetch_block: float = 0.0
    block_data: float = 0.0


COLUMNS = [f.name for f in fields(MetricsRow)]


def _percentile(xs: list, q: float) -> float:
    if not xs:
        return 0.0
    ordered = sorted(xs)
    k = max(0, math.ceil(q * len(ordered)) - 1)  # nearest rank
    return float(ordered[k])


def latencies(trace: Trace) -> list[int]:
    submitted = {}
    out = []
    for t, kind, node, fields_ in trace.events:
        if kind == "submit":
            submitted[(node, fields_[1])] = t
        elif kind == "complete":
            start = submitted.get((node, fields_[1]))
            if start is not None:
                out.append(t - start)
    return out


def view_changes(trace: Trace) -> int:
    return len({f[0] for _, kind, _, f in trace.events if kind == "new-view"})


def build_row(scenario: Scenario, trace: Trace, report: Report) -> MetricsRow:
    meta = trace.meta
    lat = latencies(trace)
    completed = failed = 0
    for _, kind, node, f in trace.events:
        if kind == "client-summary" and node > CLIENT_BASE:
            completed += f[0]
            failed += f[1]
    per_kind = {k: 0.0 for k in BLOCK_KINDS}
    if trace.level == "safety":
        blocks = len({f[0] for _, kind, node, f in trace.events if kind == "commit"})
        total = bytes_ = fast = 0.0
        prepares = 0
    else:
        st = message_stats(trace)
        blocks, total, bytes_, fast = st.blocks, st.per_block_total, st.per_block_bytes, st.fast_fraction
        per_kind.update(st.per_block)
        prepares = st.by_kind.get("prepare", 0)
    row = MetricsRow(
        scenario=scenario.name, seed=meta["seed"], variant=meta["variant"], mode=meta["mode"],
        n=meta["n"], f=meta["f"], c=meta["c"], committed_blocks=blocks, ops=meta["ops"],
        completed=completed, failed=failed,
        latency_mean=round(statistics.fmean(lat), 3) if lat else 0.0,
        latency_median=float(statistics.median(lat)) if lat else 0.0,
        latency_p99=_percentile(lat, 0.99),
        msgs_per_block=round(total, 6), bytes_per_block=round(bytes_, 3),
        view_changes=view_changes(trace), fast_path_fraction=round(fast, 6), prepares=prepares,
        violations=len(report.violations), trace_hash=trace.digest(),
    )
    for k, v in per_kind.items():
        setattr(row, k.replace("-", "_"), round(v, 6))
    return row


def evaluate(scenario: Scenario, trace: Trace) -> tuple[MetricsRow, Report, list[str]]:
    """Oracle report, metrics row and the list of failed assertions for one run."""
    a = scenario.assertions
    report = oracle_check(trace, liveness=a.all_complete, single_ack=a.single_ack)
    row = build_row(scenario, trace, report)
    failures = []
    if a.oracle and not report.ok:
        failures.append(f"oracle: {report}")
    if a.fast_path_fraction is not None and abs(row.fast_path_fraction - a.fast_path_fraction) > 1e-9:
        failures.append(f"fast_path_fraction {row.fast_path_fraction} != {a.fast_path_fraction}")
    if a.max_prepares is not None and row.prepares > a.max_prepares:
        failures.append(f"prepares {row.prepares} > {a.max_prepares}")
    if a.min_prepares is not None and row.prepares < a.min_prepares:
        failures.append(f"prepares {row.prepares} < {a.min_prepares}")
    if a.min_view_changes is not None and row.view_changes < a.min_view_changes:
        failures.append(f"view_changes {row.view_changes} < {a.min_view_changes}")
    if a.max_view_changes is not None and row.view_changes > a.max_view_changes:
        failures.append(f"view_changes {row.view_changes} > {a.max_view_changes}")
    return row, report, failures


def write_rows(path_or_file, rows, header: bool = True) -> None:
    def emit(fh):
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        if header:
            w.writeheader()
        for r in rows:
            w.writerow(asdict(r))
    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="", encoding="utf-8") as fh:
            emit(fh)
