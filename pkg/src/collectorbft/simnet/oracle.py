"""Trace checks for safety and liveness.

The oracle reads only the trace, never replica memory, so a saved trace
can be re-checked after the fact.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from ..replica import CLIENT_BASE


@dataclass(frozen=True)
class Violation:
    check: str
    index: int  # trace event index that exposed the violation; -1 for end-of-run checks
    detail: str


@dataclass
class Report:
    violations: list = field(default_factory=list)
    checked: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def of(self, check: str) -> list:
        return [v for v in self.violations if v.check == check]

    def __str__(self) -> str:
        if self.ok:
            return "ok (" + ", ".join(self.checked) + ")"
        return "; ".join(f"{v.check}@{v.index}: {v.detail}" for v in self.violations)


def oracle_check(trace, liveness: bool | None = None, single_ack: bool | None = None) -> Report:
    """Check agreement, execution, dedup, window and optionally liveness/single-ack.

    ``liveness`` defaults to True in synchronous and common modes.
    ``single_ack`` defaults to True for fault-free runs of execution-collector
    variants in synchronous mode.
    """
    meta = trace.meta
    byz = set(meta.get("byzantine", ()))
    n = meta.get("n", 0)
    mode = meta.get("mode")
    if liveness is None:
        liveness = mode in ("synchronous", "common")
    if single_ack is None:
        single_ack = (bool(meta.get("fault_free")) and mode == "synchronous"
                      and meta.get("variant") in ("exec_collector", "redundant_c"))
    rep = Report()
    honest = lambda node: 1 <= node <= n and node not in byz  # noqa: E731

    committed: dict[int, tuple] = {}  # seq -> (content, first index)
    digests: dict[int, tuple] = {}
    executed: dict[int, set] = defaultdict(set)
    results: dict[tuple, set] = defaultdict(set)  # (client, ts) -> {(seq, val)}
    last_ls: dict[int, int] = {}
    completions = []
    for i, (t, kind, node, fields) in enumerate(trace.events):
        if kind == "complete":
            completions.append((i, node, fields))
            continue
        if not honest(node):
            continue
        if kind == "commit":
            s, _, content = fields[0], fields[1], fields[2]
            prev = committed.get(s)
            if prev is None:
                committed[s] = (content, i)
            elif prev[0] != content:
                rep.violations.append(Violation(
                    "agreement", i, f"seq {s}: replica {node} committed {content[:12]} "
                    f"but {prev[0][:12]} was committed at event {prev[1]}"))
        elif kind == "conflict":
            rep.violations.append(Violation(
                "agreement", i, f"seq {fields[0]}: replica {node} saw a second certificate"))
        elif kind in ("execute", "install"):
            s, d = fields[0], fields[1]
            prev = digests.get(s)
            if prev is None:
                digests[s] = (d, i)
            elif prev[0] != d:
                rep.violations.append(Violation(
                    "execution", i, f"seq {s}: replica {node} reached {d[:12]}, "
                    f"event {prev[1]} reached {prev[0][:12]}"))
            if kind == "execute":
                for client, ts, val in fields[2]:
                    if (client, ts) in executed[node]:
                        rep.violations.append(Violation(
                            "dedup", i, f"replica {node} executed ({client}, {ts}) twice"))
                    executed[node].add((client, ts))
                    results[(client, ts)].add((s, val))
        elif kind == "ls":
            if fields[0] < last_ls.get(node, 0):
                rep.violations.append(Violation("window", i, f"replica {node} ls moved back"))
            last_ls[node] = fields[0]
        elif kind == "summary":
            if fields[4]:
                rep.violations.append(Violation(
                    "window", i, f"replica {node} held {fields[4]} slots outside its window"))
    rep.checked += ["agreement", "execution", "dedup", "window"]

    for i, node, fields in completions:
        _, ts, seq, val, _via = fields
        key = (node - CLIENT_BASE, ts)
        if (seq, val) not in results.get(key, ()):
            rep.violations.append(Violation(
                "validity", i, f"client {key[0]} ts {ts} accepted a result no honest replica produced"))
    rep.checked.append("validity")

    client_summaries = [ev for ev in trace.events if ev[1] == "client-summary"]
    if liveness:
        rep.checked.append("liveness")
        total = sum(ev[3][0] for ev in client_summaries)
        if total < meta.get("ops", 0):
            rep.violations.append(Violation(
                "liveness", -1, f"{total} of {meta.get('ops')} operations completed"))
    if single_ack:
        rep.checked.append("single-ack")
        for _, _, node, fields in client_summaries:
            for ts, count in fields[3]:
                if count != 1:
                    rep.violations.append(Violation(
                        "single-ack", -1,
                        f"client {node - CLIENT_BASE} ts {ts} received {count} messages"))
    return rep
