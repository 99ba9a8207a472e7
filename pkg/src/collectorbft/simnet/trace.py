"""Simulation traces: an ordered event list, a stable hash, and NDJSON files.

Each event is ``(time, kind, node, fields)`` where fields is a tuple of
ints, strings or hex strings. The rendered line of an event is the JSON
array ``[time, kind, node, *fields]``; the trace hash is SHA-256 over the
rendered lines joined by newlines, so it is a pure function of the event
sequence.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

TRACE_VERSION = 1


class TraceFormatError(ValueError):
    pass


@dataclass
class Trace:
    level: str = "protocol"
    meta: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    def add(self, time: int, kind: str, node: int, fields: tuple = ()) -> None:
        self.events.append((time, kind, node, fields))

    def render(self, event) -> str:
        time, kind, node, fields = event
        return json.dumps([time, kind, node, *fields], separators=(",", ":"))

    def lines(self):
        for ev in self.events:
            yield self.render(ev)

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    def of_kind(self, *kinds: str):
        wanted = set(kinds)
        for i, ev in enumerate(self.events):
            if ev[1] in wanted:
                yield i, ev

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            header = {"version": TRACE_VERSION, "level": self.level, "meta": self.meta}
            fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
            for line in self.lines():
                fh.write(line + "\n")


def read_trace(path) -> Trace:
    try:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
            header = json.loads(first)
            if not isinstance(header, dict) or "version" not in header:
                raise TraceFormatError("missing trace header")
            if header["version"] != TRACE_VERSION:
                raise TraceFormatError(
                    f"trace version {header['version']} is not supported (expected {TRACE_VERSION})")
            trace = Trace(header.get("level", "protocol"), header.get("meta", {}))
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                row = json.loads(line)
                if not isinstance(row, list) or len(row) < 3 \
                        or not isinstance(row[0], int) or not isinstance(row[1], str):
                    raise TraceFormatError(f"line {lineno}: malformed event")
                trace.add(row[0], row[1], row[2], tuple(row[3:]))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise TraceFormatError(f"corrupt trace: {exc}") from exc
    return trace
