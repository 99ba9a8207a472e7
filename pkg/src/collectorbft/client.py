"""Client session: submit requests, verify single acks, fall back to f+1 replies."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import kvstore
from .crypto import NODE, PI, KeyRing
from .messages import ExecuteAck, Reply, Request, make_request, reply_digest
from .params import ClusterParams, primary_of
from .replica import client_addr

SINGLE = "single"
F_PLUS_1 = "f_plus_1"


@dataclass(frozen=True)
class ClientConfig:
    retry_timeout: int = 60_000
    retry_budget: int = 5
    bootstrap_broadcast: bool = False  # primary unknown: send the first request to all


@dataclass
class InFlight:
    request: object
    mode: str = SINGLE
    retries: int = 0
    timeout: int = 0
    sent_at: int = 0
    replies: dict = field(default_factory=dict)  # (seq, val) -> set of signers
    received: int = 0


@dataclass(frozen=True)
class Completion:
    timestamp: int
    op: bytes
    val: bytes
    seq: int
    via: str  # ack | replies
    submitted: int
    completed: int


class Client:
    """One closed-loop client. The driver feeds messages, timers and the clock."""

    def __init__(self, cid: int, params: ClusterParams, keys: KeyRing,
                 config: ClientConfig = ClientConfig()):
        self.id = cid
        self.addr = client_addr(cid)
        self.params = params
        self.keys = keys
        self.cfg = config
        self.next_ts = 1
        self.known_view = 0
        self.now = 0
        self.inflight: dict[int, InFlight] = {}
        self.completed: dict[int, Completion] = {}
        self.failed: list[int] = []
        self.received: dict[int, int] = {}  # timestamp -> messages received
        self.ignored = 0
        self.outbox: list = []
        self.timer_ops: list = []
        self.events: list = []

    def _broadcast(self, msg) -> None:
        for dst in self.params.replica_ids:
            self.outbox.append((dst, msg, 0))

    def submit(self, op: bytes) -> int:
        ts = self.next_ts
        self.next_ts += 1
        req = make_request(self.keys, self.id, ts, op)
        self.inflight[ts] = InFlight(req, timeout=self.cfg.retry_timeout, sent_at=self.now)
        self.received[ts] = 0
        msg = Request(req, 0)
        if self.cfg.bootstrap_broadcast and self.known_view == 0 and ts == 1:
            self._broadcast(msg)
        else:
            self.outbox.append((primary_of(self.known_view, self.params), msg, 0))
        self.timer_ops.append(("set", ("retry", ts), self.cfg.retry_timeout))
        self.events.append(("submit", self.id, ts))
        return ts

    def handle(self, src: int, msg) -> Completion | None:
        if type(msg) is ExecuteAck:
            return self.on_execute_ack(msg)
        if type(msg) is Reply:
            return self.on_reply(src, msg)
        return None

    def on_execute_ack(self, ack: ExecuteAck) -> Completion | None:
        ts = ack.op.timestamp
        if ts in self.received:
            self.received[ts] += 1
        fl = self.inflight.get(ts)
        if fl is None or ack.op != fl.request:
            self.ignored += 1
            return None
        pi = ack.pi
        if pi.scheme_tag != PI or not self.keys.verify_combined(pi):
            self.ignored += 1
            return None
        if not kvstore.verify(pi.digest, ack.op, ack.val, ack.seq, ack.pos, ack.proof):
            self.ignored += 1
            return None
        self.known_view = max(self.known_view, ack.view)
        return self._complete(ts, ack.val, ack.seq, "ack")

    def on_reply(self, src: int, r: Reply) -> Completion | None:
        ts = r.timestamp
        if ts in self.received:
            self.received[ts] += 1
        fl = self.inflight.get(ts)
        if fl is None or r.client != self.id:
            return None
        sig = r.sig
        if sig.scheme_tag != NODE or sig.signer != src or not self.keys.verify_share(sig) \
                or sig.digest != reply_digest(r.view, r.seq, r.client, r.timestamp, r.val):
            self.ignored += 1
            return None
        signers = fl.replies.setdefault((r.seq, r.val), set())
        signers.add(src)
        self.known_view = max(self.known_view, r.view)
        if len(signers) >= self.params.f + 1:
            return self._complete(ts, r.val, r.seq, "replies")
        return None

    def _complete(self, ts: int, val: bytes, seq: int, via: str) -> Completion | None:
        fl = self.inflight.pop(ts, None)
        if fl is None:
            return None
        self.timer_ops.append(("cancel", ("retry", ts)))
        done = Completion(ts, fl.request.op, val, seq, via, fl.sent_at, self.now)
        self.completed[ts] = done
        self.events.append(("complete", self.id, ts, seq, val, via))
        return done

    def on_timer(self, name: tuple) -> None:
        ts = name[1]
        fl = self.inflight.get(ts)
        if fl is None:
            return
        if fl.retries >= self.cfg.retry_budget:
            del self.inflight[ts]
            self.failed.append(ts)
            self.events.append(("failed", self.id, ts))
            return
        fl.retries += 1
        fl.mode = F_PLUS_1
        fl.timeout *= 2
        self._broadcast(Request(fl.request, 1))
        self.timer_ops.append(("set", ("retry", ts), fl.timeout))
        self.events.append(("retry", self.id, ts))
