"""Scripted Byzantine replicas.

Each script wraps an honest replica and rewrites what it sends. The driver
talks to the wrapper through the same surface as a replica: ``handle``,
``on_timer``, ``summary`` and the three drained queues. Scripts never forge
another signer's shares; they can only sign with the wrapped replica's key.
"""

from __future__ import annotations

from dataclasses import replace

from ..messages import (
    EMPTY_ENTRY,
    BlockData,
    CheckpointVote,
    Commit,
    ExecuteAck,
    FullCommitProof,
    FullCommitProofSlow,
    FullExecuteProof,
    NewView,
    PrePrepare,
    Prepare,
    Reply,
    SignShare,
    SignState,
    StateSnapshot,
    ViewChange,
    sign_message,
)
from ..params import primary_of
from ..replica import GENESIS_CERT, GENESIS_KV_ROOT, GENESIS_LOG_ROOT, _UNSIGNED


class Byzantine:
    script = "base"

    def __init__(self, inner):
        self.inner = inner
        self.id = inner.id
        self.params = inner.params
        self.keys = inner.keys
        self.pool: list = []  # every client request this replica has seen in a block

    @property
    def outbox(self):
        return self.inner.outbox

    @outbox.setter
    def outbox(self, value):
        self.inner.outbox = value

    @property
    def timer_ops(self):
        return self.inner.timer_ops

    @timer_ops.setter
    def timer_ops(self, value):
        self.inner.timer_ops = value

    @property
    def events(self):
        return self.inner.events

    @events.setter
    def events(self, value):
        self.inner.events = value

    def handle(self, src, msg):
        self.observe(src, msg)
        self.inner.handle(src, msg)
        self.rewrite()

    def on_timer(self, name):
        self.inner.on_timer(name)
        self.rewrite()

    def observe(self, src, msg):
        if type(msg) is PrePrepare:
            for req in msg.requests:
                if req not in self.pool:
                    self.pool.append(req)

    def rewrite(self):
        out = []
        for dst, msg, delay in self.inner.outbox:
            out.extend(self.transform(dst, msg, delay))
        self.inner.outbox = out

    def transform(self, dst, msg, delay):
        return [(dst, msg, delay)]

    def alternative(self, requests):
        """A different valid request list, or None if none can be built."""
        if len(requests) > 1:
            return requests[1:]
        for req in reversed(self.pool):
            if req not in requests:
                return (req,)
        return None

    def summary(self):
        s = self.inner.summary()
        s["byzantine"] = self.script
        return s


class EquivocatePrePrepare(Byzantine):
    """As primary, send block A to one half and block B to the other.

    One overlap replica receives both, so the equivocation is provable.
    """

    script = "equivocate_preprepare"

    def __init__(self, inner, overlap: bool = True):
        super().__init__(inner)
        others = [r for r in self.params.replica_ids if r != self.id]
        half = len(others) // 2
        self.group_b = set(others[half:])
        self.both = {others[half - 1]} if overlap and half >= 1 else set()
        self._alt: dict = {}

    def transform(self, dst, msg, delay):
        if type(msg) is not PrePrepare or dst == self.id:
            return [(dst, msg, delay)]
        key = (msg.seq, msg.view)
        if key not in self._alt:
            alt = self.alternative(msg.requests)
            self._alt[key] = None if alt is None else sign_message(
                self.keys, self.id, PrePrepare(msg.seq, msg.view, tuple(alt), _UNSIGNED))
        other = self._alt[key]
        if other is None:
            return [(dst, msg, delay)]
        if dst in self.both:
            return [(dst, msg, delay), (dst, other, delay)]
        if dst in self.group_b:
            return [(dst, other, delay)]
        return [(dst, msg, delay)]

    def rewrite(self):
        for _, msg, _ in self.inner.outbox:
            if type(msg) is PrePrepare:
                self.observe(self.id, msg)
        super().rewrite()


class StaleViewChange(Byzantine):
    """Report genesis as the stable checkpoint and claim no slot evidence.

    As primary it also withholds proposals, so the view change it lies in
    actually happens.
    """

    script = "stale_viewchange"

    def transform(self, dst, msg, delay):
        if type(msg) is PrePrepare:
            return []
        if type(msg) is ViewChange:
            vc = ViewChange(msg.view, self.id, 0, GENESIS_KV_ROOT, GENESIS_LOG_ROOT, GENESIS_CERT,
                            (EMPTY_ENTRY,) * self.params.window, _UNSIGNED)
            msg = sign_message(self.keys, self.id, vc)
        return [(dst, msg, delay)]


def _corrupt(share):
    if share is None:
        return None
    return replace(share, tag=bytes(b ^ 0xFF for b in share.tag))


class InvalidShares(Byzantine):
    """Every signature share it sends fails verification."""

    script = "invalid_shares"

    def transform(self, dst, msg, delay):
        t = type(msg)
        if t is SignShare:
            msg = replace(msg, sigma=_corrupt(msg.sigma), tau=_corrupt(msg.tau))
        elif t in (Commit, SignState, CheckpointVote):
            msg = replace(msg, share=_corrupt(msg.share))
        return [(dst, msg, delay)]


_COLLECTOR_OUTPUT = (FullCommitProof, Prepare, FullCommitProofSlow, FullExecuteProof, ExecuteAck,
                     NewView, BlockData, StateSnapshot, Reply)


class SilentCollector(Byzantine):
    """Takes part in signing but never forwards anything it aggregated or serves."""

    script = "silent_collector"

    def transform(self, dst, msg, delay):
        if type(msg) in _COLLECTOR_OUTPUT:
            return []
        return [(dst, msg, delay)]


class PartialSend(Byzantine):
    """Sends each replica-bound message to roughly half of its destinations."""

    script = "partial_send"

    def transform(self, dst, msg, delay):
        if dst == self.id or dst > self.params.n:
            return [(dst, msg, delay)]
        if (dst + getattr(msg, "seq", 0)) % 2:
            return []
        return [(dst, msg, delay)]


class FutureViewPrePrepare(Byzantine):
    """Primary-elect of view v+1 proposes a conflicting block for a live view-v slot.

    Honest replicas must ignore it because they are still in view v.
    """

    script = "future_view_preprepare"

    def __init__(self, inner):
        super().__init__(inner)
        self._done: set = set()

    def observe(self, src, msg):
        super().observe(src, msg)
        if type(msg) is not PrePrepare or src == self.id:
            return
        s, v = msg.seq, msg.view
        if primary_of(v + 1, self.params) != self.id or (s, v) in self._done:
            return
        alt = self.alternative(msg.requests)
        if alt is None:
            return
        self._done.add((s, v))
        fake = sign_message(self.keys, self.id, PrePrepare(s, v + 1, tuple(alt), _UNSIGNED))
        # includes itself, so its own shares for the fake block go out too
        for dst in self.params.replica_ids:
            self.inner.outbox.append((dst, fake, 0))


SCRIPT_CLASSES = {
    cls.script: cls
    for cls in (EquivocatePrePrepare, StaleViewChange, InvalidShares, SilentCollector,
                PartialSend, FutureViewPrePrepare)
}


def wrap(inner, script: str):
    return SCRIPT_CLASSES[script](inner)
