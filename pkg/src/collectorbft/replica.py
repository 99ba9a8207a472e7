"""Replica state machine.

A replica is a single-threaded event handler. The driver calls
``handle(src, msg)`` for each delivered message and ``on_timer(name)``
for each expired timer, then drains three queues:

* ``outbox``: ``(dst, msg, delay)`` sends; self-sends go through the network.
* ``timer_ops``: ``("set", name, delay)`` or ``("cancel", name)``; names are
  tuples, so ids are deterministic.
* ``events``: protocol milestones for the trace (commit, execute, ...).
  Execute events list ``(client, timestamp, val)`` for each fresh request.

Agreement runs on collectors: sign-shares go to the C-collectors of the
slot, which broadcast a combined proof. Execution shares go to E-collectors,
which broadcast the execution certificate and send each client one ack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from . import kvstore
from .crypto import NODE, PI, SIGMA, TAU, CombinedSig, KeyRing, SigShare, nested_digest
from .messages import (
    EMPTY_ENTRY,
    BlockData,
    CheckpointVote,
    Commit,
    CommittedBlock,
    Complaint,
    EquivocationEvidence,
    ExecuteAck,
    FetchBlock,
    FullCommitProof,
    FullCommitProofSlow,
    FullExecuteProof,
    NewView,
    NoCommit,
    NoPrePrepare,
    PrePrepare,
    Prepare,
    Reply,
    Request,
    Sigma,
    SigmaShareWithView,
    SignShare,
    SignState,
    StateRequest,
    StateSnapshot,
    TauTau,
    TauWithView,
    TimeoutEvidence,
    ViewChange,
    ViewChangeSlotEntry,
    block_hash,
    content_digest,
    reply_digest,
    sign_message,
    timeout_digest,
    validate_well_formed,
)
from .params import ClusterParams, collectors_of, primary_of
from .viewchange import Adopt, Decide, choose_safe_value

CLIENT_BASE = 1_000_000
EMA_ALPHA = 0.5

GENESIS_KV_ROOT = kvstore.ServiceState().kv_root()
GENESIS_LOG_ROOT = kvstore.ServiceState().log_root()
# pre-agreed stand-in for pi(d_0); no signatures exist before startup
GENESIS_CERT = CombinedSig(PI, kvstore.GENESIS_DIGEST, b"genesis")
_UNSIGNED = SigShare(NODE, 0, bytes(32), b"")


def client_addr(client: int) -> int:
    return CLIENT_BASE + client


@dataclass(frozen=True)
class Variant:
    """Which protocol ingredients are enabled."""

    name: str
    fast_path: bool
    exec_collector: bool
    redundant: bool
    all_to_all: bool = False


VARIANTS = {
    v.name: v
    for v in (
        Variant("pbft_all_to_all", False, False, False, True),
        Variant("linear_pbft", False, False, False),
        Variant("fast_path", True, False, False),
        Variant("exec_collector", True, True, False),
        Variant("redundant_c", True, True, True),
    )
}


@dataclass(frozen=True)
class ReplicaConfig:
    variant: Variant = VARIANTS["redundant_c"]
    stagger_delta: int = 4_000
    fast_timeout: int = 4_000
    batch_timeout: int = 1_000
    batch_target: int = 0  # floor on the adaptive batch size; 0 = adaptive only
    view_timeout: int = 40_000
    fetch_timeout: int = 8_000
    allow: Callable[[int, bytes], bool] | None = None
    mutations: frozenset = frozenset()


def compute_batch_size(avg_pending: float, params: ClusterParams) -> int:
    """max(1, ceil(avg / (active_window / 2)))."""
    return max(1, math.ceil(avg_pending / (params.active_window / 2)))


@dataclass
class Committed:
    view: int  # view the certificate was formed in
    requests: tuple
    proof: CombinedSig  # sigma(h), or tau(tau(h)) when tau is set
    tau: CombinedSig | None
    kind: str  # fast | slow | decided | transfer


@dataclass
class CachedReply:
    timestamp: int
    seq: int
    val: bytes
    ack: ExecuteAck | None = None


@dataclass
class Slot:
    seq: int
    view: int = -1  # view of the accepted block
    requests: tuple | None = None
    hash: bytes | None = None
    seen: dict = field(default_factory=dict)  # view -> first PrePrepare
    blocks: dict = field(default_factory=dict)  # block hash -> requests
    signed_view: int = -1
    share_msg: SignShare | None = None
    my_share: tuple | None = None  # (view, sigma share, requests)
    prepared: tuple | None = None  # (view, tau, requests), highest view
    commit_msg: Commit | None = None
    committed: Committed | None = None
    waiting_commit: list = field(default_factory=list)
    waiting_prepare: Prepare | None = None
    # collector state for one view
    col_view: int = -1
    sigma: dict = field(default_factory=dict)  # hash -> {signer: share}
    tau: dict = field(default_factory=dict)
    commits: dict = field(default_factory=dict)  # nested digest -> {signer: share}
    sent: set = field(default_factory=set)


class Replica:
    def __init__(self, rid: int, params: ClusterParams, keys: KeyRing,
                 config: ReplicaConfig = ReplicaConfig()):
        self.id = rid
        self.params = params
        self.keys = keys
        self.cfg = config
        self.view = 0
        self.in_vc = False
        self.vc_target = 0
        self.vc_fail = 0
        self.ls = 0
        self.le = 0
        self.state = kvstore.ServiceState(window=params.window)
        self.digests = {0: kvstore.GENESIS_DIGEST}
        self.stable = (0, GENESIS_KV_ROOT, GENESIS_LOG_ROOT, GENESIS_CERT)
        # checkpoint seq -> (serialized state, kv_root, log_root)
        self.snapshots = {0: (kvstore.snapshot(self.state), GENESIS_KV_ROOT, GENESIS_LOG_ROOT)}
        self.slots: dict[int, Slot] = {}
        self.open: set[int] = set()  # accepted, not committed
        self.max_committed = 0
        self.exec_records: dict[int, tuple] = {}  # seq -> (requests, vals)
        self.exec_shares: dict[int, dict] = {}
        self.exec_done: set[int] = set()
        self.sign_state_msgs: dict[int, SignState] = {}
        self.ckpt_votes: dict[int, dict] = {}
        self.ahead: dict[int, CombinedSig] = {}  # certified seqs above le
        # primary
        self.pending: list = []
        self.pending_keys: set = set()
        self.inflight: set = set()
        self.next_seq = 1
        self.ema = 0.0
        self.batch_armed = False
        self.batch_due = False
        # clients
        self.reply_cache: dict[int, CachedReply] = {}
        self.waiting: dict = {}
        # view change
        self.vc_votes: dict[int, set] = {}
        self.vc_msgs: dict[int, dict] = {}
        self.nv_sent: set[int] = set()
        self.new_view: NewView | None = None
        self.complained: set[int] = set()
        self.synced: set[int] = set()
        self.progress_armed = False
        self.transfer_pending = False
        self.deferred: dict[int, list] = {}  # view -> [(src, msg)] received early
        # accounting
        self.max_log = 0
        self.window_violations = 0
        self.flags: dict[str, int] = {}
        self.outbox: list = []
        self.timer_ops: list = []
        self.events: list = []
        self._handlers = {
            Request: self.on_request,
            PrePrepare: self.on_preprepare,
            SignShare: self.on_sign_share,
            FullCommitProof: self.on_full_commit_proof,
            Prepare: self.on_prepare,
            Commit: self.on_commit,
            FullCommitProofSlow: self.on_full_commit_proof_slow,
            SignState: self.on_sign_state,
            FullExecuteProof: self.on_full_execute_proof,
            CheckpointVote: self.on_checkpoint_vote,
            ViewChange: self.on_view_change,
            NewView: self.on_new_view,
            Complaint: self.on_complaint,
            FetchBlock: self.on_fetch_block,
            BlockData: self.on_block_data,
            StateRequest: self.on_state_request,
            StateSnapshot: self.on_state_snapshot,
        }

    # -- plumbing ------------------------------------------------------------
    @property
    def primary(self) -> int:
        return primary_of(self.view, self.params)

    def is_primary(self) -> bool:
        return self.primary == self.id

    def send(self, dst: int, msg, delay: int = 0) -> None:
        self.outbox.append((dst, msg, delay))

    def broadcast(self, msg) -> None:
        for dst in self.params.replica_ids:
            self.outbox.append((dst, msg, 0))

    def set_timer(self, name: tuple, delay: int) -> None:
        self.timer_ops.append(("set", name, delay))

    def cancel_timer(self, name: tuple) -> None:
        self.timer_ops.append(("cancel", name))

    def _flag(self, reason: str) -> None:
        self.flags[reason] = self.flags.get(reason, 0) + 1

    def _sign(self, scheme: str, digest: bytes) -> SigShare:
        return self.keys.sign(scheme, self.id, digest)

    def _view_ok(self, view: int) -> bool:
        if "skip_view_check" in self.cfg.mutations:
            return True
        return view == self.view and not self.in_vc

    def _defer(self, src: int, msg) -> None:
        """Hold agreement traffic for the next view until its NewView arrives."""
        if msg.view != max(self.view, self.vc_target if self.in_vc else self.view) + 1 \
                and not (self.in_vc and msg.view == self.vc_target):
            return
        held = self.deferred.setdefault(msg.view, [])
        if len(held) < self.params.window * self.params.n * 4:
            held.append((src, msg))

    def _in_window(self, seq: int) -> bool:
        return self.ls < seq <= self.ls + self.params.window

    def _slot(self, seq: int) -> Slot:
        slot = self.slots.get(seq)
        if slot is None:
            if not self._in_window(seq):
                self.window_violations += 1
            slot = self.slots[seq] = Slot(seq)
            if len(self.slots) > self.max_log:
                self.max_log = len(self.slots)
        return slot

    def handle(self, src: int, msg) -> None:
        handler = self._handlers.get(type(msg))
        if handler is None:
            return
        if validate_well_formed(msg, self.keys, self.params, self.cfg.allow) is not None:
            self._flag("malformed")
            return
        handler(src, msg)
        self._after()

    def on_timer(self, name: tuple) -> None:
        kind = name[0]
        if kind == "progress":
            self._on_progress_timeout(name[1])
        elif kind == "vc-wait":
            if self.in_vc and self.vc_target == name[1]:
                self.vc_fail += 1
                self._start_view_change(name[1] + 1)
        elif kind == "fast":
            self._on_fast_timeout(*name[1:])
        elif kind == "stagger":
            self._on_stagger(*name[1:])
        elif kind == "batch":
            self.batch_armed = False
            self.batch_due = True
        elif kind == "fetch":
            self._on_fetch_timeout(*name[1:])
        elif kind == "transfer":
            self.transfer_pending = False
        self._after()

    def _after(self) -> None:
        self._maybe_propose()
        self._check_progress_timer()

    # -- client requests -----------------------------------------------------
    def on_request(self, src: int, msg: Request) -> None:
        req = msg.request
        key = (req.client, req.timestamp)
        if req.timestamp <= self.state.sessions.get(req.client, 0):
            cached = self.reply_cache.get(req.client)
            if cached is not None and cached.timestamp == req.timestamp:
                if cached.ack is not None and not msg.retry:
                    self.send(client_addr(req.client), cached.ack)
                else:
                    self._send_reply(req.client, cached)
            return
        if msg.retry:
            self.waiting[key] = req
        if self.is_primary() and not self.in_vc:
            if key not in self.pending_keys and key not in self.inflight:
                self.pending.append(req)
                self.pending_keys.add(key)
        elif not self.in_vc and (msg.retry or src > CLIENT_BASE):
            self.send(self.primary, Request(req, 0))

    def _send_reply(self, client: int, cached: CachedReply) -> None:
        sig = self._sign(NODE, reply_digest(self.view, cached.seq, client, cached.timestamp, cached.val))
        self.send(client_addr(client),
                  Reply(self.view, cached.seq, client, cached.timestamp, cached.val, sig))

    def _maybe_propose(self) -> None:
        if not self.pending or self.in_vc or not self.is_primary():
            return
        p = self.params
        while self.pending:
            s = self.next_seq
            if s > self.ls + p.window or s > self.le + p.fast_window:
                return
            if s - 1 - self.le >= p.active_window:
                return
            batch = max(compute_batch_size(self.ema, p), self.cfg.batch_target)
            if len(self.pending) < batch and not self.batch_due:
                if not self.batch_armed:
                    self.batch_armed = True
                    self.set_timer(("batch",), self.cfg.batch_timeout)
                return
            self.ema = EMA_ALPHA * len(self.pending) + (1 - EMA_ALPHA) * self.ema
            self.batch_due = False
            take, self.pending = self.pending[:batch], self.pending[batch:]
            fresh = []
            for req in take:
                key = (req.client, req.timestamp)
                self.pending_keys.discard(key)
                if req.timestamp > self.state.sessions.get(req.client, 0):
                    fresh.append(req)
                    self.inflight.add(key)
            if not fresh:
                continue
            pp = PrePrepare(s, self.view, tuple(fresh), _UNSIGNED)
            self.next_seq = s + 1
            self.broadcast(sign_message(self.keys, self.id, pp))

    # -- agreement -----------------------------------------------------------
    def on_preprepare(self, src: int, pp: PrePrepare) -> None:
        s, v = pp.seq, pp.view
        if not self._view_ok(v):
            if v > self.view:
                self._defer(src, pp)
                self._sync_view(v, src)
            return
        if not self._in_window(s):
            return
        slot = self._slot(s)
        first = slot.seen.get(v)
        if first is not None:
            if first.sig.digest != pp.sig.digest:
                self._on_equivocation(first, pp)
            return
        slot.seen[v] = pp
        h = pp.sig.digest
        slot.blocks[h] = pp.requests
        if slot.committed is not None or slot.view >= v:
            self._resolve_waiting(slot)
            return
        self._accept(slot, v, pp.requests, h)

    def _accept(self, slot: Slot, view: int, requests: tuple, h: bytes) -> None:
        slot.view, slot.requests, slot.hash = view, requests, h
        slot.blocks[h] = requests
        if slot.committed is None:
            self.open.add(slot.seq)
        self._resolve_waiting(slot)
        self._sign_block(slot)
        if self.cfg.variant.all_to_all and slot.col_view == view \
                and len(slot.tau.get(h, ())) >= self.params.tau_threshold:
            self._local_prepare(slot, view, h)

    def _sign_block(self, slot: Slot) -> None:
        if slot.signed_view >= slot.view:
            return
        slot.signed_view = slot.view
        s, v, h = slot.seq, slot.view, slot.hash
        sigma = None
        if self.cfg.variant.fast_path and s <= self.le + self.params.fast_window:
            sigma = self._sign(SIGMA, h)
            slot.my_share = (v, sigma, slot.requests)
        msg = SignShare(s, v, h, sigma, self._sign(TAU, h))
        slot.share_msg = msg
        self._staggered(msg, self._share_targets(s, v), ("share", s, v))

    def _staggered(self, msg, targets: tuple, tag: tuple) -> None:
        if self.cfg.variant.all_to_all:
            for dst in targets:
                self.send(dst, msg)
            return
        self.send(targets[0], msg)
        for k in range(1, len(targets)):
            self.set_timer(("stagger",) + tag + (k,), k * self.cfg.stagger_delta)

    def _share_targets(self, s: int, v: int) -> tuple:
        var, p = self.cfg.variant, self.params
        if var.all_to_all:
            return tuple(p.replica_ids)
        if not var.fast_path:
            return self._commit_targets(s, v)
        fast = collectors_of(s, v, "commit", "fast", p)
        if not var.redundant:
            fast = fast[:1]
        primary = primary_of(v, p)
        return fast if primary in fast else fast + (primary,)

    def _commit_targets(self, s: int, v: int) -> tuple:
        var, p = self.cfg.variant, self.params
        if var.all_to_all:
            return tuple(p.replica_ids)
        linear = collectors_of(s, v, "commit", "linear", p)
        return linear if var.redundant else linear[-1:]

    def _exec_targets(self, s: int) -> tuple:
        group = collectors_of(s, self.view, "execute", "fast", self.params)
        return group if self.cfg.variant.redundant else group[:1]

    def _on_stagger(self, kind: str, s: int, v: int, k: int) -> None:
        if kind == "exec":
            msg = self.sign_state_msgs.get(s)
            if msg is not None and s not in self.exec_done and (s > self.ls or s in self.digests):
                self.send(self._exec_targets(s)[k], msg)
            return
        slot = self.slots.get(s)
        if slot is None or slot.committed is not None or self.view != v or self.in_vc:
            return
        if kind == "share" and slot.signed_view == v and slot.share_msg is not None:
            self.send(self._share_targets(s, v)[k], slot.share_msg)
        elif kind == "commit" and slot.commit_msg is not None and slot.commit_msg.view == v:
            self.send(self._commit_targets(s, v)[k], slot.commit_msg)

    def _collector_slot(self, seq: int, view: int) -> Slot | None:
        if not self._in_window(seq):
            return None
        slot = self._slot(seq)
        if slot.committed is not None:
            return None
        if slot.col_view != view:
            slot.col_view = view
            slot.sigma, slot.tau, slot.commits, slot.sent = {}, {}, {}, set()
        return slot

    def on_sign_share(self, src: int, m: SignShare) -> None:
        if not self._view_ok(m.view):
            self._defer(src, m)
            return
        slot = self._collector_slot(m.seq, m.view)
        if slot is None:
            return
        h = m.block_hash
        signer = (m.sigma or m.tau).signer
        if m.sigma is not None:
            slot.sigma.setdefault(h, {}).setdefault(signer, m.sigma)
        if m.tau is not None:
            slot.tau.setdefault(h, {}).setdefault(signer, m.tau)
        p, var = self.params, self.cfg.variant
        sig_set = slot.sigma.get(h, {})
        if var.fast_path and len(sig_set) >= p.sigma_threshold:
            if "fcp" not in slot.sent:
                slot.sent.add("fcp")
                proof = self.keys.combine(SIGMA, sig_set.values())
                self.broadcast(FullCommitProof(m.seq, m.view, proof))
                if "fast-armed" in slot.sent:
                    self.cancel_timer(("fast", m.seq, m.view, h))
            return
        if len(slot.tau.get(h, {})) < p.tau_threshold:
            return
        if var.all_to_all:
            self._local_prepare(slot, m.view, h)
        elif not var.fast_path:
            self._send_prepare(slot, m.view, h)
        elif "fast-armed" not in slot.sent:
            slot.sent.add("fast-armed")
            self.set_timer(("fast", m.seq, m.view, h), self.cfg.fast_timeout)

    def _on_fast_timeout(self, s: int, v: int, h: bytes) -> None:
        slot = self.slots.get(s)
        if slot is None or slot.committed is not None or slot.col_view != v or self.view != v:
            return
        if "fcp" in slot.sent:
            return
        self._send_prepare(slot, v, h)

    def _send_prepare(self, slot: Slot, v: int, h: bytes) -> None:
        if "prepare" in slot.sent:
            return
        slot.sent.add("prepare")
        tau = self.keys.combine(TAU, slot.tau[h].values())
        self.broadcast(Prepare(slot.seq, v, tau))

    def _local_prepare(self, slot: Slot, v: int, h: bytes) -> None:
        if "prepare" in slot.sent:
            return
        if slot.view != v or slot.hash != h:
            return
        slot.sent.add("prepare")
        self._on_prepared(slot, v, self.keys.combine(TAU, slot.tau[h].values()))

    def on_prepare(self, src: int, m: Prepare) -> None:
        if not self._view_ok(m.view):
            self._defer(src, m)
            return
        if not self._in_window(m.seq):
            return
        slot = self._slot(m.seq)
        if slot.committed is not None:
            return
        if slot.prepared is not None and slot.prepared[0] >= m.view:
            return
        h = m.tau.digest
        if slot.view == m.view and slot.hash == h:
            self._on_prepared(slot, m.view, m.tau)
        elif slot.view < m.view:
            slot.waiting_prepare = m
            if h in slot.blocks:
                self._accept(slot, m.view, slot.blocks[h], h)
            else:
                self._fetch(slot, m.view, h, src)

    def _on_prepared(self, slot: Slot, v: int, tau: CombinedSig) -> None:
        slot.prepared = (v, tau, slot.requests)
        slot.waiting_prepare = None
        msg = Commit(slot.seq, v, tau, self._sign(TAU, nested_digest(tau)))
        slot.commit_msg = msg
        self._staggered(msg, self._commit_targets(slot.seq, v), ("commit", slot.seq, v))

    def on_commit(self, src: int, m: Commit) -> None:
        if not self._view_ok(m.view):
            self._defer(src, m)
            return
        slot = self._collector_slot(m.seq, m.view)
        if slot is None:
            return
        shares = slot.commits.setdefault(m.share.digest, {})
        shares.setdefault(m.share.signer, m.share)
        if len(shares) < self.params.tau_threshold or "slow" in slot.sent:
            return
        slot.sent.add("slow")
        tau_tau = self.keys.combine(TAU, shares.values())
        if self.cfg.variant.all_to_all:
            self._deliver_commit(m.seq, m.view, m.tau.digest, tau_tau, m.tau, "slow", src)
        else:
            self.broadcast(FullCommitProofSlow(m.seq, m.view, m.tau, tau_tau))

    def on_full_commit_proof(self, src: int, m: FullCommitProof) -> None:
        self._commit_proof(src, m.seq, m.view, m.sigma.digest, m.sigma, None, "fast")

    def on_full_commit_proof_slow(self, src: int, m: FullCommitProofSlow) -> None:
        self._commit_proof(src, m.seq, m.view, m.tau.digest, m.tau_tau, m.tau, "slow")

    def _commit_proof(self, src, s, v, h, proof, tau, kind) -> None:
        if s <= self.ls:
            return
        if s > self.ls + self.params.window:
            self._note_ahead(src)
            return
        self._deliver_commit(s, v, h, proof, tau, kind, src)

    def _deliver_commit(self, s, v, h, proof, tau, kind, src) -> None:
        slot = self._slot(s)
        requests = slot.blocks.get(h)
        if requests is None:
            if slot.committed is None:
                slot.waiting_commit.append((v, h, proof, tau, kind))
                self._fetch(slot, v, h, src)
            return
        self._commit(slot, v, requests, proof, tau, kind)

    def _commit(self, slot: Slot, v: int, requests: tuple, proof, tau, kind: str) -> None:
        if slot.committed is not None:
            if slot.committed.requests != requests:
                self.events.append(("conflict", slot.seq, content_digest(requests)))
            return
        slot.committed = Committed(v, requests, proof, tau, kind)
        slot.waiting_commit = []
        self.open.discard(slot.seq)
        if slot.seq > self.max_committed:
            self.max_committed = slot.seq
        self.events.append(("commit", slot.seq, v, content_digest(requests), kind))
        self._execute_ready()

    def _resolve_waiting(self, slot: Slot) -> None:
        if slot.waiting_commit and slot.committed is None:
            for v, h, proof, tau, kind in list(slot.waiting_commit):
                if h in slot.blocks:
                    self._commit(slot, v, slot.blocks[h], proof, tau, kind)
                    break
        m = slot.waiting_prepare
        if m is not None and slot.committed is None and slot.view == m.view \
                and slot.hash == m.tau.digest:
            self._on_prepared(slot, m.view, m.tau)

    def _fetch(self, slot: Slot, v: int, h: bytes, src: int) -> None:
        name = ("fetch", slot.seq, v, h)
        if name in slot.sent:
            return
        slot.sent.add(name)
        if 1 <= src <= self.params.n and src != self.id:
            self.send(src, FetchBlock(slot.seq, v, h))
            self.set_timer(name, self.cfg.fetch_timeout)
        else:
            self.broadcast(FetchBlock(slot.seq, v, h))

    def _on_fetch_timeout(self, s: int, v: int, h: bytes) -> None:
        slot = self.slots.get(s)
        if slot is not None and h not in slot.blocks:
            self.broadcast(FetchBlock(s, v, h))

    def on_fetch_block(self, src: int, m: FetchBlock) -> None:
        slot = self.slots.get(m.seq)
        if slot is not None and m.block_hash in slot.blocks and 1 <= src <= self.params.n:
            self.send(src, BlockData(m.seq, m.view, slot.blocks[m.block_hash]))

    def on_block_data(self, src: int, m: BlockData) -> None:
        slot = self.slots.get(m.seq)
        if slot is None:
            return
        h = block_hash(m.seq, m.view, m.requests)
        wanted = any(w[1] == h for w in slot.waiting_commit)
        prep = slot.waiting_prepare
        if prep is not None and prep.tau.digest == h:
            wanted = True
        if not wanted:
            return
        slot.blocks[h] = m.requests
        if prep is not None and prep.tau.digest == h and slot.view < prep.view \
                and slot.committed is None:
            self._accept(slot, prep.view, m.requests, h)
        else:
            self._resolve_waiting(slot)

    # -- execution -----------------------------------------------------------
    def _execute_ready(self) -> None:
        progressed = False
        while True:
            slot = self.slots.get(self.le + 1)
            if slot is None or slot.committed is None:
                break
            self._execute(slot)
            progressed = True
        if progressed:
            self.vc_fail = 0
            if self.progress_armed:
                self.progress_armed = False
                self.cancel_timer(("progress", self.view))

    def _execute(self, slot: Slot) -> None:
        s = slot.seq
        requests = slot.committed.requests
        _, vals = kvstore.execute(self.state, requests, s)
        self.le = s
        d = self.state.history[s].digest
        self.digests[s] = d
        self.exec_records[s] = (requests, vals)
        self.exec_records.pop(s - self.params.window, None)
        fresh = []
        for req, val in zip(requests, vals):
            key = (req.client, req.timestamp)
            self.waiting.pop(key, None)
            self.inflight.discard(key)
            if val != kvstore.DUPLICATE:
                fresh.append((req.client, req.timestamp, val))
                self.reply_cache[req.client] = CachedReply(req.timestamp, s, val)
        self.events.append(("execute", s, d, tuple(fresh)))
        var = self.cfg.variant
        if var.exec_collector:
            msg = SignState(s, self._sign(PI, d))
            self.sign_state_msgs[s] = msg
            self._staggered(msg, self._exec_targets(s), ("exec", s, self.view))
            self._try_exec_proof(s)
        else:
            for req, val in zip(requests, vals):
                if val != kvstore.DUPLICATE:
                    self._send_reply(req.client, self.reply_cache[req.client])
        if s % self.params.checkpoint_period == 0:
            self.snapshots[s] = (kvstore.snapshot(self.state), self.state.kv_root(),
                                 self.state.log_root())
            self.broadcast(CheckpointVote(s, self._sign(PI, d)))
        cert = self.ahead.pop(s, None)
        if cert is not None:
            self._stable(s, cert)

    def on_sign_state(self, src: int, m: SignState) -> None:
        if m.seq == self.ls and m.seq not in self.exec_done and m.seq in self.exec_records:
            # checkpoint certified before our shares arrived: pi(d_s) is the same certificate
            cert = self.stable[3]
            if cert.digest == self.digests.get(m.seq):
                self.exec_done.add(m.seq)
                self._send_acks(m.seq, cert)
            return
        if m.seq > self.ls + self.params.window:
            return
        if m.seq <= self.ls and (m.seq in self.exec_done or m.seq not in self.exec_records):
            return
        self.exec_shares.setdefault(m.seq, {}).setdefault(m.share.signer, m.share)
        self._try_exec_proof(m.seq)

    def _try_exec_proof(self, s: int) -> None:
        if s > self.le or s in self.exec_done or s not in self.exec_records:
            return
        d = self.digests.get(s)
        shares = [sh for sh in self.exec_shares.get(s, {}).values() if sh.digest == d]
        if len(shares) < self.params.pi_threshold:
            return
        self.exec_done.add(s)
        pi = self.keys.combine(PI, shares)
        self.broadcast(FullExecuteProof(s, pi))
        self._send_acks(s, pi)

    def _send_acks(self, s: int, pi: CombinedSig) -> None:
        requests, vals = self.exec_records[s]
        for pos, (req, val) in enumerate(zip(requests, vals), start=1):
            if val == kvstore.DUPLICATE:
                continue
            try:
                proof = kvstore.proof(req, pos, s, self.state, val)
            except kvstore.NoSuchOperation:
                continue
            ack = ExecuteAck(s, pos, val, req, pi, proof, self.view)
            cached = self.reply_cache.get(req.client)
            if cached is not None and cached.timestamp == req.timestamp:
                cached.ack = ack
            self.send(client_addr(req.client), ack)

    def on_full_execute_proof(self, src: int, m: FullExecuteProof) -> None:
        s = m.seq
        if s <= self.ls:
            return
        self.exec_done.add(s)
        if s % self.params.checkpoint_period == 0:
            self._stable(s, m.pi)
        elif s > self.le + self.params.fast_window:
            self._note_ahead(src)

    def on_checkpoint_vote(self, src: int, m: CheckpointVote) -> None:
        s = m.seq
        if s <= self.ls or s % self.params.checkpoint_period:
            return
        votes = self.ckpt_votes.setdefault(s, {}).setdefault(m.share.digest, {})
        votes.setdefault(m.share.signer, m.share)
        if len(votes) == self.params.pi_threshold:
            self._stable(s, self.keys.combine(PI, votes.values()))

    def _stable(self, s: int, cert: CombinedSig) -> None:
        if s <= self.ls:
            return
        if s > self.le:
            self.ahead[s] = cert
            slot = self.slots.get(self.le + 1)
            if s >= self.le + self.params.fast_window and (slot is None or slot.committed is None):
                self._note_ahead(None)
            return
        if self.digests.get(s) != cert.digest:
            self._flag("checkpoint-mismatch")
            return
        snap = self.snapshots.get(s)
        if snap is not None:
            self._advance_ls(s, snap[1], snap[2], cert)

    def _advance_ls(self, s: int, kv_root: bytes, log_root: bytes, cert: CombinedSig) -> None:
        self.ls = s
        self.stable = (s, kv_root, log_root, cert)
        self.events.append(("ls", s))
        # blocks below s whose execution proof has not formed yet still owe client acks
        owed = {k for k in self.exec_records if k < s and k not in self.exec_done}
        for table in (self.slots, self.ckpt_votes, self.snapshots, self.ahead):
            for k in [k for k in table if k < s]:
                del table[k]
        for table in (self.exec_shares, self.sign_state_msgs, self.digests):
            for k in [k for k in table if k < s and k not in owed]:
                del table[k]
        self.slots.pop(s, None)
        self.ckpt_votes.pop(s, None)
        self.exec_shares.pop(s, None)
        self.sign_state_msgs.pop(s, None)
        self.exec_done = {k for k in self.exec_done if k >= s or k in self.exec_records}
        self.open = {k for k in self.open if k > s}
        if self.is_primary() and self.next_seq <= s:
            self.next_seq = s + 1
        for k, slot in self.slots.items():
            if not self._in_window(k):
                self.window_violations += 1

    # -- state transfer ------------------------------------------------------
    def _note_ahead(self, src) -> None:
        if self.transfer_pending:
            return
        self.transfer_pending = True
        self.set_timer(("transfer",), self.cfg.fetch_timeout)
        req = StateRequest(self.le)
        if src is not None and 1 <= src <= self.params.n and src != self.id:
            self.send(src, req)
        else:
            for dst in self.params.replica_ids:
                if dst != self.id:
                    self.send(dst, req)

    def on_state_request(self, src: int, m: StateRequest) -> None:
        if not 1 <= src <= self.params.n or self.le <= m.above:
            return
        if self.ls > m.above:
            seq, state, cert = self.ls, self.snapshots[self.ls][0], self.stable[3]
            start = self.ls
        else:
            seq, state, cert, start = 0, b"", GENESIS_CERT, m.above
        blocks = []
        for k in range(start + 1, self.le + 1):
            slot = self.slots.get(k)
            if slot is None or slot.committed is None:
                break
            c = slot.committed
            blocks.append(CommittedBlock(k, c.view, c.requests, c.proof, c.tau))
        self.send(src, StateSnapshot(seq, state, cert, tuple(blocks)))

    def on_state_snapshot(self, src: int, m: StateSnapshot) -> None:
        self.transfer_pending = False
        self.cancel_timer(("transfer",))
        if m.seq > self.le:
            self._install_snapshot(m)
        for b in m.blocks:
            if b.seq <= self.le or not self._in_window(b.seq):
                continue
            h = block_hash(b.seq, b.view, b.requests)
            if not self._commit_proof_ok(h, b.proof, b.tau):
                self._flag("bad-transfer-block")
                break
            slot = self._slot(b.seq)
            slot.blocks[h] = b.requests
            self._commit(slot, b.view, b.requests, b.proof, b.tau, "transfer")
        self._execute_ready()

    def _commit_proof_ok(self, h: bytes, proof: CombinedSig, tau: CombinedSig | None) -> bool:
        if tau is None:
            return proof.scheme_tag == SIGMA and proof.digest == h \
                and self.keys.verify_combined(proof)
        return (tau.scheme_tag == TAU and tau.digest == h and self.keys.verify_combined(tau)
                and proof.scheme_tag == TAU and proof.digest == nested_digest(tau)
                and self.keys.verify_combined(proof))

    def _install_snapshot(self, m: StateSnapshot) -> None:
        if m.cert.scheme_tag != PI or not self.keys.verify_combined(m.cert):
            self._flag("bad-snapshot")
            return
        try:
            restored = kvstore.restore(m.state)
        except kvstore.MalformedMessage:
            self._flag("bad-snapshot")
            return
        if restored.last_seq != m.seq or restored.window != self.params.window \
                or kvstore.digest(restored) != m.cert.digest:
            self._flag("bad-snapshot")
            return
        self.state = restored
        self.le = m.seq
        self.digests[m.seq] = m.cert.digest
        self.snapshots[m.seq] = (m.state, restored.kv_root(), restored.log_root())
        self.exec_records.clear()
        self.events.append(("install", m.seq, m.cert.digest))
        self._advance_ls(m.seq, restored.kv_root(), restored.log_root(), m.cert)
        self.max_committed = max(self.max_committed, m.seq)

    # -- view change ---------------------------------------------------------
    def _check_progress_timer(self) -> None:
        if self.in_vc:
            return
        waiting = bool(self.waiting) or bool(self.open) or self.max_committed > self.le
        if waiting and not self.progress_armed:
            self.progress_armed = True
            self.set_timer(("progress", self.view), self.cfg.view_timeout)
        elif not waiting and self.progress_armed:
            self.progress_armed = False
            self.cancel_timer(("progress", self.view))

    def _on_progress_timeout(self, view: int) -> None:
        self.progress_armed = False
        if view != self.view or self.in_vc:
            return
        self._complain(view)
        self._start_view_change(view + 1)

    def _complain(self, view: int) -> None:
        if view in self.complained:
            return
        self.complained.add(view)
        sig = self._sign(NODE, timeout_digest(view, self.id))
        self.broadcast(Complaint(view, self.id, TimeoutEvidence(sig)))

    def _on_equivocation(self, first: PrePrepare, second: PrePrepare) -> None:
        self._flag("equivocation")
        v = first.view
        if v in self.complained or v != self.view or self.in_vc:
            return
        self.complained.add(v)
        self.broadcast(Complaint(v, self.id, EquivocationEvidence(first, second)))
        self._start_view_change(v + 1)

    def on_complaint(self, src: int, m: Complaint) -> None:
        if type(m.evidence) is EquivocationEvidence:
            if m.view == self.view and not self.in_vc:
                self._on_equivocation(m.evidence.first, m.evidence.second)
            return
        if m.view < self.view and self.new_view is not None and 1 <= src <= self.params.n:
            self.send(src, self.new_view)
            return
        self._vote(m.view + 1, m.sender)

    def _vote(self, target: int, sender: int) -> None:
        voters = self.vc_votes.setdefault(target, set())
        voters.add(sender)
        if len(voters) < self.params.f + 1 or target <= self.view:
            return
        if self.in_vc and self.vc_target >= target:
            return
        self._complain(target - 1)
        self._start_view_change(target)

    def _start_view_change(self, target: int) -> None:
        if target <= self.view or (self.in_vc and target <= self.vc_target):
            return
        if self.in_vc:
            self.cancel_timer(("vc-wait", self.vc_target))
        elif self.progress_armed:
            self.progress_armed = False
            self.cancel_timer(("progress", self.view))
        self.in_vc = True
        self.vc_target = target
        self.events.append(("view-change", target))
        self.send(primary_of(target, self.params), self.build_view_change(target))
        self.set_timer(("vc-wait", target), self.cfg.view_timeout * (2 ** min(self.vc_fail, 16)))

    def build_view_change(self, target: int) -> ViewChange:
        ls, kv_root, log_root, cert = self.stable
        entries = []
        for j in range(ls + 1, ls + self.params.window + 1):
            slot = self.slots.get(j)
            entries.append(EMPTY_ENTRY if slot is None else self._entry(slot))
        vc = ViewChange(target, self.id, ls, kv_root, log_root, cert, tuple(entries), _UNSIGNED)
        return sign_message(self.keys, self.id, vc)

    @staticmethod
    def _entry(slot: Slot) -> ViewChangeSlotEntry:
        c = slot.committed
        lm, fm = NoCommit(), NoPrePrepare()
        if c is not None and c.tau is not None:
            lm = TauTau(c.view, c.tau, c.proof, c.requests)
        elif slot.prepared is not None:
            v, tau, reqs = slot.prepared
            lm = TauWithView(v, tau, reqs)
        if c is not None and c.tau is None:
            fm = Sigma(c.view, c.proof, c.requests)
        elif slot.my_share is not None:
            v, share, reqs = slot.my_share
            fm = SigmaShareWithView(v, share, reqs)
        return ViewChangeSlotEntry(lm, fm)

    def ls_ok(self, vc: ViewChange) -> bool:
        if vc.ls == 0:
            return vc.ls_cert == GENESIS_CERT and vc.ls_kv_root == GENESIS_KV_ROOT \
                and vc.ls_log_root == GENESIS_LOG_ROOT
        cert = vc.ls_cert
        return (cert.scheme_tag == PI and self.keys.verify_combined(cert)
                and kvstore.state_digest(vc.ls, vc.ls_kv_root, vc.ls_log_root) == cert.digest)

    def on_view_change(self, src: int, m: ViewChange) -> None:
        target = m.view
        if target <= self.view and not (self.in_vc and target > self.view):
            if self.new_view is not None and 1 <= src <= self.params.n:
                self.send(src, self.new_view)
            return
        self._vote(target, m.sender)
        if primary_of(target, self.params) != self.id or target in self.nv_sent:
            return
        if not self.ls_ok(m):
            self._flag("bad-view-change")
            return
        got = self.vc_msgs.setdefault(target, {})
        got.setdefault(m.sender, m)
        if len(got) >= self.params.view_change_quorum:
            self.nv_sent.add(target)
            chosen = [got[k] for k in sorted(got)][: self.params.view_change_quorum]
            self.broadcast(NewView(target, tuple(chosen)))
            for t in [t for t in self.vc_msgs if t <= target]:
                del self.vc_msgs[t]

    def on_new_view(self, src: int, m: NewView) -> None:
        if m.view <= self.view:
            return
        if not all(self.ls_ok(vc) for vc in m.changes):
            self._flag("bad-new-view")
            return
        self._install_view(m)

    def _install_view(self, nv: NewView) -> None:
        v = nv.view
        best = max(nv.changes, key=lambda vc: (vc.ls, vc.sender))
        ls_new = best.ls
        decisions = self.decide_slots(nv, ls_new)
        if self.in_vc:
            self.cancel_timer(("vc-wait", self.vc_target))
        if self.progress_armed:
            self.progress_armed = False
            self.cancel_timer(("progress", self.view))
        self.view = v
        self.in_vc = False
        self.vc_target = v
        self.new_view = nv
        self.open.clear()
        self.inflight.clear()
        self.batch_due = False
        for t in [t for t in self.vc_votes if t <= v]:
            del self.vc_votes[t]
        self.events.append(("new-view", v))
        if ls_new > self.le:
            if best.sender != self.id:
                self._note_ahead(best.sender)
        hi = max(decisions, default=ls_new)
        for j in range(max(ls_new, self.ls) + 1, hi + 1):
            if not self._in_window(j):
                continue
            slot = self._slot(j)
            outcome = decisions.get(j)
            if outcome is not None and outcome[0] == "decide":
                _, reqs, (ev_view, proof, tau) = outcome
                slot.blocks[block_hash(j, ev_view, reqs)] = reqs
                self._commit(slot, ev_view, reqs, proof, tau, "decided")
                continue
            reqs = () if outcome is None else outcome[1]
            h = block_hash(j, v, reqs)
            if slot.committed is not None:
                if slot.committed.requests != reqs:
                    self.events.append(("conflict", j, content_digest(reqs)))
                    continue
                slot.view, slot.requests, slot.hash = v, reqs, h
                slot.blocks[h] = reqs
                self._sign_block(slot)
            else:
                self._accept(slot, v, reqs, h)
        if self.is_primary():
            self.next_seq = max(hi, ls_new, self.le, self.ls) + 1
            for key in list(self.pending_keys):
                if key[1] <= self.state.sessions.get(key[0], 0):
                    self.pending_keys.discard(key)
            self.pending = [r for r in self.pending if (r.client, r.timestamp) in self.pending_keys]
            for req in self.waiting.values():
                key = (req.client, req.timestamp)
                if key not in self.pending_keys:
                    self.pending.append(req)
                    self.pending_keys.add(key)
        else:
            for req in self.waiting.values():
                self.send(self.primary, Request(req, 0))
        held = self.deferred.pop(v, [])
        for t in [t for t in self.deferred if t <= v]:
            del self.deferred[t]
        for src, msg in held:
            self._handlers[type(msg)](src, msg)

    def decide_slots(self, nv: NewView, ls_new: int) -> dict:
        """Per-slot outcomes for (ls_new, ls_new + window] that are not Noop.

        Values are ("decide", requests, (view, proof, tau)) or ("adopt", requests).
        Slots above the highest non-Noop slot are left for fresh proposals.
        """
        p = self.params
        out = {}
        for j in range(ls_new + 1, ls_new + p.window + 1):
            entries = []
            blocks: dict = {}
            proofs: dict = {}
            for vc in nv.changes:
                idx = j - vc.ls - 1
                if 0 <= idx < len(vc.entries):
                    e = vc.entries[idx]
                    if e is EMPTY_ENTRY or (type(e.lm) is NoCommit and type(e.fm) is NoPrePrepare):
                        entries.append((None, None))
                    else:
                        entries.append(self._normalize(j, e, vc.sender, nv.view, blocks, proofs))
                else:
                    entries.append((None, None))
            if all(lm is None and fm is None for lm, fm in entries):
                continue
            res = choose_safe_value(entries, p.f, p.c)
            if type(res) is Decide:
                out[j] = ("decide", blocks[res.value], proofs[res.value])
            elif type(res) is Adopt:
                out[j] = ("adopt", blocks[res.value])
        if out:
            hi = max(out)
            for j in range(ls_new + 1, hi):
                out.setdefault(j, ("adopt", ()))
        return out

    def _normalize(self, j, e, sender, target, blocks, proofs) -> tuple:
        keys = self.keys
        lm = fm = None
        x = e.lm
        if type(x) is TauTau:
            h = block_hash(j, x.view, x.requests)
            if x.view < target and self._commit_proof_ok(h, x.tau_tau, x.tau):
                val = content_digest(x.requests)
                blocks[val] = x.requests
                proofs.setdefault(val, (x.view, x.tau_tau, x.tau))
                lm = ("tautau", val)
        elif type(x) is TauWithView:
            t = x.tau
            if x.view < target and t.scheme_tag == TAU and t.digest == block_hash(j, x.view, x.requests) \
                    and keys.verify_combined(t):
                val = content_digest(x.requests)
                blocks[val] = x.requests
                lm = ("tau", x.view, val)
        y = e.fm
        if type(y) is Sigma:
            h = block_hash(j, y.view, y.requests)
            if y.view < target and self._commit_proof_ok(h, y.sigma, None):
                val = content_digest(y.requests)
                blocks[val] = y.requests
                proofs.setdefault(val, (y.view, y.sigma, None))
                fm = ("sigma", val)
        elif type(y) is SigmaShareWithView:
            sh = y.share
            if y.view < target and sh.scheme_tag == SIGMA and sh.signer == sender \
                    and sh.digest == block_hash(j, y.view, y.requests) and keys.verify_share(sh):
                val = content_digest(y.requests)
                blocks[val] = y.requests
                fm = ("share", y.view, val)
        return lm, fm

    def _sync_view(self, view: int, src: int) -> None:
        """Ask a replica already in a higher view for the NewView we missed."""
        if view in self.synced or self.in_vc or not 1 <= src <= self.params.n:
            return
        self.synced.add(view)
        sig = self._sign(NODE, timeout_digest(self.view, self.id))
        self.send(src, Complaint(self.view, self.id, TimeoutEvidence(sig)))

    # -- introspection -------------------------------------------------------
    def summary(self) -> dict:
        return {
            "id": self.id,
            "view": self.view,
            "ls": self.ls,
            "le": self.le,
            "log": len(self.slots),
            "max_log": self.max_log,
            "window_violations": self.window_violations,
            "flags": dict(sorted(self.flags.items())),
        }
