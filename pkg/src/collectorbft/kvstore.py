"""Authenticated key-value store: the replicated deterministic service.

The state digest commits to three things at once::

    d = H("state" || last_seq || kv_root || log_root)

``kv_root`` covers two sorted Merkle trees: the (key, value) data leaves
sorted by H(key), and a session table holding the last executed
timestamp of every client, which makes duplicate suppression part of the
replicated state.
``log_root`` is a Merkle tree over the last ``window`` executed blocks,
each leaf binding a sequence number to the root of that block's
per-request tree, whose l-th leaf binds (l, H(o), H(val)). A single
digest therefore authenticates both the current key-value contents and
the position and result of every recently executed operation.
"""

from __future__ import annotations

import hashlib
import struct
from bisect import bisect_left
from dataclasses import dataclass, field

from . import merkle
from .codec import BYTES, DIGEST, U32, U64, List, MalformedMessage, Reader, Struct, encode_value
from .merkle import KvWitness, OpProof, QueryProof
from .messages import ClientRequest, encode_request

PUT = 1
GET = 2
OK = b"OK"
ABSENT = b"\x00"
BAD_OP = b"ERR"
DUPLICATE = b"DUP"

_sha = hashlib.sha256


class NoSuchOperation(LookupError):
    pass


def encode_put(key: bytes, value: bytes) -> bytes:
    return bytes([PUT]) + encode_value(BYTES, key) + encode_value(BYTES, value)


def encode_get(key: bytes) -> bytes:
    return bytes([GET]) + encode_value(BYTES, key)


def decode_op(op: bytes):
    """(PUT, key, value) | (GET, key, None); raises MalformedMessage."""
    if not op:
        raise MalformedMessage("empty op")
    r = Reader(op[1:])
    if op[0] == PUT:
        key, value = BYTES.dec(r), BYTES.dec(r)
    elif op[0] == GET:
        key, value = BYTES.dec(r), None
    else:
        raise MalformedMessage(f"unknown op tag {op[0]}")
    if r.pos != len(r.data):
        raise MalformedMessage("trailing bytes in op")
    return op[0], key, value


def present(value: bytes) -> bytes:
    return b"\x01" + value


def kv_leaf(key: bytes, value: bytes) -> bytes:
    return merkle.leaf_hash(b"kv" + encode_value(BYTES, key) + encode_value(BYTES, value))


def op_leaf(pos: int, record: bytes, val: bytes) -> bytes:
    return merkle.leaf_hash(b"op" + struct.pack("<I", pos) + _sha(record).digest() + _sha(val).digest())


def log_leaf(seq: int, block_root: bytes) -> bytes:
    return merkle.leaf_hash(b"blk" + struct.pack("<Q", seq) + block_root)


def session_leaf(client: int, timestamp: int) -> bytes:
    return merkle.leaf_hash(b"ses" + struct.pack("<IQ", client, timestamp))


def combine_kv(data_root: bytes, session_root: bytes) -> bytes:
    return _sha(b"kv" + data_root + session_root).digest()


def state_digest(last_seq: int, kv_root: bytes, log_root: bytes) -> bytes:
    return _sha(b"state" + struct.pack("<Q", last_seq) + kv_root + log_root).digest()


@dataclass
class ExecutionRecord:
    """What an executed block needs to later serve proofs against D_s."""

    seq: int
    digest: bytes
    kv_root: bytes
    records: list  # encoded requests, position order
    vals: list
    block_levels: list
    log_levels: list
    log_index: int
    log_count: int


@dataclass
class ServiceState:
    window: int = 256
    kv: dict = field(default_factory=dict)
    block_log: dict = field(default_factory=dict)  # seq -> block root
    last_seq: int = 0
    sessions: dict = field(default_factory=dict)  # client -> last executed timestamp
    history: dict = field(default_factory=dict, repr=False)  # seq -> ExecutionRecord
    _kv_root: bytes | None = field(default=None, repr=False)
    _kv_order: list | None = field(default=None, repr=False)

    def copy(self) -> "ServiceState":
        return ServiceState(self.window, dict(self.kv), dict(self.block_log), self.last_seq,
                            dict(self.sessions))

    # -- Merkle views ------------------------------------------------------
    def _sorted_kv(self) -> list:
        if self._kv_order is None:
            self._kv_order = sorted(self.kv, key=lambda k: _sha(k).digest())
        return self._kv_order

    def data_root(self) -> bytes:
        if self._kv_root is None:
            order = self._sorted_kv()
            self._kv_root = merkle.root_of([kv_leaf(k, self.kv[k]) for k in order])
        return self._kv_root

    def session_root(self) -> bytes:
        return merkle.root_of([session_leaf(c, self.sessions[c]) for c in sorted(self.sessions)])

    def kv_root(self) -> bytes:
        return combine_kv(self.data_root(), self.session_root())

    def _log_leaves(self) -> tuple[list, list]:
        seqs = sorted(self.block_log)
        return seqs, [log_leaf(s, self.block_log[s]) for s in seqs]

    def log_root(self) -> bytes:
        return merkle.root_of(self._log_leaves()[1])


def digest(state: ServiceState) -> bytes:
    return state_digest(state.last_seq, state.kv_root(), state.log_root())


def _apply(state: ServiceState, op: bytes) -> bytes:
    try:
        kind, key, value = decode_op(op)
    except MalformedMessage:
        return BAD_OP
    if kind == PUT:
        if state.kv.get(key) != value:
            if key not in state.kv:
                state._kv_order = None
            state.kv[key] = value
            state._kv_root = None
        return OK
    got = state.kv.get(key)
    return ABSENT if got is None else present(got)


def execute(state: ServiceState, requests, seq: int):
    """Apply block `seq` in place; returns (state, vals).

    A request whose timestamp does not exceed its client's session entry
    was already executed; it stays in the block tree with val=DUP and does
    not touch kv. An empty request list is the null block.
    """
    if seq != state.last_seq + 1:
        raise ValueError(f"execute out of order: at {state.last_seq}, got {seq}")
    records = [encode_request(r) for r in requests]
    vals = []
    for req in requests:
        if req.timestamp <= state.sessions.get(req.client, 0):
            vals.append(DUPLICATE)
            continue
        state.sessions[req.client] = req.timestamp
        vals.append(_apply(state, req.op))
    leaves = [op_leaf(i + 1, rec, val) for i, (rec, val) in enumerate(zip(records, vals))]
    block_levels = merkle.build_levels(leaves)
    block_root = merkle.bound_root(len(leaves), block_levels[-1][0])
    state.block_log[seq] = block_root
    for old in [s for s in state.block_log if s <= seq - state.window]:
        del state.block_log[old]
    state.last_seq = seq
    seqs, log_leaves = state._log_leaves()
    log_levels = merkle.build_levels(log_leaves)
    log_root = merkle.bound_root(len(log_leaves), log_levels[-1][0])
    kv_root = state.kv_root()
    d = state_digest(seq, kv_root, log_root)
    state.history[seq] = ExecutionRecord(
        seq, d, kv_root, records, vals, block_levels, log_levels, seqs.index(seq), len(seqs)
    )
    for old in [s for s in state.history if s <= seq - state.window]:
        del state.history[old]
    return state, vals


def query(state: ServiceState, q: bytes) -> bytes:
    try:
        kind, key, _ = decode_op(q)
    except MalformedMessage:
        return BAD_OP
    if kind != GET:
        return BAD_OP
    got = state.kv.get(key)
    return ABSENT if got is None else present(got)


def proof(o: ClientRequest | bytes, l: int, s: int, state: ServiceState, val: bytes) -> OpProof:
    """Proof that `o` ran as the l-th (1-based) request of block s with result val."""
    rec = state.history.get(s)
    record = o if isinstance(o, bytes) else encode_request(o)
    if rec is None or not 1 <= l <= len(rec.records):
        raise NoSuchOperation(f"no retained operation at seq {s} position {l}")
    if rec.records[l - 1] != record or rec.vals[l - 1] != val:
        raise NoSuchOperation(f"operation at seq {s} position {l} does not match")
    return OpProof(
        kv_root=rec.kv_root,
        block_count=len(rec.records),
        block_path=tuple(merkle.path_of(rec.block_levels, l - 1)),
        log_index=rec.log_index,
        log_count=rec.log_count,
        log_path=tuple(merkle.path_of(rec.log_levels, rec.log_index)),
    )


def verify(d: bytes, o: ClientRequest | bytes, val: bytes, s: int, l: int, p) -> bool:
    """Pure recomputation of the op proof against the state digest d."""
    try:
        if type(p) is not OpProof or not isinstance(val, bytes):
            return False
        record = o if isinstance(o, bytes) else encode_request(o)
        if l < 1:
            return False
        broot = merkle.root_from_path(op_leaf(l, record, val), l - 1, p.block_count, p.block_path)
        if broot is None:
            return False
        lroot = merkle.root_from_path(log_leaf(s, broot), p.log_index, p.log_count, p.log_path)
        if lroot is None:
            return False
        return state_digest(s, p.kv_root, lroot) == d
    except (TypeError, AttributeError, struct.error, OverflowError):
        return False


def _witness(state: ServiceState, levels, order, idx) -> KvWitness:
    key = order[idx]
    return KvWitness(idx, key, state.kv[key], tuple(merkle.path_of(levels, idx)))


def query_proof(q: bytes, s: int, state: ServiceState, val: bytes) -> QueryProof:
    """Proof that query q evaluates to val at D_s; s must be the current seq."""
    if s != state.last_seq:
        raise NoSuchOperation(f"state is at seq {state.last_seq}, not {s}")
    kind, key, _ = decode_op(q)
    if query(state, q) != val:
        raise NoSuchOperation("value does not match state")
    order = state._sorted_kv()
    levels = merkle.build_levels([kv_leaf(k, state.kv[k]) for k in order])
    hkeys = [_sha(k).digest() for k in order]
    target = _sha(key).digest()
    i = bisect_left(hkeys, target)
    hit = left = right = None
    if i < len(order) and order[i] == key:
        hit = _witness(state, levels, order, i)
    else:
        if i > 0:
            left = _witness(state, levels, order, i - 1)
        if i < len(order):
            right = _witness(state, levels, order, i)
    return QueryProof(state.log_root(), state.session_root(), len(order), hit, left, right)


def verify_query(d: bytes, q: bytes, val: bytes, s: int, p) -> bool:
    try:
        if type(p) is not QueryProof:
            return False
        kind, key, _ = decode_op(q)
        if kind != GET:
            return False
        count = p.kv_count

        def root_via(w):
            return merkle.root_from_path(kv_leaf(w.key, w.value), w.index, count, w.path)

        if p.hit is not None:
            if p.left is not None or p.right is not None:
                return False
            if p.hit.key != key or val != present(p.hit.value):
                return False
            kv_root = root_via(p.hit)
        else:
            if val != ABSENT:
                return False
            target = _sha(key).digest()
            roots = set()
            if count == 0:
                if p.left is not None or p.right is not None:
                    return False
                roots.add(merkle.root_of([]))
            else:
                if p.left is None and p.right is None:
                    return False
                if p.left is not None:
                    if not _sha(p.left.key).digest() < target:
                        return False
                    if p.right is None and p.left.index != count - 1:
                        return False
                    roots.add(root_via(p.left))
                if p.right is not None:
                    if not _sha(p.right.key).digest() > target:
                        return False
                    if p.left is None and p.right.index != 0:
                        return False
                    if p.left is not None and p.right.index != p.left.index + 1:
                        return False
                    roots.add(root_via(p.right))
            if len(roots) != 1:
                return False
            kv_root = roots.pop()
        if kv_root is None:
            return False
        return state_digest(s, combine_kv(kv_root, p.session_root), p.log_root) == d
    except (TypeError, AttributeError, MalformedMessage, struct.error, OverflowError):
        return False


# -- snapshots for state transfer ------------------------------------------

@dataclass(frozen=True)
class _Pair:
    a: bytes
    b: bytes


@dataclass(frozen=True)
class _LogItem:
    seq: int
    root: bytes


@dataclass(frozen=True)
class _Session:
    client: int
    timestamp: int


_Pair.FIELDS = (("a", BYTES), ("b", BYTES))
_LogItem.FIELDS = (("seq", U64), ("root", DIGEST))
_Session.FIELDS = (("client", U32), ("timestamp", U64))
_PAIRS, _LOG, _SESSIONS = List(Struct(_Pair)), List(Struct(_LogItem)), List(Struct(_Session))


def snapshot(state: ServiceState) -> bytes:
    """Canonical serialization: last_seq, window, then kv, block log and sessions sorted."""
    out: list = []
    U64.enc(out, state.last_seq)
    U32.enc(out, state.window)
    _PAIRS.enc(out, [_Pair(k, state.kv[k]) for k in sorted(state.kv)])
    _LOG.enc(out, [_LogItem(s, state.block_log[s]) for s in sorted(state.block_log)])
    _SESSIONS.enc(out, [_Session(c, state.sessions[c]) for c in sorted(state.sessions)])
    return b"".join(out)


def restore(data: bytes) -> ServiceState:
    if not isinstance(data, (bytes, bytearray)):
        raise MalformedMessage("expected bytes")
    r = Reader(bytes(data))
    try:
        last_seq, window = U64.dec(r), U32.dec(r)
        pairs, items, sessions = _PAIRS.dec(r), _LOG.dec(r), _SESSIONS.dec(r)
    except (struct.error, ValueError) as exc:
        raise MalformedMessage(str(exc)) from exc
    if r.pos != len(r.data):
        raise MalformedMessage("trailing bytes in snapshot")
    keys = [p.a for p in pairs]
    seqs = [i.seq for i in items]
    clients = [x.client for x in sessions]
    if any(x != sorted(set(x)) for x in (keys, seqs, clients)):
        raise MalformedMessage("snapshot is not canonical")
    if window < 4 or window % 4:
        raise MalformedMessage("bad window in snapshot")
    return ServiceState(window, {p.a: p.b for p in pairs}, {i.seq: i.root for i in items},
                        last_seq, {x.client: x.timestamp for x in sessions})


GENESIS_DIGEST = digest(ServiceState())
