"""Protocol messages, their canonical encoding, and stateless validation.

The thirteen protocol messages carry wire tags 1-13. Client traffic,
block retrieval and state transfer use tags 14-19. Every message encodes
as one tag byte followed by its fields; see ``docs/wire-format.md``.
"""

from __future__ import annotations

import enum
import functools
import hashlib
from dataclasses import dataclass, fields as dc_fields
from typing import Callable

from .codec import (
    BYTES,
    COMBINED,
    DIGEST,
    FLAG,
    SHARE,
    U8,
    U32,
    U64,
    List,
    MalformedMessage,
    Opt,
    Struct,
    Union,
    decode_value,
    encode_value,
)
from .crypto import (
    CLIENT,
    NODE,
    PI,
    SIGMA,
    TAU,
    CombinedSig,
    KeyRing,
    SigShare,
    nested_digest,
    protocol_hash,
)
from .merkle import PROOF

__all__ = ["MalformedMessage"]


@dataclass(frozen=True, slots=True)
class ClientRequest:
    op: bytes
    timestamp: int
    client: int
    auth: SigShare

    @staticmethod
    def auth_digest(op: bytes, timestamp: int, client: int) -> bytes:
        return hashlib.sha256(
            b"request|" + encode_value(BYTES, op) + encode_value(U64, timestamp)
            + encode_value(U32, client)
        ).digest()


ClientRequest.FIELDS = (("op", BYTES), ("timestamp", U64), ("client", U32), ("auth", SHARE))
REQUEST = Struct(ClientRequest)
REQUESTS = List(REQUEST)


def make_request(keys: KeyRing, client: int, timestamp: int, op: bytes) -> ClientRequest:
    digest = ClientRequest.auth_digest(op, timestamp, client)
    return ClientRequest(op, timestamp, client, keys.sign(CLIENT, client, digest))


def encode_request(req: ClientRequest) -> bytes:
    return encode_value(REQUEST, req)


@functools.lru_cache(maxsize=8192)
def _encode_request_tuple(requests: tuple) -> bytes:
    return encode_value(REQUESTS, requests)


def encode_requests(requests) -> bytes:
    # memoized: block hashing re-encodes the same request tuple many times
    return _encode_request_tuple(tuple(requests))


def block_hash(seq: int, view: int, requests) -> bytes:
    return protocol_hash(seq, view, encode_requests(requests))


def content_digest(requests) -> bytes:
    """View-independent identity of a block's contents."""
    return hashlib.sha256(b"content|" + encode_requests(requests)).digest()


# -- protocol messages (tags 1-13) -----------------------------------------

@dataclass(frozen=True, slots=True)
class PrePrepare:
    seq: int
    view: int
    requests: tuple
    sig: SigShare  # primary's node signature over the block hash


@dataclass(frozen=True, slots=True)
class SignShare:
    seq: int
    view: int
    block_hash: bytes
    sigma: SigShare | None
    tau: SigShare | None


@dataclass(frozen=True, slots=True)
class FullCommitProof:
    seq: int
    view: int
    sigma: CombinedSig


@dataclass(frozen=True, slots=True)
class Prepare:
    seq: int
    view: int
    tau: CombinedSig


@dataclass(frozen=True, slots=True)
class Commit:
    seq: int
    view: int
    tau: CombinedSig
    share: SigShare  # tau_i over the nested digest of tau


@dataclass(frozen=True, slots=True)
class FullCommitProofSlow:
    seq: int
    view: int
    tau: CombinedSig
    tau_tau: CombinedSig


@dataclass(frozen=True, slots=True)
class SignState:
    seq: int
    share: SigShare


@dataclass(frozen=True, slots=True)
class FullExecuteProof:
    seq: int
    pi: CombinedSig


@dataclass(frozen=True, slots=True)
class ExecuteAck:
    seq: int
    pos: int
    val: bytes
    op: ClientRequest
    pi: CombinedSig
    proof: object
    view: int


# view-change slot evidence


@dataclass(frozen=True, slots=True)
class NoCommit:
    pass


@dataclass(frozen=True, slots=True)
class TauTau:
    view: int
    tau: CombinedSig
    tau_tau: CombinedSig
    requests: tuple


@dataclass(frozen=True, slots=True)
class TauWithView:
    view: int
    tau: CombinedSig
    requests: tuple


@dataclass(frozen=True, slots=True)
class NoPrePrepare:
    pass


@dataclass(frozen=True, slots=True)
class Sigma:
    view: int
    sigma: CombinedSig
    requests: tuple


@dataclass(frozen=True, slots=True)
class SigmaShareWithView:
    view: int
    share: SigShare
    requests: tuple


@dataclass(frozen=True, slots=True)
class ViewChangeSlotEntry:
    lm: object
    fm: object


EMPTY_ENTRY = ViewChangeSlotEntry(NoCommit(), NoPrePrepare())


@dataclass(frozen=True, slots=True)
class ViewChange:
    view: int  # the view being moved to
    sender: int
    ls: int
    ls_kv_root: bytes  # opening of the certified digest at ls
    ls_log_root: bytes
    ls_cert: CombinedSig
    entries: tuple  # slots ls+1 .. ls+window, in order
    sig: SigShare


@dataclass(frozen=True, slots=True)
class NewView:
    view: int
    changes: tuple


@dataclass(frozen=True, slots=True)
class CheckpointVote:
    seq: int
    share: SigShare


@dataclass(frozen=True, slots=True)
class TimeoutEvidence:
    sig: SigShare


@dataclass(frozen=True, slots=True)
class EquivocationEvidence:
    first: PrePrepare
    second: PrePrepare


@dataclass(frozen=True, slots=True)
class Complaint:
    view: int
    sender: int
    evidence: object


# -- auxiliary messages (tags 14-19) ---------------------------------------

@dataclass(frozen=True, slots=True)
class Request:
    request: ClientRequest
    retry: int


@dataclass(frozen=True, slots=True)
class Reply:
    view: int
    seq: int
    client: int
    timestamp: int
    val: bytes
    sig: SigShare


@dataclass(frozen=True, slots=True)
class FetchBlock:
    seq: int
    view: int
    block_hash: bytes


@dataclass(frozen=True, slots=True)
class BlockData:
    seq: int
    view: int
    requests: tuple


@dataclass(frozen=True, slots=True)
class CommittedBlock:
    seq: int
    view: int
    requests: tuple
    proof: CombinedSig  # sigma(h) for fast commits, tau(tau(h)) for slow ones
    tau: CombinedSig | None


@dataclass(frozen=True, slots=True)
class StateRequest:
    above: int


@dataclass(frozen=True, slots=True)
class StateSnapshot:
    seq: int
    state: bytes
    cert: CombinedSig
    blocks: tuple


PrePrepare.FIELDS = (("seq", U64), ("view", U64), ("requests", REQUESTS), ("sig", SHARE))
SignShare.FIELDS = (
    ("seq", U64), ("view", U64), ("block_hash", DIGEST),
    ("sigma", Opt(SHARE)), ("tau", Opt(SHARE)),
)
FullCommitProof.FIELDS = (("seq", U64), ("view", U64), ("sigma", COMBINED))
Prepare.FIELDS = (("seq", U64), ("view", U64), ("tau", COMBINED))
Commit.FIELDS = (("seq", U64), ("view", U64), ("tau", COMBINED), ("share", SHARE))
FullCommitProofSlow.FIELDS = (("seq", U64), ("view", U64), ("tau", COMBINED), ("tau_tau", COMBINED))
SignState.FIELDS = (("seq", U64), ("share", SHARE))
FullExecuteProof.FIELDS = (("seq", U64), ("pi", COMBINED))
ExecuteAck.FIELDS = (
    ("seq", U64), ("pos", U32), ("val", BYTES), ("op", REQUEST),
    ("pi", COMBINED), ("proof", PROOF), ("view", U64),
)
NoCommit.FIELDS = ()
NoPrePrepare.FIELDS = ()
TauTau.FIELDS = (("view", U64), ("tau", COMBINED), ("tau_tau", COMBINED), ("requests", REQUESTS))
TauWithView.FIELDS = (("view", U64), ("tau", COMBINED), ("requests", REQUESTS))
Sigma.FIELDS = (("view", U64), ("sigma", COMBINED), ("requests", REQUESTS))
SigmaShareWithView.FIELDS = (("view", U64), ("share", SHARE), ("requests", REQUESTS))
LM = Union({0: NoCommit, 1: TauTau, 2: TauWithView})
FM = Union({0: NoPrePrepare, 1: Sigma, 2: SigmaShareWithView})
ViewChangeSlotEntry.FIELDS = (("lm", LM), ("fm", FM))
ViewChange.FIELDS = (
    ("view", U64), ("sender", U32), ("ls", U64),
    ("ls_kv_root", DIGEST), ("ls_log_root", DIGEST), ("ls_cert", COMBINED),
    ("entries", List(Struct(ViewChangeSlotEntry))), ("sig", SHARE),
)
NewView.FIELDS = (("view", U64), ("changes", List(Struct(ViewChange))))
CheckpointVote.FIELDS = (("seq", U64), ("share", SHARE))
TimeoutEvidence.FIELDS = (("sig", SHARE),)
EquivocationEvidence.FIELDS = (("first", Struct(PrePrepare)), ("second", Struct(PrePrepare)))
Complaint.FIELDS = (
    ("view", U64), ("sender", U32),
    ("evidence", Union({1: TimeoutEvidence, 2: EquivocationEvidence})),
)
Request.FIELDS = (("request", REQUEST), ("retry", FLAG))
Reply.FIELDS = (
    ("view", U64), ("seq", U64), ("client", U32), ("timestamp", U64),
    ("val", BYTES), ("sig", SHARE),
)
FetchBlock.FIELDS = (("seq", U64), ("view", U64), ("block_hash", DIGEST))
BlockData.FIELDS = (("seq", U64), ("view", U64), ("requests", REQUESTS))
CommittedBlock.FIELDS = (
    ("seq", U64), ("view", U64), ("requests", REQUESTS),
    ("proof", COMBINED), ("tau", Opt(COMBINED)),
)
StateRequest.FIELDS = (("above", U64),)
StateSnapshot.FIELDS = (
    ("seq", U64), ("state", BYTES), ("cert", COMBINED),
    ("blocks", List(Struct(CommittedBlock))),
)

WIRE_TAGS: dict[int, type] = {
    1: PrePrepare,
    2: SignShare,
    3: FullCommitProof,
    4: Prepare,
    5: Commit,
    6: FullCommitProofSlow,
    7: SignState,
    8: FullExecuteProof,
    9: ExecuteAck,
    10: ViewChange,
    11: NewView,
    12: CheckpointVote,
    13: Complaint,
    14: Request,
    15: Reply,
    16: FetchBlock,
    17: BlockData,
    18: StateRequest,
    19: StateSnapshot,
}
PROTOCOL_MESSAGES = tuple(WIRE_TAGS[t] for t in range(1, 14))
MESSAGE = Union(WIRE_TAGS)

# short names used in traces and metrics
KIND_NAMES = {
    PrePrepare: "pre-prepare",
    SignShare: "sign-share",
    FullCommitProof: "full-commit-proof",
    Prepare: "prepare",
    Commit: "commit",
    FullCommitProofSlow: "full-commit-proof-slow",
    SignState: "sign-state",
    FullExecuteProof: "full-execute-proof",
    ExecuteAck: "execute-ack",
    ViewChange: "view-change",
    NewView: "new-view",
    CheckpointVote: "checkpoint",
    Complaint: "complaint",
    Request: "request",
    Reply: "reply",
    FetchBlock: "fetch-block",
    BlockData: "block-data",
    StateRequest: "state-request",
    StateSnapshot: "state-snapshot",
}


def encode(msg) -> bytes:
    return encode_value(MESSAGE, msg)


def decode(data: bytes):
    return decode_value(MESSAGE, data)


def accounted_size(msg) -> int:
    return MESSAGE.size(msg)


def _body_fields(msg):
    return [(name, codec) for name, codec in type(msg).FIELDS if name != "sig"]


def signing_digest(msg) -> bytes:
    """Digest a node signs for messages that carry their own `sig` field.

    A PrePrepare is signed over its block hash, which already binds every field.
    """
    if type(msg) is PrePrepare:
        return block_hash(msg.seq, msg.view, msg.requests)
    out: list = [bytes([_tag_of(type(msg))])]
    for name, codec in _body_fields(msg):
        codec.enc(out, getattr(msg, name))
    return hashlib.sha256(b"".join(out)).digest()


def _tag_of(cls) -> int:
    return MESSAGE.by_cls[cls][0]


def sign_message(keys: KeyRing, signer: int, msg):
    """Return a copy of `msg` with its `sig` field set to a node signature."""
    kw = {f.name: getattr(msg, f.name) for f in dc_fields(msg)}
    kw["sig"] = keys.sign(NODE, signer, signing_digest(msg))
    return type(msg)(**kw)


def timeout_digest(view: int, sender: int) -> bytes:
    return hashlib.sha256(b"complaint|" + encode_value(U64, view) + encode_value(U32, sender)).digest()


def reply_digest(view, seq, client, timestamp, val) -> bytes:
    return hashlib.sha256(
        b"reply|" + encode_value(U64, view) + encode_value(U64, seq)
        + encode_value(U32, client) + encode_value(U64, timestamp) + encode_value(BYTES, val)
    ).digest()


# -- stateless validation ---------------------------------------------------

class Reason(enum.Enum):
    BAD_CLIENT_AUTH = "bad-client-auth"
    BAD_SHARE = "bad-share"
    BAD_RANGE = "bad-range"
    EMPTY_BLOCK = "empty-block"


def request_ok(keys: KeyRing, req: ClientRequest,
               allow: Callable[[int, bytes], bool] | None = None) -> bool:
    ok = keys.request_cache.get(req)
    if ok is None:
        ok = _auth_ok(keys, req)
        if len(keys.request_cache) > 100_000:
            keys.request_cache.clear()
        keys.request_cache[req] = ok
    return ok and (allow is None or allow(req.client, req.op))


def _auth_ok(keys: KeyRing, req: ClientRequest) -> bool:
    auth = req.auth
    if auth.scheme_tag != CLIENT or auth.signer != req.client:
        return False
    if auth.digest != ClientRequest.auth_digest(req.op, req.timestamp, req.client):
        return False
    return keys.verify_share(auth)


def _share_ok(keys: KeyRing, share: SigShare | None, scheme: str, digest: bytes | None = None) -> bool:
    if share is None or share.scheme_tag != scheme:
        return False
    if digest is not None and share.digest != digest:
        return False
    return keys.verify_share(share)


def _combined_ok(keys: KeyRing, sig: CombinedSig, scheme: str) -> bool:
    return sig.scheme_tag == scheme and keys.verify_combined(sig)


def validate_well_formed(msg, keys: KeyRing, params, allow=None) -> Reason | None:
    """Stateless checks. Returns None when acceptable, else the rejection reason.

    View and sequence acceptance are stateful and belong to the replica.
    """
    t = type(msg)
    if t is ViewChange or t is NewView:
        # large immutable messages are re-validated by every receiver; the
        # verdict is memoized per object (the entry pins the object, so ids stay unique)
        hit = keys.message_cache.get(id(msg))
        if hit is not None and hit[0] is msg and hit[1] == (params.n, params.window):
            return hit[2]
        verdict = _validate(msg, keys, params, allow)
        if len(keys.message_cache) > 20_000:
            keys.message_cache.clear()
        keys.message_cache[id(msg)] = (msg, (params.n, params.window), verdict)
        return verdict
    return _validate(msg, keys, params, allow)


def _validate(msg, keys: KeyRing, params, allow) -> Reason | None:
    n = params.n
    t = type(msg)
    if hasattr(msg, "seq") and t is not StateSnapshot and msg.seq < 1:
        return Reason.BAD_RANGE
    if t is PrePrepare:
        if not msg.requests:
            return Reason.EMPTY_BLOCK
        for req in msg.requests:
            if not request_ok(keys, req, allow):
                return Reason.BAD_CLIENT_AUTH
        if msg.sig.signer != msg.view % n + 1:
            return Reason.BAD_RANGE
        if not _share_ok(keys, msg.sig, NODE, block_hash(msg.seq, msg.view, msg.requests)):
            return Reason.BAD_SHARE
    elif t is SignShare:
        if msg.sigma is None and msg.tau is None:
            return Reason.BAD_SHARE
        if msg.sigma is not None and not _share_ok(keys, msg.sigma, SIGMA, msg.block_hash):
            return Reason.BAD_SHARE
        if msg.tau is not None and not _share_ok(keys, msg.tau, TAU, msg.block_hash):
            return Reason.BAD_SHARE
        signers = {s.signer for s in (msg.sigma, msg.tau) if s is not None}
        if len(signers) != 1:
            return Reason.BAD_SHARE
    elif t is FullCommitProof:
        if not _combined_ok(keys, msg.sigma, SIGMA):
            return Reason.BAD_SHARE
    elif t is Prepare:
        if not _combined_ok(keys, msg.tau, TAU):
            return Reason.BAD_SHARE
    elif t is Commit:
        if not _combined_ok(keys, msg.tau, TAU):
            return Reason.BAD_SHARE
        if not _share_ok(keys, msg.share, TAU, nested_digest(msg.tau)):
            return Reason.BAD_SHARE
    elif t is FullCommitProofSlow:
        if not _combined_ok(keys, msg.tau, TAU) or not _combined_ok(keys, msg.tau_tau, TAU):
            return Reason.BAD_SHARE
        if msg.tau_tau.digest != nested_digest(msg.tau):
            return Reason.BAD_SHARE
    elif t is SignState or t is CheckpointVote:
        if not _share_ok(keys, msg.share, PI):
            return Reason.BAD_SHARE
    elif t is FullExecuteProof:
        if not _combined_ok(keys, msg.pi, PI):
            return Reason.BAD_SHARE
    elif t is ExecuteAck:
        if msg.pos < 1 or not request_ok(keys, msg.op):
            return Reason.BAD_RANGE if msg.pos < 1 else Reason.BAD_CLIENT_AUTH
        if not _combined_ok(keys, msg.pi, PI):
            return Reason.BAD_SHARE
    elif t is ViewChange:
        if not 1 <= msg.sender <= n or len(msg.entries) != params.window:
            return Reason.BAD_RANGE
        if msg.sig.signer != msg.sender or not _share_ok(keys, msg.sig, NODE, signing_digest(msg)):
            return Reason.BAD_SHARE
    elif t is NewView:
        if len(msg.changes) != params.view_change_quorum:
            return Reason.BAD_RANGE
        if len({vc.sender for vc in msg.changes}) != len(msg.changes):
            return Reason.BAD_RANGE
        for vc in msg.changes:
            if vc.view != msg.view:
                return Reason.BAD_RANGE
            bad = validate_well_formed(vc, keys, params, allow)
            if bad is not None:
                return bad
    elif t is Complaint:
        if not 1 <= msg.sender <= n:
            return Reason.BAD_RANGE
        ev = msg.evidence
        if type(ev) is TimeoutEvidence:
            if ev.sig.signer != msg.sender or not _share_ok(
                    keys, ev.sig, NODE, timeout_digest(msg.view, msg.sender)):
                return Reason.BAD_SHARE
        else:
            a, b = ev.first, ev.second
            if (a.seq, a.view) != (b.seq, b.view) or a.view != msg.view:
                return Reason.BAD_RANGE
            for pp in (a, b):
                if validate_well_formed(pp, keys, params, allow) is not None:
                    return Reason.BAD_SHARE
            if a.sig.digest == b.sig.digest:
                return Reason.BAD_RANGE
    elif t is Request:
        if not request_ok(keys, msg.request, allow):
            return Reason.BAD_CLIENT_AUTH
    elif t is Reply:
        if not 1 <= msg.sig.signer <= n or not _share_ok(
                keys, msg.sig, NODE,
                reply_digest(msg.view, msg.seq, msg.client, msg.timestamp, msg.val)):
            return Reason.BAD_SHARE
    return None
