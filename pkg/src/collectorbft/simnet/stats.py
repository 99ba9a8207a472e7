"""Message accounting from protocol-level traces."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field

# per-block traffic: agreement, execution and client result messages
BLOCK_KINDS = (
    "pre-prepare", "sign-share", "full-commit-proof", "prepare", "commit",
    "full-commit-proof-slow", "sign-state", "full-execute-proof", "execute-ack", "reply",
    "fetch-block", "block-data",
)


@dataclass
class MessageStats:
    blocks: int
    by_kind: dict  # kind -> total messages
    bytes_by_kind: dict
    per_block: dict = field(default_factory=dict)  # kind -> mean messages per committed block
    per_block_total: float = 0.0
    per_block_bytes: float = 0.0
    by_seq: dict = field(default_factory=dict)  # seq -> Counter of BLOCK_KINDS
    fast_blocks: int = 0
    slow_blocks: int = 0

    @property
    def fast_fraction(self) -> float:
        return self.fast_blocks / self.blocks if self.blocks else 0.0


def message_stats(trace) -> MessageStats:
    if trace.level == "safety":
        raise ValueError("message statistics need a protocol or full trace")
    by_kind: Counter = Counter()
    bytes_by_kind: Counter = Counter()
    by_seq: dict = defaultdict(Counter)
    seq_bytes: Counter = Counter()
    first_commit: dict = {}
    byz = set(trace.meta.get("byzantine", ()))
    n = trace.meta.get("n", 0)
    for _, kind, node, fields in trace.events:
        if kind == "send":
            _, mkind, seq, size = fields[0], fields[1], fields[2], fields[3]
            by_kind[mkind] += 1
            bytes_by_kind[mkind] += size
            if mkind in BLOCK_KINDS and seq >= 1:
                by_seq[seq][mkind] += 1
                seq_bytes[seq] += size
        elif kind == "commit" and 1 <= node <= n and node not in byz:
            first_commit.setdefault(fields[0], fields[3])
    blocks = len(first_commit)
    st = MessageStats(blocks, dict(by_kind), dict(bytes_by_kind), by_seq=dict(by_seq))
    if blocks:
        seqs = list(first_commit)
        for k in BLOCK_KINDS:
            st.per_block[k] = sum(by_seq.get(s, {}).get(k, 0) for s in seqs) / blocks
        st.per_block_total = sum(st.per_block.values())
        st.per_block_bytes = sum(seq_bytes[s] for s in seqs) / blocks
        st.fast_blocks = sum(1 for s in seqs if first_commit[s] == "fast")
        st.slow_blocks = sum(1 for s in seqs if first_commit[s] == "slow")
    return st
