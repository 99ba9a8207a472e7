"""Binary Merkle trees with duplicate-last padding and count-bound roots.

Leaves and interior nodes are domain separated (0x00 / 0x01 prefixes).
A level with an odd number of nodes pairs its last node with itself; that
pairing is implied by (index, count), so paths never carry it. Roots are
always published bound to the leaf count, which rules out the classic
padding ambiguity where two different leaf lists share a root.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from .codec import BYTES, DIGEST, U32, List, Opt, Struct, Union

_sha = hashlib.sha256
EMPTY = _sha(b"merkle-empty").digest()


def leaf_hash(data: bytes) -> bytes:
    return _sha(b"\x00" + data).digest()


def node_hash(left: bytes, right: bytes) -> bytes:
    return _sha(b"\x01" + left + right).digest()


def bound_root(count: int, root: bytes) -> bytes:
    return _sha(b"\x02" + struct.pack("<Q", count) + root).digest()


def build_levels(leaves: list[bytes]) -> list[list[bytes]]:
    if not leaves:
        return [[EMPTY]]
    levels = [list(leaves)]
    level = levels[0]
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level), 2):
            a = level[i]
            b = level[i + 1] if i + 1 < len(level) else a
            nxt.append(node_hash(a, b))
        levels.append(nxt)
        level = nxt
    return levels


def root_of(leaves: list[bytes]) -> bytes:
    return bound_root(len(leaves), build_levels(leaves)[-1][0])


def path_of(levels: list[list[bytes]], index: int) -> list[bytes]:
    out = []
    for level in levels[:-1]:
        sib = index ^ 1
        if sib < len(level):
            out.append(level[sib])
        index //= 2
    return out


def root_from_path(leaf: bytes, index: int, count: int, path) -> bytes | None:
    """Recompute the count-bound root; None if the path shape is wrong."""
    if not 0 <= index < count:
        return None
    node, size, i, k = leaf, count, index, 0
    while size > 1:
        if i & 1:
            if k >= len(path):
                return None
            node = node_hash(path[k], node)
            k += 1
        elif i + 1 < size:
            if k >= len(path):
                return None
            node = node_hash(node, path[k])
            k += 1
        else:
            node = node_hash(node, node)
        i >>= 1
        size = (size + 1) >> 1
    if k != len(path):
        return None
    return bound_root(count, node)


@dataclass(frozen=True, slots=True)
class OpProof:
    """Position of one executed request inside block s, bound to the state digest."""

    kv_root: bytes
    block_count: int
    block_path: tuple
    log_index: int
    log_count: int
    log_path: tuple


@dataclass(frozen=True, slots=True)
class KvWitness:
    index: int
    key: bytes
    value: bytes
    path: tuple


@dataclass(frozen=True, slots=True)
class QueryProof:
    """Membership or non-membership of a key in the kv tree at state s."""

    log_root: bytes
    session_root: bytes
    kv_count: int
    hit: KvWitness | None
    left: KvWitness | None
    right: KvWitness | None


OpProof.FIELDS = (
    ("kv_root", DIGEST),
    ("block_count", U32),
    ("block_path", List(DIGEST)),
    ("log_index", U32),
    ("log_count", U32),
    ("log_path", List(DIGEST)),
)
KvWitness.FIELDS = (
    ("index", U32),
    ("key", BYTES),
    ("value", BYTES),
    ("path", List(DIGEST)),
)
_WITNESS = Struct(KvWitness)
QueryProof.FIELDS = (
    ("log_root", DIGEST),
    ("session_root", DIGEST),
    ("kv_count", U32),
    ("hit", Opt(_WITNESS)),
    ("left", Opt(_WITNESS)),
    ("right", Opt(_WITNESS)),
)

PROOF = Union({1: OpProof, 2: QueryProof})
