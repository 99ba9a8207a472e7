"""Independent recursive Merkle reference, written from the tree definition.

Shares no code with the package: recursion over halves padded to a power of
two by repeating the last node at each level, matching pairwise
self-duplication of odd levels.
"""

import hashlib
import struct


def _h(b: bytes) -> bytes:
    return hashlib.sha256(b).digest()


def leaf(data: bytes) -> bytes:
    return _h(b"\x00" + data)


def _level_up(nodes):
    if len(nodes) % 2:
        nodes = nodes + [nodes[-1]]
    return [_h(b"\x01" + nodes[i] + nodes[i + 1]) for i in range(0, len(nodes), 2)]


def root(leaves) -> bytes:
    if not leaves:
        top = _h(b"merkle-empty")
    else:
        nodes = list(leaves)
        while len(nodes) > 1:
            nodes = _level_up(nodes)
        top = nodes[0]
    return _h(b"\x02" + struct.pack("<Q", len(leaves)) + top)


def state_digest(seq: int, kv_root: bytes, log_root: bytes) -> bytes:
    return _h(b"state" + struct.pack("<Q", seq) + kv_root + log_root)


def genesis_digest() -> bytes:
    empty = root([])
    kv = _h(b"kv" + empty + empty)
    return state_digest(0, kv, empty)
