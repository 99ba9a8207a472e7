"""Cluster arithmetic, role assignment and protocol constants."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Literal

Kind = Literal["commit", "execute"]
Path = Literal["fast", "linear"]


@dataclass(frozen=True)
class ClusterParams:
    f: int
    c: int
    n: int
    sigma_threshold: int
    tau_threshold: int
    pi_threshold: int
    window: int
    checkpoint_period: int

    @property
    def view_change_quorum(self) -> int:
        return 2 * self.f + 2 * self.c + 1

    @property
    def fast_value_quorum(self) -> int:
        # view-change members that must back a value for it to count as fast
        return self.f + self.c + 1

    @property
    def fast_window(self) -> int:
        return self.window // 4

    @property
    def active_window(self) -> int:
        return max(1, (self.n - 1) // (self.c + 1))

    @property
    def replica_ids(self) -> range:
        return range(1, self.n + 1)


def derive_cluster(f: int, c: int, window: int = 256) -> ClusterParams:
    if f < 0 or c < 0:
        raise ValueError(f"f and c must be non-negative, got f={f} c={c}")
    if window < 4 or window % 4:
        raise ValueError(f"window must be >= 4 and divisible by 4, got {window}")
    return ClusterParams(
        f=f,
        c=c,
        n=3 * f + 2 * c + 1,
        sigma_threshold=3 * f + c + 1,
        tau_threshold=2 * f + c + 1,
        pi_threshold=f + 1,
        window=window,
        checkpoint_period=window // 2,
    )


def primary_of(view: int, params: ClusterParams) -> int:
    if view < 0:
        raise ValueError("view must be >= 0")
    return view % params.n + 1


@dataclass(frozen=True)
class RoleAssignment:
    view: int
    seq: int
    primary: int
    c_collectors: tuple[int, ...]
    e_collectors: tuple[int, ...]


def _draw(seed: bytes, bound: int, counter: int) -> int:
    # rejection sampling over a sha256 stream keeps the draw portable
    limit = (1 << 64) - ((1 << 64) % bound)
    while True:
        block = hashlib.sha256(seed + struct.pack("<Q", counter)).digest()
        value = struct.unpack_from("<Q", block)[0]
        counter += 1
        if value < limit:
            return value % bound


def _pick(seq: int, view: int, kind: str, params: ClusterParams) -> tuple[int, ...]:
    primary = primary_of(view, params)
    pool = [i for i in params.replica_ids if i != primary]
    want = min(params.c + 1, len(pool))
    seed = b"collectors|" + kind.encode() + struct.pack("<QQ", seq, view)
    # partial Fisher-Yates: only the first `want` positions are needed
    for k in range(want):
        j = k + _draw(seed, len(pool) - k, k * 8)
        pool[k], pool[j] = pool[j], pool[k]
    return tuple(pool[:want])


_cache: dict = {}


def collectors_of(
    seq: int, view: int, kind: Kind, path: Path, params: ClusterParams
) -> tuple[int, ...]:
    """Ordered collector group for a slot.

    The fast group is c+1 non-primary replicas picked pseudo-randomly from
    (seq, view, kind). The linear group is the same list with the primary
    substituted into the last position. Degenerate single-replica clusters
    return the primary itself.
    """
    if seq < 1:
        raise ValueError("seq must be >= 1")
    key = (seq, view, kind, path, params.n, params.c)
    hit = _cache.get(key)
    if hit is not None:
        return hit
    primary = primary_of(view, params)
    group = _pick(seq, view, kind, params)
    if not group:
        group = (primary,)
    elif path == "linear":
        group = group[:-1] + (primary,)
    if len(_cache) > 200_000:
        _cache.clear()
    _cache[key] = group
    return group


def assign_roles(seq: int, view: int, path: Path, params: ClusterParams) -> RoleAssignment:
    return RoleAssignment(
        view=view,
        seq=seq,
        primary=primary_of(view, params),
        c_collectors=collectors_of(seq, view, "commit", path, params),
        e_collectors=collectors_of(seq, view, "execute", "fast", params),
    )


def fast_path_stable(ls: int, seq: int, window: int) -> int:
    """Stable sequence implied by a fast commit at `seq`."""
    return max(ls, seq - window // 4)


def stagger_schedule(collectors: tuple[int, ...], delta: int) -> list[tuple[int, int]]:
    """(activation delay, collector) pairs: the k-th collector starts at k*delta."""
    return [(k * delta, cid) for k, cid in enumerate(collectors)]
