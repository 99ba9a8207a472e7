"""Safe-value selection for one slot during a view change.

Works over normalized slot evidence so the rule can be tested without
signatures. Each view-change member contributes one pair ``(lm, fm)``::

    lm: None | ("tautau", value) | ("tau", view, value)
    fm: None | ("sigma", value)  | ("share", view, value)

``value`` is any hashable block identity. Ties between conflicting values
of equal rank cannot arise from honest quorums; they are still broken
deterministically by the smallest ``key(value)`` so the function is total.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Hashable, Sequence


@dataclass(frozen=True)
class Decide:
    value: Hashable


@dataclass(frozen=True)
class Adopt:
    value: Hashable
    view: int


@dataclass(frozen=True)
class Noop:
    pass


NOOP = Noop()


def _identity(v):
    return v


def highest_prepared(entries: Sequence[tuple], key: Callable = _identity):
    """(v*, req*) over slow-path evidence; (-1, None) if none."""
    best_view, best = -1, None
    for lm, _ in entries:
        if lm is not None and lm[0] == "tau":
            _, view, value = lm
            if view > best_view or (view == best_view and key(value) < key(best)):
                best_view, best = view, value
    return best_view, best


def highest_fast(entries: Sequence[tuple], quorum: int, key: Callable = _identity):
    """(v_hat, req_hat): highest view with a fast value, -1 if none or not unique.

    A value is fast for v when `quorum` members hold a share on it at some
    view >= v. The highest such v for a value is therefore the quorum-th
    largest view among that value's shares.
    """
    views = defaultdict(list)
    for _, fm in entries:
        if fm is not None and fm[0] == "share":
            views[fm[2]].append(fm[1])
    best_view, winners = -1, []
    for value, vs in views.items():
        if len(vs) < quorum:
            continue
        v = sorted(vs, reverse=True)[quorum - 1]
        if v > best_view:
            best_view, winners = v, [value]
        elif v == best_view:
            winners.append(value)
    if len(winners) != 1:
        return -1, None
    return best_view, winners[0]


def choose_safe_value(entries: Sequence[tuple], f: int, c: int, key: Callable = _identity):
    """Decide, Adopt or Noop for one slot given 2f+2c+1 normalized entries."""
    decided = []
    for lm, fm in entries:
        if lm is not None and lm[0] == "tautau":
            decided.append(lm[1])
        if fm is not None and fm[0] == "sigma":
            decided.append(fm[1])
    if decided:
        return Decide(min(decided, key=key))
    v_star, req_star = highest_prepared(entries, key)
    v_hat, req_hat = highest_fast(entries, f + c + 1, key)
    if v_star >= v_hat and v_star > -1:
        return Adopt(req_star, v_star)
    if v_hat > v_star:
        return Adopt(req_hat, v_hat)
    return NOOP
