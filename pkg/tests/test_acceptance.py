"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The verdict lines are printed at the end of the run by the terminal-summary
hook in conftest.py.
"""

import dataclasses
import hashlib
import itertools
import json
import random
import statistics
import time
from pathlib import Path

import pytest

from acceptance_log import record
from collectorbft import kvstore
from collectorbft.crypto import PI, SIGMA, TAU, InsufficientShares, KeyRing, SigShare, nested_digest
from collectorbft.harness.cli import run_scenario
from collectorbft.harness.scenario import bundled_scenarios, load_scenario
from collectorbft.kvstore import ABSENT, OK, ServiceState, encode_get, encode_put, present
from collectorbft.messages import encode_request, make_request
from collectorbft.params import derive_cluster
from collectorbft.simnet.config import ClusterSpec, FaultSpec, LinkDelay, SimConfig, Workload
from collectorbft.simnet.oracle import oracle_check
from collectorbft.simnet.sim import run
from collectorbft.simnet.stats import message_stats
from collectorbft.viewchange import Adopt, choose_safe_value
from vc_oracle import oracle

BASE = 1000
SCRIPTS = ("equivocate_preprepare", "stale_viewchange", "invalid_shares", "silent_collector",
           "partial_send")
GOLDEN = Path(__file__).with_name("golden_hashes.json")


def byzantine(script, f):
    return tuple(FaultSpec(i, "byzantine", script=script) for i in range(1, f + 1))


# -- 1. safety under adversarial asynchronous schedules ------------------------

@pytest.mark.slow
def test_c01_safety_under_adversarial_schedules():
    clusters = [(1, 0), (1, 1), (2, 2)]  # n = 4, 6, 11
    seeds = range(1, 1001)
    start = time.monotonic()
    runs = bad = 0
    first_bad = ""
    for f, c in clusters:
        spec = ClusterSpec(f=f, c=c, window=8)
        for script in SCRIPTS:
            for seed in seeds:
                sim = SimConfig(seed=seed, mode="asynchronous", link=LinkDelay(BASE, 0, 4 * BASE),
                                drop_budget=2, drop_rate=0.05, faults=byzantine(script, f),
                                trace_level="safety", horizon=3_000_000)
                rep = oracle_check(run(sim, spec, Workload(clients=2, ops_per_client=5)).trace)
                found = rep.of("agreement") + rep.of("execution")
                runs += 1
                if found:
                    bad += 1
                    first_bad = first_bad or f"n={3 * f + 2 * c + 1} {script} seed={seed}: {found[0]}"
    elapsed = time.monotonic() - start
    ok = bad == 0 and elapsed < 600
    record(1, "safety under adversarial schedules", ok,
           f"{runs} runs, {bad} with violations, {elapsed:.0f}s (budget 600s) {first_bad}".rstrip())
    assert bad == 0, first_bad
    assert elapsed < 600


# -- 2. view-change rule vs brute force -----------------------------------------

def _share(v, x):
    return ("share", v, x)


def _tau(v, x):
    return ("tau", v, x)


def _vc_corpus():
    views = range(5)
    fm_opts = [None] + [_share(v, x) for v in views for x in "AB"]
    lm_opts = [None] + [_tau(v, x) for v in views for x in "AB"]
    # n=4: every 3-multiset of (prepared, fast) entry pairs
    pairs = list(itertools.product(lm_opts, fm_opts))
    for combo in itertools.combinations_with_replacement(pairs, 3):
        yield list(combo), 1, 0
    # n=4: decide evidence next to every 2-multiset of ordinary entries
    decide = [(("tautau", x), None) for x in "AB"] + [(None, ("sigma", x)) for x in "AB"]
    for combo in itertools.combinations_with_replacement(pairs, 2):
        for d in decide:
            yield list(combo) + [d], 1, 0
    # n=6 (f=1, c=1): 5 entries; fast and prepared multisets paired position-wise
    lm6 = [None, _tau(2, "B"), _tau(4, "A")]
    for fms in itertools.combinations_with_replacement(fm_opts, 5):
        for lms in itertools.combinations_with_replacement(lm6, 5):
            yield list(zip(lms, fms)), 1, 1


def test_c02_view_change_matches_brute_force():
    cases = mismatches = ties = 0
    example = None
    for entries, f, c in _vc_corpus():
        got = choose_safe_value(entries, f, c)
        want = oracle(entries, f, c)
        cases += 1
        if got != want:
            mismatches += 1
            example = example or (entries, got, want)
        # slow-over-fast tie: prepared and fast evidence at the same top view
        if isinstance(want, Adopt) and want.view >= 0:
            tv = max((lm[1] for lm, _ in entries if lm and lm[0] == "tau"), default=-1)
            fast_at = [fm for _, fm in entries if fm and fm[0] == "share" and fm[1] == tv]
            if tv == want.view and fast_at:
                ties += 1
    # the canonical tie: tau at view 4 for A against a fast quorum for B at view 4
    tie = [(_tau(4, "A"), None), (None, _share(4, "B")), (None, _share(4, "B"))]
    tie_ok = choose_safe_value(tie, 1, 0) == oracle(tie, 1, 0) == Adopt("A", 4)
    ok = mismatches == 0 and cases >= 100_000 and ties > 0 and tie_ok
    record(2, "view-change rule vs brute force", ok,
           f"{cases} entry sets, {mismatches} mismatches, {ties} slow/fast tie cases")
    assert mismatches == 0, example
    assert cases >= 100_000 and ties > 0 and tie_ok


# -- 3. liveness in synchronous mode ----------------------------------------------

def test_c03_synchronous_liveness():
    link = LinkDelay(BASE, 200)
    runs = incomplete = 0
    for f, c in [(1, 0), (1, 1)]:
        spec = ClusterSpec(f=f, c=c, window=16)
        for script in SCRIPTS:
            for seed in range(1, 21):
                sim = SimConfig(seed=seed, link=link, faults=byzantine(script, f))
                rep = oracle_check(run(sim, spec, Workload(clients=2, ops_per_client=5)).trace)
                runs += 1
                incomplete += not rep.ok
    # primary crash: the first commit in a later view lands within 3 view timeouts
    view_timeout = 40 * BASE
    crash_at = 8 * BASE
    worst = 0
    late = 0
    for f, c in [(1, 0), (1, 1)]:
        spec = ClusterSpec(f=f, c=c, window=16)
        for seed in range(1, 21):
            sim = SimConfig(seed=seed, link=link, faults=(FaultSpec(1, "crash", at=crash_at),))
            trace = run(sim, spec, Workload(clients=2, ops_per_client=10)).trace
            runs += 1
            incomplete += not oracle_check(trace).ok
            t = min((tt for tt, k, node, fl in trace.events if k == "commit" and fl[1] >= 1),
                    default=None)
            gap = float("inf") if t is None else t - crash_at
            worst = max(worst, gap)
            late += gap > 3 * view_timeout
    ok = incomplete == 0 and late == 0
    record(3, "synchronous liveness", ok,
           f"{runs} runs, {incomplete} incomplete; new-view commit at most "
           f"{worst / view_timeout:.2f} view timeouts after the primary crash")
    assert incomplete == 0 and late == 0


# -- 4. fast path in common mode --------------------------------------------------

def test_c04_fast_path_in_common_mode():
    link = LinkDelay(BASE, 200)
    runs = not_fast = 0
    plans = {
        (1, 1): [(FaultSpec(3, "crash"),), (FaultSpec(5, "slow", delay=20 * BASE),),
                 (FaultSpec(1, "crash"),)],
        (2, 2): [(FaultSpec(3, "crash"), FaultSpec(7, "crash")),
                 (FaultSpec(2, "slow", delay=20 * BASE), FaultSpec(9, "crash"))],
    }
    for (f, c), faults_list in plans.items():
        spec = ClusterSpec(f=f, c=c, window=32)
        for faults in faults_list:
            for seed in range(1, 11):
                trace = run(SimConfig(seed=seed, mode="common", link=link, faults=faults), spec,
                            Workload(clients=2, ops_per_client=6)).trace
                st = message_stats(trace)
                runs += 1
                if (st.fast_fraction != 1.0 or st.by_kind.get("prepare", 0)
                        or not oracle_check(trace).ok):
                    not_fast += 1
    # c+1 failures: the linear path carries every block to completion
    over = incomplete = 0
    spec = ClusterSpec(f=1, c=1, window=32)
    for seed in range(1, 11):
        sim = SimConfig(seed=seed, mode="common", link=link, strict=False,
                        faults=(FaultSpec(3, "crash"), FaultSpec(5, "crash")))
        trace = run(sim, spec, Workload(clients=2, ops_per_client=6)).trace
        over += 1
        incomplete += not oracle_check(trace).ok or message_stats(trace).slow_blocks == 0
    ok = not_fast == 0 and incomplete == 0
    record(4, "fast path with c faults, linear path with c+1", ok,
           f"{runs} runs with c faults, {not_fast} off the fast path; "
           f"{over} runs with c+1 faults, {incomplete} incomplete")
    assert not_fast == 0 and incomplete == 0


# -- 5. linear message growth ----------------------------------------------------

def _msgs_per_block(variant, n):
    sc = load_scenario("linear_pbft_n4").with_overrides(variant=variant, n=n)
    row, _, failures, _ = run_scenario(sc)
    assert not failures or variant != "linear_pbft", failures
    return row.msgs_per_block


def test_c05_linear_message_growth():
    ns = [4, 13, 25, 49]
    lin = [_msgs_per_block("linear_pbft", n) for n in ns]
    a2a = [_msgs_per_block("pbft_all_to_all", n) for n in ns]
    slope, intercept = statistics.linear_regression(ns, lin)
    residual = max(abs(y - (slope * n + intercept)) / y for n, y in zip(ns, lin))
    ratio = a2a[-1] / lin[-1]
    ok = residual < 0.10 and ratio >= 4
    record(5, "linear message growth", ok,
           f"fit {slope:.2f}n{intercept:+.2f}, max relative residual {residual:.4f}; "
           f"all-to-all/linear at n=49 = {ratio:.1f}")
    assert residual < 0.10 and ratio >= 4


# -- 6. single acknowledgement ---------------------------------------------------

def test_c06_single_acknowledgement():
    link = LinkDelay(BASE, 200)
    requests = not_single = 0
    for f, c in [(1, 0), (1, 1), (2, 0)]:
        spec = ClusterSpec(f=f, c=c, window=32)
        for seed in range(1, 11):
            trace = run(SimConfig(seed=seed, link=link), spec, Workload(clients=3, ops_per_client=5)).trace
            for _, kind, _, fl in trace.events:
                if kind == "client-summary":
                    for _, count in fl[3]:
                        requests += 1
                        not_single += count != 1
            assert oracle_check(trace, single_ack=True).ok
    fallback_ops = fallback_done = 0
    for seed in range(1, 11):
        sim = SimConfig(seed=seed, link=link, drop_kinds=(("execute-ack", 1.0),))
        trace = run(sim, ClusterSpec(f=1, c=0, window=32), Workload(clients=2, ops_per_client=5)).trace
        fallback_ops += trace.meta["ops"]
        fallback_done += sum(1 for _, k, _, fl in trace.events if k == "complete" and fl[4] == "replies")
    ok = not_single == 0 and requests > 0 and fallback_done == fallback_ops
    record(6, "single acknowledgement", ok,
           f"{requests} requests, {not_single} with more than one message; "
           f"ack loss: {fallback_done}/{fallback_ops} completed via f+1 replies")
    assert not_single == 0 and fallback_done == fallback_ops


# -- 7. checkpoint and log bound --------------------------------------------------

@pytest.mark.slow
def test_c07_log_bound_soak():
    window = 64
    sim = SimConfig(seed=7, link=LinkDelay(BASE, 200), trace_level="protocol")
    res = run(sim, ClusterSpec(f=1, c=0, window=window), Workload(clients=8, ops_per_client=1250))
    trace = res.trace
    rep = oracle_check(trace)
    summaries = [fl for _, k, _, fl in trace.events if k == "summary"]
    max_log = max(s[3] for s in summaries)
    outside = sum(s[4] for s in summaries)
    ls_seen: dict = {}
    backwards = 0
    for _, k, node, fl in trace.events:
        if k == "ls":
            backwards += fl[0] < ls_seen.get(node, 0)
            ls_seen[node] = fl[0]
    done = sum(fl[0] for _, k, _, fl in trace.events if k == "client-summary")
    ok = rep.ok and max_log <= window and outside == 0 and backwards == 0 and done == 10_000
    record(7, "log bounded by window", ok,
           f"{done} ops, max log {max_log}/{window} slots, {outside} out-of-window slots, "
           f"{backwards} ls regressions, final ls {min(ls_seen.values(), default=0)}")
    assert ok, str(rep)


# -- 8. crypto contract ----------------------------------------------------------

def _flip(share):
    return SigShare(share.scheme_tag, share.signer, share.digest, bytes([share.tag[0] ^ 1]) + share.tag[1:])


def test_c08_threshold_contract():
    d = hashlib.sha256(b"acceptance").digest()
    checks = failed = 0
    for f, c in [(1, 0), (2, 1), (4, 2)]:
        keys = KeyRing.for_cluster(derive_cluster(f, c))
        for scheme in (SIGMA, TAU, PI):
            k = keys.schemes[scheme].threshold
            shares = [keys.sign(scheme, i, d) for i in range(1, keys.n + 1)]
            try:
                keys.combine(scheme, shares[: k - 1])
                failed += 1
            except InsufficientShares:
                pass
            sig = keys.combine(scheme, shares[:k])
            failed += not keys.verify_combined(sig)
            noisy = [_flip(s) for s in shares[k:]] + shares[:k]
            robust = keys.combine(scheme, noisy)
            failed += not keys.verify_combined(robust) or robust.signers() != tuple(range(1, k + 1))
            try:
                keys.combine(scheme, shares[: k - 1] + [_flip(s) for s in shares[k - 1:]])
                failed += 1
            except InsufficientShares:
                pass
            checks += 4
        kt = keys.schemes[TAU].threshold
        inner = keys.combine(TAU, [keys.sign(TAU, i, d) for i in range(1, kt + 1)])
        outer = keys.combine(TAU, [keys.sign(TAU, i, nested_digest(inner)) for i in range(1, kt + 1)])
        failed += not keys.verify_combined(outer) or outer.digest != nested_digest(inner)
        checks += 1
    record(8, "threshold signature contract", failed == 0, f"{checks} checks, {failed} failed")
    assert failed == 0


# -- 9. Merkle proofs under mutation ---------------------------------------------

def _merkle_fixture(rng):
    keys = KeyRing.for_cluster(derive_cluster(1, 0), n_clients=4)
    st = ServiceState(window=16)
    ts = {c: 0 for c in range(1, 5)}
    op_claims = []  # (digest, record, val, seq, pos)
    for seq in range(1, 31):
        block = []
        for _ in range(rng.randrange(1, 6)):
            client = rng.randrange(1, 5)
            ts[client] += 1
            key = b"k%d" % rng.randrange(12)
            op = encode_put(key, rng.randbytes(4)) if rng.random() < 0.6 else encode_get(key)
            block.append(make_request(keys, client, ts[client], op))
        _, vals = kvstore.execute(st, block, seq)
        d = kvstore.digest(st)
        for pos, (r, val) in enumerate(zip(block, vals), start=1):
            op_claims.append((d, encode_request(r), val, seq, pos))
    retained = [cl for cl in op_claims if cl[3] in st.history]
    ops = [(cl, kvstore.proof(cl[1], cl[4], cl[3], st, cl[2])) for cl in retained]
    d_now = kvstore.digest(st)
    queries = []
    for i in range(16):
        q = encode_get(b"k%d" % i)
        val = kvstore.query(st, q)
        queries.append(((d_now, q, val, st.last_seq), kvstore.query_proof(q, st.last_seq, st, val)))
    return st, ops, queries


def _flip_bytes(rng, b):
    if not b:
        return b"\x00"
    i = rng.randrange(len(b))
    return b[:i] + bytes([b[i] ^ (1 << rng.randrange(8))]) + b[i + 1:]


def _mutate_path(rng, path):
    path = list(path)
    choice = rng.randrange(4)
    if choice == 0 and path:
        i = rng.randrange(len(path))
        path[i] = _flip_bytes(rng, path[i])
    elif choice == 1 and path:
        del path[rng.randrange(len(path))]
    elif choice == 2:
        path.insert(rng.randrange(len(path) + 1), rng.randbytes(32))
    elif len(path) >= 2:
        i = rng.randrange(len(path) - 1)
        path[i], path[i + 1] = path[i + 1], path[i]
    else:
        path.append(rng.randbytes(32))
    return tuple(path)


def _mutate_int(rng, x):
    return x + rng.choice([-2, -1, 1, 2, 1 << 20])


def _mutate_op(rng, claim, p, other):
    d, rec, val, s, l = claim
    what = rng.randrange(12)
    if what == 0:
        d = _flip_bytes(rng, d)
    elif what == 1:
        d = other[0][0]
    elif what == 2:
        val = rng.choice([_flip_bytes(rng, val), val + b"\x00", OK if val != OK else ABSENT,
                          present(rng.randbytes(4))])
    elif what == 3:
        s = _mutate_int(rng, s)
    elif what == 4:
        l = _mutate_int(rng, l)
    elif what == 5:
        rec = rng.choice([_flip_bytes(rng, rec), other[0][1]])
    elif what == 6:
        p = dataclasses.replace(p, kv_root=_flip_bytes(rng, p.kv_root))
    elif what == 7:
        p = dataclasses.replace(p, block_count=_mutate_int(rng, p.block_count))
    elif what == 8:
        p = dataclasses.replace(p, block_path=_mutate_path(rng, p.block_path))
    elif what == 9:
        p = dataclasses.replace(p, log_index=_mutate_int(rng, p.log_index))
    elif what == 10:
        p = dataclasses.replace(p, log_count=_mutate_int(rng, p.log_count))
    else:
        p = rng.choice([dataclasses.replace(p, log_path=_mutate_path(rng, p.log_path)), other[1]])
    return (d, rec, val, s, l), p


def _mutate_witness(rng, w):
    what = rng.randrange(4)
    if what == 0:
        return dataclasses.replace(w, index=_mutate_int(rng, w.index))
    if what == 1:
        return dataclasses.replace(w, key=_flip_bytes(rng, w.key))
    if what == 2:
        return dataclasses.replace(w, value=_flip_bytes(rng, w.value))
    return dataclasses.replace(w, path=_mutate_path(rng, w.path))


def _mutate_query(rng, claim, p, other):
    d, q, val, s = claim
    what = rng.randrange(10)
    if what == 0:
        d = _flip_bytes(rng, d)
    elif what == 1:
        val = rng.choice([ABSENT if val != ABSENT else present(b"x"), _flip_bytes(rng, val),
                          present(rng.randbytes(4))])
    elif what == 2:
        s = _mutate_int(rng, s)
    elif what == 3:
        q = rng.choice([encode_get(rng.randbytes(3)), other[0][1], encode_put(b"k1", b"v")])
    elif what == 4:
        p = dataclasses.replace(p, kv_count=_mutate_int(rng, p.kv_count))
    elif what == 5:
        p = dataclasses.replace(p, log_root=_flip_bytes(rng, p.log_root))
    elif what == 6:
        p = dataclasses.replace(p, session_root=_flip_bytes(rng, p.session_root))
    elif what == 7:
        slots = [n for n in ("hit", "left", "right") if getattr(p, n) is not None]
        name = rng.choice(slots)
        p = dataclasses.replace(p, **{name: _mutate_witness(rng, getattr(p, name))})
    elif what == 8:
        # rearrange witnesses: drop one, swap sides, or borrow from another proof
        o = other[1]
        p = rng.choice([
            dataclasses.replace(p, left=None), dataclasses.replace(p, right=None),
            dataclasses.replace(p, left=p.right, right=p.left),
            dataclasses.replace(p, hit=o.hit, left=o.left, right=o.right),
            dataclasses.replace(p, hit=p.left or p.right, left=None, right=None),
        ])
    else:
        p = other[1]
    return (d, q, val, s), p


def _op_true(st, claim):
    d, rec, val, s, l = claim
    h = st.history.get(s)
    return (h is not None and h.digest == d and 1 <= l <= len(h.records)
            and h.records[l - 1] == rec and h.vals[l - 1] == val)


def _query_true(st, claim):
    d, q, val, s = claim
    try:
        return s == st.last_seq and d == kvstore.digest(st) and kvstore.query(st, q) == val
    except Exception:
        return False


def test_c09_merkle_mutation_fuzz():
    rng = random.Random(2024)
    st, ops, queries = _merkle_fixture(rng)
    honest_ok = all(kvstore.verify(c[0], c[1], c[2], c[3], c[4], p) for c, p in ops)
    honest_ok &= all(kvstore.verify_query(c[0], c[1], c[2], c[3], p) for c, p in queries)
    trials = false_accepts = 0
    while trials < 100_000:
        if rng.random() < 0.5:
            claim, p = rng.choice(ops)
            claim2, p2 = _mutate_op(rng, claim, p, rng.choice(ops))
            if (claim2, p2) == (claim, p):
                continue
            accepted = kvstore.verify(*claim2, p2)
            false_accepts += accepted and (p2 != p or not _op_true(st, claim2))
        else:
            claim, p = rng.choice(queries)
            claim2, p2 = _mutate_query(rng, claim, p, rng.choice(queries))
            if (claim2, p2) == (claim, p):
                continue
            accepted = kvstore.verify_query(*claim2, p2)
            # another key in the same gap is a true statement under the same proof
            false_accepts += accepted and (p2 != p or not _query_true(st, claim2))
        trials += 1
    ok = honest_ok and false_accepts == 0
    record(9, "Merkle proofs under mutation", ok,
           f"{len(ops) + len(queries)} honest proofs verify={honest_ok}; "
           f"{trials} mutations, {false_accepts} false accepts")
    assert honest_ok and false_accepts == 0


# -- 10. determinism ---------------------------------------------------------------

def test_c10_determinism():
    golden = json.loads(GOLDEN.read_text())
    hashes = {}
    unstable = []
    for name in bundled_scenarios():
        sc = load_scenario(name)
        first = run_scenario(sc)[0].trace_hash
        second = run_scenario(sc)[0].trace_hash
        hashes[name] = first
        if first != second:
            unstable.append(name)
    drift = sorted(n for n in hashes if golden.get(n) != hashes[n])
    ok = not unstable and not drift
    record(10, "deterministic traces", ok,
           f"{len(hashes)} scenarios, {len(unstable)} unstable across runs, "
           f"{len(drift)} differ from the recorded hashes")
    assert not unstable and not drift, (unstable, drift)
