import random

import pytest
from hypothesis import given, settings, strategies as st

import merkle_oracle
from collectorbft import kvstore, merkle
from collectorbft.codec import MalformedMessage
from collectorbft.kvstore import (
    ABSENT,
    DUPLICATE,
    OK,
    NoSuchOperation,
    ServiceState,
    encode_get,
    encode_put,
    execute,
    present,
)
from collectorbft.messages import make_request

GENESIS_HEX = "5793c4fc76d16a4591c4a9afe18b380c5e22faab7ff62d9668c16a759e832fd1"


def reqs(keys, client, start, ops):
    return [make_request(keys, client, start + i, op) for i, op in enumerate(ops)]


def test_genesis_golden_vector():
    assert kvstore.GENESIS_DIGEST.hex() == GENESIS_HEX
    assert merkle_oracle.genesis_digest().hex() == GENESIS_HEX


@settings(max_examples=200)
@given(st.lists(st.binary(min_size=0, max_size=8), max_size=40))
def test_merkle_root_matches_reference(data):
    leaves = [merkle.leaf_hash(d) for d in data]
    assert merkle.root_of(leaves) == merkle_oracle.root(leaves)
    levels = merkle.build_levels(leaves)
    for i, lf in enumerate(leaves):
        path = merkle.path_of(levels, i)
        assert merkle.root_from_path(lf, i, len(leaves), path) == merkle_oracle.root(leaves)


def test_count_binding_blocks_padding_collision():
    a, b, c = (merkle.leaf_hash(x) for x in (b"a", b"b", b"c"))
    assert merkle.root_of([a, b, c]) != merkle.root_of([a, b, c, c])


def test_ops_decode():
    assert kvstore.decode_op(encode_put(b"k", b"v")) == (kvstore.PUT, b"k", b"v")
    assert kvstore.decode_op(encode_get(b"k")) == (kvstore.GET, b"k", None)
    for bad in (b"", b"\x09", encode_get(b"k") + b"\x00"):
        with pytest.raises(MalformedMessage):
            kvstore.decode_op(bad)


def test_sequential_semantics_within_block(keys4):
    st = ServiceState()
    _, vals = execute(st, reqs(keys4, 1, 1, [encode_get(b"k"), encode_put(b"k", b"v"),
                                             encode_get(b"k"), b"junk"]), 1)
    assert vals == [ABSENT, OK, present(b"v"), kvstore.BAD_OP]


def test_duplicates_are_not_reapplied(keys4):
    st = ServiceState()
    r = reqs(keys4, 1, 1, [encode_put(b"k", b"v")])
    execute(st, r, 1)
    _, vals = execute(st, r, 2)
    assert vals == [DUPLICATE]


def test_determinism_and_digest_changes(keys4):
    a, b = ServiceState(), ServiceState()
    block = reqs(keys4, 1, 1, [encode_put(b"x", b"1"), encode_put(b"y", b"2")])
    execute(a, block, 1)
    execute(b, block, 1)
    assert kvstore.digest(a) == kvstore.digest(b) != kvstore.GENESIS_DIGEST


def test_execute_out_of_order_rejected():
    with pytest.raises(ValueError):
        execute(ServiceState(), [], 2)


def test_null_block_only_advances_log(keys4):
    st = ServiceState()
    execute(st, reqs(keys4, 1, 1, [encode_put(b"k", b"v")]), 1)
    kv_before = st.kv_root()
    execute(st, [], 2)
    assert st.kv_root() == kv_before and st.last_seq == 2 and 2 in st.block_log


def test_repeated_put_changes_only_log_and_seq(keys4):
    # recomputation oracle: rebuild both digests from their parts
    st = ServiceState()
    execute(st, reqs(keys4, 1, 1, [encode_put(b"k", b"v")]), 1)
    d1, kv1 = kvstore.digest(st), st.kv_root()
    data1 = st.data_root()
    execute(st, reqs(keys4, 2, 1, [encode_put(b"k", b"v")]), 2)
    assert st.data_root() == data1  # key-value contents unchanged
    assert st.kv_root() != kv1  # the session table records client 2
    d2 = kvstore.digest(st)
    assert d2 != d1
    assert d2 == merkle_oracle.state_digest(2, st.kv_root(), st.log_root())


def test_op_proof_round_trip_and_mutations(keys4):
    st = ServiceState(window=8)
    block = reqs(keys4, 1, 1, [encode_put(b"a", b"1"), encode_get(b"a"), encode_get(b"b")])
    _, vals = execute(st, block, 1)
    d = kvstore.digest(st)
    for pos, (r, val) in enumerate(zip(block, vals), start=1):
        p = kvstore.proof(r, pos, 1, st, val)
        assert kvstore.verify(d, r, val, 1, pos, p)
        assert not kvstore.verify(d, r, val, 1, pos + 1, p)
        assert not kvstore.verify(d, r, val + b"x", 1, pos, p)
        assert not kvstore.verify(d, r, val, 2, pos, p)
    with pytest.raises(NoSuchOperation):
        kvstore.proof(block[0], 2, 1, st, vals[0])


def test_proof_from_other_seq_rejected(keys4):
    st = ServiceState(window=8)
    b1 = reqs(keys4, 1, 1, [encode_put(b"a", b"1")])
    execute(st, b1, 1)
    p1 = kvstore.proof(b1[0], 1, 1, st, OK)
    d1 = kvstore.digest(st)
    execute(st, reqs(keys4, 1, 2, [encode_put(b"a", b"2")]), 2)
    d2 = kvstore.digest(st)
    assert kvstore.verify(d1, b1[0], OK, 1, 1, p1)
    assert not kvstore.verify(d2, b1[0], OK, 2, 1, p1)
    # the proof is bound to D_1 even though block 1 is still retained
    assert not kvstore.verify(d2, b1[0], OK, 1, 1, kvstore.proof(b1[0], 1, 1, st, OK))


def test_history_retention_bounded_by_window(keys4):
    st = ServiceState(window=4)
    for s in range(1, 11):
        execute(st, reqs(keys4, 1, s, [encode_put(b"k", b"%d" % s)]), s)
    assert sorted(st.history) == [7, 8, 9, 10] and sorted(st.block_log) == [7, 8, 9, 10]
    with pytest.raises(NoSuchOperation):
        kvstore.proof(reqs(keys4, 1, 1, [encode_put(b"k", b"1")])[0], 1, 1, st, OK)


def test_query_proofs(keys4):
    st = ServiceState()
    execute(st, reqs(keys4, 1, 1, [encode_put(b"k%d" % i, b"v%d" % i) for i in range(10)]), 1)
    d = kvstore.digest(st)
    for key in [b"k%d" % i for i in range(12)]:
        q = encode_get(key)
        val = kvstore.query(st, q)
        p = kvstore.query_proof(q, 1, st, val)
        assert kvstore.verify_query(d, q, val, 1, p)
        wrong = ABSENT if val != ABSENT else present(b"v0")
        assert not kvstore.verify_query(d, q, wrong, 1, p)
        assert not kvstore.verify_query(d, q, val, 2, p)


def test_query_on_empty_store():
    st = ServiceState()
    q = encode_get(b"nothing")
    p = kvstore.query_proof(q, 0, st, ABSENT)
    assert kvstore.verify_query(kvstore.GENESIS_DIGEST, q, ABSENT, 0, p)


def test_snapshot_round_trip(keys4):
    st = ServiceState(window=8)
    for s in range(1, 5):
        execute(st, reqs(keys4, s, 1, [encode_put(b"k%d" % s, b"v")]), s)
    back = kvstore.restore(kvstore.snapshot(st))
    assert kvstore.digest(back) == kvstore.digest(st)
    for bad in (b"", kvstore.snapshot(st) + b"\x00", b"x" * 30):
        with pytest.raises(MalformedMessage):
            kvstore.restore(bad)


def test_random_histories_agree(keys4):
    rng = random.Random(3)
    a, b = ServiceState(window=8), ServiceState(window=8)
    for s in range(1, 30):
        ops = [encode_put(b"k%d" % rng.randrange(5), rng.randbytes(3)) if rng.random() < 0.6
               else encode_get(b"k%d" % rng.randrange(5)) for _ in range(rng.randrange(0, 4))]
        block = reqs(keys4, 1 + s % 3, s * 10, ops)
        _, va = execute(a, block, s)
        _, vb = execute(b, block, s)
        assert va == vb and kvstore.digest(a) == kvstore.digest(b)
