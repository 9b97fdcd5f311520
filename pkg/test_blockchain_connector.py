"""
Permission checks, access grants, two-phase validation with the universal mark, pooling and block forming.
"""
from dataclasses import replace

import pytest

from blockchain_connector import (
    AccessPolicy,
    BatchPool,
    BlockchainConnector,
    Permission,
    Role,
    TxPool,
    UNIVERSAL_MARK,
    ValidatedTransaction,
    accounting_block_size,
    block_timestamp,
    build_block,
    build_block_record,
    check_permission,
    grant_access,
    mark_transaction,
    record_problems,
    revoke_access,
)
from conftest import START
from core_types import ChainSegment, encode_block, encode_transaction, genesis_record, make_genesis, verify_chain
from crypto import TEST_DOUBLE, derive_keypair, hash_bytes
from errors import (
    AlreadyValidatedError,
    DuplicateTransactionError,
    EmptyPoolError,
    HashMismatchError,
    NotLeaderError,
    NotOwnerError,
    PermissionDeniedError,
    PoolFullError,
    RetryLimitError,
    StaleTimestampError,
)
from workload import WorkloadGenerator

LEADER = derive_keypair("overlay-node-0")


@pytest.fixture
def connector(registry, pool):
    return BlockchainConnector("node-0", registry, pool, retry_bound=3)


# -------------------------
# Permissions and access
# -------------------------
def test_role_matrix_and_blacklist(registry):
    assert check_permission(registry, "gw-00", Role.SUBMIT)
    assert not check_permission(registry, "gw-00", Role.VALIDATE)
    assert check_permission(registry, "node-1", "aggregate")
    assert not check_permission(registry, "stranger", Role.SUBMIT)
    assert not check_permission(registry, "node-1", "fly")
    registry.ban("node-1")
    assert not check_permission(registry, "node-1", Role.JOIN)
    assert registry.public_key("node-1") is None


def test_owner_grants_and_revokes_read():
    policy = AccessPolicy(owners=(("archive", "admin"),))
    assert policy.check("admin", "archive", Permission.READ)
    assert not policy.check("auditor", "archive", Permission.READ)
    granted = grant_access(policy, "auditor", "archive", Permission.READ, caller="admin")
    assert granted.check("auditor", "archive", "read")
    assert not granted.check("auditor", "archive", Permission.WRITE)
    assert grant_access(granted, "auditor", "archive", Permission.READ, caller="admin") == granted
    revoked = revoke_access(granted, "auditor", "archive", Permission.READ, caller="admin")
    assert not revoked.check("auditor", "archive", Permission.READ)


def test_only_the_owner_changes_grants():
    policy = AccessPolicy(owners=(("archive", "admin"),))
    with pytest.raises(NotOwnerError):
        grant_access(policy, "auditor", "archive", Permission.READ, caller="auditor")
    with pytest.raises(NotOwnerError):
        revoke_access(policy, "auditor", "archive", Permission.READ, caller="node-0")


# -------------------------
# Validation
# -------------------------
def test_valid_transaction_is_marked(connector, make_tx):
    tx = make_tx(index=2, tx_id=4)
    vtx = connector.submit(tx, "gw-00")
    assert vtx.mark == UNIVERSAL_MARK and vtx.validator == "node-0"
    assert vtx.marked_bytes == encode_transaction(tx, UNIVERSAL_MARK)
    assert len(vtx.marked_bytes) == tx.encoded_size + 1
    assert vtx.post_mark_hash == hash_bytes(tx.hash_type, vtx.marked_bytes)
    assert vtx.post_mark_hash != tx.tx_hash
    assert vtx.pool_key in connector.pool


def test_marked_transaction_is_not_revalidated(connector, make_tx):
    vtx = mark_transaction(make_tx(), "node-1")
    assert isinstance(vtx, ValidatedTransaction)
    with pytest.raises(AlreadyValidatedError):
        connector.validate_transaction(vtx, "gw-00")


def test_unknown_gateway_is_refused(connector, make_tx):
    with pytest.raises(PermissionDeniedError):
        connector.validate_transaction(make_tx(), "gw-09")


def test_hash_mismatch_until_retry_bound(connector, make_tx):
    tx = make_tx(tx_id=11)
    tampered = replace(tx, data=b"\x01" + tx.data[1:])
    for _ in range(3):
        with pytest.raises(HashMismatchError):
            connector.validate_transaction(tampered, "gw-00")
    with pytest.raises(RetryLimitError):
        connector.validate_transaction(tampered, "gw-00")
    assert "gw-00" in connector.flagged_gateways


def test_a_good_resend_clears_the_retry_count(connector, make_tx):
    tx = make_tx(tx_id=12)
    with pytest.raises(HashMismatchError):
        connector.validate_transaction(replace(tx, data=b"\xff" * 8), "gw-00")
    connector.validate_transaction(tx, "gw-00")
    assert ("gw-00", 12) not in connector.pool.retries


def test_bad_device_signature(connector, make_tx):
    tx = make_tx()
    forged = replace(tx, signature=b"\x02" + bytes(32))
    with pytest.raises(HashMismatchError):
        connector.validate_transaction(forged, "gw-00")


def test_stale_timestamp(connector, make_tx):
    connector.head_timestamp = START + 5
    with pytest.raises(StaleTimestampError):
        connector.validate_transaction(make_tx(timestamp=START + 5), "gw-00")
    connector.validate_transaction(make_tx(timestamp=START + 6), "gw-00")


# -------------------------
# Pool
# -------------------------
def test_pool_rejects_duplicates_and_overflow(make_tx):
    pool = TxPool(2)
    pool.add(mark_transaction(make_tx(index=0), "node-0"))
    with pytest.raises(DuplicateTransactionError):
        pool.add(mark_transaction(make_tx(index=0), "node-0"))
    pool.add(mark_transaction(make_tx(index=1), "node-0"))
    with pytest.raises(PoolFullError):
        pool.add(mark_transaction(make_tx(index=2), "node-0"))
    assert pool.rejected == 1 and len(pool) == 2


# -------------------------
# Block forming
# -------------------------
def test_build_block_orders_by_timestamp_sender_and_id(make_tx):
    pool = TxPool(100)
    txs = [make_tx(index=1, timestamp=START + 2, tx_id=2), make_tx(index=0, timestamp=START + 2, tx_id=2),
           make_tx(index=1, timestamp=START + 1, tx_id=1), make_tx(index=0, timestamp=START + 1, tx_id=1),
           make_tx(index=2, timestamp=START + 1, tx_id=1)]
    for tx in txs:
        pool.add(mark_transaction(tx, "node-0"))
    genesis = make_genesis()
    block = build_block(pool, genesis, 100, LEADER, leader_id="node-0", current_leader="node-0")
    order = [(e.no, e.tx_id) for e in block.body.entries]
    assert order == [(1, 1), (2, 1), (3, 1), (4, 2), (5, 2)]
    assert block.height == 1 and block.prev_hash == genesis.block_hash
    assert len(pool) == 5
    assert verify_chain(ChainSegment((block,)), trusted_head=genesis).passed
    assert len(encode_block(block)) == block.size_bytes


def _pool_of(make_tx, timestamps):
    pool = TxPool(100)
    for d, ts in enumerate(timestamps):
        pool.add(mark_transaction(make_tx(index=d, timestamp=ts), "node-0"))
    return pool


def _finalize(pool, block):
    pool.discard([v.pool_key for v in pool.peek(block.num_txs)])


def test_block_timestamp_follows_the_newest_reading(make_tx):
    pool = _pool_of(make_tx, [START + 1] * 4 + [START + 3] * 2)
    first = build_block(pool, make_genesis(), 4, LEADER)
    _finalize(pool, first)
    second = build_block(pool, first, 4, LEADER)
    assert first.num_txs == 4 and first.timestamp == START + 1
    assert second.num_txs == 2 and second.timestamp == START + 3


def test_split_second_keeps_header_below_the_leftovers(make_tx):
    pool = _pool_of(make_tx, [START + 1] * 6)
    genesis = make_genesis()
    first = build_block(pool, genesis, 4, LEADER)
    _finalize(pool, first)
    second = build_block(pool, first, 4, LEADER)
    assert first.timestamp == START and second.timestamp == START + 1
    assert verify_chain(ChainSegment((genesis, first, second))).passed


def test_header_timestamp_bounds():
    assert block_timestamp(START + 7, START + 3) == START + 8
    assert block_timestamp(START, START + 3, following=START + 3) == START + 2
    assert block_timestamp(START, START + 3, not_before=START + 9) == START + 9


def test_stale_pooled_transactions_are_evicted(make_tx):
    pool = _pool_of(make_tx, [START + 1, START + 2, START + 2])
    assert pool.evict_stale(START + 1) == 1
    assert len(pool) == 2
    assert pool.evict_stale(START) == 0


def test_only_the_leader_builds(make_tx):
    pool = TxPool(10)
    pool.add(mark_transaction(make_tx(), "node-1"))
    with pytest.raises(NotLeaderError):
        build_block(pool, make_genesis(), 10, LEADER, leader_id="node-1", current_leader="node-0")
    with pytest.raises(EmptyPoolError):
        build_block(TxPool(10), make_genesis(), 10, LEADER)


# -------------------------
# Accounting-mode pool and records
# -------------------------
def _generator(**kw):
    return WorkloadGenerator(1, 3, 1.0, 2.0, distribution="uniform", seed=4, start_unix=START, **kw)


def test_batch_pool_slices_across_batches():
    gen = _generator()
    a, b = gen.next_batch(), gen.next_batch()
    pool = BatchPool(10)
    assert pool.add_batch(a) == 6
    assert pool.add_batch(b) == 4
    assert pool.rejected == 2 and len(pool) == 10
    count, payload = pool.peek(8)
    assert count == 8
    assert payload == a.payload_bytes + b.bytes_between(0, 2)
    assert pool.consume(8) == 8
    assert pool.cursor() == (b.batch_id, 2)
    assert pool.peek(100) == (2, b.bytes_between(2, 4))


def test_record_matches_follower_pool():
    gen = _generator()
    batch = gen.next_batch()
    leader_pool, follower_pool = BatchPool(100), BatchPool(100)
    leader_pool.add_batch(batch)
    follower_pool.add_batch(batch)
    record = build_block_record(leader_pool, genesis_record(TEST_DOUBLE), 100, LEADER)
    assert record.size_bytes == accounting_block_size(batch.count, batch.payload_bytes)
    assert record_problems(record, follower_pool) == []
    follower_pool.consume(1)
    assert record_problems(record, follower_pool)


def test_batch_pool_timestamps_and_eviction():
    gen = _generator()
    pool = BatchPool(100, start_unix=START)
    pool.add_batch(gen.next_batch())
    assert [pool.timestamp_at(k) for k in (0, 2, 3, 5, 6)] == [START + 1, START + 1, START + 2, START + 2, None]
    pool.add_batch(gen.next_batch())
    assert pool.timestamp_at(6) == START + 3
    assert pool.evict_stale(START + 1) == 3
    assert len(pool) == 9 and pool.timestamp_at(0) == START + 2
    assert pool.evict_stale(START + 2) == 3
    assert pool.cursor() == (2, 0)


def test_record_and_block_agree_on_the_timestamp():
    gen = _generator()
    batch = gen.next_batch()
    counted, full = BatchPool(100, start_unix=START), TxPool(100)
    counted.add_batch(batch)
    for tx in gen.transactions(batch):
        full.add(mark_transaction(tx, "node-0"))
    record = build_block_record(counted, genesis_record(TEST_DOUBLE), 4, LEADER)
    block = build_block(full, make_genesis(), 4, LEADER)
    assert record.timestamp == block.timestamp == START + 1


def test_accounting_sizes_equal_encoder_sizes_on_100_blocks():
    gen = _generator()
    genesis = make_genesis()
    for _ in range(100):
        batch = gen.next_batch()
        pool = TxPool(100)
        for tx in gen.transactions(batch):
            pool.add(mark_transaction(tx, "node-0"))
        block = build_block(pool, genesis, 100, LEADER)
        assert len(encode_block(block)) == block.size_bytes
        assert block.size_bytes == accounting_block_size(batch.count, batch.payload_bytes)
