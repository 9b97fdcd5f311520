"""
Blockchain connector - the gateway-resident middleware in front of consensus.

Handles permission management (whitelist, blacklist, role matrix, key directory), fine-grained access
grants, two-phase transaction validation with the universal mark, the validated-transaction pool and
block forming for the epoch leader. Accounting-mode runs use BatchPool and build_block_record, which
keep the same byte arithmetic without materializing transactions.
"""
from __future__ import annotations

import logging
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, FrozenSet, Iterable, Optional, Tuple

from core_types import (
    BlockBody,
    BlockRecord,
    BodyEntry,
    DataBlock,
    MARK_BYTES,
    Transaction,
    ZERO_SIGNATURE,
    block_size,
    compute_tx_hash,
    encode_transaction,
    header_signing_bytes,
    make_header,
)
from crypto import MAC33, SHA256, TEST_DOUBLE, KeyPair, hash_bytes, merkle_root, sign, verify
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

logger = logging.getLogger(__name__)

UNIVERSAL_MARK = 1


# ---- Permission management ----

class Role(str, Enum):
    SUBMIT = "submit"
    VALIDATE = "validate"
    AGGREGATE = "aggregate"
    CREATE_ASSET = "create_asset"
    JOIN = "join"


ALL_ROLES = frozenset(Role)


@dataclass
class PermissionRegistry:
    whitelist: set = field(default_factory=set)
    roles: Dict[str, FrozenSet[Role]] = field(default_factory=dict)
    blacklist: set = field(default_factory=set)
    public_keys: Dict[str, bytes] = field(default_factory=dict)

    def admit(self, who: str, roles: Iterable = ALL_ROLES, public_key: Optional[bytes] = None):
        self.whitelist.add(who)
        self.roles[who] = frozenset(Role(r) for r in roles)
        if public_key is not None:
            self.public_keys[who] = public_key

    def ban(self, who: str):
        self.blacklist.add(who)

    def public_key(self, who: str) -> Optional[bytes]:
        if who in self.blacklist:
            return None
        return self.public_keys.get(who)


def check_permission(reg: PermissionRegistry, who: str, action) -> bool:
    if who in reg.blacklist or who not in reg.whitelist:
        return False
    try:
        role = Role(action)
    except ValueError:
        return False
    return role in reg.roles.get(who, frozenset())


# ---- Access control ----

class Permission(str, Enum):
    READ = "read"
    WRITE = "write"


@dataclass(frozen=True)
class AccessPolicy:
    owners: Tuple[Tuple[str, str], ...] = ()
    grants: Tuple[Tuple[str, str, Permission], ...] = ()

    def owner_of(self, resource: str) -> Optional[str]:
        return dict(self.owners).get(resource)

    def check(self, who: str, resource: str, perm) -> bool:
        perm = Permission(perm)
        if self.owner_of(resource) == who:
            return True
        return (who, resource, perm) in self.grants


def _require_owner(policy: AccessPolicy, caller: str, resource: str):
    if policy.owner_of(resource) != caller:
        raise NotOwnerError(f"{caller} does not own {resource}")


def grant_access(policy: AccessPolicy, who: str, resource: str, perm, caller: str) -> AccessPolicy:
    _require_owner(policy, caller, resource)
    entry = (who, resource, Permission(perm))
    if entry in policy.grants:
        return policy
    return replace(policy, grants=policy.grants + (entry,))


def revoke_access(policy: AccessPolicy, who: str, resource: str, perm, caller: str) -> AccessPolicy:
    _require_owner(policy, caller, resource)
    entry = (who, resource, Permission(perm))
    return replace(policy, grants=tuple(g for g in policy.grants if g != entry))


# ---- Validation ----

@dataclass(frozen=True, slots=True)
class ValidatedTransaction:
    inner: Transaction
    mark: int
    post_mark_hash: bytes
    validator: str
    marked_bytes: bytes = field(repr=False)

    @property
    def order_key(self):
        return self.inner.order_key

    @property
    def pool_key(self):
        return (self.inner.from_addr, self.inner.tx_id, self.inner.timestamp)


def mark_transaction(tx: Transaction, validator: str, mark: int = UNIVERSAL_MARK) -> ValidatedTransaction:
    marked = encode_transaction(tx, mark)
    return ValidatedTransaction(tx, mark, hash_bytes(tx.hash_type, marked), validator, marked)


class TxPool:
    """Bounded pool of validated transactions; overflow rejects the newest arrival."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("pool capacity must be positive")
        self.capacity = capacity
        self._pending: Dict[tuple, ValidatedTransaction] = {}
        self.retries: Dict[tuple, int] = {}
        self.rejected = 0

    def __len__(self):
        return len(self._pending)

    def __contains__(self, key):
        return key in self._pending

    def add(self, vtx: ValidatedTransaction):
        key = vtx.pool_key
        if key in self._pending:
            raise DuplicateTransactionError(f"transaction {key[1]} already pooled")
        if len(self._pending) >= self.capacity:
            self.rejected += 1
            raise PoolFullError(f"pool full ({self.capacity})")
        self._pending[key] = vtx

    def pending(self):
        return sorted(self._pending.values(), key=lambda v: v.order_key)

    def peek(self, k: int):
        return self.pending()[:k]

    def discard(self, keys: Iterable[tuple]) -> int:
        removed = 0
        for key in keys:
            if self._pending.pop(key, None) is not None:
                removed += 1
        return removed

    def evict_stale(self, head_timestamp: int) -> int:
        """Drop pooled transactions no longer newer than the chain head."""
        return self.discard([k for k, v in self._pending.items() if v.inner.timestamp <= head_timestamp])


class BlockchainConnector:
    """Per-gateway validation front end. One instance per simulated overlay node."""

    def __init__(self, node_id: str, registry: PermissionRegistry, pool: TxPool,
                 retry_bound: int = 3):
        self.node_id = node_id
        self.registry = registry
        self.pool = pool
        self.retry_bound = retry_bound
        self.head_timestamp = 0
        self.flagged_gateways = set()

    def _fail(self, gateway: str, tx: Transaction, reason: str):
        key = (gateway, tx.tx_id)
        count = self.pool.retries.get(key, 0) + 1
        self.pool.retries[key] = count
        if count > self.retry_bound:
            self.flagged_gateways.add(gateway)
            logger.warning("[Connector] %s: gateway %s exceeded %d retries for tx %d",
                           self.node_id, gateway, self.retry_bound, tx.tx_id)
            raise RetryLimitError(f"tx {tx.tx_id} from {gateway}: {reason} after {count} attempts")
        raise HashMismatchError(f"tx {tx.tx_id} from {gateway}: {reason} (attempt {count}, re-request)")

    def validate_transaction(self, tx, gateway: str) -> ValidatedTransaction:
        """
        Phase 1 recomputes tx_hash and checks the device signature over it; phase 2 applies the
        universal mark and recomputes the digest.

        Raises:
            AlreadyValidatedError: tx already carries the mark
            PermissionDeniedError: gateway lacks the submit role
            HashMismatchError: digest or signature mismatch, the gateway should resend
            RetryLimitError: mismatches for this (gateway, tx_id) exceeded the retry bound
            StaleTimestampError: timestamp not newer than the current chain head
        """
        if isinstance(tx, ValidatedTransaction):
            raise AlreadyValidatedError(f"tx {tx.inner.tx_id} is already marked")
        if not check_permission(self.registry, gateway, Role.SUBMIT):
            raise PermissionDeniedError(f"{gateway} may not submit transactions")
        if compute_tx_hash(tx) != tx.tx_hash:
            self._fail(gateway, tx, "tx_hash mismatch")
        if not verify(tx.sig_type, tx.one_time_pk, tx.tx_hash, tx.signature):
            self._fail(gateway, tx, "device signature invalid")
        if tx.timestamp <= self.head_timestamp:
            raise StaleTimestampError(
                f"tx {tx.tx_id} timestamp {tx.timestamp} not after head {self.head_timestamp}")
        self.pool.retries.pop((gateway, tx.tx_id), None)
        return mark_transaction(tx, self.node_id)

    def submit(self, tx: Transaction, gateway: str) -> ValidatedTransaction:
        vtx = self.validate_transaction(tx, gateway)
        self.pool.add(vtx)
        return vtx


# ---- Block forming ----

def block_timestamp(prev_timestamp: int, newest: int, following: Optional[int] = None,
                    not_before: int = 0) -> int:
    """
    Header timestamp taken from the block's contents: the newest included reading, held below the
    oldest reading left in the pool, and always after the previous header.
    """
    timestamp = newest if following is None else min(newest, following - 1)
    return max(timestamp, prev_timestamp + 1, not_before)


def _seal(prev, merkle: bytes, num_txs: int, timestamp: int, leader_key: KeyPair, scheme, sig_scheme):
    draft = make_header(prev.block_hash, merkle, num_txs, timestamp, ZERO_SIGNATURE, scheme)
    signature = sign(sig_scheme, leader_key, header_signing_bytes(draft))
    return make_header(prev.block_hash, merkle, num_txs, timestamp, signature, scheme)


def _check_leader(leader_id, current_leader):
    if current_leader is not None and leader_id != current_leader:
        raise NotLeaderError(f"{leader_id} is not the epoch leader ({current_leader})")


def build_block(pool: TxPool, prev, max_txs: int, leader_key: KeyPair, *, not_before: int = 0,
                leader_id: Optional[str] = None, current_leader: Optional[str] = None,
                scheme=SHA256, sig_scheme=MAC33) -> DataBlock:
    """
    Form the next block from the first ``max_txs`` pooled transactions in (timestamp, from, tx_id)
    order. Transactions stay pooled until the block is finalized.

    Args:
        prev: the current head block (DataBlock or BlockRecord)
        not_before: lower bound for the header timestamp (see ``block_timestamp``)

    Returns:
        DataBlock at height prev.height + 1
    """
    _check_leader(leader_id, current_leader)
    if len(pool) == 0:
        raise EmptyPoolError("nothing to propose")
    picked = pool.peek(max_txs + 1)
    following = picked[max_txs].inner.timestamp if len(picked) > max_txs else None
    picked = picked[:max_txs]
    entries = tuple(
        BodyEntry(i, v.inner.tx_id, v.marked_bytes, v.post_mark_hash)
        for i, v in enumerate(picked, start=1)
    )
    merkle = merkle_root(scheme, [e.tx_hash for e in entries])
    timestamp = block_timestamp(prev.timestamp, picked[-1].inner.timestamp, following, not_before)
    header = _seal(prev, merkle, len(entries), timestamp, leader_key, scheme, sig_scheme)
    return DataBlock(header, BlockBody(entries), prev.height + 1)


# ---- Accounting-mode pool and blocks ----

class BatchPool:
    """Count-based pool of TxBatch slices; FIFO equals (timestamp, from, tx_id) order for the generator."""

    def __init__(self, capacity: int, start_unix: int = 0):
        if capacity <= 0:
            raise ValueError("pool capacity must be positive")
        self.capacity = capacity
        self.start_unix = start_unix
        self._slices = deque()
        self._count = 0
        self.rejected = 0

    def __len__(self):
        return self._count

    def add_batch(self, batch) -> int:
        room = self.capacity - self._count
        accepted = min(room, batch.count)
        if accepted < batch.count:
            self.rejected += batch.count - accepted
        if accepted > 0:
            self._slices.append([batch, 0, accepted])
            self._count += accepted
        return accepted

    def cursor(self) -> Tuple[int, int]:
        if not self._slices:
            return (0, 0)
        batch, offset, _ = self._slices[0]
        return (batch.batch_id, offset)

    def peek(self, k: int) -> Tuple[int, int]:
        """(count, summed unmarked transaction bytes) of the first ``k`` pending transactions."""
        want = min(k, self._count)
        count = total = 0
        for batch, offset, end in self._slices:
            if count >= want:
                break
            take = min(end - offset, want - count)
            total += batch.bytes_between(offset, offset + take)
            count += take
        return count, total

    def consume(self, k: int) -> int:
        left = min(k, self._count)
        removed = left
        while left:
            item = self._slices[0]
            take = min(item[2] - item[1], left)
            item[1] += take
            left -= take
            if item[1] == item[2]:
                self._slices.popleft()
        self._count -= removed
        return removed

    def timestamp_at(self, k: int) -> Optional[int]:
        """Timestamp of the k-th pending transaction (from 0), None past the end."""
        for batch, offset, end in self._slices:
            if k < end - offset:
                return batch.timestamp_of(offset + k, self.start_unix)
            k -= end - offset
        return None

    def evict_stale(self, head_timestamp: int) -> int:
        stale = 0
        for batch, offset, end in self._slices:
            i = offset
            while i < end and batch.timestamp_of(i, self.start_unix) <= head_timestamp:
                i = min(end, (i // batch.devices + 1) * batch.devices)
            stale += i - offset
            if i < end:
                break
        return self.consume(stale)


def accounting_commitment(num_txs: int, payload_bytes: int, cursor: Tuple[int, int], scheme=TEST_DOUBLE) -> bytes:
    """Stand-in for the Merkle root of a size-only block."""
    return hash_bytes(scheme, struct.pack("<IQQQ", num_txs, payload_bytes, cursor[0], cursor[1]))


def accounting_block_size(num_txs: int, payload_bytes: int) -> int:
    return block_size(num_txs, payload_bytes + num_txs * MARK_BYTES)


def build_block_record(pool: BatchPool, prev, max_txs: int, leader_key: KeyPair, *, not_before: int = 0,
                       leader_id: Optional[str] = None, current_leader: Optional[str] = None,
                       scheme=TEST_DOUBLE, sig_scheme=MAC33) -> BlockRecord:
    _check_leader(leader_id, current_leader)
    if len(pool) == 0:
        raise EmptyPoolError("nothing to propose")
    count, payload = pool.peek(max_txs)
    merkle = accounting_commitment(count, payload, pool.cursor(), scheme)
    newest, following = pool.timestamp_at(count - 1), pool.timestamp_at(count)
    timestamp = block_timestamp(prev.timestamp, newest, following, not_before)
    header = _seal(prev, merkle, count, timestamp, leader_key, scheme, sig_scheme)
    return BlockRecord(prev.height + 1, header, accounting_block_size(count, payload))


def record_problems(record: BlockRecord, pool: BatchPool, scheme=TEST_DOUBLE) -> list:
    """Follower-side check of a size-only proposal against the local pool state."""
    if record.num_txs == 0:
        return ["empty block"]
    count, payload = pool.peek(record.num_txs)
    if count < record.num_txs:
        return [f"block claims {record.num_txs} txs, pool holds {count}"]
    problems = []
    if accounting_commitment(count, payload, pool.cursor(), scheme) != record.header.merkle_root:
        problems.append("commitment mismatch")
    if accounting_block_size(count, payload) != record.size_bytes:
        problems.append("size mismatch")
    return problems
