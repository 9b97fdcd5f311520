"""
Canonical byte-level data model: transactions, data blocks, size-only block records and chain segments.

Encoding is fixed-order and little-endian with 4-byte length prefixes for variable fields.

Transaction (140 bytes + device_info + data):
    from 16 | to 16 | tx_type u8 | len u32 + device_info | one_time_pk 20 | timestamp u64 |
    tx_id u32 | len u32 + data | hash_type u8 | tx_hash 32 | sig_type u8 | signature 33
The marked form carries one extra mark byte between sig_type and signature.

Block header (113 bytes):
    prev hash 32 | version u32 | merkle_root 32 | num_txs u32 | timestamp u64 | signature 33
The first 80 bytes are what the leader signs. block_hash is never serialized; it is the digest of
the 113 header bytes. Height is not serialized either.

Body entry (44 bytes + marked transaction):
    no u32 | tx_id u32 | len u32 + marked transaction | tx_hash 32 (post-mark digest)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Optional, Sequence, Union

from crypto import (
    DIGEST_WIDTH,
    PUBLIC_KEY_WIDTH,
    SHA256,
    SIGNATURE_WIDTH,
    get_hash_scheme,
    hash_bytes,
    merkle_root,
)
from errors import FieldLengthError, MalformedBlockError, UnknownSchemeError

ADDRESS_WIDTH = 16
TX_BASE_BYTES = 140
MARK_BYTES = 1
HEADER_CORE_BYTES = 80
HEADER_BYTES = HEADER_CORE_BYTES + SIGNATURE_WIDTH
ENTRY_FRAMING_BYTES = 4 + 4 + 4 + DIGEST_WIDTH
BLOCK_VERSION = 1

ZERO_HASH = bytes(DIGEST_WIDTH)
ZERO_SIGNATURE = bytes(SIGNATURE_WIDTH)

_HEADER_CORE = struct.Struct("<32sI32sIQ")
_ENTRY_HEAD = struct.Struct("<III")
_SEGMENT_HEAD = struct.Struct("<QI")


class TxType(IntEnum):
    READING = 0
    WARNING = 1
    ALARM = 2


# ---- Transactions ----

@dataclass(frozen=True, slots=True)
class Transaction:
    from_addr: bytes
    to_addr: bytes
    tx_type: int
    device_info: bytes
    one_time_pk: bytes
    timestamp: int
    tx_id: int
    data: bytes
    hash_type: int
    tx_hash: bytes
    sig_type: int
    signature: bytes

    @property
    def order_key(self):
        return (self.timestamp, self.from_addr, self.tx_id)

    @property
    def encoded_size(self) -> int:
        return TX_BASE_BYTES + len(self.device_info) + len(self.data)


def _check_width(name: str, value: bytes, width: int):
    if len(value) != width:
        raise FieldLengthError(f"{name} must be {width} bytes, got {len(value)}")


def transaction_hash_input(tx: Transaction) -> bytes:
    """Canonical bytes of every field that precedes tx_hash."""
    _check_width("from", tx.from_addr, ADDRESS_WIDTH)
    _check_width("to", tx.to_addr, ADDRESS_WIDTH)
    _check_width("one_time_pk", tx.one_time_pk, PUBLIC_KEY_WIDTH)
    try:
        return b"".join((
            tx.from_addr,
            tx.to_addr,
            struct.pack("<BI", tx.tx_type, len(tx.device_info)),
            tx.device_info,
            tx.one_time_pk,
            struct.pack("<QII", tx.timestamp, tx.tx_id, len(tx.data)),
            tx.data,
            struct.pack("<B", tx.hash_type),
        ))
    except struct.error as exc:
        raise FieldLengthError(f"integer field out of range: {exc}") from None


def encode_transaction(tx: Transaction, mark: Optional[int] = None) -> bytes:
    """Encode ``tx``; with ``mark`` the universal mark byte is written after sig_type."""
    head = transaction_hash_input(tx)
    _check_width("tx_hash", tx.tx_hash, DIGEST_WIDTH)
    _check_width("signature", tx.signature, SIGNATURE_WIDTH)
    try:
        tail = struct.pack("<B", tx.sig_type)
        if mark is not None:
            tail += struct.pack("<B", mark)
    except struct.error as exc:
        raise FieldLengthError(f"integer field out of range: {exc}") from None
    return head + tx.tx_hash + tail + tx.signature


class _Reader:
    def __init__(self, raw: bytes, what: str):
        self.raw = bytes(raw)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if n < 0 or end > len(self.raw):
            raise MalformedBlockError(f"truncated {self.what}: need {n} bytes at offset {self.pos}")
        chunk = self.raw[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def var(self) -> bytes:
        (length,) = self.unpack("<I")
        return self.take(length)

    def done(self):
        if self.pos != len(self.raw):
            raise MalformedBlockError(f"{len(self.raw) - self.pos} trailing bytes after {self.what}")


def _read_transaction(reader: _Reader, marked: bool):
    from_addr = reader.take(ADDRESS_WIDTH)
    to_addr = reader.take(ADDRESS_WIDTH)
    (tx_type,) = reader.unpack("<B")
    device_info = reader.var()
    one_time_pk = reader.take(PUBLIC_KEY_WIDTH)
    timestamp, tx_id = reader.unpack("<QI")
    data = reader.var()
    (hash_type,) = reader.unpack("<B")
    tx_hash = reader.take(DIGEST_WIDTH)
    (sig_type,) = reader.unpack("<B")
    mark = reader.unpack("<B")[0] if marked else None
    signature = reader.take(SIGNATURE_WIDTH)
    tx = Transaction(from_addr, to_addr, tx_type, device_info, one_time_pk, timestamp,
                     tx_id, data, hash_type, tx_hash, sig_type, signature)
    return tx, mark


def decode_transaction(raw: bytes) -> Transaction:
    reader = _Reader(raw, "transaction")
    tx, _ = _read_transaction(reader, marked=False)
    reader.done()
    return tx


def decode_marked_transaction(raw: bytes):
    """Returns (Transaction, mark)."""
    reader = _Reader(raw, "marked transaction")
    tx, mark = _read_transaction(reader, marked=True)
    reader.done()
    return tx, mark


def compute_tx_hash(tx: Transaction) -> bytes:
    return hash_bytes(tx.hash_type, transaction_hash_input(tx))


# ---- Blocks ----

@dataclass(frozen=True, slots=True)
class BlockHeader:
    hash_pre_data_blk: bytes
    block_hash: bytes
    version: int
    merkle_root: bytes
    num_txs: int
    signature: bytes
    timestamp: int


def header_signing_bytes(header: BlockHeader) -> bytes:
    """The 80-byte header core covered by the leader signature."""
    _check_width("hash_pre_data_blk", header.hash_pre_data_blk, DIGEST_WIDTH)
    _check_width("merkle_root", header.merkle_root, DIGEST_WIDTH)
    try:
        return _HEADER_CORE.pack(header.hash_pre_data_blk, header.version, header.merkle_root,
                                 header.num_txs, header.timestamp)
    except struct.error as exc:
        raise FieldLengthError(f"header field out of range: {exc}") from None


def encode_header(header: BlockHeader) -> bytes:
    _check_width("signature", header.signature, SIGNATURE_WIDTH)
    return header_signing_bytes(header) + header.signature


def compute_block_hash(header: BlockHeader, scheme=SHA256) -> bytes:
    return hash_bytes(scheme, encode_header(header))


def make_header(prev_hash: bytes, merkle: bytes, num_txs: int, timestamp: int, signature: bytes,
                scheme=SHA256, version: int = BLOCK_VERSION) -> BlockHeader:
    draft = BlockHeader(prev_hash, ZERO_HASH, version, merkle, num_txs, signature, timestamp)
    return BlockHeader(prev_hash, compute_block_hash(draft, scheme), version, merkle, num_txs,
                       signature, timestamp)


def decode_header(raw: bytes, scheme=SHA256) -> BlockHeader:
    if len(raw) != HEADER_BYTES:
        raise MalformedBlockError(f"header must be {HEADER_BYTES} bytes, got {len(raw)}")
    prev, version, merkle, num_txs, timestamp = _HEADER_CORE.unpack(raw[:HEADER_CORE_BYTES])
    signature = bytes(raw[HEADER_CORE_BYTES:])
    return BlockHeader(prev, hash_bytes(scheme, raw), version, merkle, num_txs, signature, timestamp)


@dataclass(frozen=True, slots=True)
class BodyEntry:
    no: int
    tx_id: int
    tx_data: bytes
    tx_hash: bytes

    @property
    def size_bytes(self) -> int:
        return ENTRY_FRAMING_BYTES + len(self.tx_data)


@dataclass(frozen=True, slots=True)
class BlockBody:
    entries: tuple = ()

    def __len__(self):
        return len(self.entries)

    @property
    def size_bytes(self) -> int:
        return sum(e.size_bytes for e in self.entries)


@dataclass(frozen=True, slots=True)
class DataBlock:
    header: BlockHeader
    body: BlockBody
    height: int = 0

    @property
    def block_hash(self) -> bytes:
        return self.header.block_hash

    @property
    def prev_hash(self) -> bytes:
        return self.header.hash_pre_data_blk

    @property
    def timestamp(self) -> int:
        return self.header.timestamp

    @property
    def num_txs(self) -> int:
        return self.header.num_txs

    @property
    def size_bytes(self) -> int:
        return HEADER_BYTES + self.body.size_bytes


@dataclass(frozen=True, slots=True)
class BlockRecord:
    """Size-only stand-in for a DataBlock: the real header, no body bytes."""
    height: int
    header: BlockHeader
    size_bytes: int

    @property
    def block_hash(self) -> bytes:
        return self.header.block_hash

    @property
    def prev_hash(self) -> bytes:
        return self.header.hash_pre_data_blk

    @property
    def timestamp(self) -> int:
        return self.header.timestamp

    @property
    def num_txs(self) -> int:
        return self.header.num_txs

    @classmethod
    def from_block(cls, block: DataBlock) -> "BlockRecord":
        return cls(block.height, block.header, block.size_bytes)


AnyBlock = Union[DataBlock, BlockRecord]


def block_size(num_txs: int, marked_tx_bytes: int) -> int:
    """Encoded block size from the entry count and the summed marked-transaction bytes."""
    return HEADER_BYTES + num_txs * ENTRY_FRAMING_BYTES + marked_tx_bytes


def encode_entry(entry: BodyEntry) -> bytes:
    _check_width("entry tx_hash", entry.tx_hash, DIGEST_WIDTH)
    try:
        head = _ENTRY_HEAD.pack(entry.no, entry.tx_id, len(entry.tx_data))
    except struct.error as exc:
        raise FieldLengthError(f"entry field out of range: {exc}") from None
    return head + entry.tx_data + entry.tx_hash


def encode_block(block: DataBlock) -> bytes:
    return encode_header(block.header) + b"".join(encode_entry(e) for e in block.body.entries)


def _entry_transaction(entry: BodyEntry) -> Optional[Transaction]:
    try:
        inner, _ = decode_marked_transaction(entry.tx_data)
        return inner
    except MalformedBlockError:
        return None


def _entry_digest(inner: Optional[Transaction], entry: BodyEntry) -> Optional[bytes]:
    """Recompute an entry's post-mark digest with its transaction's own hash_type."""
    if inner is None:
        return None
    try:
        return hash_bytes(inner.hash_type, entry.tx_data)
    except UnknownSchemeError:
        return None


def _body_problems(block: DataBlock, scheme) -> list:
    problems = []
    entries = block.body.entries
    if block.header.num_txs != len(entries):
        problems.append(f"num_txs {block.header.num_txs} != {len(entries)} entries")
    if not entries:
        if block.height != 0:
            problems.append("empty body outside genesis")
        elif block.header.merkle_root != ZERO_HASH:
            problems.append("genesis merkle_root must be zero")
        return problems
    digests = []
    last_ids = {}
    for i, entry in enumerate(entries, start=1):
        if entry.no != i:
            problems.append(f"entry {i} numbered {entry.no}")
        inner = _entry_transaction(entry)
        digest = _entry_digest(inner, entry)
        if digest is None:
            problems.append(f"entry {i} does not decode")
            digest = hash_bytes(scheme, entry.tx_data)
        elif digest != entry.tx_hash:
            problems.append(f"entry {i} tx_hash mismatch")
        digests.append(digest)
        if inner is None:
            continue
        stream = (inner.from_addr, inner.to_addr)
        if stream in last_ids and inner.tx_id <= last_ids[stream]:
            problems.append(f"entry {i} tx_id {inner.tx_id} not increasing for its sender")
        last_ids[stream] = inner.tx_id
    if merkle_root(scheme, digests) != block.header.merkle_root:
        problems.append("merkle_root mismatch")
    return problems


def _stale_entries(block: DataBlock, prev_timestamp: int) -> list:
    """Entries whose reading is not newer than the previous block."""
    problems = []
    for i, entry in enumerate(block.body.entries, start=1):
        inner = _entry_transaction(entry)
        if inner is not None and inner.timestamp <= prev_timestamp:
            problems.append(f"entry {i} timestamp {inner.timestamp} not after previous block {prev_timestamp}")
    return problems


def decode_block(raw: bytes, height: int = 0, scheme=SHA256, verify: bool = True) -> DataBlock:
    """
    Decode a block. Height is not part of the encoding, so callers pass it in.

    Raises:
        MalformedBlockError: truncated input, trailing bytes, or (with ``verify``) a body that
            does not match its header
    """
    raw = bytes(raw)
    if len(raw) < HEADER_BYTES:
        raise MalformedBlockError(f"block shorter than its {HEADER_BYTES}-byte header")
    header = decode_header(raw[:HEADER_BYTES], scheme)
    reader = _Reader(raw, "block")
    reader.pos = HEADER_BYTES
    entries = []
    for _ in range(header.num_txs):
        no, tx_id, length = reader.unpack("<III")
        tx_data = reader.take(length)
        entries.append(BodyEntry(no, tx_id, tx_data, reader.take(DIGEST_WIDTH)))
    reader.done()
    block = DataBlock(header, BlockBody(tuple(entries)), height)
    if verify:
        problems = _body_problems(block, scheme)
        if problems:
            raise MalformedBlockError("; ".join(problems))
    return block


def make_genesis(scheme=SHA256) -> DataBlock:
    header = make_header(ZERO_HASH, ZERO_HASH, 0, 0, ZERO_SIGNATURE, scheme)
    return DataBlock(header, BlockBody(()), 0)


def genesis_record(scheme=SHA256) -> BlockRecord:
    return BlockRecord.from_block(make_genesis(scheme))


# ---- Segments and verification ----

@dataclass(frozen=True)
class ChainSegment:
    blocks: tuple

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if not blocks:
            raise ValueError("a chain segment holds at least one block")
        for prev, nxt in zip(blocks, blocks[1:]):
            if nxt.height != prev.height + 1:
                raise ValueError(f"segment heights not contiguous at {prev.height} -> {nxt.height}")
        object.__setattr__(self, "blocks", blocks)

    @property
    def first_height(self) -> int:
        return self.blocks[0].height

    @property
    def last_height(self) -> int:
        return self.blocks[-1].height

    @property
    def head(self):
        return self.blocks[-1]

    @property
    def size_bytes(self) -> int:
        return sum(b.size_bytes for b in self.blocks)

    @property
    def materialized(self) -> bool:
        return all(isinstance(b, DataBlock) for b in self.blocks)

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)


@dataclass(frozen=True)
class BlockCheck:
    height: int
    link_ok: bool
    hash_ok: bool
    merkle_ok: Optional[bool]
    timestamp_ok: bool
    problems: tuple = ()

    @property
    def ok(self) -> bool:
        return self.link_ok and self.hash_ok and self.merkle_ok is not False and self.timestamp_ok


@dataclass(frozen=True)
class VerificationReport:
    checks: tuple
    trusted_head_ok: Optional[bool] = None

    @property
    def passed(self) -> bool:
        return self.trusted_head_ok is not False and all(c.ok for c in self.checks)

    def failures(self, kind: str) -> list:
        """Heights whose ``kind`` check ('link', 'hash', 'merkle', 'timestamp') failed."""
        attr = f"{kind}_ok"
        return [c.height for c in self.checks if getattr(c, attr) is False]

    def __bool__(self):
        return self.passed


def verify_chain(segment: ChainSegment, trusted_head=None, scheme=SHA256) -> VerificationReport:
    """
    Check hash links, block hashes and Merkle roots across ``segment``, and that timestamps grow:
    each header after the one before it, each included reading after the previous header.

    Failures are reported, never raised. BlockRecord entries have no body, so their Merkle
    check is reported as not applicable (None). ``trusted_head`` may be a BlockHeader or any
    block; when given, the first block must link to it.
    """
    blocks = list(segment.blocks)
    if not blocks:
        raise ValueError("verify_chain needs a non-empty segment")
    hs = get_hash_scheme(scheme)
    checks = []
    prev = None
    for block in blocks:
        problems = []
        if prev is None:
            link_ok = True
        else:
            link_ok = block.prev_hash == prev.block_hash and block.height == prev.height + 1
            if not link_ok:
                problems.append("hash link broken")
        hash_ok = compute_block_hash(block.header, hs) == block.block_hash
        if not hash_ok:
            problems.append("block_hash mismatch")
        if isinstance(block, DataBlock):
            body_problems = _body_problems(block, hs)
            merkle_ok = not body_problems
            problems.extend(body_problems)
        else:
            merkle_ok = None
        before = prev if prev is not None else trusted_head
        timestamp_ok = before is None or block.timestamp > before.timestamp
        if not timestamp_ok:
            problems.append("timestamp not increasing")
        if before is not None and isinstance(block, DataBlock):
            stale = _stale_entries(block, before.timestamp)
            timestamp_ok = timestamp_ok and not stale
            problems.extend(stale)
        checks.append(BlockCheck(block.height, link_ok, hash_ok, merkle_ok, timestamp_ok, tuple(problems)))
        prev = block
    trusted_ok = None
    if trusted_head is not None:
        trusted_ok = blocks[0].prev_hash == trusted_head.block_hash
    return VerificationReport(tuple(checks), trusted_ok)


def encode_segment(segment: ChainSegment) -> bytes:
    if not segment.materialized:
        raise MalformedBlockError("only materialized segments have a byte encoding")
    parts = [_SEGMENT_HEAD.pack(segment.first_height, len(segment))]
    for block in segment.blocks:
        raw = encode_block(block)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def decode_segment(raw: bytes, scheme=SHA256, verify: bool = True) -> ChainSegment:
    reader = _Reader(raw, "segment")
    first_height, count = reader.unpack("<QI")
    blocks = [decode_block(reader.var(), first_height + i, scheme, verify) for i in range(count)]
    reader.done()
    if not blocks:
        raise MalformedBlockError("segment without blocks")
    return ChainSegment(tuple(blocks))


def chain_of(blocks: Iterable[AnyBlock]) -> ChainSegment:
    return ChainSegment(tuple(blocks))


def concat_segments(segments: Sequence[ChainSegment]) -> ChainSegment:
    """Join segments that share their boundary block (cloud head kept once)."""
    blocks = []
    for seg in segments:
        for block in seg.blocks:
            if blocks and block.height <= blocks[-1].height:
                continue
            blocks.append(block)
    return ChainSegment(tuple(blocks))
