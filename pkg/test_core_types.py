"""
Byte layout, golden vectors and chain verification for the core data model.
"""
from dataclasses import replace

import pytest

from blockchain_connector import TxPool, build_block, mark_transaction
from conftest import START, build_chain, read_fixture, signed_tx
from core_types import (
    BlockBody,
    ChainSegment,
    DataBlock,
    HEADER_BYTES,
    Transaction,
    block_size,
    compute_tx_hash,
    concat_segments,
    decode_block,
    decode_marked_transaction,
    decode_segment,
    decode_transaction,
    encode_block,
    encode_segment,
    encode_transaction,
    genesis_record,
    make_genesis,
    make_header,
    verify_chain,
)
from crypto import derive_keypair
from errors import FieldLengthError, MalformedBlockError

GENESIS_HASH = "a8fcf649a3b5c4dca66234100b28865ea0f018ad473728fdeec9c90c44dba651"
TX_HASH = "097a6e27f37ffd552a9930e9f19cca0ee3c9893840813425950b6c00cca98f45"
BLOCK1_HASH = "d01ebfaa8cf22c4105465139e3dc7e3062607bbed6cd8aace71d53384334afea"
BLOCK2_HASH = "cfe124f08dd30ceadbd2e9571264216966619f2f780218444ed70a7ec536d91e"


def _bare_tx(device_info=b"", data=b""):
    return Transaction(b"\x01" * 16, b"\x02" * 16, 0, device_info, b"\x03" * 20, START, 1, data, 0,
                       bytes(32), 0, bytes(33))


# -------------------------
# Transactions
# -------------------------
def test_transaction_golden_vector():
    raw = read_fixture("transaction.hex")
    tx = decode_transaction(raw)
    assert len(raw) == 147
    assert tx.from_addr == b"\x11" * 16 and tx.to_addr == b"\x22" * 16
    assert tx.tx_type == 1 and tx.device_info == b"dev"
    assert tx.timestamp == 1_700_000_001 and tx.tx_id == 7
    assert tx.data == bytes.fromhex("01020304")
    assert tx.tx_hash.hex() == TX_HASH
    assert compute_tx_hash(tx) == tx.tx_hash
    assert encode_transaction(tx) == raw
    assert tx.encoded_size == len(raw)


def test_empty_variable_fields_encode_to_140_bytes():
    assert len(encode_transaction(_bare_tx())) == 140


def test_typical_reading_lands_in_the_120_to_180_byte_band():
    raw = encode_transaction(_bare_tx(b"d" * 10, b"x" * 8))
    assert len(raw) == 158


def test_marked_encoding_adds_one_byte_after_sig_type():
    tx = decode_transaction(read_fixture("transaction.hex"))
    marked = encode_transaction(tx, mark=1)
    assert len(marked) == 148
    decoded, mark = decode_marked_transaction(marked)
    assert decoded == tx and mark == 1


def test_wrong_fixed_width_raises():
    tx = replace(_bare_tx(), from_addr=b"\x01" * 15)
    with pytest.raises(FieldLengthError):
        encode_transaction(tx)
    with pytest.raises(FieldLengthError):
        encode_transaction(replace(_bare_tx(), signature=b"\x00" * 32))


def test_truncated_or_padded_transaction_is_malformed():
    raw = read_fixture("transaction.hex")
    with pytest.raises(MalformedBlockError):
        decode_transaction(raw[:-1])
    with pytest.raises(MalformedBlockError):
        decode_transaction(raw + b"\x00")


def test_encoding_is_deterministic():
    a = signed_tx(index=3, tx_id=9)
    b = signed_tx(index=3, tx_id=9)
    assert encode_transaction(a) == encode_transaction(b)


# -------------------------
# Blocks
# -------------------------
def test_genesis_block():
    genesis = make_genesis()
    assert genesis.height == 0 and genesis.num_txs == 0 and genesis.timestamp == 0
    assert genesis.prev_hash == bytes(32)
    assert genesis.size_bytes == HEADER_BYTES == 113
    assert genesis.block_hash.hex() == GENESIS_HASH
    assert decode_block(encode_block(genesis), 0) == genesis


def test_block_golden_vector():
    raw = read_fixture("block.hex")
    block = decode_block(raw, height=1)
    assert len(raw) == 305 == block.size_bytes
    assert block.block_hash.hex() == BLOCK1_HASH
    assert block.prev_hash.hex() == GENESIS_HASH
    assert block.num_txs == 1 and block.timestamp == 1_700_000_005
    inner, mark = decode_marked_transaction(block.body.entries[0].tx_data)
    assert mark == 1 and inner.tx_hash.hex() == TX_HASH
    assert encode_block(block) == raw


def test_flipped_merkle_byte_fails_verified_decode():
    raw = bytearray(read_fixture("block.hex"))
    raw[40] ^= 0xFF
    with pytest.raises(MalformedBlockError):
        decode_block(bytes(raw), height=1)
    assert decode_block(bytes(raw), height=1, verify=False).num_txs == 1


def test_block_shorter_than_header_is_malformed():
    with pytest.raises(MalformedBlockError):
        decode_block(read_fixture("block.hex")[:100])


def test_block_size_model_matches_encoder():
    blocks = build_chain(6, per_block=5)
    for block in blocks[1:]:
        marked = sum(len(e.tx_data) for e in block.body.entries)
        assert len(encode_block(block)) == block.size_bytes == block_size(block.num_txs, marked)


# -------------------------
# Segments and verification
# -------------------------
def test_segment_golden_vector():
    raw = read_fixture("segment.hex")
    segment = decode_segment(raw)
    assert len(raw) == 747
    assert [b.height for b in segment] == [0, 1, 2]
    assert segment.blocks[0].block_hash.hex() == GENESIS_HASH
    assert segment.blocks[1].block_hash.hex() == BLOCK1_HASH
    assert segment.head.block_hash.hex() == BLOCK2_HASH
    assert verify_chain(segment).passed
    assert encode_segment(segment) == raw


def test_honest_chain_passes():
    report = verify_chain(ChainSegment(tuple(build_chain(10))))
    assert report.passed
    assert len(report.checks) == 11


def test_mutated_transaction_is_a_merkle_failure_only():
    blocks = build_chain(10)
    target = blocks[5]
    entry = target.body.entries[0]
    data = bytearray(entry.tx_data)
    data[-1] ^= 0x01
    body = BlockBody((replace(entry, tx_data=bytes(data)),) + target.body.entries[1:])
    blocks[5] = DataBlock(target.header, body, target.height)
    report = verify_chain(ChainSegment(tuple(blocks)))
    assert not report.passed
    assert report.failures("merkle") == [5]
    assert report.failures("link") == []
    assert report.failures("hash") == []


def test_repeated_timestamp_fails_monotonicity():
    blocks = build_chain(3)
    b2, b3 = blocks[2], blocks[3]
    header = make_header(b2.block_hash, b3.header.merkle_root, b3.num_txs, b2.timestamp, b3.header.signature)
    blocks[3] = DataBlock(header, b3.body, 3)
    report = verify_chain(ChainSegment(tuple(blocks)))
    assert report.failures("timestamp") == [3]
    assert report.failures("link") == []


def _block_on(head, txs):
    pool = TxPool(100)
    for tx in txs:
        pool.add(mark_transaction(tx, "node-0"))
    return build_block(pool, head, 100, derive_keypair("overlay-node-0"))


def test_reading_not_newer_than_previous_block_fails_timestamp():
    blocks = build_chain(2)
    late = _block_on(blocks[2], [signed_tx(index=0, timestamp=blocks[2].timestamp, tx_id=9)])
    assert late.timestamp == blocks[2].timestamp + 1
    report = verify_chain(ChainSegment(tuple(blocks) + (late,)))
    assert report.failures("timestamp") == [3]
    assert report.failures("merkle") == []
    assert "not after previous block" in report.checks[3].problems[0]


def test_repeated_tx_id_for_one_sender_is_a_body_failure():
    genesis = make_genesis()
    block = _block_on(genesis, [signed_tx(index=0, timestamp=START + 1, tx_id=5),
                                signed_tx(index=0, timestamp=START + 2, tx_id=5),
                                signed_tx(index=1, timestamp=START + 2, tx_id=5)])
    report = verify_chain(ChainSegment((genesis, block)))
    assert report.failures("merkle") == [1]
    assert report.checks[1].problems == ("entry 2 tx_id 5 not increasing for its sender",)
    with pytest.raises(MalformedBlockError):
        decode_block(encode_block(block), height=1)


def test_broken_link_is_reported():
    blocks = build_chain(4)
    other = build_chain(4, per_block=2)
    report = verify_chain(ChainSegment((blocks[0], blocks[1], other[2])))
    assert report.failures("link") == [2]


def test_trusted_head_must_match_first_prev_hash():
    blocks = build_chain(3)
    tail = ChainSegment(tuple(blocks[2:]))
    assert verify_chain(tail, trusted_head=blocks[1]).passed
    report = verify_chain(tail, trusted_head=blocks[0])
    assert report.trusted_head_ok is False and not report.passed


def test_size_only_records_skip_the_merkle_check():
    report = verify_chain(ChainSegment((genesis_record(),)))
    assert report.checks[0].merkle_ok is None
    assert report.passed


def test_segments_join_on_their_shared_boundary():
    blocks = build_chain(5)
    cloud = ChainSegment(tuple(blocks[:4]))
    tail = ChainSegment(tuple(blocks[3:]))
    full = concat_segments([cloud, tail])
    assert [b.height for b in full] == [0, 1, 2, 3, 4, 5]
    assert verify_chain(full).passed


def test_segment_heights_must_be_contiguous():
    blocks = build_chain(3)
    with pytest.raises(ValueError):
        ChainSegment((blocks[0], blocks[2]))
