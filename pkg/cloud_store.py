"""
Replicated multi-cloud archive for synchronized chain segments.

Each segment is written to the first ``replication_factor`` replicas. Reads and the archive head
are decided by a majority vote over per-block content digests, so up to floor((rf - 1) / 2)
replicas may lie without changing what callers see. Materialized archives can be saved to and
restored from a directory-per-replica layout.
"""
from __future__ import annotations

import json
import logging
import os
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

from blockchain_connector import AccessPolicy, Permission
from core_types import (
    BlockBody,
    BlockRecord,
    ChainSegment,
    DataBlock,
    decode_segment,
    encode_block,
    encode_header,
    encode_segment,
    genesis_record,
    make_genesis,
    verify_chain,
)
from crypto import SHA256, get_hash_scheme, hash_bytes
from errors import (
    AccessDeniedError,
    HeadGapError,
    NoQuorumError,
    RangeUnavailableError,
    VerificationError,
)

logger = logging.getLogger(__name__)

ARCHIVE_RESOURCE = "archive"
HEAD_MANIFEST = "head.json"


def block_digest(block, scheme=SHA256) -> bytes:
    """Digest over everything a replica stores for one height."""
    if isinstance(block, DataBlock):
        return hash_bytes(scheme, encode_block(block))
    return hash_bytes(scheme, encode_header(block.header) + struct.pack("<Q", block.size_bytes))


def tamper_block(block):
    """Silent corruption of one stored block: a flipped payload byte, or a wrong size for records."""
    if isinstance(block, BlockRecord):
        return replace(block, size_bytes=block.size_bytes + 1)
    if block.body.entries:
        first = block.body.entries[0]
        data = bytearray(first.tx_data)
        data[-1] ^= 0x01
        entries = (replace(first, tx_data=bytes(data)),) + block.body.entries[1:]
        return replace(block, body=BlockBody(entries))
    return replace(block, header=replace(block.header, merkle_root=bytes(32)))


# ---- Replicas ----

@dataclass
class CloudNode:
    id: str
    honest: bool = True
    blocks: Dict[int, object] = field(default_factory=dict)
    ranges: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def head(self):
        if not self.blocks:
            return None
        return self.blocks[max(self.blocks)]

    @property
    def segments(self) -> Dict[Tuple[int, int], ChainSegment]:
        return {(a, b): self.segment(a, b) for a, b in self.ranges}

    def segment(self, first: int, last: int) -> ChainSegment:
        return ChainSegment(tuple(self.blocks[h] for h in range(first, last + 1)))

    def write(self, segment: ChainSegment):
        blocks = list(segment.blocks)
        if not self.honest:
            mid = len(blocks) // 2
            blocks[mid] = tamper_block(blocks[mid])
            logger.debug("[Cloud] replica %s tampered height %d on write", self.id, blocks[mid].height)
        for block in blocks:
            self.blocks[block.height] = block
        self.ranges.append((segment.first_height, segment.last_height))


@dataclass(frozen=True)
class StoreReceipt:
    first_height: int
    last_height: int
    head_hash: bytes
    replicas: Tuple[str, ...]
    size_bytes: int


@dataclass
class ArchiveIndex:
    entries: Dict[int, Tuple[Tuple[str, ...], bytes]] = field(default_factory=dict)

    def record(self, height: int, holders: Tuple[str, ...], block_hash: bytes):
        self.entries[height] = (holders, block_hash)

    def __contains__(self, height):
        return height in self.entries

    def __len__(self):
        return len(self.entries)


@dataclass
class CloudArchive:
    replicas: List[CloudNode]
    replication_factor: int = 3
    scheme: object = SHA256
    index: ArchiveIndex = field(default_factory=ArchiveIndex)
    receipts: Dict[Tuple[int, int, bytes], StoreReceipt] = field(default_factory=dict)
    size_bytes: int = 0
    digests: Dict[int, bytes] = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.replication_factor <= len(self.replicas):
            raise ValueError("replication_factor must be between 1 and the replica count")
        self.scheme = get_hash_scheme(self.scheme)

    @property
    def consistency_quorum(self) -> int:
        return self.replication_factor // 2 + 1

    @property
    def holders(self) -> List[CloudNode]:
        return self.replicas[: self.replication_factor]

    @property
    def head_height(self) -> int:
        return max(self.index.entries) if len(self.index) else -1

    def replica(self, replica_id: str) -> CloudNode:
        for node in self.replicas:
            if node.id == replica_id:
                return node
        raise KeyError(replica_id)


def create_archive(replicas: int = 3, replication_factor: int = 3, scheme=SHA256,
                   materialized: bool = True, prefix: str = "cloud") -> CloudArchive:
    """New archive seeded with the genesis block on every holding replica."""
    archive = CloudArchive([CloudNode(f"{prefix}-{k}") for k in range(replicas)], replication_factor, scheme)
    genesis = make_genesis(archive.scheme) if materialized else genesis_record(archive.scheme)
    _write(archive, ChainSegment((genesis,)))
    return archive


def _write(archive: CloudArchive, segment: ChainSegment) -> StoreReceipt:
    holders = tuple(node.id for node in archive.holders)
    for node in archive.holders:
        node.write(segment)
    for block in segment.blocks:
        archive.index.record(block.height, holders, block.block_hash)
        archive.digests[block.height] = block_digest(block, archive.scheme)
    archive.size_bytes += segment.size_bytes
    receipt = StoreReceipt(segment.first_height, segment.last_height, segment.head.block_hash,
                           holders, segment.size_bytes)
    archive.receipts[(segment.first_height, segment.last_height, segment.head.block_hash)] = receipt
    return receipt


# ---- Operations ----

def store_segment(archive: CloudArchive, segment: ChainSegment) -> StoreReceipt:
    """
    Append a verified segment that extends the archive head.

    A segment already stored returns the earlier receipt and writes nothing.

    Raises:
        HeadGapError: segment does not start right after the archive head
        VerificationError: segment fails verify_chain against the archive head
    """
    key = (segment.first_height, segment.last_height, segment.head.block_hash)
    if key in archive.receipts:
        logger.debug("[Cloud] duplicate store of %d..%d ignored", segment.first_height, segment.last_height)
        return archive.receipts[key]
    head = get_head(archive)
    if segment.first_height != head.height + 1:
        raise HeadGapError(f"segment starts at {segment.first_height}, archive head is {head.height}")
    report = verify_chain(segment, trusted_head=head, scheme=archive.scheme)
    if not report.passed:
        raise VerificationError(
            f"segment {segment.first_height}..{segment.last_height} failed verification", report)
    receipt = _write(archive, segment)
    logger.info("[Cloud] stored %d..%d (%d bytes) on %d replicas",
                segment.first_height, segment.last_height, segment.size_bytes, len(receipt.replicas))
    return receipt


def head_votes(archive: CloudArchive):
    """Majority head and the replicas that disagree with it."""
    votes = {}
    tally = Counter()
    for node in archive.holders:
        head = node.head
        if head is None:
            continue
        key = (head.height, block_digest(head, archive.scheme))
        votes[node.id] = key
        tally[key] += 1
    if not tally:
        raise NoQuorumError("no replica holds a head")
    key, count = tally.most_common(1)[0]
    if count < archive.consistency_quorum:
        raise NoQuorumError(f"best head has {count} of {archive.replication_factor} replicas")
    winner = next(node.head for node in archive.holders if votes.get(node.id) == key)
    dissenters = tuple(rid for rid, k in votes.items() if k != key)
    return winner, dissenters


def get_head(archive: CloudArchive):
    head, dissenters = head_votes(archive)
    if dissenters:
        logger.warning("[Cloud] replicas %s disagree on the archive head", ", ".join(dissenters))
    return head


@dataclass(frozen=True)
class ConsistencyReport:
    divergent: Dict[int, Tuple[str, ...]]
    chain_failures: Dict[str, Tuple[int, ...]]
    checked_heights: int

    @property
    def consistent(self) -> bool:
        return not self.divergent and not self.chain_failures

    @property
    def divergent_replicas(self) -> Tuple[str, ...]:
        ids = {rid for rids in self.divergent.values() for rid in rids}
        ids.update(self.chain_failures)
        return tuple(sorted(ids))


def verify_consistency(archive: CloudArchive, heights: Optional[range] = None) -> ConsistencyReport:
    """Compare every holder's copy of each height against the digest recorded at store time."""
    if heights is None:
        heights = range(0, archive.head_height + 1)
    divergent = {}
    for h in heights:
        if h not in archive.index:
            continue
        expected = archive.digests[h]
        bad = tuple(
            node.id for node in archive.holders
            if h not in node.blocks or block_digest(node.blocks[h], archive.scheme) != expected
        )
        if bad:
            divergent[h] = bad
    chain_failures = {}
    checked = [h for h in heights if h in archive.index]
    if checked:
        lo, hi = checked[0], checked[-1]
        trusted = None
        for node in archive.holders:
            if not all(h in node.blocks for h in range(lo, hi + 1)):
                continue
            if lo > 0 and trusted is None:
                trusted = node.blocks.get(lo - 1)
            report = verify_chain(node.segment(lo, hi), trusted_head=trusted if lo > 0 else None,
                                  scheme=archive.scheme)
            failed = tuple(c.height for c in report.checks if not c.ok)
            if failed:
                chain_failures[node.id] = failed
    report = ConsistencyReport(divergent, chain_failures, len(checked))
    if not report.consistent:
        logger.warning("[Cloud] consistency check: %d divergent heights, replicas %s",
                       len(divergent), ", ".join(report.divergent_replicas))
    return report


def repair_replica(archive: CloudArchive, report: Optional[ConsistencyReport] = None) -> List[int]:
    """Overwrite divergent copies with the copy held by the replica majority."""
    report = report or verify_consistency(archive)
    repaired = []
    for h, bad in sorted(report.divergent.items()):
        good = next((node for node in archive.holders if node.id not in bad and h in node.blocks), None)
        if good is None:
            raise NoQuorumError(f"no intact copy of height {h}")
        for rid in bad:
            archive.replica(rid).blocks[h] = good.blocks[h]
        repaired.append(h)
    if repaired:
        logger.info("[Cloud] repaired %d heights from the replica majority", len(repaired))
    return repaired


def query_blocks(archive: CloudArchive, who: str, policy: AccessPolicy, heights: range) -> ChainSegment:
    """
    Read an archived range for an authorized party from any replica whose copy matches the majority.

    Raises:
        AccessDeniedError: ``who`` has no read grant on the archive
        RangeUnavailableError: range is empty, beyond the head, or no replica holds a clean copy
    """
    if not policy.check(who, ARCHIVE_RESOURCE, Permission.READ):
        raise AccessDeniedError(f"{who} may not read the archive")
    return _read_range(archive, heights)


def _read_range(archive: CloudArchive, heights: range) -> ChainSegment:
    if len(heights) == 0 or heights.start < 0 or heights[-1] > archive.head_height:
        raise RangeUnavailableError(f"heights {heights.start}..{heights.stop - 1} not archived "
                                    f"(head {archive.head_height})")
    for node in archive.holders:
        if all(h in node.blocks and block_digest(node.blocks[h], archive.scheme) == archive.digests[h]
               for h in heights):
            return node.segment(heights.start, heights[-1])
    raise RangeUnavailableError("no replica holds a consistent copy of the range")


def archive_chain(archive: CloudArchive) -> ChainSegment:
    """Whole archived chain from genesis, read from a clean replica."""
    return _read_range(archive, range(0, archive.head_height + 1))


# ---- Persistence ----

def save_archive(archive: CloudArchive, directory: str) -> str:
    """Write each replica's segments plus a head manifest. Materialized archives only."""
    os.makedirs(directory, exist_ok=True)
    for k, node in enumerate(archive.replicas):
        replica_dir = os.path.join(directory, f"replica-{k}")
        os.makedirs(replica_dir, exist_ok=True)
        for first, last in node.ranges:
            path = os.path.join(replica_dir, f"segment-{first}-{last}.bin")
            with open(path, "wb") as f:
                f.write(encode_segment(node.segment(first, last)))
    head = get_head(archive)
    manifest = {
        "head_height": head.height,
        "head_hash": head.block_hash.hex(),
        "hash_scheme": archive.scheme.id,
        "replicas": [node.id for node in archive.replicas],
        "replication_factor": archive.replication_factor,
        "size_bytes": archive.size_bytes,
        "ranges": [[a, b] for a, b in archive.holders[0].ranges],
    }
    path = os.path.join(directory, HEAD_MANIFEST)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info("[Cloud] archive saved to %s", directory)
    return path


def load_archive(directory: str) -> CloudArchive:
    """
    Rebuild an archive from ``save_archive`` output.

    Each replica is read as stored. The index and digests come from the majority copy, so a
    tampered replica file shows up in verify_consistency after loading.
    """
    with open(os.path.join(directory, HEAD_MANIFEST)) as f:
        manifest = json.load(f)
    scheme = get_hash_scheme(manifest["hash_scheme"])
    replicas = [CloudNode(rid) for rid in manifest["replicas"]]
    archive = CloudArchive(replicas, manifest["replication_factor"], scheme)
    for k, node in enumerate(replicas):
        replica_dir = os.path.join(directory, f"replica-{k}")
        for first, last in manifest["ranges"]:
            path = os.path.join(replica_dir, f"segment-{first}-{last}.bin")
            if not os.path.exists(path):
                continue
            with open(path, "rb") as f:
                segment = decode_segment(f.read(), scheme, verify=False)
            for block in segment.blocks:
                node.blocks[block.height] = block
            node.ranges.append((first, last))
    holder_ids = tuple(n.id for n in archive.holders)
    for first, last in manifest["ranges"]:
        size = 0
        for h in range(first, last + 1):
            copies = Counter(block_digest(n.blocks[h], scheme) for n in archive.holders if h in n.blocks)
            digest, count = copies.most_common(1)[0] if copies else (None, 0)
            if count < archive.consistency_quorum:
                raise NoQuorumError(f"no majority copy of height {h} in {directory}")
            block = next(n.blocks[h] for n in archive.holders
                         if h in n.blocks and block_digest(n.blocks[h], scheme) == digest)
            archive.index.record(h, holder_ids, block.block_hash)
            archive.digests[h] = digest
            size += block.size_bytes
        head_hash = archive.index.entries[last][1]
        archive.receipts[(first, last, head_hash)] = StoreReceipt(first, last, head_hash, holder_ids, size)
    archive.size_bytes = manifest["size_bytes"]
    return archive
