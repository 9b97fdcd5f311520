"""
Cloud connector - decides when the overlay synchronizes finalized blocks to the cloud archive,
runs the quorum vote on each request, uploads the segment, prunes local chains and keeps the
per-node fault ledger used to mark potentially malicious nodes.

A session goes: trigger -> SyncRequest broadcast -> peers with the same head send signed votes to
the coordinator -> coordinator broadcasts a SyncDecision carrying the votes -> the requester
uploads -> the cloud answers with a Regular or Exception response -> every node prunes on Regular.
"""
from __future__ import annotations

import logging
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from accounting import transfer_duration
from blockchain_connector import PermissionRegistry, Role, check_permission
from cloud_store import CloudArchive, get_head, store_segment, verify_consistency
from consensus import ConsensusConfig, elect_leader
from core_types import BlockHeader, ChainSegment, encode_header
from crypto import MAC33, KeyPair, sign, verify
from errors import (
    HeadGapError,
    HeadMismatchError,
    QuorumTimeoutError,
    TransferInterruptedError,
    VerificationError,
)

logger = logging.getLogger(__name__)

MALICIOUS_THRESHOLD = 2


# ---- Policy and trigger ----

class TriggerReason(str, Enum):
    THRESHOLD = "ThresholdReached"
    SCHEDULED = "Scheduled"


@dataclass(frozen=True)
class SyncPolicy:
    capacity_bytes: int
    trigger_threshold_bytes: int
    min_interval: float = 600.0
    schedule_period: Optional[float] = None

    def __post_init__(self):
        if self.trigger_threshold_bytes <= 0 or self.capacity_bytes <= 0:
            raise ValueError("capacity and threshold must be positive")
        if self.trigger_threshold_bytes > self.capacity_bytes:
            raise ValueError("trigger threshold exceeds disk capacity")
        if self.schedule_period is not None and self.schedule_period <= 0:
            raise ValueError("schedule_period must be positive when set")


@dataclass(frozen=True)
class TriggerDecision:
    reason: Optional[TriggerReason] = None
    suppressed: bool = False

    def __bool__(self):
        return self.reason is not None


def check_trigger(policy: SyncPolicy, local_bytes: int, now: float, last_sync_time: float,
                  last_request_time: Optional[float] = None) -> TriggerDecision:
    """
    Threshold or schedule, whichever comes first.

    A trigger less than ``min_interval`` after the previous request is suppressed.
    """
    if local_bytes >= policy.trigger_threshold_bytes:
        reason = TriggerReason.THRESHOLD
    elif policy.schedule_period is not None and now - last_sync_time >= policy.schedule_period:
        reason = TriggerReason.SCHEDULED
    else:
        return TriggerDecision()
    if last_request_time is not None and now - last_request_time < policy.min_interval:
        return TriggerDecision(None, suppressed=True)
    return TriggerDecision(reason)


# ---- Messages ----

def _pack(*parts) -> bytes:
    out = []
    for part in parts:
        if isinstance(part, bytes):
            out.append(part)
        elif isinstance(part, str):
            raw = part.encode()
            out.append(struct.pack("<H", len(raw)) + raw)
        else:
            out.append(struct.pack("<q", int(part)))
    return b"".join(out)


@dataclass(frozen=True)
class SyncRequest:
    requester: str
    height: int
    latest_block: BlockHeader
    reason: TriggerReason
    attempt: int = 0
    signature: bytes = b""

    def payload(self) -> bytes:
        return _pack(b"SREQ", self.requester, self.height, encode_header(self.latest_block),
                     self.reason.value, self.attempt)


@dataclass(frozen=True)
class SyncVote:
    voter: str
    requester: str
    height: int
    block_hash: bytes
    attempt: int
    signature: bytes = b""

    def payload(self) -> bytes:
        return _pack(b"SVOT", self.voter, self.requester, self.height, self.block_hash, self.attempt)


@dataclass(frozen=True)
class SyncDecision:
    coordinator: str
    requester: str
    height: int
    block_hash: bytes
    attempt: int
    approved: bool
    votes: Tuple[SyncVote, ...]
    signature: bytes = b""

    def payload(self) -> bytes:
        return _pack(b"SDEC", self.coordinator, self.requester, self.height, self.block_hash,
                     self.attempt, int(self.approved), len(self.votes))


class ResponseKind(str, Enum):
    REGULAR = "Regular"
    EXCEPTION = "Exception"


@dataclass(frozen=True)
class ResponseMessage:
    kind: ResponseKind
    requester: str
    request_height: int
    updated_head: Optional[BlockHeader] = None
    head_height: Optional[int] = None
    error_detail: str = ""
    cloud_fault: bool = False
    denied: bool = False
    final: bool = True
    signature: bytes = b""

    def payload(self) -> bytes:
        head = encode_header(self.updated_head) if self.updated_head is not None else b""
        return _pack(b"SRSP", self.kind.value, self.requester, self.request_height, head,
                     -1 if self.head_height is None else self.head_height, self.error_detail,
                     int(self.cloud_fault), int(self.denied), int(self.final))


def seal(message, keypair: KeyPair, sig_scheme=MAC33):
    """Return ``message`` with its signature field filled in."""
    return replace(message, signature=sign(sig_scheme, keypair, message.payload()))


def _signed(message, public_key: Optional[bytes], sig_scheme=MAC33) -> bool:
    return public_key is not None and verify(sig_scheme, public_key, message.payload(), message.signature)


def make_sync_request(requester: str, head, reason: TriggerReason, keypair: KeyPair,
                      attempt: int = 0, sig_scheme=MAC33) -> SyncRequest:
    return seal(SyncRequest(requester, head.height, head.header, reason, attempt), keypair, sig_scheme)


def verify_sync_request(req: SyncRequest, registry: PermissionRegistry, sig_scheme=MAC33) -> bool:
    if not check_permission(registry, req.requester, Role.JOIN):
        return False
    return _signed(req, registry.public_key(req.requester), sig_scheme)


# ---- Session ----

class Decision(str, Enum):
    PENDING = "Pending"
    APPROVED = "Approved"
    REJECTED = "Rejected"


class Outcome(str, Enum):
    NONE = "None"
    REGULAR = "Regular"
    EXCEPTION = "Exception"


@dataclass
class SyncSession:
    request: SyncRequest
    agree_votes: Dict[str, SyncVote] = field(default_factory=dict)
    decision: Decision = Decision.PENDING
    segment: Optional[ChainSegment] = None
    outcome: Outcome = Outcome.NONE

    @property
    def key(self) -> Tuple[str, int, int]:
        return (self.request.requester, self.request.height, self.request.attempt)


def vote_on_sync(req: SyncRequest, my_latest, *, voter: str, keypair: KeyPair,
                 registry: PermissionRegistry, sig_scheme=MAC33) -> Optional[SyncVote]:
    """Signed agreement iff the requester's head is this node's head; forged requests are dropped."""
    if not verify_sync_request(req, registry, sig_scheme):
        logger.warning("[Sync] %s dropped a request from %s with a bad signature", voter, req.requester)
        return None
    if my_latest.block_hash != req.latest_block.block_hash:
        return None
    vote = SyncVote(voter, req.requester, req.height, req.latest_block.block_hash, req.attempt)
    return seal(vote, keypair, sig_scheme)


def _vote_matches(vote: SyncVote, req: SyncRequest) -> bool:
    return (vote.requester, vote.height, vote.block_hash, vote.attempt) == (
        req.requester, req.height, req.latest_block.block_hash, req.attempt)


def count_sync_votes(votes, req: SyncRequest, cfg: ConsensusConfig, registry: PermissionRegistry,
                     sig_scheme=MAC33) -> int:
    voters = {
        v.voter for v in votes
        if v.voter in cfg.rotation and _vote_matches(v, req)
        and _signed(v, registry.public_key(v.voter), sig_scheme)
    }
    return len(voters)


def add_sync_vote(session: SyncSession, vote: SyncVote) -> SyncSession:
    if _vote_matches(vote, session.request) and vote.voter not in session.agree_votes:
        session.agree_votes[vote.voter] = vote
    return session


def aggregate_sync_votes(session: SyncSession, cfg: ConsensusConfig, registry: PermissionRegistry, *,
                         deadline_passed: bool = False, sig_scheme=MAC33) -> SyncSession:
    """
    Approve once more than 2n/3 distinct valid votes match the request head.

    Raises:
        QuorumTimeoutError: deadline passed without a quorum; the session is left Rejected
    """
    if session.decision is not Decision.PENDING:
        return session
    valid = count_sync_votes(session.agree_votes.values(), session.request, cfg, registry, sig_scheme)
    if valid >= cfg.quorum:
        session.decision = Decision.APPROVED
        logger.info("[Sync] request %s@%d approved with %d/%d votes",
                    session.request.requester, session.request.height, valid, cfg.n)
    elif deadline_passed:
        session.decision = Decision.REJECTED
        raise QuorumTimeoutError(f"request {session.request.requester}@{session.request.height} "
                                 f"has {valid}/{cfg.n} votes at the deadline")
    return session


def make_sync_decision(session: SyncSession, coordinator: str, keypair: KeyPair, sig_scheme=MAC33) -> SyncDecision:
    req = session.request
    votes = tuple(sorted(session.agree_votes.values(), key=lambda v: v.voter))
    decision = SyncDecision(coordinator, req.requester, req.height, req.latest_block.block_hash, req.attempt,
                            session.decision is Decision.APPROVED, votes)
    return seal(decision, keypair, sig_scheme)


def verify_sync_decision(decision: SyncDecision, req: SyncRequest, cfg: ConsensusConfig,
                         registry: PermissionRegistry, sig_scheme=MAC33) -> bool:
    """
    Re-check an approval independently of the coordinator: it must come from the session's
    coordinator and carry a quorum of individually valid votes for the request head.
    """
    if decision.coordinator != elect_leader(cfg, req.height, req.attempt):
        return False
    if (decision.requester, decision.height, decision.block_hash, decision.attempt) != (
            req.requester, req.height, req.latest_block.block_hash, req.attempt):
        return False
    if not _signed(decision, registry.public_key(decision.coordinator), sig_scheme):
        return False
    if not decision.approved:
        return True
    return count_sync_votes(decision.votes, req, cfg, registry, sig_scheme) >= cfg.quorum


# ---- Local chain ----

class LocalChain:
    """Blocks a node still holds: the last synced head followed by everything finalized since."""

    def __init__(self, base):
        self._blocks = [base]
        self.size_bytes = base.size_bytes

    def __len__(self):
        return len(self._blocks)

    def __iter__(self):
        return iter(self._blocks)

    @property
    def head(self):
        return self._blocks[-1]

    @property
    def base_height(self) -> int:
        return self._blocks[0].height

    def append(self, block):
        if block.height != self.head.height + 1 or block.prev_hash != self.head.block_hash:
            raise HeadMismatchError(f"block {block.height} does not extend local head {self.head.height}")
        self._blocks.append(block)
        self.size_bytes += block.size_bytes

    def block_at(self, height: int):
        idx = height - self.base_height
        if 0 <= idx < len(self._blocks):
            return self._blocks[idx]
        return None

    def segment(self, first: int, last: int) -> ChainSegment:
        lo, hi = first - self.base_height, last - self.base_height
        if lo < 0 or hi >= len(self._blocks) or lo > hi:
            raise HeadGapError(f"local chain {self.base_height}..{self.head.height} lacks {first}..{last}")
        return ChainSegment(tuple(self._blocks[lo:hi + 1]))

    def prune_to(self, height: int) -> int:
        idx = height - self.base_height
        dropped = self._blocks[:idx]
        self._blocks = self._blocks[idx:]
        freed = sum(b.size_bytes for b in dropped)
        self.size_bytes -= freed
        return freed


# ---- Transfer ----

@dataclass(frozen=True)
class TransferPlan:
    session: SyncSession
    segment: Optional[ChainSegment]
    size_bytes: int
    duration_s: float

    @property
    def denied(self) -> bool:
        return self.segment is None


def plan_transfer(session: SyncSession, cloud_head, local: LocalChain, bandwidth_bps: float,
                  overhead: float = 1.0) -> TransferPlan:
    """
    Cut the segment from just after the cloud head through the approved head.

    A request whose head the cloud already holds is denied (zero-size plan).

    Raises:
        HeadGapError: the cloud head is not on the local chain
    """
    req = session.request
    if cloud_head.block_hash == req.latest_block.block_hash:
        return TransferPlan(session, None, 0, 0.0)
    local_copy = local.block_at(cloud_head.height)
    if local_copy is None or local_copy.block_hash != cloud_head.block_hash:
        raise HeadGapError(f"cloud head {cloud_head.height} is not an ancestor of the local chain")
    if req.height <= cloud_head.height:
        return TransferPlan(session, None, 0, 0.0)
    segment = local.segment(cloud_head.height + 1, req.height)
    session.segment = segment
    size = segment.size_bytes
    return TransferPlan(session, segment, size, transfer_duration(size, bandwidth_bps, overhead))


def _respond(kind, req, *, head=None, detail="", cloud_fault=False, denied=False,
             cloud_key: Optional[KeyPair] = None, sig_scheme=MAC33) -> ResponseMessage:
    msg = ResponseMessage(kind, req.requester, req.height,
                          head.header if head is not None else None,
                          head.height if head is not None else None,
                          detail, cloud_fault, denied)
    return seal(msg, cloud_key, sig_scheme) if cloud_key is not None else msg


def complete_transfer(archive: CloudArchive, plan: TransferPlan, segment: Optional[ChainSegment] = None, *,
                      interrupted: bool = False, cloud_key: Optional[KeyPair] = None,
                      sig_scheme=MAC33) -> ResponseMessage:
    """
    Store the uploaded segment and check the replicas; ``segment`` overrides the planned one when the
    uploader sent something else.
    """
    session = plan.session
    req = session.request
    if plan.denied:
        session.outcome = Outcome.REGULAR
        logger.info("[Sync] cloud denied duplicate request %s@%d", req.requester, req.height)
        return _respond(ResponseKind.REGULAR, req, head=get_head(archive), denied=True,
                        cloud_key=cloud_key, sig_scheme=sig_scheme)
    sent = segment if segment is not None else plan.segment
    try:
        if interrupted:
            raise TransferInterruptedError(f"upload of {plan.size_bytes} bytes aborted")
        store_segment(archive, sent)
    except (TransferInterruptedError, VerificationError, HeadGapError) as exc:
        session.outcome = Outcome.EXCEPTION
        logger.warning("[Sync] upload by %s failed: %s", req.requester, exc)
        return _respond(ResponseKind.EXCEPTION, req, detail=str(exc), cloud_key=cloud_key, sig_scheme=sig_scheme)
    report = verify_consistency(archive, range(sent.first_height, sent.last_height + 1))
    if not report.consistent:
        session.outcome = Outcome.EXCEPTION
        detail = f"replicas {', '.join(report.divergent_replicas)} diverge"
        return _respond(ResponseKind.EXCEPTION, req, detail=detail, cloud_fault=True,
                        cloud_key=cloud_key, sig_scheme=sig_scheme)
    session.outcome = Outcome.REGULAR
    return _respond(ResponseKind.REGULAR, req, head=get_head(archive), cloud_key=cloud_key, sig_scheme=sig_scheme)


def execute_sync(session: SyncSession, archive: CloudArchive, local: LocalChain, bandwidth_bps: float,
                 overhead: float = 1.0, *, interrupted: bool = False,
                 cloud_key: Optional[KeyPair] = None, sig_scheme=MAC33) -> Tuple[ResponseMessage, float]:
    """
    Plan and complete one transfer in a single step.

    Returns:
        (response, simulated transfer seconds)
    """
    if session.decision is not Decision.APPROVED:
        raise ValueError("only approved sessions transfer")
    plan = plan_transfer(session, get_head(archive), local, bandwidth_bps, overhead)
    response = complete_transfer(archive, plan, interrupted=interrupted, cloud_key=cloud_key, sig_scheme=sig_scheme)
    return response, plan.duration_s


def prune_local(chain: LocalChain, response: ResponseMessage) -> LocalChain:
    """
    Keep the updated head as the first block of the partial chain and drop everything before it.

    Raises:
        HeadMismatchError: the updated head is not on the local chain
    """
    if response.kind is not ResponseKind.REGULAR:
        raise ValueError("only Regular responses prune")
    local_copy = chain.block_at(response.head_height)
    if local_copy is None or local_copy.block_hash != response.updated_head.block_hash:
        raise HeadMismatchError(f"updated head {response.head_height} unknown locally")
    freed = chain.prune_to(response.head_height)
    logger.debug("[Sync] pruned %d bytes, %d blocks remain", freed, len(chain))
    return chain


def verify_response(response: ResponseMessage, cloud_public: bytes, sig_scheme=MAC33) -> bool:
    return _signed(response, cloud_public, sig_scheme)


# ---- Exceptions and marking ----

@dataclass
class FaultLedger:
    errors: Counter = field(default_factory=Counter)
    marked: set = field(default_factory=set)
    alerts: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class ExceptionAction:
    retry_with: Optional[str]
    marked: bool = False
    alert: Optional[str] = None


def handle_sync_exception(ledger: FaultLedger, node: str, error: str, candidates: Sequence[str] = (),
                          cloud_fault: bool = False) -> ExceptionAction:
    """
    Charge an upload error to ``node`` and pick who retries.

    Errors caused by a cloud replica are not charged; the same node retries after repair.
    The second error from one node marks it potentially malicious and raises an admin alert.
    """
    if cloud_fault:
        return ExceptionAction(retry_with=node)
    ledger.errors[node] += 1
    marked = alert = None
    if ledger.errors[node] >= MALICIOUS_THRESHOLD and node not in ledger.marked:
        ledger.marked.add(node)
        alert = f"{node} marked PotentialMalicious after {ledger.errors[node]} sync errors: {error}"
        ledger.alerts.append(alert)
        marked = True
        logger.warning("[Sync] %s", alert)
    retry_with = next((c for c in candidates if c != node and c not in ledger.marked), None)
    return ExceptionAction(retry_with=retry_with, marked=bool(marked), alert=alert)
