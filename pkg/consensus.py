"""
Epoch-based BFT consensus with instant finality.

Epoch e extends the chain from height e to e + 1. The leader of (epoch, view) is the node at
index (epoch + view) mod n of the rotation. It proposes one block; every node that accepts it
broadcasts a signed vote, and a block is final once quorum = floor(2n/3) + 1 distinct votes name
its hash. A node that finalizes through votes forwards the block with its votes as a commit
certificate so lagging peers can adopt it.

When a view times out a node broadcasts a signed view-change and stops counting votes for that
view. A new view starts only on a quorum of view-change messages (directly or inside the new
leader's NEW_VIEW). Nodes hold their first vote in a new view for a guard interval longer than
the network's worst-case delivery time, so a certificate from the previous view always lands
before a competing block could gather votes.

The functions here are pure state transitions over EpochState; message transport, timers and the
guard interval live in the node actor.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Mapping, Optional, Tuple

from core_types import header_signing_bytes
from crypto import MAC33, KeyPair, sign, verify
from errors import DuplicateVoteError, InvalidBlockError, NotLeaderError, StaleVoteError

logger = logging.getLogger(__name__)


def quorum_size(n: int) -> int:
    """Smallest integer strictly greater than 2n/3."""
    if n < 1:
        raise ValueError("quorum needs at least one node")
    return 2 * n // 3 + 1


def max_faulty(n: int) -> int:
    return (n - 1) // 3


@dataclass(frozen=True)
class ConsensusConfig:
    rotation: Tuple[str, ...]
    epoch_timeout: float = 0.5

    def __post_init__(self):
        rotation = tuple(self.rotation)
        if not rotation:
            raise ValueError("consensus needs at least one node")
        if len(set(rotation)) != len(rotation):
            raise ValueError("rotation lists a node twice")
        object.__setattr__(self, "rotation", rotation)

    @property
    def n(self) -> int:
        return len(self.rotation)

    @property
    def f_max(self) -> int:
        return max_faulty(self.n)

    @property
    def quorum(self) -> int:
        return quorum_size(self.n)


def elect_leader(cfg: ConsensusConfig, epoch: int, view: int) -> str:
    return cfg.rotation[(epoch + view) % cfg.n]


class Phase(Enum):
    IDLE = "idle"
    PROPOSED = "proposed"
    VOTED = "voted"
    FINALIZED = "finalized"
    VIEW_CHANGING = "view_changing"


# ---- Wire messages ----

def _ev(epoch: int, view: int) -> bytes:
    return struct.pack("<QI", epoch, view)


@dataclass(frozen=True)
class Proposal:
    epoch: int
    view: int
    block: object
    sender: str
    signature: bytes

    def payload(self) -> bytes:
        return b"PROP" + _ev(self.epoch, self.view) + self.block.block_hash + self.sender.encode()


@dataclass(frozen=True)
class SignedVote:
    voter: str
    epoch: int
    view: int
    block_hash: bytes
    signature: bytes

    def payload(self) -> bytes:
        return b"VOTE" + _ev(self.epoch, self.view) + self.block_hash + self.voter.encode()


@dataclass(frozen=True)
class ViewChangeMessage:
    sender: str
    epoch: int
    new_view: int
    signature: bytes

    def payload(self) -> bytes:
        return b"VCHG" + _ev(self.epoch, self.new_view) + self.sender.encode()


@dataclass(frozen=True)
class NewViewMessage:
    sender: str
    epoch: int
    view: int
    certificate: Tuple[ViewChangeMessage, ...]
    signature: bytes

    def payload(self) -> bytes:
        return b"NVEW" + _ev(self.epoch, self.view) + self.sender.encode()


@dataclass(frozen=True)
class CommitCertificate:
    epoch: int
    view: int
    block: object
    votes: Tuple[SignedVote, ...]


def make_proposal(epoch, view, block, sender, keypair: KeyPair, sig_scheme=MAC33) -> Proposal:
    draft = Proposal(epoch, view, block, sender, b"")
    return Proposal(epoch, view, block, sender, sign(sig_scheme, keypair, draft.payload()))


def make_vote(voter, epoch, view, block_hash, keypair: KeyPair, sig_scheme=MAC33) -> SignedVote:
    draft = SignedVote(voter, epoch, view, block_hash, b"")
    return SignedVote(voter, epoch, view, block_hash, sign(sig_scheme, keypair, draft.payload()))


def _signed_by(msg, sender: str, keys: Mapping[str, bytes], sig_scheme) -> bool:
    pk = keys.get(sender)
    return pk is not None and verify(sig_scheme, pk, msg.payload(), msg.signature)


# ---- Decisions ----

@dataclass(frozen=True)
class VoteDecision:
    vote: Optional[SignedVote]
    reason: str = ""


@dataclass(frozen=True)
class FinalizeDecision:
    finalized: bool
    block: object = None
    votes: Tuple[SignedVote, ...] = ()
    reason: str = ""


# ---- State ----

@dataclass
class EpochState:
    node_id: str
    cfg: ConsensusConfig
    head: object
    view: int = 0
    phase: Phase = Phase.IDLE
    proposal: Optional[Proposal] = None
    votes: Dict[str, SignedVote] = field(default_factory=dict)
    view_change_msgs: Dict[int, Dict[str, ViewChangeMessage]] = field(default_factory=dict)
    pending_view: Optional[int] = None
    voted: bool = False
    blocks_seen: Dict[bytes, object] = field(default_factory=dict)
    certificate: Tuple[ViewChangeMessage, ...] = ()

    @property
    def epoch(self) -> int:
        return self.head.height

    @property
    def leader(self) -> str:
        return elect_leader(self.cfg, self.epoch, self.view)

    def is_current(self, epoch: int, view: int) -> bool:
        return epoch == self.epoch and view == self.view


BlockCheck = Callable[[object, object], list]


def structural_problems(block, head, leader_pk: Optional[bytes], sig_scheme=MAC33) -> list:
    """Chain-level checks every proposal must pass regardless of how the body is represented."""
    problems = []
    if block.height != head.height + 1:
        problems.append(f"height {block.height} does not follow {head.height}")
    if block.prev_hash != head.block_hash:
        problems.append("does not link to the local head")
    if block.timestamp <= head.timestamp:
        problems.append("timestamp not after the local head")
    if block.num_txs < 1:
        problems.append("empty block")
    if leader_pk is None or not verify(sig_scheme, leader_pk, header_signing_bytes(block.header),
                                       block.header.signature):
        problems.append("leader signature invalid")
    return problems


def on_proposal(state: EpochState, proposal: Proposal, sender: str, *, keys: Mapping[str, bytes],
                keypair: KeyPair, check_block: Optional[BlockCheck] = None,
                sig_scheme=MAC33) -> VoteDecision:
    """
    Re-verify a proposal and vote for it.

    Raises:
        StaleVoteError: proposal is not for the current (epoch, view)
        NotLeaderError: sender is not the leader of (epoch, view)
        InvalidBlockError: signature, link, Merkle/commitment or timestamp check failed
    """
    if not state.is_current(proposal.epoch, proposal.view):
        raise StaleVoteError(f"proposal for ({proposal.epoch}, {proposal.view}) at "
                             f"({state.epoch}, {state.view})")
    expected = elect_leader(state.cfg, proposal.epoch, proposal.view)
    if sender != expected or proposal.sender != sender:
        raise NotLeaderError(f"{sender} proposed but the leader is {expected}")
    if not _signed_by(proposal, sender, keys, sig_scheme):
        raise InvalidBlockError("proposal signature invalid", ["proposal signature invalid"])
    if state.phase is Phase.VIEW_CHANGING:
        return VoteDecision(None, "view change in progress")
    if state.voted:
        return VoteDecision(None, "already voted in this view")
    block = proposal.block
    problems = structural_problems(block, state.head, keys.get(sender), sig_scheme)
    if check_block is not None and not problems:
        problems.extend(check_block(block, state.head))
    if problems:
        raise InvalidBlockError(f"block {block.block_hash.hex()[:12]} rejected", problems)
    state.proposal = proposal
    state.blocks_seen[block.block_hash] = block
    state.voted = True
    state.phase = Phase.VOTED
    vote = make_vote(state.node_id, state.epoch, state.view, block.block_hash, keypair, sig_scheme)
    return VoteDecision(vote, "ok")


def _try_finalize(state: EpochState) -> FinalizeDecision:
    tally: Dict[bytes, list] = {}
    for vote in state.votes.values():
        tally.setdefault(vote.block_hash, []).append(vote)
    for block_hash, votes in tally.items():
        if len(votes) >= state.cfg.quorum:
            block = state.blocks_seen.get(block_hash)
            if block is None:
                return FinalizeDecision(False, reason="quorum reached, block not yet received")
            state.phase = Phase.FINALIZED
            return FinalizeDecision(True, block, tuple(sorted(votes, key=lambda v: v.voter)))
    return FinalizeDecision(False, reason="waiting for votes")


def on_vote(state: EpochState, vote: SignedVote, *, keys: Mapping[str, bytes],
            sig_scheme=MAC33) -> FinalizeDecision:
    """
    Count a vote; finalize when one block hash has quorum distinct voters.

    Raises:
        StaleVoteError: vote is not for the current (epoch, view)
        DuplicateVoteError: voter already counted (callers ignore it)
    """
    if not state.is_current(vote.epoch, vote.view):
        raise StaleVoteError(f"vote for ({vote.epoch}, {vote.view}) at ({state.epoch}, {state.view})")
    if state.phase is Phase.FINALIZED:
        return FinalizeDecision(False, reason="already finalized")
    if state.phase is Phase.VIEW_CHANGING:
        return FinalizeDecision(False, reason="view change in progress")
    if vote.voter not in state.cfg.rotation or not _signed_by(vote, vote.voter, keys, sig_scheme):
        return FinalizeDecision(False, reason="vote signature invalid")
    if vote.voter in state.votes:
        raise DuplicateVoteError(f"{vote.voter} already voted in ({vote.epoch}, {vote.view})")
    state.votes[vote.voter] = vote
    return _try_finalize(state)


def count_valid_votes(cfg: ConsensusConfig, votes, epoch: int, view: int, block_hash: bytes,
                      keys: Mapping[str, bytes], sig_scheme=MAC33) -> int:
    voters = set()
    for vote in votes:
        if (vote.epoch, vote.view, vote.block_hash) != (epoch, view, block_hash):
            continue
        if vote.voter in cfg.rotation and _signed_by(vote, vote.voter, keys, sig_scheme):
            voters.add(vote.voter)
    return len(voters)


def on_commit_certificate(state: EpochState, cert: CommitCertificate, *, keys: Mapping[str, bytes],
                          check_block: Optional[BlockCheck] = None, sig_scheme=MAC33) -> FinalizeDecision:
    """Adopt a block finalized elsewhere after re-checking the block and its quorum of votes."""
    if cert.epoch != state.epoch:
        raise StaleVoteError(f"certificate for epoch {cert.epoch} at epoch {state.epoch}")
    if state.phase is Phase.FINALIZED:
        return FinalizeDecision(False, reason="already finalized")
    block = cert.block
    leader = elect_leader(state.cfg, cert.epoch, cert.view)
    problems = structural_problems(block, state.head, keys.get(leader), sig_scheme)
    if check_block is not None and not problems:
        problems.extend(check_block(block, state.head))
    if problems:
        return FinalizeDecision(False, reason="; ".join(problems))
    valid = count_valid_votes(state.cfg, cert.votes, cert.epoch, cert.view, block.block_hash, keys, sig_scheme)
    if valid < state.cfg.quorum:
        return FinalizeDecision(False, reason=f"certificate carries {valid} valid votes")
    state.phase = Phase.FINALIZED
    return FinalizeDecision(True, block, tuple(cert.votes))


def advance_epoch(state: EpochState, block) -> EpochState:
    state.head = block
    state.view = 0
    state.phase = Phase.IDLE
    state.proposal = None
    state.votes = {}
    state.view_change_msgs = {}
    state.pending_view = None
    state.voted = False
    state.blocks_seen = {}
    state.certificate = ()
    return state


# ---- View change ----

def trigger_view_change(state: EpochState, reason: str, keypair: KeyPair, sig_scheme=MAC33) -> ViewChangeMessage:
    """Leave the current view: stop counting its votes and ask for the next one."""
    target = (state.pending_view or state.view) + 1
    state.pending_view = target
    state.phase = Phase.VIEW_CHANGING
    state.proposal = None
    state.votes = {}
    draft = ViewChangeMessage(state.node_id, state.epoch, target, b"")
    msg = ViewChangeMessage(state.node_id, state.epoch, target, sign(sig_scheme, keypair, draft.payload()))
    state.view_change_msgs.setdefault(target, {})[state.node_id] = msg
    logger.info("[Consensus] %s: epoch %d view %d -> %d requested (%s)",
                state.node_id, state.epoch, state.view, target, reason)
    return msg


def enter_view(state: EpochState, view: int) -> EpochState:
    state.certificate = tuple(state.view_change_msgs.get(view, {}).values())
    state.view = view
    state.phase = Phase.IDLE
    state.proposal = None
    state.votes = {}
    state.voted = False
    state.pending_view = None
    state.view_change_msgs = {v: msgs for v, msgs in state.view_change_msgs.items() if v > view}
    return state


def on_view_change(state: EpochState, msg: ViewChangeMessage, *, keys: Mapping[str, bytes],
                   sig_scheme=MAC33) -> Optional[int]:
    """Collect a view-change message. Returns the view entered when a quorum completes, else None."""
    if msg.epoch != state.epoch or msg.new_view <= state.view:
        return None
    if msg.sender not in state.cfg.rotation or not _signed_by(msg, msg.sender, keys, sig_scheme):
        return None
    bucket = state.view_change_msgs.setdefault(msg.new_view, {})
    bucket[msg.sender] = msg
    if len(bucket) >= state.cfg.quorum:
        enter_view(state, msg.new_view)
        return msg.new_view
    return None


def make_new_view(state: EpochState, keypair: KeyPair, sig_scheme=MAC33) -> NewViewMessage:
    if state.leader != state.node_id:
        raise NotLeaderError(f"{state.node_id} does not lead view {state.view}")
    draft = NewViewMessage(state.node_id, state.epoch, state.view, state.certificate, b"")
    return NewViewMessage(state.node_id, state.epoch, state.view, state.certificate,
                          sign(sig_scheme, keypair, draft.payload()))


def on_new_view(state: EpochState, msg: NewViewMessage, *, keys: Mapping[str, bytes],
                sig_scheme=MAC33) -> Optional[int]:
    if msg.epoch != state.epoch or msg.view <= state.view:
        return None
    if msg.sender != elect_leader(state.cfg, msg.epoch, msg.view) or not _signed_by(msg, msg.sender, keys, sig_scheme):
        return None
    senders = {
        vc.sender for vc in msg.certificate
        if vc.epoch == msg.epoch and vc.new_view == msg.view and vc.sender in state.cfg.rotation
        and _signed_by(vc, vc.sender, keys, sig_scheme)
    }
    if len(senders) < state.cfg.quorum:
        return None
    state.view_change_msgs[msg.view] = {vc.sender: vc for vc in msg.certificate if vc.sender in senders}
    enter_view(state, msg.view)
    return msg.view
