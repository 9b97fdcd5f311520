"""
Simulation actors: OverlayNode (blockchain connector, consensus, local chain and cloud connector of one
gateway) and CloudService (the cloud end of the synchronization protocol).

Both are driven by SimEvents; every side effect goes through the shared NodeContext so runs stay
deterministic for a given seed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from accounting import StorageAccounting
from blockchain_connector import (
    BlockchainConnector,
    PermissionRegistry,
    build_block,
    build_block_record,
    record_problems,
)
from cloud_connector import (
    Decision,
    FaultLedger,
    LocalChain,
    ResponseKind,
    ResponseMessage,
    SyncDecision,
    SyncPolicy,
    SyncRequest,
    SyncSession,
    SyncVote,
    TriggerReason,
    add_sync_vote,
    aggregate_sync_votes,
    check_trigger,
    complete_transfer,
    handle_sync_exception,
    make_sync_decision,
    make_sync_request,
    plan_transfer,
    prune_local,
    seal,
    verify_response,
    verify_sync_decision,
    verify_sync_request,
    vote_on_sync,
)
from cloud_store import CloudArchive, get_head, repair_replica, verify_consistency
from consensus import (
    CommitCertificate,
    ConsensusConfig,
    EpochState,
    NewViewMessage,
    Phase,
    Proposal,
    SignedVote,
    ViewChangeMessage,
    advance_epoch,
    elect_leader,
    make_new_view,
    make_proposal,
    on_commit_certificate,
    on_new_view,
    on_proposal,
    on_view_change,
    on_vote,
    trigger_view_change,
)
from core_types import ChainSegment, verify_chain
from crypto import KeyPair
from errors import (
    ChainSplitterError,
    DuplicateVoteError,
    HeadGapError,
    HeadMismatchError,
    InvalidBlockError,
    NotLeaderError,
    PoolFullError,
    QuorumTimeoutError,
    StaleVoteError,
    UnknownBehaviorError,
)
from metrics import MetricsLog
from sim_engine import NS_PER_S, Envelope, EventQueue, MsgKind, SimEvent, SimNetwork, Timer, TimerKind
from workload import gateway_of

logger = logging.getLogger(__name__)


# ---- Scripted faults ----

class FaultBehavior(str, Enum):
    SILENT = "Silent"
    EQUIVOCATE = "Equivocate"
    BAD_SYNC = "BadSync"
    TAMPER_CLOUD_REPLICA = "TamperCloudReplica"


BAD_SYNC_MODES = ("corrupt", "interrupt")


def parse_behavior(name) -> FaultBehavior:
    try:
        return FaultBehavior(name)
    except ValueError:
        raise UnknownBehaviorError(f"unknown fault behavior {name!r}") from None


@dataclass(frozen=True)
class ScriptedFault:
    behavior: FaultBehavior
    start_ns: int = 0
    end_ns: Optional[int] = None
    mode: str = "corrupt"

    def active(self, now_ns: int) -> bool:
        return self.start_ns <= now_ns and (self.end_ns is None or now_ns < self.end_ns)


def corrupt_blocks(blocks: Sequence) -> list:
    """Change one header field of a block past the base while keeping its stale hash."""
    blocks = list(blocks)
    if len(blocks) < 2:
        return blocks
    mid = 1 + (len(blocks) - 1) // 2
    target = blocks[mid]
    header = replace(target.header, merkle_root=bytes(b ^ 0xFF for b in target.header.merkle_root))
    blocks[mid] = replace(target, header=header)
    return blocks


# ---- Shared context ----

@dataclass(frozen=True)
class NodeSettings:
    materialized: bool
    hash_scheme: object
    sig_scheme: object
    max_txs: int
    epoch_timeout_ns: int
    guard_ns: int
    vote_timeout_ns: int
    stagger_ns: int
    max_attempts: int
    policy: Optional[SyncPolicy]
    bandwidth_bps: float
    overhead: float
    session_timeout_ns: int
    consistency_check_ns: Optional[int] = None
    retry_bound: int = 3


@dataclass
class NodeContext:
    queue: EventQueue
    network: SimNetwork
    log: MetricsLog
    accounting: StorageAccounting
    consensus: ConsensusConfig
    registry: PermissionRegistry
    keys: Dict[str, bytes]
    settings: NodeSettings
    cloud_id: str
    on_finalized: Callable[[str, object, tuple], None]
    seen_views: set = field(default_factory=set)

    @property
    def now(self) -> int:
        return self.queue.now

    def event(self, kind: str, node: str, detail: str = ""):
        self.log.record_event(self.queue.now, kind, node, detail)


@dataclass(frozen=True)
class UploadOffer:
    request: SyncRequest
    decision: SyncDecision
    uploader: str
    blocks: tuple
    interrupted: bool = False


# ---- Overlay node ----

class OverlayNode:
    def __init__(self, node_id: str, index: int, keypair: KeyPair, ctx: NodeContext, genesis, pool,
                 faults: Sequence[ScriptedFault] = ()):
        self.id = node_id
        self.index = index
        self.keypair = keypair
        self.ctx = ctx
        self.s = ctx.settings
        self.pool = pool
        self.connector = None
        if self.s.materialized:
            self.connector = BlockchainConnector(node_id, ctx.registry, pool, self.s.retry_bound)
        self.faults = tuple(faults)
        self.state = EpochState(node_id, ctx.consensus, genesis)
        self.local = LocalChain(genesis)
        self.deferred: List[Envelope] = []
        self.buffered: List[Tuple[Proposal, str]] = []
        self.guard_until = 0
        self._deadline_seq = 0
        self.deadline_for: Optional[Tuple[int, int]] = None
        # sync
        self.last_sync_time = 0.0
        self.last_request_time: Optional[float] = None
        self._broadcast_seq = 0
        self.pending_broadcast: Optional[Tuple[int, TriggerReason]] = None
        self.my_request: Optional[SyncRequest] = None
        self.open_session: Optional[Tuple[str, int]] = None
        self.open_since = 0
        self.seen_requests: Dict[Tuple[str, int, int], SyncRequest] = {}
        self.coord_sessions: Dict[Tuple[str, int, int], SyncSession] = {}
        self.early_votes: Dict[Tuple[str, int, int], List[SyncVote]] = {}
        self.deferred_sync: List[SyncRequest] = []
        self.pending_prune: Optional[ResponseMessage] = None
        self.alerts: List[Tuple[str, str]] = []
        self._report_local()

    # ---- helpers ----

    def _fault(self, behavior: FaultBehavior) -> Optional[ScriptedFault]:
        now = self.ctx.now
        return next((f for f in self.faults if f.behavior is behavior and f.active(now)), None)

    @property
    def silent(self) -> bool:
        return self._fault(FaultBehavior.SILENT) is not None

    @property
    def peers(self) -> Tuple[str, ...]:
        return tuple(p for p in self.ctx.consensus.rotation if p != self.id)

    def _send(self, dst: str, kind: MsgKind, body):
        if self.silent:
            return
        self.ctx.network.send(self.id, dst, kind, body)

    def _broadcast(self, kind: MsgKind, body, dsts: Optional[Sequence[str]] = None):
        if self.silent:
            return
        self.ctx.network.broadcast(self.id, dsts if dsts is not None else self.peers, kind, body)

    def _now_s(self) -> float:
        return self.ctx.now / NS_PER_S

    def _report_local(self):
        self.ctx.accounting.set_local(self.id, self.local.size_bytes, self._now_s())

    def _check_block(self, block, head) -> list:
        if not self.s.materialized:
            return record_problems(block, self.pool, self.s.hash_scheme)
        report = verify_chain(ChainSegment((block,)), trusted_head=head, scheme=self.s.hash_scheme)
        problems = [p for c in report.checks for p in c.problems]
        picked = self.pool.peek(block.num_txs)
        if [v.post_mark_hash for v in picked] != [e.tx_hash for e in block.body.entries]:
            problems.append("body does not match the local pool")
        return problems

    # ---- dispatch ----

    def handle(self, event: SimEvent):
        payload = event.payload
        if isinstance(payload, Timer):
            handler = self._timers.get(payload.kind)
            if handler is not None:
                handler(self, payload.data)
            return
        handler = self._messages.get(payload.kind)
        if handler is not None:
            handler(self, payload)

    # ---- workload and proposing ----

    def on_batch(self, batch, txs=None):
        """Called by the harness at every block-interval tick with the batch every gateway delivered."""
        if self.s.materialized:
            for tx in txs:
                try:
                    self.connector.submit(tx, gateway_of(tx))
                except PoolFullError:
                    self.ctx.log.bump("txs_rejected")
                except ChainSplitterError as exc:
                    self.ctx.log.bump("txs_rejected")
                    logger.debug("[Connector] %s rejected tx %d: %s", self.id, tx.tx_id, exc)
        else:
            accepted = self.pool.add_batch(batch)
            if accepted < batch.count:
                self.ctx.log.bump("txs_rejected", batch.count - accepted)
        if len(self.pool) and self.state.phase is not Phase.FINALIZED:
            self._arm_deadline()
        self._maybe_propose()

    def _maybe_propose(self):
        st = self.state
        if st.leader != self.id or st.phase is not Phase.IDLE or st.voted:
            return
        if self.ctx.now < self.guard_until or not len(self.pool) or self.silent:
            return
        self._propose()

    def _build(self, not_before: int = 0):
        build = build_block if self.s.materialized else build_block_record
        return build(self.pool, self.state.head, self.s.max_txs, self.keypair, not_before=not_before,
                     leader_id=self.id, current_leader=self.state.leader,
                     scheme=self.s.hash_scheme, sig_scheme=self.s.sig_scheme)

    def _propose(self):
        st = self.state
        block = self._build()
        st.phase = Phase.PROPOSED
        if self._fault(FaultBehavior.EQUIVOCATE):
            twin = self._build(block.timestamp + 1)
            half = len(self.peers) // 2
            for i, peer in enumerate(self.peers):
                chosen = block if i < half else twin
                prop = make_proposal(st.epoch, st.view, chosen, self.id, self.keypair, self.s.sig_scheme)
                self._send(peer, MsgKind.PROPOSAL, prop)
            logger.debug("[Consensus] %s equivocated at epoch %d", self.id, st.epoch)
            return
        prop = make_proposal(st.epoch, st.view, block, self.id, self.keypair, self.s.sig_scheme)
        self._broadcast(MsgKind.PROPOSAL, prop)
        self._on_proposal_from(prop, self.id)

    # ---- consensus messages ----

    def _position(self, epoch: int, view: int) -> int:
        """-1 past, 0 current, 1 future relative to (epoch, view)."""
        mine = (self.state.epoch, self.state.view)
        if (epoch, view) < mine:
            return -1
        return 0 if (epoch, view) == mine else 1

    def _defer(self, env: Envelope):
        self.deferred.append(env)

    def _replay_deferred(self):
        pending, self.deferred = self.deferred, []
        for env in pending:
            self._messages[env.kind](self, env)

    def _on_proposal(self, env: Envelope):
        self._on_proposal_from(env.body, env.src)

    def _on_proposal_from(self, prop: Proposal, sender: str):
        pos = self._position(prop.epoch, prop.view)
        if pos < 0:
            return
        if pos > 0:
            self._defer(Envelope(MsgKind.PROPOSAL, sender, self.id, prop))
            return
        if self.ctx.now < self.guard_until:
            self.buffered.append((prop, sender))
            return
        try:
            decision = on_proposal(self.state, prop, sender, keys=self.ctx.keys, keypair=self.keypair,
                                   check_block=self._check_block, sig_scheme=self.s.sig_scheme)
        except (NotLeaderError, InvalidBlockError) as exc:
            self.ctx.log.bump("proposals_rejected")
            logger.info("[Consensus] %s rejected proposal from %s: %s", self.id, sender, exc)
            return
        except StaleVoteError:
            return
        if decision.vote is not None:
            self._broadcast(MsgKind.VOTE, decision.vote)
            self._on_vote_msg(decision.vote)

    def _on_vote(self, env: Envelope):
        self._on_vote_msg(env.body)

    def _on_vote_msg(self, vote: SignedVote):
        pos = self._position(vote.epoch, vote.view)
        if pos < 0:
            return
        if pos > 0:
            self._defer(Envelope(MsgKind.VOTE, vote.voter, self.id, vote))
            return
        try:
            fd = on_vote(self.state, vote, keys=self.ctx.keys, sig_scheme=self.s.sig_scheme)
        except (DuplicateVoteError, StaleVoteError):
            return
        if fd.finalized:
            self._finalize(fd.block, fd.votes, broadcast=True)

    def _on_commit(self, env: Envelope):
        cert: CommitCertificate = env.body
        if cert.epoch < self.state.epoch or self.state.phase is Phase.FINALIZED:
            return
        if cert.epoch > self.state.epoch:
            self._defer(env)
            return
        fd = on_commit_certificate(self.state, cert, keys=self.ctx.keys, check_block=self._check_block,
                                   sig_scheme=self.s.sig_scheme)
        if fd.finalized:
            self._finalize(fd.block, fd.votes, broadcast=False)

    def _finalize(self, block, votes, broadcast: bool):
        st = self.state
        if broadcast:
            view = votes[0].view if votes else st.view
            self._broadcast(MsgKind.COMMIT, CommitCertificate(st.epoch, view, block, tuple(votes)))
        self.ctx.on_finalized(self.id, block, tuple(votes))
        if self.s.materialized:
            self.pool.discard([v.pool_key for v in self.pool.peek(block.num_txs)])
            self.connector.head_timestamp = block.timestamp
        else:
            self.pool.consume(block.num_txs)
        stale = self.pool.evict_stale(block.timestamp)
        if stale:
            self.ctx.log.bump("txs_rejected", stale)
            logger.warning("[Connector] %s dropped %d pooled txs not newer than block %d",
                           self.id, stale, block.height)
        self.local.append(block)
        advance_epoch(st, block)
        self.buffered = []
        self.guard_until = 0
        self.deadline_for = None
        self._report_local()
        logger.debug("[Consensus] %s finalized height %d", self.id, block.height)
        self._apply_pending_prune()
        self._replay_deferred()
        self._release_sync_votes()
        # triggers fire right after a finalization, while the overlay agrees on the head
        self._check_sync()

    # ---- view change ----

    def _arm_deadline(self, extra_ns: int = 0):
        key = (self.state.epoch, self.state.view)
        if self.deadline_for == key and not extra_ns:
            return
        self.deadline_for = key
        self._deadline_seq += 1
        self.ctx.queue.schedule_in(self.s.epoch_timeout_ns + extra_ns, self.id,
                                   Timer(TimerKind.EPOCH_DEADLINE, (key, self._deadline_seq)))

    def _on_deadline(self, data):
        key, seq = data
        st = self.state
        if seq != self._deadline_seq or key != (st.epoch, st.view) or st.phase is Phase.FINALIZED:
            return
        msg = trigger_view_change(st, "epoch timeout", self.keypair, self.s.sig_scheme)
        self._broadcast(MsgKind.VIEW_CHANGE, msg)
        self._deadline_seq += 1
        self.ctx.queue.schedule_in(self.s.epoch_timeout_ns, self.id,
                                   Timer(TimerKind.EPOCH_DEADLINE, (key, self._deadline_seq)))
        self._after_view_change_msg(on_view_change(st, msg, keys=self.ctx.keys, sig_scheme=self.s.sig_scheme))

    def _on_view_change(self, env: Envelope):
        msg: ViewChangeMessage = env.body
        if msg.epoch > self.state.epoch:
            self._defer(env)
            return
        entered = on_view_change(self.state, msg, keys=self.ctx.keys, sig_scheme=self.s.sig_scheme)
        self._after_view_change_msg(entered)

    def _after_view_change_msg(self, entered: Optional[int]):
        if entered is not None:
            self._entered_view(entered)

    def _on_new_view(self, env: Envelope):
        msg: NewViewMessage = env.body
        if msg.epoch > self.state.epoch:
            self._defer(env)
            return
        entered = on_new_view(self.state, msg, keys=self.ctx.keys, sig_scheme=self.s.sig_scheme)
        if entered is not None:
            self._entered_view(entered)

    def _entered_view(self, view: int):
        st = self.state
        key = (st.epoch, view)
        if key not in self.ctx.seen_views:
            self.ctx.seen_views.add(key)
            self.ctx.log.bump("view_changes")
            self.ctx.event("VIEW_CHANGE", self.id, f"epoch {st.epoch} view {view} leader {st.leader}")
        self.buffered = []
        self.guard_until = self.ctx.now + self.s.guard_ns
        self.ctx.queue.schedule_in(self.s.guard_ns, self.id, Timer(TimerKind.GUARD_EXPIRED, key))
        self._arm_deadline(extra_ns=self.s.guard_ns)
        if st.leader == self.id:
            self._broadcast(MsgKind.NEW_VIEW, make_new_view(st, self.keypair, self.s.sig_scheme))
        self._replay_deferred()

    def _on_guard(self, key):
        if key != (self.state.epoch, self.state.view) or self.ctx.now < self.guard_until:
            return
        buffered, self.buffered = self.buffered, []
        for prop, sender in buffered:
            self._on_proposal_from(prop, sender)
        self._maybe_propose()

    # ---- synchronization: requests ----

    def _check_sync(self):
        policy = self.s.policy
        if policy is None or self.silent:
            return
        now_ns = self.ctx.now
        if self.open_session is not None and now_ns - self.open_since > self.s.session_timeout_ns:
            logger.warning("[Sync] %s gave up waiting on session %s", self.id, self.open_session)
            self.open_session = None
            self.my_request = None
        if self.open_session is not None or self.my_request is not None or self.pending_broadcast is not None:
            return
        now = self._now_s()
        decision = check_trigger(policy, self.local.size_bytes, now, self.last_sync_time, self.last_request_time)
        if not decision:
            return
        self._note_request(decision.reason, now)
        self._broadcast_seq += 1
        self.pending_broadcast = (self._broadcast_seq, decision.reason)
        self.ctx.queue.schedule_in(self.index * self.s.stagger_ns, self.id,
                                   Timer(TimerKind.SYNC_BROADCAST, self._broadcast_seq))

    def _note_request(self, reason: TriggerReason, now: float):
        period = self.s.policy.schedule_period if self.s.policy else None
        if reason is TriggerReason.SCHEDULED and period:
            self.last_sync_time = math.floor(now / period) * period
        else:
            self.last_sync_time = now
        self.last_request_time = now

    def _on_sync_broadcast(self, seq):
        if self.pending_broadcast is None or self.pending_broadcast[0] != seq:
            return
        reason = self.pending_broadcast[1]
        self.pending_broadcast = None
        self._request(reason, attempt=0)

    def _request(self, reason: TriggerReason, attempt: int):
        req = make_sync_request(self.id, self.local.head, reason, self.keypair, attempt, self.s.sig_scheme)
        self.my_request = req
        self.ctx.log.bump("sync_sessions")
        self.ctx.event("SYNC_REQUEST", self.id, f"height {req.height} attempt {attempt} {reason.value}")
        self._broadcast(MsgKind.SYNC_REQUEST, req)
        self.ctx.queue.schedule_in(2 * self.s.vote_timeout_ns, self.id,
                                   Timer(TimerKind.DECISION_DEADLINE, (req.requester, req.height, req.attempt)))
        self._on_sync_request_msg(req)

    def _on_decision_deadline(self, key):
        req = self.my_request
        if req is None or (req.requester, req.height, req.attempt) != key or self.open_session is not None:
            return
        if req.attempt + 1 < self.s.max_attempts:
            logger.info("[Sync] %s: no decision for height %d, asking the next coordinator", self.id, req.height)
            self._request(req.reason, req.attempt + 1)
        else:
            logger.warning("[Sync] %s: request for height %d abandoned after %d attempts",
                           self.id, req.height, self.s.max_attempts)
            self.my_request = None

    def _on_sync_request(self, env: Envelope):
        self._on_sync_request_msg(env.body)

    def _on_sync_request_msg(self, req: SyncRequest):
        if not verify_sync_request(req, self.ctx.registry, self.s.sig_scheme):
            logger.warning("[Sync] %s dropped a forged request claiming %s", self.id, req.requester)
            return
        key = (req.requester, req.height, req.attempt)
        self.seen_requests[key] = req
        if req.requester != self.id:
            if self.pending_broadcast is not None and req.height >= self.local.head.height:
                self.pending_broadcast = None
            if self.s.policy is not None:
                self._note_request(req.reason, self._now_s())
        if elect_leader(self.ctx.consensus, req.height, req.attempt) == self.id and key not in self.coord_sessions:
            session = SyncSession(req)
            self.coord_sessions[key] = session
            for vote in self.early_votes.pop(key, []):
                add_sync_vote(session, vote)
            self.ctx.queue.schedule_in(self.s.vote_timeout_ns, self.id, Timer(TimerKind.VOTE_DEADLINE, key))
            self._aggregate(key)
        self._vote_or_defer(req)

    def _vote_or_defer(self, req: SyncRequest):
        head = self.local.head
        if head.height < req.height:
            self.deferred_sync.append(req)
            return
        if head.height > req.height:
            return
        vote = vote_on_sync(req, head, voter=self.id, keypair=self.keypair, registry=self.ctx.registry,
                            sig_scheme=self.s.sig_scheme)
        if vote is None:
            return
        coordinator = elect_leader(self.ctx.consensus, req.height, req.attempt)
        if coordinator == self.id:
            self._on_sync_vote_msg(vote)
        else:
            self._send(coordinator, MsgKind.SYNC_VOTE, vote)

    def _release_sync_votes(self):
        pending, self.deferred_sync = self.deferred_sync, []
        for req in pending:
            self._vote_or_defer(req)

    # ---- synchronization: coordinator ----

    def _on_sync_vote(self, env: Envelope):
        self._on_sync_vote_msg(env.body)

    def _on_sync_vote_msg(self, vote: SyncVote):
        key = (vote.requester, vote.height, vote.attempt)
        session = self.coord_sessions.get(key)
        if session is None:
            self.early_votes.setdefault(key, []).append(vote)
            return
        add_sync_vote(session, vote)
        self._aggregate(key)

    def _aggregate(self, key, deadline_passed: bool = False):
        session = self.coord_sessions[key]
        before = session.decision
        try:
            aggregate_sync_votes(session, self.ctx.consensus, self.ctx.registry,
                                 deadline_passed=deadline_passed, sig_scheme=self.s.sig_scheme)
        except QuorumTimeoutError as exc:
            logger.info("[Sync] %s: %s", self.id, exc)
            self.ctx.log.bump("sync_rejected")
            self.ctx.event("SYNC_REJECTED", self.id, f"height {key[1]} attempt {key[2]}")
        if session.decision is before:
            return
        if session.decision is Decision.APPROVED:
            self.ctx.log.bump("sync_approved")
            self.ctx.event("SYNC_APPROVED", self.id,
                           f"height {key[1]} votes {len(session.agree_votes)}/{self.ctx.consensus.n}")
        decision = make_sync_decision(session, self.id, self.keypair, self.s.sig_scheme)
        self._broadcast(MsgKind.SYNC_DECISION, decision)
        self._on_sync_decision_msg(decision)

    def _on_vote_deadline(self, key):
        session = self.coord_sessions.get(key)
        if session is not None and session.decision is Decision.PENDING:
            self._aggregate(key, deadline_passed=True)

    # ---- synchronization: decision, upload, response ----

    def _on_sync_decision(self, env: Envelope):
        self._on_sync_decision_msg(env.body)

    def _on_sync_decision_msg(self, dec: SyncDecision):
        key = (dec.requester, dec.height, dec.attempt)
        req = self.seen_requests.get(key)
        if req is None or not verify_sync_decision(dec, req, self.ctx.consensus, self.ctx.registry,
                                                   self.s.sig_scheme):
            logger.debug("[Sync] %s ignored an unverifiable decision for %s", self.id, key)
            return
        mine = self.my_request is not None and (self.my_request.requester, self.my_request.height,
                                                self.my_request.attempt) == key
        if not dec.approved:
            if mine:
                self.my_request = None
            return
        self.open_session = (dec.requester, dec.height)
        self.open_since = self.ctx.now
        if mine:
            self._upload(req, dec)

    def _upload(self, req: SyncRequest, dec: SyncDecision):
        if self.local.head.height < req.height or self.local.base_height > req.height:
            logger.warning("[Sync] %s cannot upload height %d from %d..%d", self.id, req.height,
                           self.local.base_height, self.local.head.height)
            return
        blocks = self.local.segment(self.local.base_height, req.height).blocks
        bad = self._fault(FaultBehavior.BAD_SYNC)
        interrupted = False
        if bad is not None:
            if bad.mode == "interrupt":
                interrupted = True
            else:
                blocks = tuple(corrupt_blocks(blocks))
            logger.info("[Sync] %s misbehaves on upload (%s)", self.id, bad.mode)
        offer = UploadOffer(req, dec, self.id, tuple(blocks), interrupted)
        self._send(self.ctx.cloud_id, MsgKind.SEGMENT_CHUNK, offer)

    def _on_sync_retry(self, env: Envelope):
        req, dec = env.body
        self.seen_requests.setdefault((req.requester, req.height, req.attempt), req)
        self._upload(req, dec)

    def _on_sync_response(self, env: Envelope):
        resp: ResponseMessage = env.body
        if not verify_response(resp, self.ctx.keys.get(self.ctx.cloud_id), self.s.sig_scheme):
            logger.warning("[Sync] %s dropped an unsigned cloud response", self.id)
            return
        if self.open_session == (resp.requester, resp.request_height) or resp.kind is ResponseKind.REGULAR:
            self.open_session = None
        if self.my_request is not None and self.my_request.height <= resp.request_height:
            self.my_request = None
        if resp.kind is ResponseKind.REGULAR:
            self.pending_prune = resp
            self._apply_pending_prune()
        self._check_sync()

    def _apply_pending_prune(self):
        resp = self.pending_prune
        if resp is None:
            return
        if resp.head_height < self.local.base_height:
            self.pending_prune = None
            return
        try:
            prune_local(self.local, resp)
        except HeadMismatchError:
            return
        self.pending_prune = None
        self._report_local()

    def _on_admin_alert(self, env: Envelope):
        if env.src != self.ctx.cloud_id:
            return
        accused, detail = env.body
        self.alerts.append((accused, detail))
        logger.warning("[Sync] %s: administrator alert about %s (%s)", self.id, accused, detail)

    _timers = {
        TimerKind.EPOCH_DEADLINE: _on_deadline,
        TimerKind.GUARD_EXPIRED: _on_guard,
        TimerKind.SYNC_BROADCAST: _on_sync_broadcast,
        TimerKind.DECISION_DEADLINE: _on_decision_deadline,
        TimerKind.VOTE_DEADLINE: _on_vote_deadline,
    }
    _messages = {
        MsgKind.PROPOSAL: _on_proposal,
        MsgKind.VOTE: _on_vote,
        MsgKind.COMMIT: _on_commit,
        MsgKind.VIEW_CHANGE: _on_view_change,
        MsgKind.NEW_VIEW: _on_new_view,
        MsgKind.SYNC_REQUEST: _on_sync_request,
        MsgKind.SYNC_VOTE: _on_sync_vote,
        MsgKind.SYNC_DECISION: _on_sync_decision,
        MsgKind.SYNC_RETRY: _on_sync_retry,
        MsgKind.SYNC_RESPONSE: _on_sync_response,
        MsgKind.ADMIN_ALERT: _on_admin_alert,
    }


# ---- Cloud service ----

class CloudService:
    """Receives uploads, stores them in the archive, answers the overlay and keeps the fault ledger."""

    def __init__(self, cloud_id: str, archive: CloudArchive, keypair: KeyPair, ctx: NodeContext,
                 tamper: Dict[str, Sequence[ScriptedFault]] = None):
        self.id = cloud_id
        self.archive = archive
        self.keypair = keypair
        self.ctx = ctx
        self.s = ctx.settings
        self.ledger = FaultLedger()
        self.tamper = dict(tamper or {})
        self.in_flight: Optional[UploadOffer] = None
        self.queued: List[UploadOffer] = []
        self.retried: set = set()
        self.ctx.accounting.set_cloud(archive.size_bytes)

    @property
    def overlay(self) -> Tuple[str, ...]:
        return self.ctx.consensus.rotation

    def start(self):
        if self.s.consistency_check_ns:
            self.ctx.queue.schedule(self.s.consistency_check_ns, self.id, Timer(TimerKind.CONSISTENCY_CHECK))

    def handle(self, event: SimEvent):
        payload = event.payload
        if isinstance(payload, Timer):
            if payload.kind is TimerKind.TRANSFER_DONE:
                self._finish(*payload.data)
            elif payload.kind is TimerKind.CONSISTENCY_CHECK:
                self._periodic_check()
            return
        if payload.kind is MsgKind.SEGMENT_CHUNK:
            self._on_offer(payload.body)

    def _session_key(self, offer: UploadOffer):
        req = offer.request
        return (req.requester, req.height, req.attempt)

    def _respond(self, resp: ResponseMessage, dsts: Optional[Sequence[str]] = None):
        resp = seal(resp, self.keypair, self.s.sig_scheme)
        self.ctx.network.broadcast(self.id, dsts if dsts is not None else self.overlay,
                                   MsgKind.SYNC_RESPONSE, resp)

    def _on_offer(self, offer: UploadOffer):
        req = offer.request
        if not verify_sync_decision(offer.decision, req, self.ctx.consensus, self.ctx.registry,
                                    self.s.sig_scheme) or not offer.decision.approved:
            logger.warning("[Cloud] upload from %s without a valid approval", offer.uploader)
            return
        if offer.uploader in self.ledger.marked:
            self._redirect(offer, f"{offer.uploader} is marked")
            return
        if self.in_flight is not None:
            if self.in_flight.request.height >= req.height:
                self.ctx.log.bump("sync_denied")
                self.ctx.event("SYNC_DENIED", offer.uploader, f"height {req.height} already in transfer")
                return
            self.queued.append(offer)
            return
        self._start(offer)

    def _start(self, offer: UploadOffer):
        req = offer.request
        session = SyncSession(req, decision=Decision.APPROVED)
        try:
            local = LocalChain(offer.blocks[0])
            for block in offer.blocks[1:]:
                local.append(block)
            plan = plan_transfer(session, get_head(self.archive), local, self.s.bandwidth_bps, self.s.overhead)
        except (HeadMismatchError, HeadGapError) as exc:
            self._failed(offer, str(exc), cloud_fault=False)
            return
        if plan.denied:
            resp = complete_transfer(self.archive, plan)
            key = self._session_key(offer)
            if key in self.retried:
                self.retried.discard(key)
                self._completed(offer, resp)
            else:
                self.ctx.log.bump("sync_denied")
                self.ctx.event("SYNC_DENIED", offer.uploader, f"height {req.height} already archived")
                self._respond(resp)
            return
        self.in_flight = offer
        duration_ns = int(plan.duration_s * NS_PER_S)
        if offer.interrupted:
            duration_ns //= 2
        self.ctx.event("SYNC_TRANSFER", offer.uploader,
                       f"heights {plan.segment.first_height}..{plan.segment.last_height} "
                       f"{plan.size_bytes} bytes {plan.duration_s:.1f}s")
        self.ctx.queue.schedule_in(duration_ns, self.id, Timer(TimerKind.TRANSFER_DONE, (offer, plan)))

    def _finish(self, offer: UploadOffer, plan):
        self.in_flight = None
        for node in self.archive.replicas:
            node.honest = not any(f.active(self.ctx.now) for f in self.tamper.get(node.id, ()))
        resp = complete_transfer(self.archive, plan, plan.segment, interrupted=offer.interrupted)
        self.ctx.accounting.set_cloud(self.archive.size_bytes)
        if resp.kind is ResponseKind.REGULAR:
            self._completed(offer, resp)
        else:
            self._failed(offer, resp.error_detail, resp.cloud_fault)
        if self.in_flight is None and self.queued:
            self._start(self.queued.pop(0))

    def _completed(self, offer: UploadOffer, resp: ResponseMessage):
        self.ctx.log.bump("sync_completed")
        self.ctx.event("SYNC_COMPLETED", offer.uploader,
                       f"cloud head {resp.head_height} ({self.archive.size_bytes} bytes)")
        self._respond(resp)

    def _candidates(self, uploader: str) -> List[str]:
        ids = list(self.overlay)
        k = ids.index(uploader) if uploader in ids else 0
        return ids[k + 1:] + ids[:k]

    def _failed(self, offer: UploadOffer, detail: str, cloud_fault: bool):
        self.ctx.log.bump("exceptions")
        self.ctx.event("SYNC_EXCEPTION", offer.uploader, detail)
        action = handle_sync_exception(self.ledger, offer.uploader, detail,
                                       self._candidates(offer.uploader), cloud_fault)
        if cloud_fault:
            repaired = repair_replica(self.archive)
            self.ctx.event("CLOUD_REPAIR", self.id, f"{len(repaired)} heights")
            self.retried.add(self._session_key(offer))
        if action.marked:
            self.ctx.log.bump("malicious_marks")
            self.ctx.log.bump("admin_alerts")
            self.ctx.event("MALICIOUS_MARK", offer.uploader, f"{self.ledger.errors[offer.uploader]} errors")
            self.ctx.event("ADMIN_ALERT", offer.uploader, action.alert)
            alert = (offer.uploader, action.alert)
            self.ctx.network.broadcast(self.id, self.overlay, MsgKind.ADMIN_ALERT, alert)
        if action.retry_with is not None:
            self.ctx.network.send(self.id, action.retry_with, MsgKind.SYNC_RETRY, (offer.request, offer.decision))
            return
        req = offer.request
        self._respond(ResponseMessage(ResponseKind.EXCEPTION, req.requester, req.height, error_detail=detail))

    def _redirect(self, offer: UploadOffer, reason: str):
        target = next((c for c in self._candidates(offer.uploader) if c not in self.ledger.marked), None)
        logger.info("[Cloud] %s; redirecting upload to %s", reason, target)
        if target is not None:
            self.ctx.network.send(self.id, target, MsgKind.SYNC_RETRY, (offer.request, offer.decision))

    def _periodic_check(self):
        report = verify_consistency(self.archive)
        if not report.consistent:
            self.ctx.event("CLOUD_DIVERGENCE", self.id, ", ".join(report.divergent_replicas))
            repair_replica(self.archive, report)
        self.ctx.queue.schedule_in(self.s.consistency_check_ns, self.id, Timer(TimerKind.CONSISTENCY_CHECK))
