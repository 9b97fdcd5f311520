"""
Sync trigger, the sync-vote quorum (including a dishonest aggregator), transfer, pruning and fault marking.
"""
import pytest

from accounting import transfer_duration
from blockchain_connector import ALL_ROLES, PermissionRegistry
from cloud_connector import (
    Decision,
    FaultLedger,
    LocalChain,
    ResponseKind,
    ResponseMessage,
    SyncPolicy,
    SyncSession,
    SyncVote,
    TriggerReason,
    add_sync_vote,
    aggregate_sync_votes,
    check_trigger,
    complete_transfer,
    execute_sync,
    handle_sync_exception,
    make_sync_decision,
    make_sync_request,
    plan_transfer,
    prune_local,
    seal,
    verify_response,
    verify_sync_decision,
    vote_on_sync,
)
from cloud_store import create_archive, get_head
from conftest import build_chain
from consensus import ConsensusConfig
from crypto import derive_keypair
from errors import HeadGapError, HeadMismatchError, QuorumTimeoutError

GB = 1_000_000_000
POLICY = SyncPolicy(128 * GB, 100 * GB, min_interval=600.0, schedule_period=86_400.0)

BIG_IDS = tuple(f"n-{k:02d}" for k in range(50))
BIG_KEYS = {node: derive_keypair(f"big-{node}") for node in BIG_IDS}
BIG_CFG = ConsensusConfig(BIG_IDS)


@pytest.fixture(scope="module")
def big_registry():
    reg = PermissionRegistry()
    for node, kp in BIG_KEYS.items():
        reg.admit(node, ALL_ROLES, kp.public)
    return reg


@pytest.fixture
def chain():
    return build_chain(5)


def _local(blocks):
    local = LocalChain(blocks[0])
    for block in blocks[1:]:
        local.append(block)
    return local


def _approved(requester, head, keypair):
    req = make_sync_request(requester, head, TriggerReason.SCHEDULED, keypair)
    return SyncSession(req, decision=Decision.APPROVED)


# -------------------------
# Trigger
# -------------------------
def test_threshold_trigger():
    assert check_trigger(POLICY, 100 * GB, 10.0, 0.0).reason is TriggerReason.THRESHOLD
    assert not check_trigger(POLICY, 99 * GB, 10.0, 0.0)


def test_schedule_trigger():
    assert check_trigger(POLICY, GB, 86_400.0, 0.0).reason is TriggerReason.SCHEDULED
    assert not check_trigger(POLICY, GB, 86_399.0, 0.0)


def test_min_interval_suppresses():
    decision = check_trigger(POLICY, 100 * GB, 1000.0, 0.0, last_request_time=700.0)
    assert not decision and decision.suppressed
    assert check_trigger(POLICY, 100 * GB, 1300.0, 0.0, last_request_time=700.0)


def test_policy_rejects_threshold_above_capacity():
    with pytest.raises(ValueError):
        SyncPolicy(100, 200)


# -------------------------
# Sync-vote quorum, n=50
# -------------------------
def _request(head):
    return make_sync_request("n-07", head, TriggerReason.THRESHOLD, BIG_KEYS["n-07"])


def _votes(req, head, voters, registry):
    return [vote_on_sync(req, head, voter=v, keypair=BIG_KEYS[v], registry=registry) for v in voters]


def test_34_of_50_votes_approve(chain, big_registry):
    head = chain[-1]
    req = _request(head)
    session = SyncSession(req)
    for vote in _votes(req, head, BIG_IDS[:34], big_registry):
        add_sync_vote(session, vote)
    aggregate_sync_votes(session, BIG_CFG, big_registry)
    assert session.decision is Decision.APPROVED


def test_33_of_50_votes_reject_at_the_deadline(chain, big_registry):
    head = chain[-1]
    req = _request(head)
    session = SyncSession(req)
    for vote in _votes(req, head, BIG_IDS[:33], big_registry):
        add_sync_vote(session, vote)
    aggregate_sync_votes(session, BIG_CFG, big_registry)
    assert session.decision is Decision.PENDING
    with pytest.raises(QuorumTimeoutError):
        aggregate_sync_votes(session, BIG_CFG, big_registry, deadline_passed=True)
    assert session.decision is Decision.REJECTED


def test_peers_on_another_head_do_not_vote(chain, big_registry):
    req = _request(chain[-1])
    assert vote_on_sync(req, chain[-2], voter="n-01", keypair=BIG_KEYS["n-01"], registry=big_registry) is None
    forged = make_sync_request("n-07", chain[-1], TriggerReason.THRESHOLD, BIG_KEYS["n-08"])
    assert vote_on_sync(forged, chain[-1], voter="n-01", keypair=BIG_KEYS["n-01"], registry=big_registry) is None


def test_dishonest_aggregator_is_caught(chain, big_registry):
    head = chain[-1]
    req = _request(head)
    coordinator = "n-05"
    assert BIG_CFG.rotation[(req.height + req.attempt) % 50] == coordinator
    honest = _votes(req, head, BIG_IDS[:33], big_registry)

    def decision_with(votes, who=coordinator):
        session = SyncSession(req, decision=Decision.APPROVED)
        for vote in votes:
            session.agree_votes[f"{vote.voter}#{len(session.agree_votes)}"] = vote
        return make_sync_decision(session, who, BIG_KEYS[who])

    real = _votes(req, head, BIG_IDS[:34], big_registry)
    assert verify_sync_decision(decision_with(real), req, BIG_CFG, big_registry)

    forged_vote = seal(SyncVote(BIG_IDS[40], req.requester, req.height, head.block_hash, req.attempt),
                       BIG_KEYS[BIG_IDS[41]])
    assert not verify_sync_decision(decision_with(honest + [forged_vote]), req, BIG_CFG, big_registry)
    assert not verify_sync_decision(decision_with(honest + [honest[0]]), req, BIG_CFG, big_registry)
    assert not verify_sync_decision(decision_with(real, who="n-06"), req, BIG_CFG, big_registry)

    stale = _request(chain[-2])
    stale_votes = _votes(stale, chain[-2], BIG_IDS[:34], big_registry)
    assert not verify_sync_decision(decision_with(stale_votes), req, BIG_CFG, big_registry)


# -------------------------
# Transfer and prune
# -------------------------
def test_plan_complete_and_prune(chain, node_keys):
    archive = create_archive()
    local = _local(chain)
    session = _approved("node-0", chain[-1], node_keys["node-0"])
    plan = plan_transfer(session, get_head(archive), local, 200e6, 1.3)
    assert [b.height for b in plan.segment] == [1, 2, 3, 4, 5]
    assert plan.size_bytes == sum(b.size_bytes for b in chain[1:])
    assert plan.duration_s == pytest.approx(transfer_duration(plan.size_bytes, 200e6, 1.3))

    cloud_key = derive_keypair("cloud")
    resp = complete_transfer(archive, plan, cloud_key=cloud_key)
    assert resp.kind is ResponseKind.REGULAR and resp.head_height == 5 and not resp.denied
    assert verify_response(resp, cloud_key.public)
    assert archive.head_height == 5

    prune_local(local, resp)
    assert local.base_height == 5 and len(local) == 1
    assert local.size_bytes == chain[5].size_bytes


def test_replayed_session_is_denied_without_writing(chain, node_keys):
    archive = create_archive()
    local = _local(chain)
    session = _approved("node-0", chain[-1], node_keys["node-0"])
    execute_sync(session, archive, local, 200e6)
    size = archive.size_bytes
    replay = plan_transfer(session, get_head(archive), local, 200e6)
    assert replay.denied and replay.size_bytes == 0
    resp = complete_transfer(archive, replay)
    assert resp.kind is ResponseKind.REGULAR and resp.denied
    assert archive.size_bytes == size


def test_unapproved_sessions_do_not_transfer(chain, node_keys):
    req = make_sync_request("node-0", chain[-1], TriggerReason.SCHEDULED, node_keys["node-0"])
    with pytest.raises(ValueError):
        execute_sync(SyncSession(req), create_archive(), _local(chain), 200e6)


def test_interrupted_upload_is_an_exception(chain, node_keys):
    archive = create_archive()
    session = _approved("node-0", chain[-1], node_keys["node-0"])
    resp, _ = execute_sync(session, archive, _local(chain), 200e6, interrupted=True)
    assert resp.kind is ResponseKind.EXCEPTION
    assert archive.head_height == 0


def test_cloud_head_must_be_on_the_local_chain(chain, node_keys):
    local = LocalChain(chain[3])
    local.append(chain[4])
    session = _approved("node-0", chain[4], node_keys["node-0"])
    with pytest.raises(HeadGapError):
        plan_transfer(session, get_head(create_archive()), local, 200e6)


def test_prune_rejects_unknown_heads(chain):
    local = _local(chain)
    other = build_chain(5, per_block=2)
    resp = ResponseMessage(ResponseKind.REGULAR, "node-0", 5, other[5].header, 5)
    with pytest.raises(HeadMismatchError):
        prune_local(local, resp)
    with pytest.raises(ValueError):
        prune_local(local, ResponseMessage(ResponseKind.EXCEPTION, "node-0", 5))


def test_local_chain_only_extends_its_head(chain):
    local = _local(chain[:3])
    with pytest.raises(HeadMismatchError):
        local.append(chain[4])
    with pytest.raises(HeadGapError):
        local.segment(0, 4)


# -------------------------
# Exceptions and marking
# -------------------------
def test_second_error_marks_the_node():
    ledger = FaultLedger()
    first = handle_sync_exception(ledger, "node-2", "bad merkle root", ["node-3", "node-0"])
    assert not first.marked and first.retry_with == "node-3"
    second = handle_sync_exception(ledger, "node-2", "bad merkle root", ["node-3", "node-0"])
    assert second.marked and "node-2" in ledger.marked
    assert "PotentialMalicious" in second.alert and ledger.alerts == [second.alert]


def test_one_error_per_node_does_not_mark():
    ledger = FaultLedger()
    handle_sync_exception(ledger, "node-1", "interrupted", ["node-2"])
    handle_sync_exception(ledger, "node-2", "interrupted", ["node-3"])
    assert not ledger.marked


def test_cloud_faults_are_not_charged():
    ledger = FaultLedger()
    for _ in range(3):
        action = handle_sync_exception(ledger, "node-1", "replica diverged", ["node-2"], cloud_fault=True)
        assert action.retry_with == "node-1"
    assert ledger.errors["node-1"] == 0 and not ledger.marked


def test_marked_nodes_are_skipped_as_retry_candidates():
    ledger = FaultLedger(marked={"node-3"})
    action = handle_sync_exception(ledger, "node-2", "bad", ["node-3", "node-0"])
    assert action.retry_with == "node-0"
