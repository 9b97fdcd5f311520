"""
Scenario configs and whole-simulation runs: tiny end-to-end syncs, scripted Byzantine faults,
determinism, and the multi-day storage curves (marked slow).
"""
import numpy as np
import pytest

from cloud_store import store_segment, verify_consistency
from core_types import decode_marked_transaction, verify_chain
from errors import ConfigError, InvariantViolation, UnknownBehaviorError
from metrics import daily_table
from sim_engine import seconds_to_ns
from sim_harness import (
    PRESETS,
    SWEEP_BEHAVIORS,
    Simulation,
    inject_fault,
    list_presets,
    load_config,
    load_preset,
    run_scenario,
    run_sweep,
    validate_config,
)

GB = 1_000_000_000


def _run(cfg):
    sim = Simulation(cfg)
    log = sim.run()
    return sim, log


# -------------------------
# Config
# -------------------------
def test_presets_load_and_list():
    names = [name for name, _ in list_presets()]
    assert names == list(PRESETS)
    for name in names:
        cfg = load_preset(name)
        assert cfg.scenario.name == name
    assert load_preset("paper-month").sync.schedule_period is None


def test_defaults_without_a_file():
    cfg = load_config()
    assert cfg.overlay.n == 4 and cfg.overlay_ids == ("node-0", "node-1", "node-2", "node-3")
    assert cfg.replica_ids == ("cloud-0", "cloud-1", "cloud-2")


def test_overrides_are_typed():
    cfg = load_preset("tiny-e2e", ["overlay.n=7", "scenario.seed=3"])
    assert cfg.overlay.n == 7 and cfg.scenario.seed == 3


@pytest.mark.parametrize("override", ["overlay.bogus=1", "overlay.n=abc", "overlay.n=0",
                                      "scenario.mode=fast", "sync.trigger_threshold_bytes=99000000",
                                      "workload.sample_period=2.0", "cloud.replication_factor=4"])
def test_bad_configs_raise(override):
    with pytest.raises(ConfigError):
        load_preset("tiny-e2e", [override])


def test_unknown_preset():
    with pytest.raises(ConfigError):
        load_preset("paper-year")


def test_fault_injection_checks_targets(tiny_cfg):
    with pytest.raises(UnknownBehaviorError):
        inject_fault(tiny_cfg, "node-0", "Crash")
    with pytest.raises(ConfigError):
        inject_fault(tiny_cfg, "node-0", "TamperCloudReplica")
    with pytest.raises(ConfigError):
        inject_fault(tiny_cfg, "cloud-1", "Silent")
    with pytest.raises(ConfigError):
        inject_fault(tiny_cfg, "node-1", "Silent", window=(10.0, 5.0))
    faulty = inject_fault(tiny_cfg, "node-1", "Silent")
    assert not tiny_cfg.faults and len(faulty.faults) == 1


def test_more_byzantine_nodes_than_tolerated(tiny_cfg):
    cfg = inject_fault(inject_fault(tiny_cfg, "node-0", "Silent"), "node-1", "Silent")
    with pytest.raises(ConfigError):
        validate_config(cfg)
    cfg.scenario.allow_excess_faults = True
    validate_config(cfg)


# -------------------------
# Honest end-to-end
# -------------------------
def test_tiny_materialized_run(tiny_cfg):
    sim, log = _run(tiny_cfg)
    assert log.counters["sync_completed"] == 2
    assert log.counters["exceptions"] == 0
    assert sim.archive.head_height == 10
    assert log.meta["final_height"] >= 10
    assert log.meta["reconstruction_verified"]
    full = sim.reconstruct("node-2")
    assert [b.block_hash for b in full.blocks] == [sim.finalized[h] for h in range(full.last_height + 1)]
    assert verify_consistency(sim.archive).consistent


def test_replayed_upload_changes_nothing(tiny_cfg):
    sim, _ = _run(tiny_cfg)
    archive = sim.archive
    (first, last, _), receipt = next((k, r) for k, r in archive.receipts.items() if k[0] == 1)
    size = archive.size_bytes
    assert store_segment(archive, archive.holders[0].segment(first, last)) == receipt
    assert archive.size_bytes == size


def test_nodes_stay_within_disk_and_prune(tiny_cfg):
    sim, log = _run(tiny_cfg)
    df = log.timeseries()
    assert df["local_bytes"].max() <= tiny_cfg.sync.capacity_bytes
    for node in sim.nodes.values():
        assert node.local.base_height <= sim.archive.head_height
    assert set(df["node"]) == set(tiny_cfg.overlay_ids)


def test_accounting_mode_matches_materialized(tiny_cfg, tiny_accounting_cfg):
    _, full = _run(tiny_cfg)
    _, counted = _run(tiny_accounting_cfg)
    assert full.timeseries().equals(counted.timeseries())
    for name in ("finalized_blocks", "sync_completed"):
        assert full.counters[name] == counted.counters[name]


def test_silent_leader_keeps_the_modes_in_step(tiny_cfg, tiny_accounting_cfg):
    _, full = _run(inject_fault(tiny_cfg, "node-0", "Silent"))
    _, counted = _run(inject_fault(tiny_accounting_cfg, "node-0", "Silent"))
    assert full.counters["view_changes"] >= 1
    assert full.counters["txs_rejected"] == counted.counters["txs_rejected"] == 0
    assert full.timeseries().equals(counted.timeseries())
    assert full.counters["finalized_blocks"] == counted.counters["finalized_blocks"]


@pytest.mark.parametrize("max_txs", [15, 20])
def test_small_blocks_never_carry_stale_readings(max_txs):
    cfg = load_preset("tiny-e2e", [f"overlay.max_txs={max_txs}", "sync.enabled=false"])
    sim, log = _run(cfg)
    assert log.counters["txs_rejected"] == 0
    chain = sim.reconstruct("node-1")
    assert verify_chain(chain).passed
    for prev, block in zip(chain.blocks, chain.blocks[1:]):
        assert block.num_txs <= max_txs
        for entry in block.body.entries:
            inner, _ = decode_marked_transaction(entry.tx_data)
            assert inner.timestamp > prev.timestamp


def test_same_seed_same_log(tiny_accounting_cfg):
    first = run_scenario(tiny_accounting_cfg)
    second = run_scenario(load_preset("tiny-e2e", ["scenario.mode=accounting"]))
    assert first.to_json() == second.to_json()


def test_a_simulation_runs_once(tiny_accounting_cfg):
    sim, _ = _run(tiny_accounting_cfg)
    with pytest.raises(RuntimeError):
        sim.run()


def test_disk_bound_violation_is_reported():
    cfg = load_preset("tiny-e2e", ["scenario.mode=accounting", "sync.capacity_bytes=5000",
                                   "sync.trigger_threshold_bytes=4000"])
    with pytest.raises(InvariantViolation) as info:
        run_scenario(cfg)
    assert "disk" in str(info.value)


# -------------------------
# Byzantine overlay nodes
# -------------------------
def test_silent_leader_forces_view_changes(tiny_accounting_cfg):
    sim, log = _run(inject_fault(tiny_accounting_cfg, "node-0", "Silent"))
    changes = log.events_of("VIEW_CHANGE")
    assert changes and changes[0].t_ns <= seconds_to_ns(6.5)
    assert log.meta["final_height"] >= 10
    assert not [e for e in log.events_of("SYNC_REQUEST") if e.node == "node-0"]
    assert log.meta["byzantine"] == ["node-0"]


def test_equivocating_leader_keeps_safety(tiny_accounting_cfg):
    _, log = _run(inject_fault(tiny_accounting_cfg, "node-0", "Equivocate"))
    assert log.counters["view_changes"] >= 1
    assert log.meta["final_height"] >= 5


def test_bad_uploader_is_marked_after_two_errors(tiny_cfg):
    sim, log = _run(inject_fault(tiny_cfg, "node-0", "BadSync"))
    assert log.counters["exceptions"] == 2
    assert log.counters["malicious_marks"] == 1 and log.counters["admin_alerts"] == 1
    assert [e.node for e in log.events_of("MALICIOUS_MARK")] == ["node-0"]
    assert "PotentialMalicious" in log.events_of("ADMIN_ALERT")[0].detail
    for node in sim.nodes.values():
        assert [accused for accused, _ in node.alerts] == ["node-0"]
    assert log.counters["sync_completed"] == 2
    assert all(e.node != "node-0" for e in log.events_of("SYNC_COMPLETED"))


def test_one_bad_upload_is_not_enough_to_mark(tiny_cfg):
    _, log = _run(inject_fault(tiny_cfg, "node-0", "BadSync", window=(0.0, 30.0)))
    assert log.counters["exceptions"] == 1
    assert log.counters["malicious_marks"] == 0
    assert log.counters["sync_completed"] == 2


def test_bad_uploader_in_accounting_mode(tiny_accounting_cfg):
    _, log = _run(inject_fault(tiny_accounting_cfg, "node-0", "BadSync"))
    assert log.counters["malicious_marks"] == 1


def test_interrupted_uploads_are_retried(tiny_cfg):
    _, log = _run(inject_fault(tiny_cfg, "node-0", "BadSync", mode="interrupt"))
    assert log.counters["exceptions"] >= 1
    assert log.counters["sync_completed"] == 2


# -------------------------
# Byzantine cloud replica
# -------------------------
def test_tampering_replica_is_outvoted_and_repaired(tiny_cfg):
    sim, log = _run(inject_fault(tiny_cfg, "cloud-1", "TamperCloudReplica"))
    assert log.counters["exceptions"] >= 1
    assert log.events_of("CLOUD_REPAIR")
    assert log.counters["malicious_marks"] == 0
    assert log.counters["sync_completed"] == 2
    assert verify_consistency(sim.archive).consistent


# -------------------------
# Sweeps and reference loads
# -------------------------
def test_small_safety_sweep():
    rows = run_sweep(load_preset("byzantine-sweep", ["scenario.sweep_seeds=8"]))
    assert [r["seed"] for r in rows] == list(range(8))
    assert {r["behavior"] for r in rows} <= {b.value for b in SWEEP_BEHAVIORS}
    assert [r["faulty_node"] for r in rows[:5]] == ["node-0", "node-1", "node-2", "node-3", "node-0"]
    assert all(r["safety_ok"] and r["final_height"] > 0 for r in rows)


def test_sweep_beyond_tolerated_faults_needs_opt_in():
    with pytest.raises(ConfigError):
        load_preset("byzantine-sweep", ["scenario.sweep_faulty=2"])
    cfg = load_preset("byzantine-sweep", ["scenario.sweep_faulty=2", "scenario.allow_excess_faults=true",
                                          "scenario.sweep_seeds=2"])
    rows = run_sweep(cfg)
    assert [r["faulty_node"] for r in rows] == ["node-0,node-1", "node-1,node-2"]
    assert all(len(r["behavior"].split(",")) == 2 for r in rows)


def test_bitcoin_sized_load():
    log = run_scenario(load_preset("bitcoin-compare", ["scenario.run_duration=3600"]))
    assert log.meta["payload_rate_bytes_per_s"] == pytest.approx(1666.67, abs=0.01)
    assert log.meta["projections"]["bitcoin"]["payload_bytes"] == pytest.approx(1.008e9)
    assert log.counters["sync_completed"] == 0


@pytest.mark.slow
def test_full_safety_sweep():
    rows = run_sweep(load_preset("byzantine-sweep"))
    assert len(rows) == 100
    for node in ("node-0", "node-1", "node-2", "node-3"):
        assert {r["behavior"] for r in rows if r["faulty_node"] == node} == {"Silent", "Equivocate"}


@pytest.mark.slow
def test_two_byzantine_nodes_never_split_finality():
    cfg = load_preset("byzantine-sweep", ["scenario.sweep_faulty=2", "scenario.allow_excess_faults=true"])
    rows = run_sweep(cfg)
    assert len(rows) == 100
    assert all(r["safety_ok"] for r in rows)


@pytest.mark.slow
def test_week_with_daily_sync():
    sim, log = _run(load_preset("paper-week"))
    meta = log.meta
    assert meta["payload_rate_bytes_per_s"] == 750_000
    assert meta["one_day_transfer_s"] == pytest.approx(3369.6)
    assert meta["full_replication_exceeds_capacity_day"] is not None
    assert log.counters["sync_completed"] == 6
    peaks = log.timeseries().groupby("node")["local_bytes"].max()
    assert (peaks <= 128 * GB).all()
    assert peaks.max() == pytest.approx(88.33 * GB, rel=0.03)
    local = log.timeseries().pivot_table(index="t", columns="node", values="local_bytes")
    completions = [e.t_ns / 1e9 for e in log.events_of("SYNC_COMPLETED")]
    for t in completions:
        before = local[local.index <= t].iloc[-1]
        after = local[local.index >= t + 1200].iloc[0]
        assert (after < before).all()
    assert (local[local.index > completions[0]].to_numpy() > 0).all()


@pytest.mark.slow
def test_month_with_threshold_sync():
    _, log = _run(load_preset("paper-month"))
    daily = daily_table(log)
    assert len(daily) == 30
    assert daily["max_local_bytes"].max() < 128 * GB
    assert daily["peak_local_to_date"].iloc[-1] == pytest.approx(104.5 * GB, rel=0.02)
    ratios = daily["local_ratio"].to_numpy()
    assert np.all(np.diff(ratios) < 0)
    assert ratios[-1] == pytest.approx(100 * GB / daily["chain_bytes_end"].iloc[-1], rel=0.1)
