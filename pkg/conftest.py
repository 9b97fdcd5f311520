"""
Shared pytest fixtures: signed transactions, permission registries, key directories and small
scenario configs.
"""
import os

import pytest

from blockchain_connector import ALL_ROLES, PermissionRegistry, Role, TxPool, build_block, mark_transaction
from core_types import Transaction, TxType, compute_tx_hash, make_genesis
from crypto import MAC33, SHA256, derive_keypair, sign
from sim_harness import load_preset
from workload import device_address, gateway_address, gateway_id

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
FIXTURE_DIR = os.path.join(BASE_DIR, "fixtures")

START = 1_700_000_000
NODES = ("node-0", "node-1", "node-2", "node-3")


def read_fixture(name: str) -> bytes:
    with open(os.path.join(FIXTURE_DIR, name)) as f:
        return bytes.fromhex(f.read().strip())


def signed_tx(index=0, timestamp=START + 1, tx_id=1, data=b"\x00" * 8, info=b"dev", hash_type=0, wsan=0):
    key = derive_keypair(f"device-{index}")
    draft = Transaction(device_address(index), gateway_address(wsan), int(TxType.READING), info, key.public,
                        timestamp, tx_id, data, hash_type, bytes(32), MAC33.id, bytes(33))
    tx_hash = compute_tx_hash(draft)
    return Transaction(draft.from_addr, draft.to_addr, draft.tx_type, info, key.public, timestamp, tx_id,
                       data, hash_type, tx_hash, MAC33.id, sign(MAC33, key, tx_hash))


def build_chain(length, per_block=3, scheme=SHA256):
    """Genesis plus ``length`` linked blocks of ``per_block`` transactions each, led by node-0."""
    leader = derive_keypair("overlay-node-0")
    blocks = [make_genesis(scheme)]
    for h in range(1, length + 1):
        pool = TxPool(100)
        for d in range(per_block):
            pool.add(mark_transaction(signed_tx(index=d, timestamp=START + h, tx_id=h), "node-0"))
        blocks.append(build_block(pool, blocks[-1], 100, leader, scheme=scheme))
    return blocks


@pytest.fixture
def make_tx():
    return signed_tx


@pytest.fixture
def node_keys():
    return {node: derive_keypair(f"overlay-{node}") for node in NODES}


@pytest.fixture
def registry(node_keys):
    reg = PermissionRegistry()
    for node, kp in node_keys.items():
        reg.admit(node, ALL_ROLES, kp.public)
    reg.admit(gateway_id(0), {Role.SUBMIT})
    reg.admit(gateway_id(1), {Role.SUBMIT})
    return reg


@pytest.fixture
def pool():
    return TxPool(1000)


@pytest.fixture
def tiny_cfg():
    return load_preset("tiny-e2e")


@pytest.fixture
def tiny_accounting_cfg():
    return load_preset("tiny-e2e", ["scenario.mode=accounting"])
