"""
IIoT workload: devices grouped into WSANs, each emitting one signed reading per sample period.

Readings are aggregated into one TxBatch per block interval. A batch knows the exact encoded size of
every transaction it stands for, so accounting mode can pool counts and sizes while materialized mode
expands the very same batch into Transaction objects.
"""
from __future__ import annotations

import logging
import uuid
from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np

from core_types import TX_BASE_BYTES, Transaction, TxType, compute_tx_hash
from crypto import MAC33, derive_keypair, sign

logger = logging.getLogger(__name__)

DEVICE_PREFIX = 0xD1
GATEWAY_PREFIX = 0xA1
DEVICE_INFO_WIDTH = 10


# ---- Addressing ----

def device_address(index: int) -> bytes:
    """16-byte address; byte order sorts like the device index."""
    return uuid.UUID(int=(DEVICE_PREFIX << 120) | index).bytes


def gateway_address(wsan: int) -> bytes:
    return uuid.UUID(int=(GATEWAY_PREFIX << 120) | wsan).bytes


def gateway_id(wsan: int) -> str:
    return f"gw-{wsan:02d}"


def gateway_of(tx: Transaction) -> str:
    """Gateway id of the WSAN a transaction was sent through."""
    return gateway_id(uuid.UUID(bytes=tx.to_addr).int & 0xFFFF)


def device_info(wsan: int, node: int) -> bytes:
    return f"wsan{wsan:02d}n{node:03d}".encode()[:DEVICE_INFO_WIDTH]


# ---- Batches ----

@dataclass(frozen=True)
class TxBatch:
    """
    Readings sampled in (start_s, end_s], ordered sample-major then device index, so the order
    matches (timestamp, from, tx_id).
    """
    batch_id: int
    start_s: float
    end_s: float
    devices: int
    per_device: int
    fixed_size: Optional[int] = None
    offsets: Optional[np.ndarray] = None
    sample_period: float = 1.0

    @property
    def count(self) -> int:
        return self.devices * self.per_device

    def size_of(self, i: int) -> int:
        if self.fixed_size is not None:
            return self.fixed_size
        return int(self.offsets[i + 1] - self.offsets[i])

    def bytes_between(self, a: int, b: int) -> int:
        if self.fixed_size is not None:
            return (b - a) * self.fixed_size
        return int(self.offsets[b] - self.offsets[a])

    @property
    def payload_bytes(self) -> int:
        return self.bytes_between(0, self.count)

    def sample_time(self, sample: int) -> float:
        return self.start_s + (sample + 1) * self.sample_period

    def timestamp_of(self, i: int, start_unix: int) -> int:
        """Unix-second timestamp of the i-th reading in the batch."""
        return int(start_unix + self.sample_time(i // self.devices))


class WorkloadGenerator:
    """Produces consecutive TxBatches from one seeded size stream and one seeded content stream."""

    def __init__(self, num_wsans: int, nodes_per_wsan: int, sample_period: float, block_interval: float, *,
                 avg_tx_bytes: int = 150, distribution: str = "fixed", size_min: int = 120,
                 size_max: int = 180, seed: int = 0, start_unix: int = 0, hash_type: int = 0):
        self.num_wsans = num_wsans
        self.nodes_per_wsan = nodes_per_wsan
        self.sample_period = sample_period
        self.block_interval = block_interval
        self.per_device = int(round(block_interval / sample_period))
        self.avg_tx_bytes = avg_tx_bytes
        self.distribution = distribution
        self.size_min = max(TX_BASE_BYTES, size_min)
        self.size_max = max(self.size_min, size_max)
        self.start_unix = start_unix
        self.hash_type = hash_type
        self.size_rng = np.random.default_rng([seed, 1])
        self.content_rng = np.random.default_rng([seed, 3])
        self._next_id = 1
        self._keys = {}

    @classmethod
    def from_config(cls, cfg) -> "WorkloadGenerator":
        w = cfg.workload
        hash_type = 0 if cfg.scenario.mode == "materialized" else 1
        return cls(w.num_wsans, w.nodes_per_wsan, w.sample_period, cfg.overlay.block_interval,
                   avg_tx_bytes=w.avg_tx_bytes, distribution=w.tx_size_distribution,
                   size_min=w.tx_size_min, size_max=w.tx_size_max, seed=cfg.scenario.seed,
                   start_unix=cfg.scenario.start_unix, hash_type=hash_type)

    @property
    def devices(self) -> int:
        return self.num_wsans * self.nodes_per_wsan

    @property
    def mean_tx_bytes(self) -> float:
        if self.distribution == "fixed":
            return float(max(TX_BASE_BYTES, self.avg_tx_bytes))
        return (self.size_min + self.size_max) / 2

    @property
    def next_close_s(self) -> float:
        return self._next_id * self.block_interval

    def payload_rate(self) -> float:
        """Aggregate payload bytes per second."""
        return self.devices / self.sample_period * self.mean_tx_bytes

    def tx_rate(self) -> float:
        return self.devices / self.sample_period

    def next_batch(self) -> TxBatch:
        batch_id = self._next_id
        self._next_id += 1
        start = (batch_id - 1) * self.block_interval
        end = batch_id * self.block_interval
        if self.distribution == "fixed":
            return TxBatch(batch_id, start, end, self.devices, self.per_device,
                           fixed_size=max(TX_BASE_BYTES, self.avg_tx_bytes), sample_period=self.sample_period)
        count = self.devices * self.per_device
        sizes = self.size_rng.integers(self.size_min, self.size_max, size=count, endpoint=True)
        offsets = np.zeros(count + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        return TxBatch(batch_id, start, end, self.devices, self.per_device, offsets=offsets,
                       sample_period=self.sample_period)

    def _device_key(self, index: int):
        key = self._keys.get(index)
        if key is None:
            key = self._keys[index] = derive_keypair(f"device-{index}")
        return key

    def transactions(self, batch: TxBatch) -> List[Transaction]:
        """Expand a batch into signed transactions, in pool order."""
        txs = []
        i = 0
        for sample in range(batch.per_device):
            timestamp = int(self.start_unix + batch.sample_time(sample))
            tx_id = (batch.batch_id - 1) * batch.per_device + sample + 1
            for index in range(batch.devices):
                wsan, node = divmod(index, self.nodes_per_wsan)
                txs.append(self._make_tx(index, wsan, node, timestamp, tx_id, batch.size_of(i)))
                i += 1
        return txs

    def _make_tx(self, index, wsan, node, timestamp, tx_id, size) -> Transaction:
        room = size - TX_BASE_BYTES
        info = device_info(wsan, node)[:room]
        data = self.content_rng.bytes(room - len(info))
        key = self._device_key(index)
        draft = Transaction(device_address(index), gateway_address(wsan), int(TxType.READING), info,
                            key.public, timestamp, tx_id, data, self.hash_type, bytes(32), MAC33.id,
                            bytes(33))
        tx_hash = compute_tx_hash(draft)
        signature = sign(MAC33, key, tx_hash)
        return Transaction(draft.from_addr, draft.to_addr, draft.tx_type, info, key.public, timestamp,
                           tx_id, data, self.hash_type, tx_hash, MAC33.id, signature)


def generate_workload(cfg, until_s: float) -> Iterator[Transaction]:
    """Transactions of every batch that closes at or before ``until_s``."""
    gen = WorkloadGenerator.from_config(cfg)
    while gen.next_close_s <= until_s:
        batch = gen.next_batch()
        yield from gen.transactions(batch)
