"""
Storage arithmetic: block-size model, volume projections, transfer time and per-node byte accounting.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

from core_types import ENTRY_FRAMING_BYTES, HEADER_BYTES, MARK_BYTES
from errors import InvariantViolation

logger = logging.getLogger(__name__)

# ---- Constants ----
DAY_SECONDS = 86_400
WEEK_SECONDS = 7 * DAY_SECONDS
ENTRY_OVERHEAD_BYTES = ENTRY_FRAMING_BYTES + MARK_BYTES

BITCOIN_TX_RATE = 10 / 3
BITCOIN_TX_BYTES = 500
IIOT_MEDIUM_DEVICES = 50 * 100
IIOT_MEDIUM_TX_BYTES = 100


def transfer_duration(size_bytes: int, bandwidth_bps: float, overhead: float = 1.0) -> float:
    """Seconds to push ``size_bytes`` over a ``bandwidth_bps`` link, inflated by a protocol overhead factor."""
    if bandwidth_bps <= 0:
        raise ValueError("bandwidth must be positive")
    return size_bytes * 8 * overhead / bandwidth_bps


@dataclass(frozen=True)
class VolumeProjection:
    rate_bytes_per_s: float
    duration_s: float
    payload_bytes: float
    block_bytes: float
    tx_count: Optional[float] = None


def compute_volume_projection(rate: float, duration: float, avg_tx_bytes: Optional[float] = None,
                              block_interval: float = 1.0) -> VolumeProjection:
    """
    Payload volume ``rate * duration`` plus the block volume it turns into.

    With ``avg_tx_bytes`` the block figure adds per-entry framing, the universal mark and one
    header per ``block_interval``; without it the block figure equals the payload.
    """
    if rate <= 0 or duration <= 0:
        raise ValueError("rate and duration must be positive")
    payload = rate * duration
    if not avg_tx_bytes:
        return VolumeProjection(rate, duration, payload, payload)
    txs = payload / avg_tx_bytes
    blocks = duration / block_interval
    return VolumeProjection(rate, duration, payload, payload + txs * ENTRY_OVERHEAD_BYTES + blocks * HEADER_BYTES, txs)


def reference_projections(duration: float = WEEK_SECONDS) -> Dict[str, VolumeProjection]:
    return {
        "bitcoin": compute_volume_projection(BITCOIN_TX_RATE * BITCOIN_TX_BYTES, duration),
        "iiot_medium": compute_volume_projection(IIOT_MEDIUM_DEVICES * IIOT_MEDIUM_TX_BYTES, duration),
    }


# ---- Accounting ----

@dataclass
class StorageAccounting:
    """Current and peak byte counts per node, plus cloud and whole-chain totals."""
    capacity: Dict[str, int]
    local: Dict[str, int] = field(default_factory=dict)
    peak_local: Dict[str, int] = field(default_factory=dict)
    cloud_bytes: int = 0
    chain_bytes: int = 0

    def set_local(self, node: str, size: int, t_s: float = 0.0):
        cap = self.capacity.get(node)
        if cap is not None and size > cap:
            raise InvariantViolation(f"{node} holds {size} bytes at t={t_s:.0f}s, disk is {cap}")
        self.local[node] = size
        if size > self.peak_local.get(node, 0):
            self.peak_local[node] = size

    def set_cloud(self, size: int):
        if size < self.cloud_bytes:
            raise InvariantViolation(f"cloud archive shrank from {self.cloud_bytes} to {size}")
        self.cloud_bytes = size

    def add_block(self, size: int):
        self.chain_bytes += size

    def local_ratio(self, node: str) -> float:
        if not self.chain_bytes:
            return 0.0
        return self.peak_local.get(node, 0) / self.chain_bytes
