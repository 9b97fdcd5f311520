"""
Simulated-time metrics: storage samples, protocol events, counters, and the report files built from them.
"""
from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List

import numpy as np
import pandas as pd

from sim_engine import NS_PER_S

logger = logging.getLogger(__name__)

DAY_NS = 86_400 * NS_PER_S

COUNTER_NAMES = (
    "finalized_blocks",
    "view_changes",
    "sync_sessions",
    "sync_approved",
    "sync_rejected",
    "sync_completed",
    "sync_denied",
    "exceptions",
    "malicious_marks",
    "admin_alerts",
    "txs_rejected",
    "proposals_rejected",
)

TIMESERIES_COLUMNS = ["t", "node", "local_bytes", "cloud_bytes"]
DAILY_COLUMNS = ["day", "max_local_bytes", "min_local_bytes", "chain_bytes_end", "cloud_bytes_end",
                 "peak_local_to_date", "local_ratio", "instant_ratio", "saving_ratio"]


@dataclass(frozen=True)
class MetricSample:
    t_ns: int
    node: str
    local_bytes: int
    cloud_bytes: int
    chain_bytes: int


@dataclass(frozen=True)
class LogEvent:
    t_ns: int
    kind: str
    node: str
    detail: str = ""


@dataclass
class MetricsLog:
    """Append-only record of one run. Holds only simulated-time data so two runs compare byte for byte."""
    sample_interval_ns: int = 0
    samples: List[MetricSample] = field(default_factory=list)
    events: List[LogEvent] = field(default_factory=list)
    counters: Counter = field(default_factory=lambda: Counter({name: 0 for name in COUNTER_NAMES}))
    meta: Dict[str, object] = field(default_factory=dict)

    def record_sample(self, t_ns: int, node: str, local_bytes: int, cloud_bytes: int, chain_bytes: int):
        self.samples.append(MetricSample(t_ns, node, local_bytes, cloud_bytes, chain_bytes))

    def record_event(self, t_ns: int, kind: str, node: str, detail: str = ""):
        self.events.append(LogEvent(t_ns, kind, node, detail))

    def bump(self, name: str, k: int = 1):
        self.counters[name] += k

    def events_of(self, kind: str) -> List[LogEvent]:
        return [e for e in self.events if e.kind == kind]

    def tail(self, k: int = 20) -> List[str]:
        return [f"t={e.t_ns / NS_PER_S:.3f}s {e.kind} {e.node} {e.detail}".rstrip() for e in self.events[-k:]]

    def to_dict(self) -> dict:
        return {
            "sample_interval_ns": self.sample_interval_ns,
            "counters": {k: int(v) for k, v in sorted(self.counters.items())},
            "meta": self.meta,
            "samples": [[s.t_ns, s.node, s.local_bytes, s.cloud_bytes, s.chain_bytes] for s in self.samples],
            "events": [[e.t_ns, e.kind, e.node, e.detail] for e in self.events],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsLog":
        log = cls(sample_interval_ns=data.get("sample_interval_ns", 0), meta=dict(data.get("meta", {})))
        log.counters.update(data.get("counters", {}))
        log.samples = [MetricSample(*row) for row in data.get("samples", [])]
        log.events = [LogEvent(*row) for row in data.get("events", [])]
        return log

    def timeseries(self) -> pd.DataFrame:
        rows = [(s.t_ns / NS_PER_S, s.node, s.local_bytes, s.cloud_bytes, s.chain_bytes) for s in self.samples]
        return pd.DataFrame(rows, columns=TIMESERIES_COLUMNS + ["chain_bytes"])


def load_metrics(path: str) -> MetricsLog:
    if os.path.isdir(path):
        path = os.path.join(path, "metrics.json")
    with open(path) as f:
        return MetricsLog.from_dict(json.load(f))


# ---- Derived tables ----

def daily_table(log: MetricsLog) -> pd.DataFrame:
    """
    One row per simulated day. A sample at exactly the end of a day belongs to that day.

    local_ratio divides the largest local volume seen so far by the chain size at day end, which is
    the share of the chain a node must be able to hold. instant_ratio uses the local volume at day end.
    """
    df = log.timeseries()
    if df.empty:
        return pd.DataFrame(columns=DAILY_COLUMNS)
    t_ns = np.rint(df["t"].to_numpy() * NS_PER_S).astype(np.int64)
    df["day"] = np.maximum(1, (t_ns + DAY_NS - 1) // DAY_NS)
    rows = []
    peak = 0
    for day, part in df.groupby("day", sort=True):
        last_t = part["t"].max()
        end = part[part["t"] == last_t]
        chain_end = int(end["chain_bytes"].max())
        max_local = int(part["local_bytes"].max())
        peak = max(peak, max_local)
        local_ratio = peak / chain_end if chain_end else 0.0
        instant = int(end["local_bytes"].max()) / chain_end if chain_end else 0.0
        rows.append((int(day), max_local, int(part["local_bytes"].min()), chain_end,
                     int(end["cloud_bytes"].max()), peak, local_ratio, instant, 1.0 - local_ratio))
    return pd.DataFrame(rows, columns=DAILY_COLUMNS)


def build_summary(log: MetricsLog) -> dict:
    daily = daily_table(log)
    samples = log.samples
    summary = {
        "counters": {k: int(v) for k, v in sorted(log.counters.items())},
        "days": int(len(daily)),
        "samples": len(samples),
        "peak_local_bytes": max((s.local_bytes for s in samples), default=0),
        "final_cloud_bytes": samples[-1].cloud_bytes if samples else 0,
        "final_chain_bytes": samples[-1].chain_bytes if samples else 0,
        "final_local_ratio": float(daily["local_ratio"].iloc[-1]) if len(daily) else 0.0,
        "daily_peak_local_bytes": [int(v) for v in daily["max_local_bytes"]] if len(daily) else [],
        "daily_local_ratio": [float(v) for v in daily["local_ratio"]] if len(daily) else [],
    }
    summary.update(log.meta)
    return summary


# ---- Report files ----

def _write_json(path: str, data):
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)


def emit_report(log: MetricsLog, out_dir: str, formats: Iterable[str] = ("csv", "json", "dat")) -> List[str]:
    """
    Write the run's report files into ``out_dir``.

    Returns:
        paths of the files written
    """
    formats = set(formats)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "csv" in formats:
        ts_path = os.path.join(out_dir, "timeseries.csv")
        log.timeseries()[TIMESERIES_COLUMNS].to_csv(ts_path, index=False)
        daily_path = os.path.join(out_dir, "daily.csv")
        daily_table(log).to_csv(daily_path, index=False)
        written += [ts_path, daily_path]
    if "json" in formats:
        summary_path = os.path.join(out_dir, "summary.json")
        _write_json(summary_path, build_summary(log))
        metrics_path = os.path.join(out_dir, "metrics.json")
        with open(metrics_path, "w") as f:
            f.write(log.to_json())
        written += [summary_path, metrics_path]
    if "dat" in formats:
        dat_path = os.path.join(out_dir, "fig3.dat")
        np.savetxt(dat_path, storage_curve(log), fmt="%.6f",
                   header="t_days max_local_gb cloud_gb chain_gb")
        written.append(dat_path)
    for path in written:
        logger.info("[Report] wrote %s", path)
    return written


def storage_curve(log: MetricsLog) -> np.ndarray:
    """Per sample time: days, largest local volume across nodes, cloud and chain volume, in GB."""
    df = log.timeseries()
    if df.empty:
        return np.zeros((0, 4))
    grouped = df.groupby("t", sort=True).agg({"local_bytes": "max", "cloud_bytes": "max", "chain_bytes": "max"})
    out = np.column_stack([
        grouped.index.to_numpy() / 86_400,
        grouped["local_bytes"].to_numpy() / 1e9,
        grouped["cloud_bytes"].to_numpy() / 1e9,
        grouped["chain_bytes"].to_numpy() / 1e9,
    ])
    return out
