"""Packet fate tracking and the run report.

Every generated packet ends in exactly one fate: delivered, dropped (by an
NF, by the protocol, by overload, by a lossy link, for lack of a route, or
with a failed node), or still in flight when the run stops.  Packets that
leave the system twice are counted as duplicates on top of that.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

from ..core import FlowKey, Packet

DELIVERED = "delivered"
DROP_REASONS = ("nf", "protocol", "overload", "link", "no_route", "failure")

PacketId = tuple[FlowKey, int]


def percentile(sorted_samples: list[int], q: float) -> float:
    """Nearest-rank percentile of an already sorted list."""
    if not sorted_samples:
        return 0.0
    rank = max(1, math.ceil(q / 100.0 * len(sorted_samples)))
    return float(sorted_samples[rank - 1])


@dataclass
class MetricsReport:
    scenario: str = ""
    mode: str = "deterministic"
    seed: int = 0
    generated: int = 0
    delivered: int = 0
    duplicates: int = 0
    dropped_nf: int = 0
    dropped_protocol: int = 0
    dropped_overload: int = 0
    dropped_link: int = 0
    dropped_no_route: int = 0
    dropped_failure: int = 0
    in_flight: int = 0
    unexplained: int = 0
    latency_ns: list[int] = field(default_factory=list)
    per_runtime_pps: dict[int, float] = field(default_factory=dict)
    migration_episodes: list[dict] = field(default_factory=list)
    recovery_episodes: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    coordinator_messages: int = 0
    output_commit_checked: int = 0
    output_commit_violations: int = 0
    invariant_checks: int = 0
    invariant_violations: int = 0
    degraded_emits: int = 0
    trace_digest: str = ""
    assertions: dict[str, bool] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def dropped(self) -> int:
        return (
            self.dropped_nf
            + self.dropped_protocol
            + self.dropped_overload
            + self.dropped_link
            + self.dropped_no_route
            + self.dropped_failure
        )

    def conservation_holds(self) -> bool:
        return self.unexplained == 0 and self.generated == self.delivered + self.dropped + self.in_flight

    @property
    def passed(self) -> bool:
        return all(self.assertions.values())

    def latency_summary(self) -> dict[str, float]:
        s = sorted(self.latency_ns)
        return {
            "samples": len(s),
            "mean_ns": sum(s) / len(s) if s else 0.0,
            "p50_ns": percentile(s, 50),
            "p99_ns": percentile(s, 99),
            "max_ns": float(s[-1]) if s else 0.0,
        }

    def to_dict(self, samples: bool = False) -> dict:
        d = asdict(self)
        if not samples:
            d.pop("latency_ns")
        d["latency"] = self.latency_summary()
        d["dropped"] = self.dropped
        d["conservation"] = self.conservation_holds()
        d["passed"] = self.passed
        d["per_runtime_pps"] = {str(k): v for k, v in sorted(self.per_runtime_pps.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=str)

    def ndjson_records(self) -> list[str]:
        """One summary record, one per episode and one per assertion."""
        out = [json.dumps({"record": "summary", **self.to_dict()}, sort_keys=True, default=str)]
        out.extend(json.dumps({"record": "migration", **e}, sort_keys=True) for e in self.migration_episodes)
        out.extend(json.dumps({"record": "recovery", **e}, sort_keys=True, default=str) for e in self.recovery_episodes)
        out.extend(
            json.dumps({"record": "assertion", "name": k, "passed": v}, sort_keys=True)
            for k, v in sorted(self.assertions.items())
        )
        return out

    def summary_table(self) -> str:
        lat = self.latency_summary()
        rows = [
            ("scenario", self.scenario),
            ("mode / seed", f"{self.mode} / {self.seed}"),
            ("generated", self.generated),
            ("delivered", self.delivered),
            ("dropped nf / protocol", f"{self.dropped_nf} / {self.dropped_protocol}"),
            ("dropped overload / link", f"{self.dropped_overload} / {self.dropped_link}"),
            ("dropped no_route / failure", f"{self.dropped_no_route} / {self.dropped_failure}"),
            ("in flight at end", self.in_flight),
            ("duplicates", self.duplicates),
            ("conservation", "ok" if self.conservation_holds() else f"BROKEN ({self.unexplained} unexplained)"),
            ("latency p50 / p99 (us)", f"{lat['p50_ns'] / 1e3:.1f} / {lat['p99_ns'] / 1e3:.1f}"),
            ("migration episodes", len(self.migration_episodes)),
            ("recoveries", len(self.recovery_episodes)),
            ("coordinator messages", self.coordinator_messages),
            ("output-commit violations", f"{self.output_commit_violations} of {self.output_commit_checked}"),
            ("invariant violations", f"{self.invariant_violations} of {self.invariant_checks}"),
        ]
        for rid, pps in sorted(self.per_runtime_pps.items()):
            rows.append((f"runtime {rid} pps", f"{pps:.0f}"))
        for name, ok in sorted(self.assertions.items()):
            rows.append((f"assert {name}", "PASS" if ok else "FAIL"))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)


class PacketTracker:
    """Follows every generated packet to its fate."""

    def __init__(self, now) -> None:
        self._now = now
        self.generated = 0
        self.fate: dict[PacketId, str] = {}
        self.last_node: dict[PacketId, int] = {}
        self.counts = {DELIVERED: 0, **{r: 0 for r in DROP_REASONS}}
        self.duplicates = 0
        self.late_after_drop = 0
        self.latency_ns: list[int] = []
        # output-commit instrumentation
        self.check_commit = False
        self._processed_at: dict[PacketId, int] = {}
        self._stored: set[tuple[int, PacketId]] = set()
        self._degraded: set[PacketId] = set()
        self.commit_checked = 0
        self.commit_violations: list[tuple[PacketId, int]] = []

    def on_generate(self, pkt: Packet, ingress: int) -> None:
        self.generated += 1
        self.last_node[(pkt.key, pkt.gen_seq)] = ingress

    def on_arrive(self, node_id: int, pkt: Packet) -> None:
        self.last_node[(pkt.key, pkt.gen_seq)] = node_id

    def on_emit(self, node_id: int, pkt: Packet) -> None:
        pid = (pkt.key, pkt.gen_seq)
        prior = self.fate.get(pid)
        if prior is not None:
            if prior == DELIVERED:
                self.duplicates += 1
            else:
                self.late_after_drop += 1
            return
        now = self._now()
        pkt.ts_emitted = now
        self.fate[pid] = DELIVERED
        self.counts[DELIVERED] += 1
        self.latency_ns.append(now - pkt.ts_created)
        if self.check_commit:
            self._check_commit(node_id, pid)

    def on_drop(self, node_id: int, reason: str, pkt: Packet) -> None:
        pid = (pkt.key, pkt.gen_seq)
        if pid in self.fate:
            return
        self.fate[pid] = reason
        self.counts[reason] += 1

    # -- output commit ------------------------------------------------------

    def on_processed(self, node_id: int, pid: PacketId, replicated: bool) -> None:
        if replicated:
            self._processed_at[pid] = node_id

    def on_replica_store(self, node_id: int, pid: PacketId) -> None:
        self._stored.add((node_id, pid))

    def on_degraded(self, pid: PacketId) -> None:
        self._degraded.add(pid)

    def _check_commit(self, node_id: int, pid: PacketId) -> None:
        source = self._processed_at.pop(pid, None)
        if source is None:
            return
        self.commit_checked += 1
        if pid in self._degraded:
            return
        # the emitting node must be a replica that stored the states first
        if node_id == source or (node_id, pid) not in self._stored:
            self.commit_violations.append((pid, node_id))
        self._stored.discard((node_id, pid))

    # -- end of run ---------------------------------------------------------

    def unresolved(self) -> list[PacketId]:
        fate = self.fate
        return [pid for pid in self.last_node if pid not in fate]

    def settle(self, located: set[PacketId], alive) -> tuple[int, int, int]:
        """Classify packets without a fate; returns (in_flight, failed, unexplained)."""
        in_flight = failed = unexplained = 0
        for pid in self.unresolved():
            if pid in located:
                in_flight += 1
            elif not alive(self.last_node[pid]):
                self.fate[pid] = "failure"
                self.counts["failure"] += 1
                failed += 1
            else:
                unexplained += 1
        return in_flight, failed, unexplained

    def fill(self, report: MetricsReport) -> None:
        report.generated = self.generated
        report.delivered = self.counts[DELIVERED]
        report.duplicates = self.duplicates
        report.dropped_nf = self.counts["nf"]
        report.dropped_protocol = self.counts["protocol"]
        report.dropped_overload = self.counts["overload"]
        report.dropped_link = self.counts["link"]
        report.dropped_no_route = self.counts["no_route"]
        report.dropped_failure = self.counts["failure"]
        report.latency_ns = list(self.latency_ns)
        report.output_commit_checked = self.commit_checked
        report.output_commit_violations = len(self.commit_violations)


def episode_summary(events: list[dict], window_start: Optional[int] = None) -> dict:
    """Completion statistics of one migration episode from its per-flow events."""
    if not events:
        return {"flows": 0}
    start = min(e["started_at"] for e in events) if window_start is None else window_start
    end = max(e["finished_at"] for e in events)
    per_flow = sorted(e["finished_at"] - e["started_at"] for e in events)
    return {
        "flows": len(events),
        "started_at": start,
        "finished_at": end,
        "completion_ns": end - start,
        "per_flow_p50_ns": percentile(per_flow, 50),
        "per_flow_max_ns": per_flow[-1],
    }
