"""Running scenarios and checking their assertions."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from ..core import MsgKind
from ..nf import build_chain
from ..sim import NS_PER_S
from .cluster import SimCluster
from .golden import golden_compare, prefix_compare
from .metrics import MetricsReport, episode_summary
from .scenario import Scenario, load_scenario


@dataclass
class RunResult:
    report: MetricsReport
    cluster: Optional[SimCluster] = None
    dump: Optional[dict] = None
    golden_diff: Optional[list[str]] = None
    prefix_diff: Optional[list[str]] = None
    invariant_violations: list[str] = field(default_factory=list)
    wall_s: float = 0.0


def simulate(scenario: Scenario, log_path: Optional[Path] = None, record_history: bool = False) -> SimCluster:
    cluster = SimCluster(scenario, log_path=log_path, record_history=record_history)
    cluster.setup()
    cluster.run()
    cluster.coordinator.log.close()
    return cluster


def _migration_episodes(cluster: SimCluster) -> list[dict]:
    done = cluster.events.get("migration_done", [])
    if not done:
        return []
    coord = cluster.coordinator
    orders = [o["at"] for o in cluster.migration_orders]
    batches = [t for t, kind, _ in coord.sent if kind is MsgKind.Rpc]
    by_source: dict[int, list[dict]] = {}
    for ev in done:
        by_source.setdefault(ev["node"], []).append(ev)
    episodes = []
    first_start = min(orders) if orders else min(e["started_at"] for e in done)
    for src, evs in sorted(by_source.items()):
        starts = [t for t in orders if t <= min(e["started_at"] for e in evs)]
        ep = episode_summary(evs, max(starts) if starts else None)
        ep["source"] = src
        ep["targets"] = sorted({e["target"] for e in evs})
        episodes.append(ep)
    overall = episode_summary(done, first_start)
    overall["source"] = "all"
    overall["coordinator_messages"] = coord.messages_between(overall["started_at"], overall["finished_at"])
    overall["coordinator_rpcs"] = sum(1 for t in batches if overall["started_at"] <= t <= overall["finished_at"])
    episodes.append(overall)
    return episodes


def _failures(cluster: SimCluster) -> tuple[list[dict], list[dict]]:
    coord = cluster.coordinator
    period = coord.ccfg.heartbeat_period_ns
    failures = []
    for f in coord.failures:
        rid = f["runtime"]
        kill = cluster.kills.get(rid)
        rec = dict(f)
        rec["kill_at"] = kill
        if kill is not None:
            probes = [t for t, kind, dst in coord.sent if kind is MsgKind.Heartbeat and dst == rid and t >= kill]
            first_missed = probes[0] if probes else kill
            rec["detection_ns"] = f["detected_at"] - kill
            rec["first_missed_probe"] = first_missed
            rec["detection_after_probe_ns"] = f["detected_at"] - first_missed
            rec["detection_periods"] = rec["detection_after_probe_ns"] / period
        failures.append(rec)
    recoveries = []
    for ep in coord.recoveries:
        replies = {str(k): v for k, v in ep["replies"].items()}
        ok = [v for v in replies.values() if v]
        kill = cluster.kills.get(ep["failed"])
        recoveries.append(
            {
                "failed": ep["failed"],
                "detected_at": ep["started_at"],
                "finished_at": ep["finished_at"],
                "kill_at": kill,
                "recovery_ns": None if ep["finished_at"] is None or kill is None else ep["finished_at"] - kill,
                "recovered": sum(v["recovered"] for v in ok),
                "replicated": sum(v["replicated"] for v in ok),
                "partial": any(v["partial"] for v in ok) or len(ok) != len(ep["holders"]),
                "holders": list(ep["holders"]),
            }
        )
    return failures, recoveries


def build_report(cluster: SimCluster) -> MetricsReport:
    sc = cluster.scenario
    report = MetricsReport(scenario=sc.name, mode="deterministic", seed=sc.seed)
    tracker = cluster.tracker
    in_flight, _, unexplained = tracker.settle(cluster.locate_unfated(), cluster.alive)
    tracker.fill(report)
    report.in_flight = in_flight
    report.unexplained = unexplained
    seconds = max(cluster.sim.now, 1) / NS_PER_S
    report.per_runtime_pps = {rt.id: rt.processed / seconds for rt in cluster.runtimes()}
    report.migration_episodes = _migration_episodes(cluster)
    report.failures, report.recovery_episodes = _failures(cluster)
    report.coordinator_messages = len(cluster.coordinator.sent)
    report.degraded_emits = sum(rt.counters.degraded_emits for rt in cluster.runtimes())
    if cluster.checker is not None:
        report.invariant_checks = cluster.checker.checks
        report.invariant_violations = len(cluster.checker.violations)
    report.trace_digest = cluster.sim.trace_digest()
    report.extra = {
        "virtual_end_ns": cluster.sim.now,
        "planned_packets": cluster.generator.total,
        "late_after_drop": tracker.late_after_drop,
        "migrations_aborted": sum(rt.counters.migrations_aborted for rt in cluster.runtimes()),
        "migrations_done": sum(rt.counters.migrations_done for rt in cluster.runtimes()),
        "buffer_overflow": sum(rt.counters.buffer_overflow for rt in cluster.runtimes()),
        "coordinator_actions": [a["action"] for a in cluster.coordinator.actions],
        "trace_events": cluster.sim.trace_events,
    }
    return report


def evaluate(result: RunResult, scenario: Scenario) -> None:
    """Fill ``result.report.assertions`` from the scenario's assertion table."""
    a = scenario.assertions
    rep = result.report
    checks = rep.assertions
    if a.conservation:
        checks["conservation"] = rep.conservation_holds()
    if a.protocol_drops is not None:
        checks["protocol_drops"] = rep.dropped_protocol <= a.protocol_drops
    if a.output_commit_violations is not None:
        checks["output_commit"] = rep.output_commit_checked > 0 and rep.output_commit_violations <= a.output_commit_violations
    if a.invariant_violations is not None:
        checks["shared_state_invariants"] = rep.invariant_checks > 0 and rep.invariant_violations <= a.invariant_violations
    if a.golden:
        checks["golden_equivalence"] = result.golden_diff is not None and not result.golden_diff
    if a.golden_prefix:
        recovered = result.cluster.events.get("recovered", []) if result.cluster else []
        checks["golden_prefix"] = bool(recovered) and result.prefix_diff is not None and not result.prefix_diff
    if a.recovered_equals_replicated:
        eps = rep.recovery_episodes
        checks["recovered_equals_replicated"] = bool(eps) and all(
            e["recovered"] == e["replicated"] and e["replicated"] > 0 and not e["partial"] for e in eps
        )
    if a.detection_periods is not None:
        period = scenario.coordinator.heartbeat_period_ns
        tick = scenario.runtime.timer_granularity_ns
        want = a.detection_periods * period
        timed = [f for f in rep.failures if f.get("kill_at") is not None]
        checks["failure_detection"] = bool(timed) and all(
            want <= f["detection_after_probe_ns"] <= want + tick for f in timed
        )
    if a.coordinator_messages_per_runtime is not None:
        overall = [e for e in rep.migration_episodes if e.get("source") == "all"]
        n_rt = scenario.cluster.runtimes + scenario.cluster.standby
        checks["coordinator_messages_bound"] = bool(overall) and all(
            e["coordinator_messages"] <= a.coordinator_messages_per_runtime * n_rt for e in overall
        )
    if a.min_delivered_fraction is not None:
        checks["delivered_fraction"] = rep.generated > 0 and rep.delivered >= a.min_delivered_fraction * rep.generated
    if a.min_throughput_pps is not None:
        checks["throughput_floor"] = sum(rep.per_runtime_pps.values()) >= a.min_throughput_pps


def run_scenario(
    scenario: Union[Scenario, str, Path],
    mode: Optional[str] = None,
    seed: Optional[int] = None,
    log_path: Optional[Path] = None,
) -> RunResult:
    sc = load_scenario(scenario) if isinstance(scenario, (str, Path)) else scenario
    if seed is not None:
        sc = sc.with_seed(seed)
    mode = mode or sc.mode
    started = time.perf_counter()
    if mode == "benchmark":
        from .bench import run_benchmark

        report = run_benchmark(sc)
        result = RunResult(report, wall_s=time.perf_counter() - started)
        evaluate(result, sc)
        return result
    cluster = simulate(sc, log_path=log_path, record_history=False)
    report = build_report(cluster)
    result = RunResult(report, cluster, cluster.dump_state())
    if cluster.checker is not None:
        result.invariant_violations = list(cluster.checker.violations)
    if sc.assertions.golden or sc.assertions.golden_prefix:
        golden = simulate(sc.golden(), record_history=sc.assertions.golden_prefix)
        if sc.assertions.golden:
            result.golden_diff = golden_compare(golden.dump_state(), result.dump)
        if sc.assertions.golden_prefix:
            chain = build_chain(sc.chain, sc.nf)
            result.prefix_diff = prefix_compare(golden.history, cluster.events.get("recovered", []), chain)
    evaluate(result, sc)
    result.wall_s = time.perf_counter() - started
    return result
