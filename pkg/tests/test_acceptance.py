"""Acceptance criteria 1 to 10, one verdict line each.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed in the terminal summary.  ``python tests/test_acceptance.py`` runs
the same checks without pytest.
"""

from __future__ import annotations

import os
import random
import sys
import time
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from conftest import ACCEPTANCE_LINES  # noqa: E402
from helpers import Net, naive_matches, random_ac_case  # noqa: E402

from flowactor.coordinator import CoordinatorLog  # noqa: E402
from flowactor.core import ActorMessage, FlowKey, MsgKind, Proto  # noqa: E402
from flowactor.harness.run import run_scenario  # noqa: E402
from flowactor.harness.scenario import load_scenario  # noqa: E402
from flowactor.nf import ac_build, ac_scan  # noqa: E402
from flowactor.node import Node  # noqa: E402
from flowactor.sim import NS_PER_MS, NS_PER_US, LinkParams  # noqa: E402

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


# -- 1 and 9 share the 10k-flow migration run ----------------------------------------

_runs: dict[str, object] = {}


def migration_10k():
    if "m10k" not in _runs:
        started = time.perf_counter()
        res = run_scenario(SCENARIOS / "migration_10k.toml")
        _runs["m10k"] = (res, time.perf_counter() - started)
    return _runs["m10k"]


def test_criterion_01_zero_loss_migration():
    res, wall = migration_10k()
    rep = res.report
    sc = load_scenario(SCENARIOS / "migration_10k.toml")
    done = rep.extra["migrations_done"]
    ok = (
        not sc.link.reorder
        and sc.traffic.flows == 10_000
        and len(sc.migrations) == 3
        and done == 10_000
        and rep.dropped_protocol == 0
        and rep.conservation_holds()
        and wall < 60.0
    )
    verdict(1, ok, f"10k flows, 3 pairs: migrated={done} protocol_drops={rep.dropped_protocol} desk={wall:.1f}s (< 60 s)")


def test_criterion_02_migration_state_equivalence():
    res = run_scenario(SCENARIOS / "migration_golden_1k.toml")
    sc = load_scenario(SCENARIOS / "migration_golden_1k.toml")
    done = res.report.extra["migrations_done"]
    ok = (
        sc.chain == ["firewall", "nat", "lb"]
        and sc.traffic.flows == 1000
        and done > 0
        and res.golden_diff == []
        and len(res.dump["flows"]) == 1000
    )
    diff = "none" if res.golden_diff == [] else f"{len(res.golden_diff or [])} fields"
    verdict(2, ok, f"1k flows FW->NAT->LB, {done} migrated: golden diff {diff} (bit-exact)")


def failover():
    if "failover" not in _runs:
        _runs["failover"] = run_scenario(SCENARIOS / "failover.toml")
    return _runs["failover"]


def test_criterion_03_output_commit():
    sc = load_scenario(SCENARIOS / "output_commit.toml")
    rep = run_scenario(sc).report
    # every packet that left the system went through the commit check
    emitted = rep.delivered + rep.duplicates
    ok = (
        sc.instrument
        and sc.cluster.replication
        and rep.output_commit_checked == emitted > 0
        and rep.output_commit_violations == 0
        and rep.degraded_emits == 0
    )
    verdict(
        3, ok,
        f"checked {rep.output_commit_checked} of {emitted} emitted packets, "
        f"violations={rep.output_commit_violations}, unreplicated emits={rep.degraded_emits}",
    )


def test_criterion_04_recovery():
    res = failover()
    rep = res.report
    sc = load_scenario(SCENARIOS / "failover.toml")
    [failure] = rep.failures
    [episode] = rep.recovery_episodes
    period = sc.coordinator.heartbeat_period_ns
    tick = sc.runtime.timer_granularity_ns
    detect = failure["detection_after_probe_ns"]
    ok = (
        sc.cluster.runtimes == 2
        and episode["replicated"] > 0
        and episode["recovered"] == episode["replicated"]
        and res.prefix_diff == []
        and 3 * period <= detect <= 3 * period + tick
        and rep.conservation_holds()
    )
    verdict(
        4, ok,
        f"recovered {episode['recovered']} of {episode['replicated']} replicated, prefix diff "
        f"{'none' if res.prefix_diff == [] else len(res.prefix_diff)}, detection {detect / period:.2f} periods",
    )


def test_criterion_05_shared_state_conservation():
    res = run_scenario(SCENARIOS / "conservation_60s.toml")
    rep = res.report
    c = res.cluster
    expired = sum(rt.counters.expired for rt in c.runtimes())
    ok = (
        c.sim.now >= 60_000 * NS_PER_MS
        and rep.invariant_checks > 0
        and rep.invariant_violations == 0
        and rep.extra["migrations_done"] > 0
        and expired > 0
        and len(rep.failures) == 1
        and rep.conservation_holds()
    )
    verdict(
        5, ok,
        f"{c.sim.now / 1e9:.0f} s virtual, {rep.invariant_checks} checks, violations={rep.invariant_violations} "
        f"(migrated {rep.extra['migrations_done']}, expired {expired}, failures {len(rep.failures)})",
    )


def test_criterion_06_ips_oracle():
    rng = random.Random(6)
    bad = 0
    for _ in range(10_000):
        pats, stream, cuts = random_ac_case(rng)
        a = ac_build(pats)
        node, got, base = 0, [], 0
        for i, j in zip([0] + cuts, cuts + [len(stream)]):
            node, hits = ac_scan(a, node, stream[i:j])
            got.extend((p, base + pos) for p, pos in hits)
            base += j - i
        if sorted(got) != naive_matches(pats, stream):
            bad += 1
    verdict(6, bad == 0, f"10000 seeded cases, mismatches={bad}")


class _Sink(Node):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.got: list[int] = []

    def deliver(self, msg, idx):
        self.got.append(msg.correlation_id)


def _channel_run(loss: float, seed: int) -> tuple[bool, int]:
    net = Net(LinkParams(50 * NS_PER_US, 0, loss, False), seed)
    a, b = net.add(_Sink(1, net)), net.add(_Sink(2, net))
    key = FlowKey(1, 2, Proto.TCP, 3, 4)
    for i in range(1000):
        a.transport.send(ActorMessage(MsgKind.DestroyTarget, 1, 2, key, i))
    a.wake()
    net.run()
    return b.got == list(range(1000)), a.transport.channel(2).retransmissions


def _first_rto() -> tuple[bool, float]:
    net = Net(LinkParams(40 * NS_PER_US), 0)
    a, _ = net.add(_Sink(1, net)), net.add(_Sink(2, net))
    key = FlowKey(1, 2, Proto.TCP, 3, 4)
    for i in range(20):
        a.transport.send(ActorMessage(MsgKind.DestroyTarget, 1, 2, key, i))
    a.wake()
    net.run()
    ch = a.transport.channel(2)
    rtt = ch.rtt_estimate
    net.fabric.silence(1, 2)
    ch.log_retransmits = True
    a.transport.send(ActorMessage(MsgKind.DestroyTarget, 1, 2, key, 99))
    a.wake()
    net.run(net.sim.now + 100 * NS_PER_MS)
    _, first, resent = ch.retransmit_log[0]
    gap = resent - first
    return 10 * rtt <= gap <= 10 * rtt + NS_PER_MS, gap / rtt


def test_criterion_07_reliable_channel():
    parts, ok = [], True
    for loss in (0.05, 0.2, 0.5):
        good, rexmit = _channel_run(loss, 70)
        ok &= good
        parts.append(f"loss {loss}: {'exactly-once in order' if good else 'VIOLATION'} ({rexmit} resends)")
    rto_ok, ratio = _first_rto()
    ok &= rto_ok
    parts.append(f"first resend at {ratio:.2f} x rtt")
    verdict(7, ok, "; ".join(parts))


def test_criterion_08_scaling_policy(tmp_path):
    log = tmp_path / "scale.ndjson"
    res = run_scenario(SCENARIOS / "scale_out.toml", log_path=log)
    actions = [r for r in CoordinatorLog.read(log) if r["type"] == "action"]
    names = [a["action"] for a in actions]
    ok = "Overloaded" in names
    detail = "no overload detected"
    if ok:
        i = names.index("Overloaded")
        over = actions[i]
        start = next(a for a in actions[i:] if a["action"] == "ScaleOutStart")
        batches = [a for a in actions[i:] if a["action"] == "MigrateBatch"]
        done = [a for a in actions[i:] if a["action"] == "ScaleOutDone"]
        ok = (
            over["new_drops"] > 100
            and names[i + 1] == "LaunchRuntime"
            and bool(batches)
            and all(b["n"] == 500 for b in batches)
            and start["goal"] == start["initial"] // 2
            and bool(done)
            and done[0]["active_flows"] <= start["goal"]
            and res.report.dropped_protocol == 0
        )
        detail = (
            f"drop spike {over['new_drops']} -> {names[i + 1]}, {len(batches)} batches of "
            f"{sorted({b['n'] for b in batches})}, active {start['initial']} -> "
            f"{done[0]['active_flows'] if done else '?'} (goal {start['goal']})"
        )
    verdict(8, ok, detail)


def test_criterion_09_decentralization_bound():
    res, _ = migration_10k()
    sc = load_scenario(SCENARIOS / "migration_10k.toml")
    n_rt = sc.cluster.runtimes + sc.cluster.standby
    [overall] = [e for e in res.report.migration_episodes if e["source"] == "all"]
    msgs = overall["coordinator_messages"]
    # the same episode with a tenth of the flows must cost the coordinator the same
    small = replace(sc, traffic=replace(sc.traffic, flows=1000))
    [small_ep] = [e for e in run_scenario(small).report.migration_episodes if e["source"] == "all"]
    ok = msgs <= 4 * n_rt and small_ep["coordinator_messages"] == msgs
    verdict(9, ok, f"{msgs} coordinator messages for 10k flows, {small_ep['coordinator_messages']} for 1k, bound 4 x {n_rt} = {4 * n_rt}")


def test_criterion_10_benchmark():
    sc = load_scenario(SCENARIOS / "benchmark.toml")
    one = run_scenario(sc).report
    two_sc = replace(sc, cluster=replace(sc.cluster, runtimes=2))
    two = run_scenario(two_sc).report
    pps1 = sum(one.per_runtime_pps.values())
    pps2 = sum(two.per_runtime_pps.values())
    ratio = pps2 / pps1 if pps1 else 0.0
    core1 = sum(one.extra["per_core_pps"].values())
    floor_ok = pps1 >= 100_000
    trend_ok = ratio >= 1.8
    verdict(
        10, floor_ok and trend_ok,
        f"1 runtime {pps1:,.0f} pps ({'>=' if floor_ok else '<'} 100k floor; {core1:,.0f} per core-second); "
        f"2 runtimes {pps2:,.0f} pps = {ratio:.2f}x ({'>=' if trend_ok else '<'} 1.8x) on {os.cpu_count()} core(s)",
    )


if __name__ == "__main__":
    import tempfile

    failed = 0
    for name, fn in sorted(globals().items()):
        if not name.startswith("test_criterion_"):
            continue
        try:
            fn(Path(tempfile.mkdtemp())) if "tmp_path" in fn.__code__.co_varnames else fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
